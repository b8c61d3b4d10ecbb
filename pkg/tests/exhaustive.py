"""Exhaustive small-world enumeration for the access-control oracles."""

from __future__ import annotations

import itertools

from oracles import ert_oracle, fmt_addr_oracle, fmt_core_oracle
from tee_fabric import crypto
from tee_fabric.attestation import Vendor
from tee_fabric.crypto import Key256
from tee_fabric.errors import AccessDenied, NotAttached
from tee_fabric.fabric import World, fdu_id, node_id, sc_id
from tee_fabric.sc import NonTeeNode, SecurityController
from tee_fabric.tee_node import FduSpec, TeeNode

JOBS = ("jobA", "jobB", "jobC")
OWNER_CHOICES = (None,) + JOBS
NODE_CORES = 10
NODE_MEMORY = 64
ADDRS = range(-2, NODE_MEMORY + 2)


def _vendor(world: World) -> Vendor:
    return Vendor("Vendor1", crypto.generate_keypair(world.random_bytes(32), "ed25519"))


def _layouts(k: int) -> dict:
    contiguous = [FduSpec(2, 8, 8 * i) for i in range(k)]
    core_sets = [{0, 5}, {1, 6}, {2}, {3, 7}]
    sizes = [4, 8, 12, 4]
    gapped = [FduSpec(frozenset(core_sets[i]), sizes[i], 16 * i) for i in range(k)]
    return {"contiguous": contiguous, "gapped": gapped}


def tee_node_worlds(max_fdus: int = 4):
    """Yield (label, node) for every layout, device class and FDU count."""
    for k in range(1, max_fdus + 1):
        for layout, specs in _layouts(k).items():
            for dtype in ("CPU", "AI_Accelerator"):
                w = World(seed=k)
                node = TeeNode(
                    w, 0, dtype, NODE_CORES, NODE_MEMORY, _vendor(w),
                    crypto.generate_keypair(w.random_bytes(32), "ed25519"), "1.0", crypto.hash_bytes(b"fw"),
                )
                node.measured_boot()
                node.partition_fdus(specs)
                yield f"{dtype}/{layout}/{k}", node


def check_tee_node(node: TeeNode) -> tuple[int, list]:
    """Every owner assignment x every accessor x every address, and every core pair."""
    k = len(node.fmt)
    fdus = [e.fdu for e in node.fmt]
    strangers = [fdu_id(1, 0), fdu_id(0, k), node_id(0), sc_id(0)]
    ranges = {e.fdu: set(range(e.base, e.base + e.length)) for e in node.fmt}
    cores = {e.fdu: set(e.cores) for e in node.fmt}
    checked, mismatches = 0, []
    for owners in itertools.product(OWNER_CHOICES, repeat=k):
        for e, o in zip(node.fmt, owners):
            e.owner = o
        own = dict(zip(fdus, owners))
        for acc in fdus + strangers:
            for addr in ADDRS:
                got = bool(node.acu_check(acc, addr))
                want = fmt_addr_oracle(ranges, own, node.core_sharing, acc, addr)
                checked += 1
                if got != want:
                    mismatches.append(("acu", owners, str(acc), addr, got))
        for a in range(NODE_CORES):
            for b in range(NODE_CORES):
                got = bool(node.acu_core_check(a, b))
                want = fmt_core_oracle(cores, own, node.core_sharing, a, b)
                checked += 1
                if got != want:
                    mismatches.append(("core", owners, a, b, got))
    for e in node.fmt:
        e.owner = None
    return checked, mismatches


def sc_worlds(max_nodes: int = 4):
    for k in range(1, max_nodes + 1):
        w = World(seed=100 + k)
        v = _vendor(w)
        fw = crypto.hash_bytes(b"sc fw")

        def rot():
            return crypto.generate_keypair(w.random_bytes(32), "ed25519")

        sc = SecurityController(w, 0, v, rot(), "1.0", fw, staging_capacity=1 << 16, buffer_size=1 << 12)
        other = SecurityController(w, 1, v, rot(), "1.0", fw, staging_capacity=1 << 16, buffer_size=1 << 12)
        for i in range(k):
            sc.attach(NonTeeNode(w, 10 + i, "GPU", 1, 256))
        other.attach(NonTeeNode(w, 99, "GPU", 1, 256))
        yield f"sc/{k}", sc


def _allowed(fn) -> bool:
    try:
        return bool(fn())
    except (AccessDenied, NotAttached):
        return False


def check_sc(sc: SecurityController) -> tuple[int, list]:
    nodes = sorted(sc.nodes)
    principals = nodes + [node_id(99), fdu_id(0, 0)]
    attached = set(nodes)
    checked, mismatches = 0, []
    marker = b"\xa5\x5a\xc3\x3c"
    for assignment in itertools.product(OWNER_CHOICES, repeat=len(nodes)):
        sc.ert.clear()
        sc.staging.zero(0, sc.staging.size)
        members = {}
        for job in JOBS:
            ms = {n for n, j in zip(nodes, assignment) if j == job}
            if ms:
                members[job] = ms
                sc.install_entry(job, ms, Key256(crypto.hash_bytes(job.encode())))
        for src in principals:
            for dst in principals:
                want = ert_oracle(members, attached, src, dst)
                got = _allowed(lambda: sc.local_decision(src, dst))
                checked += 1
                if got != want:
                    mismatches.append(("decision", assignment, str(src), str(dst), got))
                if dst in sc.nodes:
                    sc.nodes[dst].memory.zero(0, 256)
                if src in sc.nodes:
                    sc.nodes[src].memory.write(0, marker)
                moved = _allowed(lambda: sc.local_transfer(src, dst, (0, 8, len(marker))) or True)
                checked += 1
                if moved != want:
                    mismatches.append(("transfer", assignment, str(src), str(dst), moved))
                elif moved and src != dst and sc.nodes[dst].memory.read(8, 4) != marker:
                    mismatches.append(("transfer-data", assignment, str(src), str(dst)))
                elif not moved and dst in sc.nodes and not sc.nodes[dst].memory.is_zero():
                    mismatches.append(("denied-but-written", assignment, str(src), str(dst)))
                for n in (src, dst):
                    if n in sc.nodes:
                        sc.nodes[n].memory.zero(0, 256)
    sc.ert.clear()
    return checked, mismatches
