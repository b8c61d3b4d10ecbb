"""One test per acceptance criterion. Each prints a single pass/fail line."""

import gc
import random
import time
from pathlib import Path

import numpy as np

import oracles
from exhaustive import check_sc, check_tee_node, sc_worlds, tee_node_worlds
from tee_fabric import crypto
from tee_fabric.attacks import AI, CPU, GPU, SSD, Outcome, run_attack
from tee_fabric.attestation import AttestedDevice, PbaEvent, RejectReason, Vendor, reference_tree, verify_report
from tee_fabric.capacity import ScCapacityParams, sc_capacity, transfer_overhead
from tee_fabric.devices import BLOCK_SIZE, BlockOp, TensorJob, fio_workload
from tee_fabric.fuzz import MAX_JOBS, MAX_NODES, fuzz, fuzz_world, random_topology
from tee_fabric.scenario import load_scenario, run_scenario
from tee_fabric.taint import PAGE_SIZE
from tee_fabric.workloads import baseline_ai, baseline_ssd, protected_ai, protected_ssd, run_block_workload

SCEN = Path(__file__).resolve().parent.parent / "scenarios"

ATTACKS = {
    "a": ("double_allocate", Outcome.BLOCKED),
    "b": ("revoked_firmware", Outcome.DETECTED),
    "c": ("undersized_placement", Outcome.DETECTED),
    "d": ("malicious_reconfig", Outcome.HARMLESS),
    "e": ("stale_report", Outcome.DETECTED),
    "f": ("cotenant_access", Outcome.HARMLESS),
    "g": ("fake_interrupt", Outcome.HARMLESS),
    "h": ("staging_cross_job", Outcome.BLOCKED),
    "i": ("bypass_sc", Outcome.BLOCKED),
    "j": ("hypervisor", Outcome.BLOCKED),
    "k": ("forged_termination", Outcome.BLOCKED),
    "l": ("open_link_taps", Outcome.HARMLESS),
}


def test_criterion_1_attack_suite(verdict):
    bad, slowest = [], 0.0
    for letter, (name, want) in ATTACKS.items():
        r = run_attack(name)
        slowest = max(slowest, r.seconds)
        if r.outcome is not want or r.violations or r.failures or r.seconds >= 5.0:
            bad.append(f"({letter}) {name}: {r.outcome.value} in {r.seconds:.2f}s {r.failures[:2]}")
        if letter == "l":
            w = r.world
            scs = set(w.attached_to.values())
            jobs = len(w.trace.events("job_running"))
            if len(scs) < 2 or jobs != 3:
                bad.append(f"(l) ran {jobs} jobs over {len(scs)} SCs")
    verdict(1, not bad, f"12 scenarios, slowest {slowest:.2f}s (< 5 s), no LEAK" if not bad else "; ".join(bad))


def test_criterion_2_fuzz(verdict):
    worlds = 1000
    t0 = time.perf_counter()
    report = fuzz(worlds, seed=0)
    elapsed = time.perf_counter() - t0
    # world bounds: every topology the run drew, and a sample of full replays for job counts
    sizes = []
    for seed in range(worlds):
        doc = random_topology(random.Random(seed))
        sizes.append(sum(len(r.get("tee_nodes", [])) + sum(len(s["nodes"]) for s in r.get("scs", [])) for r in doc["racks"]))
    jobs = max(fuzz_world(seed).jobs for seed in range(0, worlds, 97))
    ok = report["worlds"] >= 1000 and not report["leaks"] and elapsed < 60.0 and max(sizes) <= MAX_NODES and jobs <= MAX_JOBS
    verdict(
        2,
        ok,
        f"{report['worlds']} worlds, {len(report['leaks'])} leaks, {elapsed:.1f}s (< 60 s), "
        f"<= {max(sizes)} nodes, <= {jobs} jobs per world",
    )


def test_criterion_3_oracle_equivalence(verdict):
    total, mismatches, worlds = 0, [], 0
    for _, node in tee_node_worlds(4):
        n, bad = check_tee_node(node)
        total += n
        mismatches += bad
        worlds += 1
    for _, sc in sc_worlds(4):
        n, bad = check_sc(sc)
        total += n
        mismatches += bad
        worlds += 1
    verdict(3, not mismatches and total > 0, f"{worlds} worlds, {total} decisions, {len(mismatches)} mismatches {mismatches[:3]}")


def test_criterion_4_capacity(verdict):
    one = sc_capacity(ScCapacityParams.standard(cores=1))
    many = sc_capacity(ScCapacityParams.standard(cores=48))
    overhead = transfer_overhead(4096, 4096, 1.47e-6)["added_latency"]
    checks = {
        "streams_per_core == 19": one["streams_per_core"] == 19,
        "total_streams(48) == 912": many["total_streams"] == 912,
        "jobs_per_sec_per_core == 6.97 +- 0.01": abs(one["jobs_per_sec_per_core"] - 6.97) <= 0.01,
        "total_jobs_per_sec(48) == 334": many["total_jobs_per_sec"] == 334,
        "transfer_overhead(4096) == 1.47us": overhead == 1.47e-6,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(
        4,
        not failed,
        f"19 / 912 / {one['jobs_per_sec_per_core']} / {many['total_jobs_per_sec']} / {overhead:.2e}s" + (f" failed: {failed}" if failed else ""),
    )


def _map_oracle(model: dict, cmd) -> bytes:
    if cmd.op is BlockOp.WRITE:
        for i in range(cmd.block_count):
            model[cmd.lba + i] = cmd.data[i * BLOCK_SIZE : (i + 1) * BLOCK_SIZE]
        return b""
    if cmd.op is BlockOp.TRIM:
        for i in range(cmd.block_count):
            model.pop(cmd.lba + i, None)
        return b""
    if cmd.op is BlockOp.READ:
        return b"".join(model.get(cmd.lba + i, bytes(BLOCK_SIZE)) for i in range(cmd.block_count))
    return b""


def test_criterion_5_transparency(ctx, verdict):
    s = ctx.deploy(0, CPU, SSD, AI)
    t = ctx.tenant(0)
    ssd_fdu = next(f for f in s.fdus if ctx.node(f).device_type == "SSD")
    ai_fdu = next(f for f in s.fdus if ctx.node(f).device_type == "AI_Accelerator")
    blocks = ctx.node(ssd_fdu).entry(ssd_fdu).length // BLOCK_SIZE
    protected, baseline, model = protected_ssd(t, s, ssd_fdu), baseline_ssd(blocks), {}
    rng = np.random.default_rng(5)
    total, problems = 0, []
    for pattern in ("seq_write", "seq_read", "rand_write", "rand_read", "mixed"):
        cmds = fio_workload(pattern, 16 << 20, blocks, rng)
        total += sum(c.block_count for c in cmds) * BLOCK_SIZE
        on = run_block_workload(protected, cmds)
        off = run_block_workload(baseline, cmds)
        want = [_map_oracle(model, c) for c in cmds]
        if on != off:
            problems.append(f"{pattern}: protected != unprotected")
        if on != want:
            problems.append(f"{pattern}: protected != map oracle")
    ai_ok = 0
    for seed in range(4):
        r = np.random.default_rng(seed)
        dims = [int(d) for d in r.integers(2, 12, size=4)]
        layers = [r.standard_normal((dims[i + 1], dims[i])) for i in range(3)]
        job = TensorJob(layers, r.standard_normal(dims[0]))
        on, off = protected_ai(t, s, ai_fdu, job), baseline_ai(job)
        ref = np.array(oracles.chain_ref_apply(layers, job.input))
        if on.tobytes() != off.tobytes() or not np.allclose(on, ref, rtol=1e-12, atol=1e-12):
            problems.append(f"AI seed {seed} differs")
        else:
            ai_ok += 1
    t.terminate(s)
    clean = ctx.w.detector.clean
    verdict(
        5,
        not problems and clean and total >= 5 * (16 << 20),
        f"5 SSD patterns x 16 MiB byte-identical and oracle-equal, {ai_ok}/4 AI chains identical" + (f" {problems}" if problems else ""),
    )


def _memories(cluster):
    for node in cluster.tee_nodes.values():
        yield node.memory
        yield node.host
    for sc in cluster.scs.values():
        yield sc.staging
    for node in cluster.guarded.values():
        yield node.memory


def _raw_pages(mem):
    # every materialized page; absent pages are zero by construction
    for pno, (data, labels) in sorted(mem._pages.items()):
        yield pno * PAGE_SIZE, data, labels


def _scan_job(cluster, job: str, label: int, released: list) -> list:
    w = cluster.world
    problems = []
    for node in cluster.tee_nodes.values():
        for e in node.fmt:
            if e.owner == job or e.pending == job:
                problems.append(f"{e.fdu} still held by {job}")
    for sc in cluster.scs.values():
        if job in sc.ert or job in sc.bindings or any(g.job == job for g in sc.shared_regions):
            problems.append(f"{sc.pid} still routes {job}")
    for mem in _memories(cluster):
        for base, data, labels in _raw_pages(mem):
            if np.any(labels == label):
                problems.append(f"{mem.name} page {base:#x} carries {job} labels")
            if job in w.taint.scan(data.tobytes()):
                problems.append(f"{mem.name} page {base:#x} holds {job} plaintext")
    for mem, lo, n in released:
        for base, data, _ in _raw_pages(mem):
            a, b = max(lo, base), min(lo + n, base + PAGE_SIZE)
            if a < b and np.count_nonzero(data[a - base : b - base]):
                problems.append(f"{mem.name} [{a:#x}, {b:#x}) not zero after release")
    gc.collect()
    live = w.keys.outstanding(job)
    if live:
        problems.append(f"{live} keys for {job} never zeroized")
    return problems


def _released_ranges(cluster, session) -> list:
    out = []
    for f in session.fdus:
        node = cluster.node_of(f)
        e = node.entry(f)
        out.append((node.memory, e.base, e.length))
    for n in session.nodes:
        node = cluster.guarded[n]
        out.append((node.memory, 0, node.memory.size))
        sc = cluster.scs[node.sc]
        off, length = sc.ert[session.job].buffer_ranges[n]
        out.append((sc.staging, off, length))
    return out


def test_criterion_6_lifecycle(ctx, verdict):
    a = ctx.deploy(0, CPU, AI, SSD, GPU)
    b = ctx.deploy(1, CPU, GPU)
    for s in (a, b):
        for pid in s.members:
            ctx.roundtrip(s, pid, n=8192)
    ctx.roundtrip(a, a.primary, op="forward", to=str(a.nodes[0]), then="echo")
    released_a = _released_ranges(ctx.c, a)
    released_b = _released_ranges(ctx.c, b)
    ctx.tenant(0).terminate(a)
    problems = _scan_job(ctx.c, a.job, ctx.w.labels.label(a.job), released_a)
    still_b = all(ctx.node(f).entry(f).owner == b.job for f in b.fdus) and ctx.roundtrip(b, b.nodes[0])
    ctx.tenant(1).terminate(b)
    problems += _scan_job(ctx.c, b.job, ctx.w.labels.label(b.job), released_b)
    busy = [str(e.fdu) for node in ctx.c.tee_nodes.values() for e in node.fmt if not e.free]
    ert = [str(sc.pid) for sc in ctx.c.scs.values() if sc.ert]
    if busy:
        problems.append(f"FMT entries not Free: {busy}")
    if ert:
        problems.append(f"ERT not empty on {ert}")
    gc.collect()
    if ctx.w.keys.outstanding():
        problems.append(f"{ctx.w.keys.outstanding()} keys never zeroized")
    checked = sum(len(node.fmt) for node in ctx.c.tee_nodes.values())
    verdict(
        6,
        not problems and still_b and not ctx.failures and ctx.w.detector.clean,
        f"{checked} FMT entries Free, ERTs empty, released memory zero, 0 live keys" if not problems else "; ".join(problems[:4]),
    )


def test_criterion_7_determinism(verdict):
    mismatched, sizes = [], []
    for name in ("honest_three_jobs.json", "attack_open_link_taps.json", "attack_cotenant_access.json"):
        cfg = load_scenario(SCEN / name)
        one = run_scenario(cfg).world.trace_jsonl().encode()
        two = run_scenario(cfg).world.trace_jsonl().encode()
        sizes.append(len(one))
        if one != two or not one:
            mismatched.append(name)
    one = run_attack("stale_report", seed=4).world.trace_jsonl().encode()
    two = run_attack("stale_report", seed=4).world.trace_jsonl().encode()
    if one != two:
        mismatched.append("stale_report")
    verdict(7, not mismatched, f"4 runs byte-identical ({sum(sizes) + len(one)} trace bytes)" if not mismatched else f"differ: {mismatched}")


def test_criterion_8_pba(verdict):
    tree = reference_tree()
    paths = tree.paths()
    leaves = {tree.leaf(p) for p in paths}
    oracle = {oracles.chain_ref([e.outcome_value for e in tree.events_for(p)]) for p in paths}
    vendor = Vendor("Vendor1", crypto.generate_keypair(crypto.hash_bytes(b"acceptance vendor"), "ed25519"))
    vendor.publish_tree("CPU", tree)
    fw = crypto.hash_bytes(b"acceptance firmware")
    vendor.publish_firmware("CPU", "1.0", fw)
    challenge = crypto.hash_bytes(b"acceptance challenge")

    def boot(i, path, events):
        dev = AttestedDevice(
            "CPU", crypto.hash_bytes(b"dev%d" % i)[:16], vendor,
            crypto.generate_keypair(crypto.hash_bytes(b"rot%d" % i), "ed25519"), "1.0", fw,
            tree=tree, declared_path=path,
        )
        dev.measured_boot(events)
        return dev, verify_report(dev.generate_report(challenge), None, vendor.whitelist, vendor.revocation, challenge)

    problems, mutations = [], 0
    for i, path in enumerate(paths):
        _, honest = boot(i, path, tree.events_for(path))
        if not honest.accepted:
            problems.append(f"{path} rejected honestly: {honest.reason}")
        for level, (_, outcomes) in enumerate(tree.levels):
            ev = tree.events_for(path)[level]
            sibling = next(o.value for o in outcomes if o.label != path[level])
            flipped = bytes([ev.outcome_value[0] ^ 1]) + ev.outcome_value[1:]
            for value in (crypto.hash_bytes(b"foreign" + ev.outcome_value), flipped, sibling):
                events = tree.events_for(path)
                events[level] = PbaEvent(ev.property_name, value)
                dev, v = boot(i, path, events)
                mutations += 1
                if dev.pcr[23] == tree.leaf(path):
                    problems.append(f"{path}@{level}: leaf unchanged")
                if v.accepted or v.reason is not RejectReason.BAD_MEASUREMENT:
                    problems.append(f"{path}@{level}: {v}")
    ok = len(leaves) == 4 and leaves == oracle and not problems
    verdict(8, ok, f"{len(leaves)} distinct leaves (oracle-equal), {mutations} single-event mutations -> BadMeasurement" + (f" {problems[:3]}" if problems else ""))
