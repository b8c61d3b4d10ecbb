"""
Adversarial scenarios against a live cluster.

Every scenario runs against its own freshly built cluster and reports the
outcome it observed. The harness then applies two overrides: any detector
violation, or any defence that failed to refuse an attack or corrupted job
data without an error, turns the outcome into ``LEAK``.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Callable

from .attestation import RejectReason
from .crypto import Key256, SecureChannel
from .errors import (
    AccessDenied,
    AlreadyAllocated,
    AttestationFailed,
    FabricError,
    NoResponse,
    NoRoute,
    TamperProof,
    UnregisteredRegion,
)
from .fabric import Message, MsgKind, PrincipalId, node_id, sc_id
from .manifest import ManifestBuilder
from .topology import Cluster, build_cluster, default_topology, lifecycle_problems


class Outcome(enum.Enum):
    BLOCKED = "Blocked"
    DETECTED = "Detected"
    HARMLESS = "Harmless"
    LEAK = "LEAK"
    COMPLETED = "Completed"


CPU = ("CPU", 2, "256M", ("no-HT",))
AI = ("AI_Accelerator", 20, "16G", ("memIsolation", "cachePartitioned"))
SSD = ("SSD", 1, "64M", ("memIsolation",))
GPU = ("GPU", 8, "32M", (), "NonTEE")


@dataclass
class AttackReport:
    name: str
    expected: Outcome
    outcome: Outcome
    notes: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.outcome is self.expected

    def line(self) -> str:
        status = "ok" if self.ok else "MISMATCH"
        return f"{self.name}: {self.outcome.value} (expected {self.expected.value}) {status}"

    def to_doc(self) -> dict:
        return {
            "name": self.name,
            "expected": self.expected.value,
            "outcome": self.outcome.value,
            "ok": self.ok,
            "notes": list(self.notes),
            "failures": list(self.failures),
            "violations": list(self.violations),
        }


class Ctx:
    """Helpers shared by the scenarios; collects notes and failed defences."""

    def __init__(self, cluster: Cluster):
        self.c = cluster
        self.w = cluster.world
        self.mp = cluster.mp
        self.notes: list[str] = []
        self.failures: list[str] = []

    def manifest(self, *resources):
        b = ManifestBuilder()
        for r in resources:
            rtype, cores, mem, policies, *kind = r
            b.add(rtype, cores, mem, list(policies), kind=kind[0] if kind else "FDU")
        return self.c.sign(b.build())

    def tenant(self, i: int):
        return self.c.tenants[i]

    def deploy(self, i: int, *resources, strategy: str = "honest", **params):
        return self.mp.deploy(self.tenant(i), self.manifest(*resources), strategy=strategy, **params)

    def roundtrip(self, session, target, n: int = 256, op: str = "echo", **extra) -> bool:
        data = self.w.taint.generate(session.job, n)
        tenant = self.w.get(session.tenant)
        try:
            got = tenant.exchange(session, target, data, op, **extra)
        except FabricError as exc:
            self.failures.append(f"{session.job} {op} via {target} failed: {exc.code}")
            return False
        if got != data:
            self.failures.append(f"{session.job} {op} via {target} returned altered data")
            return False
        return True

    def refused(self, what: str, fn: Callable, *expect) -> bool:
        """``fn`` must raise one of ``expect`` (any FabricError when empty)."""
        expect = expect or (FabricError,)
        try:
            fn()
        except expect as exc:
            self.notes.append(f"{what}: {exc.code}")
            return True
        except FabricError as exc:
            self.failures.append(f"{what}: unexpected {exc.code}")
            return False
        self.failures.append(f"{what}: not refused")
        return False

    def rejected(self, what: str, fn: Callable, *codes) -> bool:
        """``fn`` sends messages; at least one recipient must reject them."""
        before = len(self.w.rejections)
        try:
            fn()
            self.w.run_until_quiescent()
        except FabricError as exc:
            self.notes.append(f"{what}: {exc.code} at sender")
            return True
        got = self.w.rejection_codes(before)
        if not got or (codes and not set(got) & set(codes)):
            self.failures.append(f"{what}: recipient accepted it ({got})")
            return False
        self.notes.append(f"{what}: {','.join(sorted(set(got)))}")
        return True

    def check(self, what: str, cond: bool) -> bool:
        if not cond:
            self.failures.append(what)
        return cond

    def inject(self, src, dst, kind, payload, **meta) -> None:
        self.w.send(Message(src, dst, kind, payload, frozenset(), meta), injected=True)

    def forged_key(self) -> Key256:
        return Key256(self.w.random_bytes(32))

    def node(self, pid: PrincipalId):
        return self.c.node_of(pid)


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


def double_allocate(ctx: Ctx) -> Outcome:
    """The MP places a second job on resources already owned by a running job."""
    v = ctx.deploy(0, CPU, AI, GPU)
    ctx.roundtrip(v, v.fdus[1])
    m = ctx.manifest(CPU, AI, GPU)
    owned = [v.fdus[0], v.fdus[1], v.nodes[0]]
    ok = True
    for i, pid in enumerate(owned):
        ok &= ctx.refused(
            f"double allocation of {pid}",
            lambda i=i, pid=pid: ctx.mp.deploy(ctx.tenant(1), m, strategy="pin", pin={i: pid}),
            AlreadyAllocated,
        )
    attacker_jobs = set(ctx.tenant(1).sessions)
    for node in ctx.c.tee_nodes.values():
        for e in node.fmt:
            ctx.check(f"{e.fdu} left locked by an aborted placement", e.pending not in attacker_jobs)
    for pid in owned:
        ctx.roundtrip(v, pid)
    return Outcome.BLOCKED if ok else Outcome.LEAK


def revoked_firmware(ctx: Ctx) -> Outcome:
    """The MP places a job on a node with revoked or never-published firmware."""
    reasons = []
    jobs = []
    for pid in (PrincipalId.parse("fdu:3.0"), PrincipalId.parse("fdu:4.0")):
        try:
            s = ctx.deploy(0, CPU, AI, strategy="pin", pin={0: pid})
            jobs.append(s.job)
            ctx.failures.append(f"job accepted on {pid}")
        except AttestationFailed as exc:
            reasons.append(exc.reason)
            ctx.notes.append(f"{pid}: {exc.reason.value}")
    jobs += list(ctx.tenant(0).sessions)
    keys = [ev for ev in ctx.w.trace.events("key_release") if ev.fields["job"] in jobs]
    ctx.check("keys released to a rejected placement", not keys)
    for node in ctx.c.tee_nodes.values():
        for e in node.fmt:
            ctx.check(f"{e.fdu} still locked after rejection", e.free)
    expected = [RejectReason.REVOKED, RejectReason.BAD_MEASUREMENT]
    return Outcome.DETECTED if reasons == expected else Outcome.LEAK


def undersized_placement(ctx: Ctx) -> Outcome:
    """The MP hands out FDUs smaller than the manifest asks for."""
    try:
        ctx.deploy(0, CPU, AI, strategy="wrong_size")
    except AttestationFailed as exc:
        ctx.notes.append(f"wrong-size placement: {exc}")
        ctx.check("no key released", not ctx.w.trace.events("key_release"))
        return Outcome.DETECTED if exc.reason is RejectReason.POLICY_UNSATISFIED else Outcome.LEAK
    ctx.failures.append("undersized placement accepted")
    return Outcome.LEAK


def malicious_reconfig(ctx: Ctx) -> Outcome:
    """The MP implants a mirroring configuration in an idle guarded node before placement."""
    target = node_id(11)
    node = ctx.node(target)
    ctx.mp.push_config(target, {"mirror_to": str(ctx.mp.pid), "firmware": "implant-7"})
    ctx.check("config push to an idle node should take effect", bool(node.config))
    s = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: target})
    ctx.check("node not restored to factory state on bind", node.config == {} and node.firmware_digest == node.factory_digest)
    ctx.roundtrip(s, target)
    ctx.rejected("config push to a bound node", lambda: ctx.mp.push_config(target, {"mirror_to": str(ctx.mp.pid)}), "AccessDenied")
    ctx.roundtrip(s, target)
    ctx.check("implant ran during the job", node.mirror_attempts == 0)
    ctx.tenant(0).terminate(s)
    ctx.check("lifecycle", not lifecycle_problems(ctx.c, s.job))
    return Outcome.HARMLESS


def reconfig_without_reset(ctx: Ctx) -> Outcome:
    """Control: with reset-on-bind disabled the implant shows up in node evidence."""
    target = node_id(11)
    ctx.c.scs[sc_id(0)].reset_on_bind = False
    ctx.mp.push_config(target, {"mirror_to": str(ctx.mp.pid), "firmware": "implant-7"})
    try:
        ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: target})
    except AttestationFailed as exc:
        ctx.notes.append(f"implanted node: {exc.reason.value}")
        return Outcome.DETECTED if exc.reason is RejectReason.BAD_MEASUREMENT else Outcome.LEAK
    ctx.failures.append("implanted node accepted")
    return Outcome.LEAK


def stale_report(ctx: Ctx) -> Outcome:
    """The MP answers a fresh challenge with evidence recorded for an earlier job."""
    t = ctx.tenant(0)
    first = ctx.deploy(0, CPU, AI, GPU)
    old = first.evidence
    t.terminate(first)
    detected = 0
    for swap in ("fdu", "sc"):
        m = ctx.manifest(CPU, AI, GPU)
        s = t.submit_job(m)
        placement = ctx.mp.allocate(m, s.job, "pin", pin=dict(old.placement))
        ev = ctx.mp.collect_evidence(s, placement)
        if swap == "fdu":
            ev.fdu_reports[old.placement[1]] = old.fdu_reports[old.placement[1]]
        else:
            ev.sc_reports = dict(old.sc_reports)
            ev.node_evidence = dict(old.node_evidence)
        try:
            t.verify_and_provision(s, ev)
            ctx.failures.append(f"stale {swap} evidence accepted")
        except AttestationFailed as exc:
            ctx.notes.append(f"stale {swap} evidence: {exc.reason.value}")
            detected += exc.reason is RejectReason.STALE
    for node in ctx.c.tee_nodes.values():
        for e in node.fmt:
            ctx.check(f"{e.fdu} still locked", e.free)
    return Outcome.DETECTED if detected == 2 else Outcome.LEAK


def cotenant_access(ctx: Ctx) -> Outcome:
    """A co-located tenant drives MMIO, DMA and relays at the victim's FDU."""
    v = ctx.deploy(0, CPU, AI)
    a = ctx.deploy(1, CPU, AI)
    victim_ai = v.fdus[1]
    ai_node = ctx.node(victim_ai)
    cpu_node = ctx.node(a.fdus[0])
    ctx.roundtrip(v, victim_ai)
    ve = ai_node.entry(victim_ai)
    before = ai_node.memory.read(ve.base, 4096)
    label = ctx.w.labels.label(v.job)
    drv = cpu_node.drivers[a.fdus[0]]
    drv.map_mmio(0, 4096, victim_ai)
    ctx.rejected("MMIO store into the victim FDU", lambda: drv.driver_mmio(16, "store", 0xDEAD), "AuthFailure")
    ctx.refused("MMIO load from the victim FDU", lambda: drv.driver_mmio(0, "load"), NoResponse)
    drv.write_private(0, ctx.w.taint.generate(a.job, 64), ctx.w.labels.label(a.job))
    drv.register_dma("poke", 0, 64, "out", victim_ai)
    ctx.rejected("DMA into the victim FDU", lambda: drv.driver_dma("poke", "out"), "AuthFailure")
    ctx.rejected(
        "plaintext DMA injection",
        lambda: ctx.inject(a.tenant, victim_ai, MsgKind.DMA, b"overwrite", op="dma_write"),
        "AccessDenied",
    )
    ctx.refused(
        "relay through the attacker's own enclave",
        lambda: ctx.tenant(1).exchange(a, a.fdus[0], b"x" * 32, op="forward", to=str(victim_ai)),
        NoResponse,
    )
    ctx.check("ACU let a foreign FDU reach victim memory", not ai_node.acu_check(a.fdus[1], ve.base))
    ctx.refused("host write into victim range", lambda: ai_node.host_write(ve.base, b"x"), AccessDenied)
    after = ai_node.memory.read(ve.base, 4096)
    ctx.check("victim memory changed", before == after)
    ctx.check("foreign labels in victim memory", ai_node.memory.foreign_labels(ve.base, 4096, label) == 0)
    ctx.roundtrip(v, victim_ai)
    return Outcome.HARMLESS


def fake_interrupt(ctx: Ctx) -> Outcome:
    """The MP raises an unsolicited interrupt so the driver DMAs enclave data to the MP."""
    v = ctx.deploy(0, CPU, AI)
    cpu = ctx.node(v.fdus[0])
    drv = cpu.drivers[v.fdus[0]]
    drv.write_private(0, ctx.w.taint.generate(v.job, 256), ctx.w.labels.label(v.job))
    drv.register_dma("out0", 0, 256, "out", v.fdus[1])
    seen = len(ctx.mp.observed)
    ctx.mp.fake_interrupt(v.fdus[0], "out0", target=ctx.mp.pid)
    ctx.check("interrupt reached the MP with nothing", len(ctx.mp.observed) > seen)
    ctx.rejected("interrupt for an unregistered region", lambda: ctx.mp.fake_interrupt(v.fdus[0], "nope"), UnregisteredRegion.code)
    host = cpu.host.read(drv.staging_base, 4096)
    ctx.w.detector.check_observed(host, f"{cpu.pid} host staging")
    for blob in ctx.mp.observed:
        ctx.w.detector.check_observed(blob, str(ctx.mp.pid))
    ctx.roundtrip(v, v.fdus[1])
    return Outcome.HARMLESS


def staging_cross_job(ctx: Ctx) -> Outcome:
    """A guarded node tries to read or copy another job's SC staging buffer."""
    sc = ctx.c.scs[sc_id(0)]
    n10, n11 = node_id(10), node_id(11)
    a = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: n10})
    ctx.deploy(1, CPU, GPU, strategy="pin", pin={1: n11})
    ctx.roundtrip(a, n10)
    off, _ = sc.ert[a.job].buffer_ranges[n10]
    attacker = ctx.node(n11)
    ok = ctx.refused("direct staging read", lambda: sc.staging_read(n11, off, 64), AccessDenied)
    ok &= ctx.rejected("staging read request", lambda: attacker.send(sc.pid, b"", op="staging_read", offset=off, len=64), "AccessDenied")
    ok &= ctx.rejected(
        "cross-job local copy",
        lambda: attacker.send(sc.pid, b"", op="local", to=str(n10), src_addr=0, dst_addr=0, len=64),
        "AccessDenied",
    )
    ok &= ctx.refused("cross-job shared region", lambda: sc.setup_shared_region(n11, n10, (0, 64)), AccessDenied)
    ok &= ctx.refused("zero-copy read without grant", lambda: sc.direct_access(n11, n10, 0, 64), AccessDenied)
    ok &= ctx.rejected("egress to another job's FDU", lambda: attacker.send(sc.pid, b"zz", op="out", to=str(a.fdus[0])), "AccessDenied")
    ctx.roundtrip(a, n10)
    return Outcome.BLOCKED if ok else Outcome.LEAK


def bypass_sc(ctx: Ctx) -> Outcome:
    """A guarded node tries to talk past its SC, and the MP tries to tap the shielded link."""
    n10 = node_id(10)
    s = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: n10})
    node = ctx.node(n10)
    ok = True
    for dst in (node_id(11), node_id(20), s.tenant, s.fdus[0], ctx.mp.pid, sc_id(1)):
        ok &= ctx.refused(f"direct send to {dst}", lambda dst=dst: node.send(dst, b"hello"), NoRoute)
    ok &= ctx.refused("tap on SC-node link", lambda: ctx.w.tap(sc_id(0), n10), TamperProof)
    ok &= ctx.refused("injection on SC-node link", lambda: ctx.inject(sc_id(0), n10, MsgKind.DMA, b"x", op="store"), TamperProof)
    ctx.roundtrip(s, n10)
    return Outcome.BLOCKED if ok else Outcome.LEAK


def hypervisor(ctx: Ctx) -> Outcome:
    """Privileged host software reads, pages out, remaps or overwrites enclave memory."""
    v = ctx.deploy(0, CPU, AI)
    ctx.roundtrip(v, v.fdus[0])
    ok = True
    for fdu in v.fdus:
        node = ctx.node(fdu)
        e = node.entry(fdu)
        ok &= ctx.refused(f"read {fdu}", lambda: node.hypervisor_read(e.base, 64), AccessDenied)
        ok &= ctx.refused(f"page out {fdu}", lambda: node.hypervisor_page_out(e.base, 4096), AccessDenied)
        ok &= ctx.refused(f"remap {fdu}", lambda: node.hypervisor_remap(fdu, e.base + 4096), AccessDenied)
        ok &= ctx.refused(f"overwrite {fdu}", lambda: node.host_write(e.base, b"\x90" * 16), AccessDenied)
    for fdu in v.fdus:
        ctx.roundtrip(v, fdu)
    return Outcome.BLOCKED if ok else Outcome.LEAK


def forged_termination(ctx: Ctx) -> Outcome:
    """The MP forges or replays termination and release commands for a running job."""
    v = ctx.deploy(0, CPU, AI, GPU)
    sc = v.scs[0]
    tenant = str(v.tenant)
    fake = ctx.forged_key()
    tap = ctx.w.tap(v.tenant, v.fdus[1])
    ctx.roundtrip(v, v.fdus[1])

    def forged(dst, op):
        env = SecureChannel(fake, v.job, tenant, str(dst), ctx.w.backend).seal(b"[]", op=op)
        ctx.inject(v.tenant, dst, MsgKind.CONTROL, env, op=op)

    ok = ctx.rejected("forged SC terminate", lambda: forged(sc, "terminate"), "AuthFailure", "ReplayDetected")
    ok &= ctx.rejected("forged FDU release", lambda: forged(v.fdus[1], "release"), "AuthFailure", "ReplayDetected")
    ok &= ctx.rejected("forged job terminate", lambda: forged(v.fdus[0], "terminate"), "AuthFailure", "ReplayDetected")
    ok &= ctx.rejected("plaintext terminate", lambda: ctx.inject(ctx.mp.pid, sc, MsgKind.CONTROL, b"terminate", op="terminate"), "AccessDenied")
    ok &= ctx.rejected("replayed request", lambda: tap.replay(-1), "ReplayDetected")
    ctx.check("ERT entry lost", v.job in ctx.w.get(sc).ert)
    for fdu in v.fdus:
        ctx.check(f"{fdu} lost its owner", ctx.node(fdu).entry(fdu).owner == v.job)
    for pid in v.members:
        ctx.roundtrip(v, pid)
    return Outcome.BLOCKED if ok else Outcome.LEAK


def _tap_everything(ctx: Ctx) -> list:
    return [ctx.w.tap(*link.endpoints) for link in ctx.w.open_links()]


def open_link_taps(ctx: Ctx) -> Outcome:
    """Taps on every Open link while three jobs run across two racks and two SCs."""
    taps = _tap_everything(ctx)
    j1 = ctx.deploy(0, CPU, AI)
    j2 = ctx.deploy(1, CPU, GPU, GPU, strategy="pin", pin={1: node_id(10), 2: node_id(20)})
    j3 = ctx.deploy(2, CPU, SSD, GPU, strategy="pin", pin={2: node_id(21)})
    for s in (j1, j2, j3):
        for pid in s.members:
            ctx.roundtrip(s, pid)
    ctx.roundtrip(j1, j1.fdus[0], op="forward", to=str(j1.fdus[1]), then="echo")
    ctx.roundtrip(j2, node_id(10), op="relay", next=str(node_id(20)))
    ctx.roundtrip(j3, j3.fdus[0], op="forward", to=str(node_id(21)), then="echo")
    block = ctx.w.taint.generate(j3.job, 4096)
    t3 = ctx.tenant(2)
    t3.exchange(j3, j3.fdus[1], block, "ssd", cmd="write", lba=0, count=1)
    ctx.check("SSD block read back", t3.exchange(j3, j3.fdus[1], b"", "ssd", cmd="read", lba=0, count=1) == block)
    for s in (j1, j2, j3):
        ctx.tenant(s.tenant.index).terminate(s)
        ctx.check(f"{s.job} lifecycle", not lifecycle_problems(ctx.c, s.job))
    seen = 0
    for t in taps:
        for m in t.observed:
            ctx.w.detector.check_observed(m.payload_bytes(), str(t.link))
            seen += 1
    ctx.notes.append(f"{len(taps)} taps saw {seen} messages")
    ctx.check("taps saw nothing", seen > 0)
    return Outcome.HARMLESS


def overlapping_dma(ctx: Ctx) -> Outcome:
    """Two jobs' DMA staging is mapped onto the same host pages by the MP."""
    a = ctx.deploy(0, CPU, AI)
    b = ctx.deploy(1, CPU, AI)
    cpu = ctx.node(a.fdus[0])
    da, db = cpu.drivers[a.fdus[0]], cpu.drivers[b.fdus[0]]
    db.staging_base = da.staging_base
    secrets = {}
    envs = {}
    for s, d in ((a, da), (b, db)):
        secrets[s.job] = ctx.w.taint.generate(s.job, 256)
        d.write_private(0, secrets[s.job], ctx.w.labels.label(s.job))
        d.register_dma("o", 0, 256, "out", s.fdus[1])
        envs[s.job] = d.driver_dma("o", "out")
        ctx.w.run_until_quiescent()
        ctx.w.detector.check_observed(cpu.host.read(da.staging_base, 4096), f"{cpu.pid} shared staging")
    ctx.rejected(
        "cross-job envelope injection",
        lambda: ctx.inject(a.fdus[0], b.fdus[1], MsgKind.DMA, envs[a.job], op="dma"),
        "AuthFailure",
    )
    for s in (a, b):
        node = ctx.node(s.fdus[1])
        e = node.entry(s.fdus[1])
        ctx.check(f"{s.job} device data corrupted", node.memory.read(e.base, 256) == secrets[s.job])
    return Outcome.HARMLESS


def honest_baseline(ctx: Ctx) -> Outcome:
    """No attack: deploy, exchange over every path, terminate."""
    s = ctx.deploy(0, CPU, AI, GPU)
    for pid in s.members:
        ctx.roundtrip(s, pid)
    ctx.roundtrip(s, s.fdus[0], op="forward", to=str(s.fdus[1]), then="echo")
    ctx.tenant(0).terminate(s)
    problems = lifecycle_problems(ctx.c, s.job)
    ctx.check(f"lifecycle: {problems}", not problems)
    return Outcome.COMPLETED


SCENARIOS: dict[str, tuple[Callable[[Ctx], Outcome], Outcome]] = {
    "double_allocate": (double_allocate, Outcome.BLOCKED),
    "revoked_firmware": (revoked_firmware, Outcome.DETECTED),
    "undersized_placement": (undersized_placement, Outcome.DETECTED),
    "malicious_reconfig": (malicious_reconfig, Outcome.HARMLESS),
    "reconfig_without_reset": (reconfig_without_reset, Outcome.DETECTED),
    "stale_report": (stale_report, Outcome.DETECTED),
    "cotenant_access": (cotenant_access, Outcome.HARMLESS),
    "fake_interrupt": (fake_interrupt, Outcome.HARMLESS),
    "staging_cross_job": (staging_cross_job, Outcome.BLOCKED),
    "bypass_sc": (bypass_sc, Outcome.BLOCKED),
    "hypervisor": (hypervisor, Outcome.BLOCKED),
    "forged_termination": (forged_termination, Outcome.BLOCKED),
    "open_link_taps": (open_link_taps, Outcome.HARMLESS),
    "overlapping_dma": (overlapping_dma, Outcome.HARMLESS),
    "honest_baseline": (honest_baseline, Outcome.COMPLETED),
}


def run_attack(name: str, seed: int = 0, topology: dict | None = None, backend: str = "test") -> AttackReport:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}")
    fn, expected = SCENARIOS[name]
    t0 = time.perf_counter()
    cluster = build_cluster(topology or default_topology(), seed, backend)
    ctx = Ctx(cluster)
    try:
        outcome = fn(ctx)
    except FabricError as exc:
        ctx.failures.append(f"scenario aborted: {exc.code}: {exc}")
        outcome = Outcome.LEAK
    violations = [v.as_dict() for v in cluster.world.detector.violations]
    if violations or ctx.failures:
        outcome = Outcome.LEAK
    cluster.world.record("attack_outcome", scenario=name, outcome=outcome.value, expected=expected.value)
    report = AttackReport(name, expected, outcome, ctx.notes, ctx.failures, violations, time.perf_counter() - t0)
    report.world = cluster.world
    return report


def run_all(seed: int = 0, backend: str = "test") -> list[AttackReport]:
    return [run_attack(name, seed, backend=backend) for name in SCENARIOS]
