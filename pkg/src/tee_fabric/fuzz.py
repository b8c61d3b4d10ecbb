"""
Randomized adversary: small random clusters, honest tenants doing real work,
and an MP that interleaves every action it has with that work.

A world is a LEAK when the detector fires, when an exchange returns data
different from what was sent without raising, or when anything the attacker
collected contains tainted bytes. Denial of service is not a leak.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field, replace

from .crypto import Envelope, Key256, SecureChannel
from .errors import FabricError, NoRoute
from .fabric import Message, MsgKind, PrincipalId, PrincipalKind
from .manifest import ManifestBuilder
from .tenant import SessionState
from .topology import Cluster, build_cluster

ACTIONS = (
    "deploy",
    "exchange",
    "exchange",
    "forward",
    "tap",
    "release_held",
    "replay",
    "reset",
    "push_config",
    "interrupt",
    "hypervisor",
    "forge",
    "staging_read",
    "direct_send",
    "double_alloc",
    "inject_plain",
    "terminate",
)
TAP_MODES = ("observe", "drop", "tamper", "duplicate", "hold")
MAX_JOBS = 3
MAX_NODES = 8


def random_topology(rng: random.Random) -> dict:
    """At most eight nodes: one CPU node, optional AI/SSD nodes, up to two SCs."""
    budget = MAX_NODES - 1
    tee = [{"id": 0, "type": "CPU", "cores": 4, "memory": "64M", "fdus": [{"cores": 2, "memory": "16M"}] * 2}]
    if rng.random() < 0.6:
        tee.append({"id": 1, "type": "AI_Accelerator", "cores": 8, "memory": "32M", "fdus": [{"cores": 4, "memory": "8M"}] * 2})
        budget -= 1
    if rng.random() < 0.4:
        tee.append({"id": 2, "type": "SSD", "cores": 2, "memory": "16M", "fdus": [{"cores": 1, "memory": "4M"}] * 2})
        budget -= 1
    scs = []
    next_id = 10
    for s in range(rng.randint(0, 2)):
        count = min(rng.randint(1, 2), budget)
        if count <= 0:
            break
        budget -= count
        nodes = [{"id": next_id + k, "type": "GPU", "cores": 4, "memory": "4M"} for k in range(count)]
        next_id += count
        scs.append({"id": s, "staging": "8M", "buffer": "1M", "nodes": nodes})
    racks = [{"tee_nodes": tee, "scs": scs[:1]}]
    if len(scs) > 1:
        racks.append({"scs": scs[1:]})
    return {"tenants": rng.randint(1, 3), "racks": racks}


@dataclass
class FuzzWorld:
    seed: int
    leak: bool
    actions: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    rejections: int = 0
    jobs: int = 0


class Adversary:
    def __init__(self, cluster: Cluster, rng: random.Random):
        self.c = cluster
        self.w = cluster.world
        self.rng = rng
        self.sessions: list = []
        self.taps: list = []
        self.failures: list[str] = []
        self.actions: dict[str, int] = {}

    # -- helpers ---------------------------------------------------------------

    def running(self) -> list:
        return [s for s in self.sessions if s.state == SessionState.RUNNING]

    def principals(self) -> list:
        return sorted(self.w.principals)

    def _manifest(self):
        b = ManifestBuilder().add("CPU", 1, "8M", ["no-HT"])
        types = {n.device_type for n in self.c.tee_nodes.values()}
        if "AI_Accelerator" in types and self.rng.random() < 0.5:
            b.add("AI_Accelerator", 2, "4M", ["memIsolation"])
        if "SSD" in types and self.rng.random() < 0.4:
            b.add("SSD", 1, "2M", [])
        if self.c.guarded and self.rng.random() < 0.6:
            b.add("GPU", 1, "1M", [], kind="NonTEE")
        return self.c.sign(b.build())

    def _intercept(self, tap, mode: str):
        rng = self.rng

        def flip(msg: Message) -> Message:
            if isinstance(msg.payload, Envelope):
                env = msg.payload
                ct = bytearray(env.ciphertext or b"\0")
                ct[rng.randrange(len(ct))] ^= 1 << rng.randrange(8)
                return replace(msg, payload=replace(env, ciphertext=bytes(ct)))
            body = bytearray(msg.payload or b"\0")
            body[rng.randrange(len(body))] ^= 1 << rng.randrange(8)
            return replace(msg, payload=bytes(body))

        if mode == "observe":
            return None
        if mode == "drop":
            return lambda m: [] if rng.random() < 0.5 else [m]
        if mode == "tamper":
            return lambda m: [flip(m)] if rng.random() < 0.5 else [m]
        if mode == "duplicate":
            return lambda m: [m, m]
        return lambda m: tap.hold(m) if rng.random() < 0.5 else [m]

    # -- actions ---------------------------------------------------------------

    def deploy(self) -> None:
        tenant = self.rng.choice(self.c.tenants)
        self.sessions.append(self.c.mp.deploy(tenant, self._manifest()))

    def _exchange(self, s, target, op: str, **extra) -> None:
        data = self.w.taint.generate(s.job, self.rng.randint(32, 512))
        got = self.w.get(s.tenant).exchange(s, target, data, op, **extra)
        if got != data:
            self.failures.append(f"{s.job} {op} to {target} returned altered data without an error")

    def exchange(self) -> None:
        s = self.rng.choice(self.running())
        self._exchange(s, self.rng.choice(s.members), "echo")

    def forward(self) -> None:
        s = self.rng.choice(self.running())
        others = [p for p in s.members if p != s.primary]
        if others:
            self._exchange(s, s.primary, "forward", to=str(self.rng.choice(others)), then="echo")

    def tap(self) -> None:
        link = self.rng.choice(self.w.open_links())
        t = self.w.tap(*link.endpoints)
        t.intercept = self._intercept(t, self.rng.choice(TAP_MODES))
        self.taps.append(t)

    def release_held(self) -> None:
        for t in self.taps:
            t.release(reverse=self.rng.random() < 0.5)
        self.w.run_until_quiescent()

    def replay(self) -> None:
        seen = [t for t in self.taps if t.observed]
        t = self.rng.choice(seen)
        dst = self.rng.choice(self.principals()) if self.rng.random() < 0.3 else None
        t.replay(self.rng.randrange(len(t.observed)), dst)
        self.w.run_until_quiescent()

    def reset(self) -> None:
        self.c.mp.reset_node(self.rng.choice(sorted(self.c.guarded)))

    def push_config(self) -> None:
        self.c.mp.push_config(self.rng.choice(sorted(self.c.guarded)), {"mirror_to": str(self.c.mp.pid), "firmware": "implant"})

    def interrupt(self) -> None:
        cpu = self.c.tee_nodes[min(self.c.tee_nodes)]
        fdu = self.rng.choice([e.fdu for e in cpu.fmt])
        drv = cpu.drivers.get(fdu)
        if drv is not None and self.rng.random() < 0.7:
            e = drv.entry
            drv.write_private(0, self.w.taint.generate(e.owner, 128), self.w.labels.label(e.owner))
            peers = sorted(p for p in e.peers if p.startswith("fdu:") and p != str(fdu))
            if peers:
                drv.register_dma("r0", 0, 128, "out", PrincipalId.parse(peers[0]))
        target = self.c.mp.pid if self.rng.random() < 0.7 else self.rng.choice(self.principals())
        self.c.mp.fake_interrupt(fdu, "r0", target=target)

    def hypervisor(self) -> None:
        node = self.rng.choice([self.c.tee_nodes[k] for k in sorted(self.c.tee_nodes)])
        e = self.rng.choice(node.fmt)
        # job data lands at the FDU base, so probe there half the time
        addr = e.base if self.rng.random() < 0.5 else e.base + self.rng.randrange(0, e.length, 4096)
        op = self.rng.choice(("read", "page_out", "remap", "write"))
        if op == "read":
            self.w.attacker_knowledge.append(node.hypervisor_read(addr, 4096))
        elif op == "page_out":
            self.w.attacker_knowledge.append(node.hypervisor_page_out(addr, 4096))
        elif op == "remap":
            node.hypervisor_remap(e.fdu, e.base)
        else:
            node.host_write(addr, b"\xcc" * 64)

    def forge(self) -> None:
        s = self.rng.choice(self.running())
        dst = self.rng.choice(s.fdus + s.scs)
        op = self.rng.choice(("terminate", "release", "echo"))
        key = Key256(self.w.random_bytes(32))
        env = SecureChannel(key, s.job, str(s.tenant), str(dst), self.w.backend).seal(b"[]", op=op)
        self.w.send(Message(s.tenant, dst, MsgKind.CONTROL, env, frozenset(), {"op": op}), injected=True)
        self.w.run_until_quiescent()

    def staging_read(self) -> None:
        pid = self.rng.choice(sorted(self.c.guarded))
        sc = self.c.scs[self.c.guarded[pid].sc]
        off = self.rng.randrange(0, sc.staging_capacity - 4096, 4096)
        data = sc.staging_read(pid, off, 4096)
        jobs = self.w.taint.scan(data)
        if jobs:
            self.w.detector.check_exposure(pid, jobs, f"{pid} staging read")

    def direct_send(self) -> None:
        pid = self.rng.choice(sorted(self.c.guarded))
        node = self.c.guarded[pid]
        dst = self.rng.choice([p for p in self.principals() if p not in (pid, node.sc)])
        try:
            node.send(dst, b"hello")
        except NoRoute:
            return
        self.failures.append(f"{pid} reached {dst} without its SC")

    def double_alloc(self) -> None:
        node = self.rng.choice([self.c.tee_nodes[k] for k in sorted(self.c.tee_nodes)])
        e = self.rng.choice(node.fmt)
        was_free = e.free
        node.sm_allocate_fdu(e.fdu, "intruder", b"\0" * 32)
        if not was_free:
            self.failures.append(f"{e.fdu} locked twice")
        node.sm_abort(e.fdu, "intruder")

    def inject_plain(self) -> None:
        targets = [e.fdu for k in sorted(self.c.tee_nodes) for e in self.c.tee_nodes[k].fmt]
        dst = self.rng.choice(targets)
        src = self.rng.choice([p for p in self.principals() if p.kind in (PrincipalKind.TENANT, PrincipalKind.MP)])
        op = self.rng.choice(("dma_write", "echo", "release", "terminate"))
        self.w.send(Message(src, dst, MsgKind.DMA, b"\x41" * 64, frozenset(), {"op": op}), injected=True)
        self.w.run_until_quiescent()

    def terminate(self) -> None:
        s = self.rng.choice(self.running())
        self.w.get(s.tenant).terminate(s)

    # -- driver ----------------------------------------------------------------

    def act(self, name: str) -> None:
        needs_job = name in {"exchange", "forward", "forge", "terminate"}
        if needs_job and not self.running():
            name = "deploy"
        if name == "deploy" and len(self.sessions) >= MAX_JOBS:
            name = "exchange" if self.running() else "tap"
        if name in {"reset", "push_config", "staging_read", "direct_send"} and not self.c.guarded:
            name = "tap"
        if name == "replay" and not any(t.observed for t in self.taps):
            name = "tap"
        self.actions[name] = self.actions.get(name, 0) + 1
        try:
            getattr(self, name)()
        except FabricError:
            # drain whatever the failed action left in flight
            try:
                self.w.run_until_quiescent()
            except FabricError:
                pass


def fuzz_world(seed: int, steps: int | None = None) -> FuzzWorld:
    rng = random.Random(seed)
    cluster = build_cluster(random_topology(rng), seed)
    adv = Adversary(cluster, rng)
    w = cluster.world
    for _ in range(steps if steps is not None else rng.randint(10, 20)):
        adv.act(rng.choice(ACTIONS))
    for t in adv.taps:
        t.intercept = None
    adv.act("release_held")
    for s in adv.running():
        try:
            w.get(s.tenant).terminate(s)
        except FabricError:
            pass
    try:
        w.run_until_quiescent()
    except FabricError:
        pass
    for blob in w.attacker_knowledge + cluster.mp.observed:
        w.detector.check_observed(blob, "attacker knowledge")
    violations = [v.as_dict() for v in w.detector.violations]
    return FuzzWorld(
        seed,
        bool(violations or adv.failures),
        adv.actions,
        adv.failures,
        violations,
        len(w.rejections),
        len(adv.sessions),
    )


def fuzz(worlds: int = 1000, seed: int = 0) -> dict:
    """Run ``worlds`` independent random worlds; report every leaking seed."""
    t0 = time.perf_counter()
    leaks = []
    actions: dict[str, int] = {}
    rejections = jobs = 0
    for i in range(worlds):
        r = fuzz_world(seed * 1_000_003 + i)
        for k, v in r.actions.items():
            actions[k] = actions.get(k, 0) + v
        rejections += r.rejections
        jobs += r.jobs
        if r.leak:
            leaks.append({"seed": r.seed, "failures": r.failures, "violations": r.violations})
    return {
        "worlds": worlds,
        "leaks": leaks,
        "jobs": jobs,
        "rejections": rejections,
        "actions": dict(sorted(actions.items())),
        "seconds": round(time.perf_counter() - t0, 3),
    }
