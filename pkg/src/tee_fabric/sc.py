"""
Security Controller: the TEE proxy for the non-TEE nodes it physically shields.

The SC owns the enclave routing table (ERT), a staging memory carved into
per-node buffers, and the job keys of every job that has nodes behind it.
Traffic between its nodes and the rest of the data center is sealed here;
traffic between its own nodes is copied through staging after an ERT check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import crypto
from .attestation import AttestationReport, AttestedDevice, NodeEvidence, Vendor, sign_node_evidence
from .crypto import Envelope, Key256, KeyPair, ReplayGuard, SecureChannel
from .errors import (
    AccessDenied,
    AlreadyAllocated,
    AuthFailure,
    CapacityExceeded,
    NoSuchBinding,
    NoSuchJob,
    NotAttached,
    SchemaError,
)
from .fabric import Message, MsgKind, PrincipalId, PrincipalKind, World, node_id, sc_id
from .protocol import Decision, KeyDelivery, open_delivery
from .taint import PagedMemory

DEFAULT_STAGING = int(2.5 * (1 << 30))
DEFAULT_BUFFER = 16 << 20
DEFAULT_NODE_MEMORY = 64 << 20


def factory_digest(device_type: str) -> bytes:
    return crypto.hash_bytes(f"factory/{device_type}".encode())


class NonTeeNode:
    """A commodity accelerator with no security features of its own."""

    def __init__(self, world: World, index: int, device_type: str, cores: int = 1, memory: int = DEFAULT_NODE_MEMORY):
        self.world = world
        self.pid = node_id(index)
        self.device_type = device_type
        self.cores = cores
        self.memory = PagedMemory(memory, f"{self.pid}/memory")
        self.factory_digest = factory_digest(device_type)
        self.firmware_digest = self.factory_digest
        self.config: dict = {}
        self.sc: PrincipalId | None = None
        self.mirror_attempts = 0
        world.register(self.pid, self)

    def restore_factory(self) -> None:
        self.memory.zero(0, self.memory.size)
        self.firmware_digest = self.factory_digest
        self.config = {}

    def send(self, dst: PrincipalId, data: bytes, taint=frozenset(), **meta) -> None:
        """Node-initiated traffic; the only physical link leads to the SC."""
        self.world.send(Message(self.pid, dst, MsgKind.DMA, data, frozenset(taint), meta))

    def on_message(self, msg: Message) -> None:
        if msg.sealed:
            raise AccessDenied(f"{self.pid} cannot open envelopes")
        if self.sc is None or self.world.endpoint(msg.src) != self.sc:
            raise AccessDenied(f"{self.pid} accepts traffic from its SC only")
        meta = msg.meta
        op = meta.get("op", "echo")
        data = bytes(msg.payload)
        jobs = sorted(msg.taint)
        if jobs:
            self.world.detector.check_exposure(self.pid, jobs, f"{self.pid} memory")
        label = self.world.labels.label(jobs[0]) if jobs else 0
        if self.config.get("mirror_to") and data:
            # compromised firmware tries to copy job data out
            self.mirror_attempts += 1
            self.send(self.sc, data, msg.taint, op="out", to=self.config["mirror_to"], then="leak")
        origin = meta.get("origin")
        if op == "echo":
            self.memory.write(0, data, label)
            self._reply(origin, meta, self.memory.read(0, len(data)), msg.taint)
        elif op in {"store", "dma_write"}:
            self.memory.write(int(meta.get("addr", 0)), data, label)
        elif op in {"load", "dma_read"}:
            addr, n = int(meta.get("addr", 0)), int(meta.get("len", 8))
            jobs = self.world.labels.jobs(self.memory.label_set(addr, n))
            self._reply(origin, meta, self.memory.read(addr, n), frozenset(sorted(jobs)))
        elif op == "relay":
            self.memory.write(0, data, label)
            self.send(self.sc, data, msg.taint, op="out", to=meta["next"], then="echo", origin=origin, rid=meta.get("rid"))
        elif op == "reply":
            self.memory.write(0, data, label)
        else:
            raise SchemaError(f"{self.pid}: unknown operation {op!r}")

    def _reply(self, origin, meta: dict, data: bytes, taint) -> None:
        if origin:
            self.send(self.sc, data, taint, op="out", to=origin, then="reply", rid=meta.get("rid"))


@dataclass
class ErtEntry:
    job_id: str
    key: Key256
    member_nodes: set
    buffer_ranges: dict  # node -> (offset, length)
    peers: frozenset = frozenset()
    guard: ReplayGuard = field(default_factory=ReplayGuard)


@dataclass(frozen=True)
class Binding:
    job: str
    nodes: tuple
    agreement: KeyPair
    manifest_id: bytes


@dataclass(frozen=True)
class Grant:
    job: str
    src: PrincipalId
    dst: PrincipalId
    addr: int
    length: int

    def covers(self, addr: int, n: int) -> bool:
        return self.addr <= addr and addr + n <= self.addr + self.length


class SecurityController(AttestedDevice):
    def __init__(
        self,
        world: World,
        index: int,
        vendor: Vendor,
        rot: KeyPair,
        firmware_version: str,
        firmware_digest: bytes,
        staging_capacity: int = DEFAULT_STAGING,
        buffer_size: int = DEFAULT_BUFFER,
    ):
        super().__init__("SC", world.random_bytes(16), vendor, rot, firmware_version, firmware_digest)
        self.world = world
        self.pid = sc_id(index)
        self.staging = PagedMemory(staging_capacity, f"{self.pid}/staging")
        self.staging_capacity = staging_capacity
        self.buffer_size = buffer_size
        self.ert: dict[str, ErtEntry] = {}
        self.bindings: dict[str, Binding] = {}
        self.nodes: dict[PrincipalId, NonTeeNode] = {}
        self.shared_regions: list[Grant] = []
        self.reset_on_bind = True
        self._channels: dict[tuple, SecureChannel] = {}
        world.register(self.pid, self)

    @property
    def sc_id(self) -> PrincipalId:
        return self.pid

    @property
    def attached_nodes(self) -> set:
        return set(self.nodes)

    def attach(self, node: NonTeeNode) -> None:
        self.nodes[node.pid] = node
        node.sc = self.pid
        self.world.attach(node.pid, self.pid)

    # -- lookups --------------------------------------------------------------

    def _node(self, pid: PrincipalId) -> NonTeeNode:
        node = self.nodes.get(pid)
        if node is None:
            raise NotAttached(f"{pid} is not attached to {self.pid}")
        return node

    def entry_for_node(self, pid: PrincipalId) -> ErtEntry | None:
        for e in self.ert.values():
            if pid in e.member_nodes:
                return e
        return None

    def _entry(self, job: str) -> ErtEntry:
        e = self.ert.get(job)
        if e is None:
            raise NoSuchJob(f"{self.pid} has no ERT entry for {job}")
        return e

    def _bound(self, pid: PrincipalId) -> bool:
        return self.entry_for_node(pid) is not None or any(pid in b.nodes for b in self.bindings.values())

    def channel(self, e: ErtEntry, src: str, dst: str) -> SecureChannel:
        ch = self._channels.get((e.job_id, src, dst))
        if ch is None or ch.key is not e.key:
            ch = SecureChannel(e.key, e.job_id, src, dst, self.world.backend)
            self._channels[(e.job_id, src, dst)] = ch
        return ch

    # -- reset and binding ----------------------------------------------------

    def reset_node(self, node: PrincipalId) -> None:
        n = self._node(node)
        n.restore_factory()
        self.shared_regions = [g for g in self.shared_regions if node not in (g.src, g.dst)]
        e = self.entry_for_node(node)
        if e is not None:
            off, length = e.buffer_ranges[node]
            self.staging.zero(off, length)
        self.world.record("node_reset", sc=str(self.pid), node=str(node))

    def bind_job(self, manifest, nodes, challenge: bytes, job: str | None = None) -> tuple[AttestationReport, list]:
        job = job or manifest.manifest_id.hex()[:16]
        nodes = tuple(sorted(nodes))
        for pid in nodes:
            self._node(pid)
            if self._bound(pid):
                raise AlreadyAllocated(f"{pid} already belongs to a job")
        if job in self.ert or job in self.bindings:
            raise AlreadyAllocated(f"{job} is already bound on {self.pid}")
        if self.reset_on_bind:
            for pid in nodes:
                self.reset_node(pid)
        agreement = crypto.generate_keypair(self.world.random_bytes(32))
        report = self.generate_report(challenge, agreement.public)
        evidence = []
        for pid in nodes:
            n = self.nodes[pid]
            ev = NodeEvidence(str(pid), n.device_type, n.cores, n.memory.size, n.firmware_digest, self.device_id, challenge)
            evidence.append(sign_node_evidence(ev, self.rot))
        self.bindings[job] = Binding(job, nodes, agreement, manifest.manifest_id)
        self.world.record("sc_bind", sc=str(self.pid), job=job, nodes=[str(p) for p in nodes])
        return report, evidence

    def abort_binding(self, job: str) -> None:
        if self.bindings.pop(job, None) is not None:
            self.world.record("sc_unbind", sc=str(self.pid), job=job)

    def _first_fit(self, n: int, taken: list) -> int:
        pos = 0
        for off, length in sorted(taken):
            if off - pos >= n:
                return pos
            pos = max(pos, off + length)
        if self.staging_capacity - pos >= n:
            return pos
        raise CapacityExceeded(f"{self.pid} staging memory exhausted")

    def _taken(self) -> list:
        return [r for e in self.ert.values() for r in e.buffer_ranges.values()]

    def install_entry(self, job: str, nodes, key: Key256, peers=()) -> ErtEntry:
        nodes = sorted(nodes)
        for pid in nodes:
            self._node(pid)
            if self.entry_for_node(pid) is not None:
                raise AlreadyAllocated(f"{pid} already belongs to a job")
        taken = self._taken()
        ranges = {}
        for pid in nodes:
            off = self._first_fit(self.buffer_size, taken)
            ranges[pid] = (off, self.buffer_size)
            taken.append(ranges[pid])
        e = ErtEntry(job, key, set(nodes), ranges, frozenset(peers))
        self.ert[job] = e
        self.world.grant(job, self.pid, *nodes)
        self.world.record("ert_add", sc=str(self.pid), job=job, buffers={str(p): list(r) for p, r in sorted(ranges.items())})
        return e

    def provision_key(self, job_id: str, delivery: KeyDelivery) -> None:
        b = self.bindings.get(job_id)
        if b is None or delivery.job != job_id:
            raise NoSuchBinding(f"{self.pid} has no pending binding for {job_id}")
        if delivery.manifest_id != b.manifest_id:
            raise AuthFailure("key delivery names a different manifest")
        key, shared, peers = open_delivery(delivery, b.agreement, job_id, self.world.keys, self.world.backend)
        shared.zeroize()
        del self.bindings[job_id]
        self.install_entry(job_id, b.nodes, key, peers)

    # -- proxying -------------------------------------------------------------

    def _stage(self, e: ErtEntry, node: PrincipalId, data: bytes) -> int:
        off, length = e.buffer_ranges[node]
        if len(data) > length:
            raise AccessDenied(f"{len(data)} bytes exceed the staging buffer of {node}")
        self.staging.write(off, data, self.world.labels.label(e.job_id))
        return off

    def _deliver(self, e: ErtEntry, node: PrincipalId, data: bytes, **meta) -> None:
        off = self._stage(e, node, data)
        staged = self.staging.read(off, len(data))
        taint = frozenset({e.job_id}) if data else frozenset()
        self.world.send(Message(self.pid, node, MsgKind.DMA, staged, taint, meta))

    def proxy_out(self, node: PrincipalId, data: bytes, dst: PrincipalId, **aad) -> Envelope | None:
        self._node(node)
        e = self.entry_for_node(node)
        if e is None:
            raise AccessDenied(f"{node} is not part of any job")
        target = str(dst)
        if target not in e.peers and dst not in e.member_nodes:
            raise AccessDenied(f"{dst} is not part of {e.job_id}")
        off = self._stage(e, node, data)
        staged = self.staging.read(off, len(data))
        if dst in e.member_nodes:
            # same job behind the same SC: stays inside the shielded container
            self._deliver(e, dst, staged, op=aad.get("op", "reply"), origin=aad.get("origin"), rid=aad.get("rid"))
            return None
        remote = self.world.attached_to.get(dst)
        if remote is not None:
            extra = dict(aad)
            then = extra.pop("op", "echo")
            origin = extra.pop("origin", None) or str(node)
            return self.inter_sc_send(e.job_id, staged, remote, to=target, then=then, origin=origin, **extra)
        env = self.channel(e, str(node), target).seal(staged, **aad)
        taint = frozenset({e.job_id}) if staged else frozenset()
        self.world.send(Message(self.pid, dst, MsgKind.DMA, env, taint, {"op": "proxy", "from": str(node)}))
        return env

    def proxy_in(self, env: Envelope, dst_node: PrincipalId) -> bytes:
        self._node(dst_node)
        e = self.entry_for_node(dst_node)
        if e is None:
            raise AccessDenied(f"{dst_node} is not part of any job")
        head = env.header()
        if head.get("dst") != str(dst_node):
            raise AuthFailure("envelope addressed elsewhere")
        pt = crypto.open_envelope(e.key, env, self.world.backend, e.guard)
        meta = {k: head[k] for k in ("rid", "addr", "len", "next") if k in head}
        meta["op"] = head.get("op", "echo")
        meta["origin"] = head.get("origin") or head.get("src")
        self._deliver(e, dst_node, pt, **meta)
        return pt

    def local_decision(self, src: PrincipalId, dst: PrincipalId) -> Decision:
        self._node(src)
        self._node(dst)
        if src == dst:
            return Decision.ALLOW
        a, b = self.entry_for_node(src), self.entry_for_node(dst)
        return Decision.ALLOW if a is not None and a is b else Decision.DENY

    def local_transfer(self, src: PrincipalId, dst: PrincipalId, rng: tuple) -> None:
        """Copy ``rng = (src_addr, dst_addr, n)`` between two guarded nodes via staging."""
        if not self.local_decision(src, dst):
            raise AccessDenied(f"{src} and {dst} belong to different jobs")
        if src == dst:
            return
        src_addr, dst_addr, n = rng
        e = self.entry_for_node(src)
        off, length = e.buffer_ranges[src]
        if n > length:
            raise AccessDenied("transfer exceeds the staging buffer")
        if n:
            self.staging.copy_from(self.nodes[src].memory, src_addr, off, n)
            self.nodes[dst].memory.copy_from(self.staging, off, dst_addr, n)
        self.world.record("local_transfer", sc=str(self.pid), src=str(src), dst=str(dst), bytes=n)

    def setup_shared_region(self, src: PrincipalId, dst: PrincipalId, rng: tuple) -> Grant:
        if not self.local_decision(src, dst):
            raise AccessDenied(f"{src} and {dst} belong to different jobs")
        addr, n = rng
        src_node = self.nodes[src]
        if addr < 0 or n <= 0 or addr + n > src_node.memory.size:
            raise AccessDenied("shared range outside node memory")
        e = self.entry_for_node(src)
        g = Grant(e.job_id if e else "", src, dst, addr, n)
        self.shared_regions.append(g)
        self.world.record("shared_region", sc=str(self.pid), src=str(src), dst=str(dst), addr=addr, length=n)
        return g

    def direct_access(self, accessor: PrincipalId, owner: PrincipalId, addr: int, n: int, data: bytes | None = None) -> bytes:
        """Zero-copy access by ``accessor`` into ``owner``'s memory under a grant."""
        for g in self.shared_regions:
            if g.src == owner and g.dst == accessor and g.covers(addr, n if data is None else len(data)):
                mem = self.nodes[owner].memory
                if data is None:
                    return mem.read(addr, n)
                mem.write(addr, data, self.world.labels.label(g.job) if g.job else 0)
                return b""
        raise AccessDenied(f"{accessor} holds no grant on {owner} [{addr:#x}, +{n})")

    def staging_read(self, node: PrincipalId, offset: int, n: int) -> bytes:
        """A guarded node reading SC staging memory: only its own buffer is visible."""
        self._node(node)
        e = self.entry_for_node(node)
        if e is None:
            raise AccessDenied(f"{node} owns no staging buffer")
        off, length = e.buffer_ranges[node]
        if offset < off or offset + n > off + length:
            raise AccessDenied(f"{node} may not read staging [{offset:#x}, +{n})")
        return self.staging.read(offset, n)

    def inter_sc_send(self, job_id: str, data: bytes, remote_sc: PrincipalId, **extra) -> Envelope:
        e = self._entry(job_id)
        env = self.channel(e, str(self.pid), str(remote_sc)).seal(data, op="inter_sc", **extra)
        taint = frozenset({job_id}) if data else frozenset()
        self.world.send(Message(self.pid, remote_sc, MsgKind.DMA, env, taint, {"op": "inter_sc"}))
        return env

    def _inter_sc_receive(self, env: Envelope) -> None:
        head = env.header()
        e = self._entry(str(head.get("job")))
        pt = crypto.open_envelope(e.key, env, self.world.backend, e.guard)
        target = PrincipalId.parse(str(head.get("to")))
        if target not in e.member_nodes:
            raise AccessDenied(f"{target} is not a member of {e.job_id} on {self.pid}")
        meta = {k: head[k] for k in ("rid", "addr", "len", "next") if k in head}
        meta["op"] = head.get("then", "echo")
        meta["origin"] = head.get("origin")
        self._deliver(e, target, pt, **meta)

    # -- teardown -------------------------------------------------------------

    def release_job(self, job_id: str, termination_cmd) -> None:
        e = self._entry(job_id)
        if not isinstance(termination_cmd, Envelope):
            raise AuthFailure("termination must be sealed under the job key")
        head = termination_cmd.header()
        if head.get("op") != "terminate" or head.get("job") != job_id:
            raise AuthFailure("not a termination command for this job")
        crypto.open_envelope(e.key, termination_cmd, self.world.backend, e.guard)
        nodes = sorted(e.member_nodes)
        for pid in nodes:
            self.reset_node(pid)
        for off, length in e.buffer_ranges.values():
            self.staging.zero(off, length)
        self.shared_regions = [g for g in self.shared_regions if g.job != job_id]
        e.key.zeroize()
        del self.ert[job_id]
        for key in [k for k in self._channels if k[0] == job_id]:
            del self._channels[key]
        members = self.world.job_members.get(job_id)
        if members is not None:
            members.difference_update(nodes)
            members.discard(self.pid)
        self.world.record("ert_remove", sc=str(self.pid), job=job_id)
        mp = PrincipalId(PrincipalKind.MP, 0)
        if self.world.exists(mp):
            body = json.dumps({"op": "nodes_free", "nodes": [str(p) for p in nodes]}).encode()
            self.world.send(Message(self.pid, mp, MsgKind.CONTROL, body, frozenset(), {"op": "nodes_free"}))

    # -- management interface -------------------------------------------------

    def mp_push_config(self, node: PrincipalId, config: dict) -> None:
        """The MP may reconfigure idle nodes; bound nodes are shielded."""
        n = self._node(node)
        if self._bound(node):
            raise AccessDenied(f"{node} is bound to a job")
        n.config.update(config)
        if "firmware" in config:
            n.firmware_digest = crypto.hash_bytes(str(config["firmware"]).encode())
        self.world.record("node_config", sc=str(self.pid), node=str(node))

    # -- message handling -----------------------------------------------------

    def on_message(self, msg: Message) -> None:
        try:
            self._handle(msg)
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"{self.pid}: malformed request: {exc}") from None

    def _handle(self, msg: Message) -> None:
        src = self.world.endpoint(msg.src)
        meta = msg.meta
        if src in self.nodes and not msg.sealed:
            op = meta.get("op")
            if op == "out":
                extra = {"op": meta.get("then", "reply")}
                for k in ("rid", "origin"):
                    if meta.get(k) is not None:
                        extra[k] = meta[k]
                self.proxy_out(src, bytes(msg.payload), PrincipalId.parse(meta["to"]), **extra)
            elif op == "local":
                self.local_transfer(src, PrincipalId.parse(meta["to"]), (int(meta["src_addr"]), int(meta["dst_addr"]), int(meta["len"])))
            elif op == "staging_read":
                self.staging_read(src, int(meta["offset"]), int(meta["len"]))
            else:
                raise AccessDenied(f"{self.pid}: unknown node request {op!r}")
            return
        if msg.sealed:
            env = msg.payload
            head = env.header()
            op = head.get("op")
            if op == "terminate":
                self.release_job(str(head.get("job")), env)
            elif op == "inter_sc":
                self._inter_sc_receive(env)
            else:
                self.proxy_in(env, PrincipalId.parse(str(head.get("dst"))))
            return
        op = meta.get("op")
        if msg.kind is MsgKind.CONTROL and op == "key_delivery":
            delivery = KeyDelivery.from_bytes(bytes(msg.payload))
            self.provision_key(delivery.job, delivery)
        elif msg.kind is MsgKind.CONTROL and src.kind == PrincipalKind.MP and op == "push_config":
            self.mp_push_config(PrincipalId.parse(meta["node"]), json.loads(msg.payload))
        elif msg.kind is MsgKind.CONTROL and src.kind == PrincipalKind.MP and op == "reset":
            self.reset_node(PrincipalId.parse(meta["node"]))
        else:
            raise AccessDenied(f"{self.pid}: plaintext {msg.kind.value} rejected")
