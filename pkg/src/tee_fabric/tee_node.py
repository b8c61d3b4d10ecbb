"""
TEE-capable nodes: security monitor, FDU mapping table, access control units,
memory protection engine, secure deallocation and the in-enclave driver that
seals DMA and MMIO traffic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field


from . import crypto
from .attestation import AttestationReport, AttestedDevice, FduConfig, Vendor
from .crypto import Envelope, Key256, KeyPair, ReplayGuard, SecureChannel
from .devices import AiCore, BlockCommand, BlockOp, BlockStore, decode_tensors, encode_tensors
from .errors import (
    AccessDenied,
    AlreadyAllocated,
    AuthFailure,
    CapacityExceeded,
    NoResponse,
    NoSuchBinding,
    NotBooted,
    OverlapError,
    SchemaError,
    UnmappedAddress,
    UnregisteredRegion,
)
from .fabric import Message, MsgKind, PrincipalId, PrincipalKind, World, fdu_id, node_id
from .protocol import Decision, KeyDelivery, open_delivery
from .taint import PAGE_SIZE, PagedMemory

log = logging.getLogger(__name__)

HOST_MEMORY = 64 << 20
FORWARDED = ("rid", "addr", "len", "cmd", "lba", "count", "ns")
MMIO_PAGE = PAGE_SIZE


@dataclass(frozen=True)
class FduSpec:
    cores: int | frozenset
    memory: int
    base: int | None = None


@dataclass
class FmtEntry:
    fdu: PrincipalId
    cores: frozenset
    base: int
    length: int
    stream_id: bytes = b""
    owner: str | None = None
    key: Key256 | None = None
    pending: str | None = None
    agreement: KeyPair | None = field(default=None, repr=False)
    tenant_key: Key256 | None = None
    peers: frozenset = frozenset()

    @property
    def free(self) -> bool:
        return self.owner is None and self.pending is None

    def contains(self, addr: int, n: int = 1) -> bool:
        return self.base <= addr and addr + n <= self.base + self.length


@dataclass(frozen=True)
class DmaRegion:
    addr: int
    length: int
    direction: str  # "in" | "out" | "both"
    peer: PrincipalId


@dataclass(frozen=True)
class MmioMapping:
    local_base: int
    length: int
    device: PrincipalId
    device_offset: int


class TeeNode(AttestedDevice):
    """A node whose SM partitions it into FDUs and enforces isolation between them."""

    def __init__(
        self,
        world: World,
        index: int,
        device_type: str,
        cores: int,
        memory: int,
        vendor: Vendor,
        rot: KeyPair,
        firmware_version: str,
        firmware_digest: bytes,
        host_memory: int = HOST_MEMORY,
    ):
        super().__init__(device_type, world.random_bytes(16), vendor, rot, firmware_version, firmware_digest)
        self.world = world
        self.pid = node_id(index)
        self.cores = cores
        self.memory = PagedMemory(memory, f"{self.pid}/device")
        self.host = PagedMemory(host_memory, f"{self.pid}/host")
        self.fmt: list[FmtEntry] = []
        self.fmt_capacity = 0
        self.core_sharing = device_type == "AI_Accelerator"
        self._guards: dict[PrincipalId, ReplayGuard] = {}
        self._channels: dict[tuple, SecureChannel] = {}
        self.drivers: dict[PrincipalId, EnclaveDriver] = {}
        self.stores: dict[PrincipalId, BlockStore] = {}
        self.ai: dict[PrincipalId, AiCore] = {}
        world.register(self.pid, self)

    # -- SM: partitioning and allocation --------------------------------------

    def partition_fdus(self, specs: list) -> list[PrincipalId]:
        if not self.booted:
            raise NotBooted(str(self.pid))
        if self.fmt:
            raise AlreadyAllocated(f"{self.pid} is already partitioned")
        specs = [s if isinstance(s, FduSpec) else FduSpec(*s) for s in specs]
        next_core, next_base = 0, 0
        entries: list[FmtEntry] = []
        used_cores: set[int] = set()
        for i, s in enumerate(specs):
            if isinstance(s.cores, int):
                cores = frozenset(range(next_core, next_core + s.cores))
                next_core += s.cores
            else:
                cores = frozenset(s.cores)
            base = next_base if s.base is None else s.base
            if s.memory <= 0:
                raise CapacityExceeded("FDU memory must be positive")
            if max(cores, default=-1) >= self.cores:
                raise CapacityExceeded(f"{self.pid} has {self.cores} cores")
            if base < 0 or base + s.memory > self.memory.size:
                raise CapacityExceeded(f"{self.pid} has {self.memory.size} bytes of device memory")
            if cores & used_cores:
                raise OverlapError(f"FDU {i} shares cores {sorted(cores & used_cores)}")
            for e in entries:
                if base < e.base + e.length and e.base < base + s.memory:
                    raise OverlapError(f"FDU {i} overlaps {e.fdu}")
            used_cores |= cores
            next_base = max(next_base, base + s.memory)
            fdu = fdu_id(self.pid.index, i)
            entries.append(FmtEntry(fdu, cores, base, s.memory, stream_id=crypto.hash_bytes(self.device_id + bytes([i]))[:5]))
        self.fmt = entries
        self.fmt_capacity = len(entries)
        for e in entries:
            if self.device_type == "SSD":
                self.stores[e.fdu] = BlockStore(self.memory, e.base, e.length)
            elif self.device_type == "AI_Accelerator":
                self.ai[e.fdu] = AiCore(self.memory, e.base, e.length)
        self.world.record("partition", node=str(self.pid), fdus=[str(e.fdu) for e in entries])
        return [e.fdu for e in entries]

    def entry(self, fdu: PrincipalId) -> FmtEntry:
        if fdu.kind != PrincipalKind.FDU or fdu.index != self.pid.index or not 0 <= fdu.sub < len(self.fmt):
            raise AccessDenied(f"{fdu} is not an FDU of {self.pid}")
        return self.fmt[fdu.sub]

    def fdu_configs(self, fdus=None) -> tuple:
        chosen = self.fmt if fdus is None else [self.entry(f) for f in fdus]
        return tuple(FduConfig(e.base, e.stream_id, len(e.cores), e.length) for e in chosen)

    def sm_allocate_fdu(self, fdu: PrincipalId, job: str, challenge: bytes) -> AttestationReport:
        """Lock a free FDU to ``job`` and return attestation evidence for the tenant."""
        if not self.booted:
            raise NotBooted(str(self.pid))
        e = self.entry(fdu)
        if not e.free:
            raise AlreadyAllocated(f"{fdu} belongs to {e.owner or e.pending}")
        agreement = crypto.generate_keypair(self.world.random_bytes(32))
        report = self.generate_report(challenge, agreement.public, fdus=[fdu])
        e.pending, e.agreement = job, agreement
        self.world.record("fdu_locked", fdu=str(fdu), job=job)
        return report

    def sm_abort(self, fdu: PrincipalId, job: str) -> None:
        e = self.entry(fdu)
        if e.pending == job:
            e.pending, e.agreement = None, None
            self.world.record("fdu_unlocked", fdu=str(fdu), job=job)

    def sm_install_key(self, fdu: PrincipalId, delivery: KeyDelivery) -> None:
        e = self.entry(fdu)
        if e.owner is not None:
            raise AlreadyAllocated(f"{fdu} already keyed for {e.owner}")
        if e.pending != delivery.job or e.agreement is None:
            raise NoSuchBinding(f"{fdu} is not locked for {delivery.job}")
        key, shared, peers = open_delivery(delivery, e.agreement, delivery.job, self.world.keys, self.world.backend)
        e.owner, e.key, e.tenant_key = delivery.job, key, shared
        e.peers = frozenset(peers)
        e.pending, e.agreement = None, None
        if self.device_type == "CPU":
            self.drivers[fdu] = EnclaveDriver(self, fdu)
        self.world.record("fdu_keyed", fdu=str(fdu), job=e.owner)

    # -- ACUs -----------------------------------------------------------------

    def acu_check(self, accessor: PrincipalId, addr: int) -> Decision:
        try:
            me = self.entry(accessor)
        except AccessDenied:
            return Decision.DENY
        if me.contains(addr):
            return Decision.ALLOW
        if self.core_sharing and me.owner is not None:
            for e in self.fmt:
                if e.owner == me.owner and e.contains(addr):
                    return Decision.ALLOW
        return Decision.DENY

    def _core_owner(self, core: int) -> FmtEntry | None:
        for e in self.fmt:
            if core in e.cores:
                return e
        return None

    def acu_core_check(self, src_core: int, dst_core: int) -> Decision:
        a, b = self._core_owner(src_core), self._core_owner(dst_core)
        if a is None or b is None or a.owner is None or b.owner is None:
            return Decision.DENY
        if a.owner != b.owner:
            return Decision.DENY
        if a is not b and not self.core_sharing:
            return Decision.DENY
        return Decision.ALLOW

    def _checked_range(self, fdu: PrincipalId, addr: int, n: int) -> None:
        if n <= 0:
            return
        if not (self.acu_check(fdu, addr) and self.acu_check(fdu, addr + n - 1)):
            raise AccessDenied(f"{fdu} may not touch [{addr:#x}, +{n})")
        owners = {e.owner for e in self.fmt if e.base < addr + n and addr < e.base + e.length}
        if owners != {self.entry(fdu).owner}:
            raise AccessDenied(f"[{addr:#x}, +{n}) spans another job's FDU")

    # -- MPE ------------------------------------------------------------------

    def key_for(self, e: FmtEntry, peer: str) -> Key256:
        if e.key is None:
            raise AccessDenied(f"{e.fdu} holds no key")
        if self.device_type == "CPU" and peer.startswith("tenant:") and e.tenant_key is not None:
            return e.tenant_key
        return e.key

    def channel(self, fdu: PrincipalId, peer: str) -> SecureChannel:
        e = self.entry(fdu)
        key = self.key_for(e, peer)
        ch = self._channels.get((fdu, peer))
        if ch is None or ch.key is not key:
            ch = SecureChannel(key, e.owner, str(fdu), peer, self.world.backend)
            self._channels[(fdu, peer)] = ch
        return ch

    def guard(self, fdu: PrincipalId) -> ReplayGuard:
        return self._guards.setdefault(fdu, ReplayGuard())

    def mpe_in(self, fdu: PrincipalId, env, addr: int | None = None) -> bytes:
        """The only path into FDU memory: authenticate, decrypt, range-check, write."""
        e = self.entry(fdu)
        if not isinstance(env, Envelope):
            raise AccessDenied(f"{fdu}: plaintext writes are rejected at the device boundary")
        if e.owner is None or e.key is None:
            raise AccessDenied(f"{fdu} is not allocated")
        head = env.header()
        if head.get("job") != e.owner or head.get("dst") != str(fdu):
            raise AuthFailure(f"{fdu}: envelope addressed to another job or FDU")
        pt = crypto.open_envelope(self.key_for(e, str(head.get("src", ""))), env, self.world.backend, self.guard(fdu))
        if addr is not None:
            self._checked_range(fdu, addr, len(pt))
            self.memory.write(addr, pt, self.world.labels.label(e.owner))
        return pt

    def mpe_out(self, fdu: PrincipalId, addr: int, n: int, peer: str, **aad) -> Envelope:
        e = self.entry(fdu)
        if e.owner is None:
            raise AccessDenied(f"{fdu} is not allocated")
        self._checked_range(fdu, addr, n)
        return self.channel(fdu, peer).seal(self.memory.read(addr, n), **aad)

    def mpe_transfer(self, fdu: PrincipalId, direction: str, data, addr: int | None = None, peer: str | None = None):
        if direction == "out":
            lo, n = data
            return self.mpe_out(fdu, lo, n, peer or "tenant:0")
        if direction == "in":
            return self.mpe_in(fdu, data, addr)
        raise ValueError("direction is 'in' or 'out'")

    # -- secure deallocation --------------------------------------------------

    def secure_deallocate(self, fdu: PrincipalId) -> None:
        e = self.entry(fdu)
        if e.owner is None:
            if e.pending is not None:
                self.sm_abort(fdu, e.pending)
            return
        job = e.owner
        self.memory.zero(e.base, e.length)
        driver = self.drivers.pop(fdu, None)
        if driver is not None:
            self.host.zero(driver.staging_base, driver.staging_len)
        for k in (e.key, e.tenant_key):
            if k is not None:
                k.zeroize()
        for key in [k for k in self._channels if k[0] == fdu]:
            del self._channels[key]
        self._guards.pop(fdu, None)
        e.owner = e.key = e.tenant_key = None
        e.peers = frozenset()
        members = self.world.job_members.get(job)
        if members is not None:
            members.discard(fdu)
        self.world.record("fdu_released", fdu=str(fdu), job=job)

    # -- untrusted host software ----------------------------------------------

    def _owned_overlap(self, addr: int, n: int) -> FmtEntry | None:
        for e in self.fmt:
            if not e.free and e.base < addr + n and addr < e.base + e.length:
                return e
        return None

    def hypervisor_read(self, addr: int, n: int) -> bytes:
        hit = self._owned_overlap(addr, n)
        if hit is not None:
            raise AccessDenied(f"enclave memory of {hit.fdu} is isolated from the host")
        return self.memory.read(addr, n)

    def hypervisor_page_out(self, addr: int, n: int) -> bytes:
        return self.hypervisor_read(addr, n)

    def hypervisor_remap(self, fdu: PrincipalId, new_base: int) -> None:
        e = self.entry(fdu)
        if not e.free:
            raise AccessDenied(f"page tables of {fdu} are protected by the SM")
        if new_base < 0 or new_base + e.length > self.memory.size:
            raise CapacityExceeded("remap outside device memory")
        for other in self.fmt:
            if other is not e and new_base < other.base + other.length and other.base < new_base + e.length:
                raise OverlapError(f"remap collides with {other.fdu}")
        e.base = new_base

    def host_write(self, addr: int, data: bytes) -> None:
        for e in self.fmt:
            if e.base < addr + len(data) and addr < e.base + e.length:
                raise AccessDenied(f"{e.fdu}: plaintext host writes are rejected; the MPE is the only path")
        self.memory.write(addr, data)

    # -- message handling -----------------------------------------------------

    def send(self, src: PrincipalId, dst: str, kind: MsgKind, env: Envelope, job: str | None, op: str) -> None:
        target = PrincipalId.parse(dst)
        taint = frozenset({job}) if job and env.ciphertext else frozenset()
        hop = self.world.next_hop(src, target)
        self.world.send(Message(src, hop, kind, env, taint, {"op": op, "to": dst}))

    def reply(self, fdu: PrincipalId, head: dict, data: bytes, kind: MsgKind = MsgKind.DMA) -> None:
        e = self.entry(fdu)
        dst = str(head.get("origin") or head.get("src"))
        env = self.channel(fdu, dst).seal(data, op="reply", rid=head.get("rid"))
        self.send(fdu, dst, kind, env, e.owner if data else None, "reply")

    def on_message(self, msg: Message) -> None:
        try:
            self._handle(msg)
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError(f"{msg.dst}: malformed request: {exc}") from None

    def _handle(self, msg: Message) -> None:
        if msg.dst.kind != PrincipalKind.FDU:
            raise AccessDenied(f"{self.pid} accepts traffic only for its FDUs")
        fdu = msg.dst
        e = self.entry(fdu)
        if msg.kind is MsgKind.INTERRUPT:
            driver = self.drivers.get(fdu)
            if driver is None:
                raise UnregisteredRegion(f"{fdu} has no enclave driver")
            driver.on_interrupt(msg)
            return
        if msg.kind is MsgKind.CONTROL and msg.meta.get("op") == "key_delivery" and not msg.sealed:
            self.sm_install_key(fdu, KeyDelivery.from_bytes(msg.payload))
            return
        if not msg.sealed:
            raise AccessDenied(f"{fdu}: plaintext writes are rejected at the device boundary")
        head = msg.payload.header()
        op = head.get("op")
        if op == "reply" and fdu in self.drivers:
            self.drivers[fdu].on_sealed(msg.payload)
            return
        pt = self.mpe_in(fdu, msg.payload)
        job = e.owner
        label = self.world.labels.label(job)
        if op == "echo":
            self._checked_range(fdu, e.base, len(pt))
            self.memory.write(e.base, pt, label)
            self.reply(fdu, head, self.memory.read(e.base, len(pt)))
        elif op == "dma_write":
            addr = e.base + int(head.get("addr", 0))
            self._checked_range(fdu, addr, len(pt))
            self.memory.write(addr, pt, label)
        elif op == "dma_read":
            addr, n = e.base + int(head.get("addr", 0)), int(head.get("len", 0))
            self._checked_range(fdu, addr, n)
            self.reply(fdu, head, self.memory.read(addr, n))
        elif op == "store":
            addr = e.base + int(head.get("addr", 0))
            self._checked_range(fdu, addr, 8)
            self.memory.write(addr, pt[:8].ljust(8, b"\0"), label)
        elif op == "load":
            addr = e.base + int(head.get("addr", 0))
            self._checked_range(fdu, addr, 8)
            self.reply(fdu, head, self.memory.read(addr, 8), MsgKind.MMIO_READ)
        elif op == "ssd":
            self.reply(fdu, head, self._ssd(fdu, head, pt, label))
        elif op == "ai_load":
            self.ai_core(fdu).load(int(head.get("addr", 0)), decode_tensors(pt), label)
            self.reply(fdu, head, b"")
        elif op == "ai_run":
            off, size = int(head.get("addr", 0)), int(head.get("len", 0))
            self.reply(fdu, head, encode_tensors([self.ai_core(fdu).run(off, size)]))
        elif op == "release":
            self.secure_deallocate(fdu)
        elif op == "terminate":
            if self.device_type != "CPU" or not str(head.get("src")).startswith("tenant:"):
                raise AccessDenied("only the tenant may terminate through the primary CPU FDU")
            self._terminate_job(fdu, pt)
        elif op == "forward":
            # the enclave relays data to another member of its job
            target = str(head.get("to"))
            if target not in e.peers:
                raise AccessDenied(f"{target} is not part of {job}")
            self._checked_range(fdu, e.base, len(pt))
            self.memory.write(e.base, pt, label)
            extra = {k: v for k, v in head.items() if k in FORWARDED}
            extra["op"] = head.get("then", "echo")
            extra["origin"] = str(head.get("origin") or head.get("src"))
            env = self.mpe_out(fdu, e.base, len(pt), target, **extra)
            self.send(fdu, target, MsgKind.DMA, env, job, "forward")
        else:
            raise AccessDenied(f"{fdu}: unknown operation {op!r}")

    def ai_core(self, fdu: PrincipalId) -> AiCore:
        core = self.ai.get(fdu)
        if core is None:
            raise AccessDenied(f"{fdu} is not an AI accelerator FDU")
        return core

    def _ssd(self, fdu: PrincipalId, head: dict, data: bytes, label: int) -> bytes:
        store = self.stores.get(fdu)
        if store is None:
            raise AccessDenied(f"{fdu} is not an SSD namespace")
        target = head.get("ns", str(fdu))
        if target != str(fdu):
            raise AccessDenied(f"{fdu} may not address namespace {target}")
        cmd = BlockCommand(BlockOp(head["cmd"]), int(head.get("lba", 0)), int(head.get("count", 1)), data, str(fdu))
        if cmd.op is not BlockOp.FLUSH:
            addr, n = store._range(cmd.lba, cmd.block_count)
            self._checked_range(fdu, addr, n)
        return store.submit(cmd, label)

    def _terminate_job(self, fdu: PrincipalId, body: bytes) -> None:
        e = self.entry(fdu)
        job = e.owner
        targets = json.loads(body or b"[]")
        for peer in sorted(targets):
            if peer == str(fdu) or peer not in e.peers:
                continue
            kind = PrincipalId.parse(peer).kind
            if kind in (PrincipalKind.FDU, PrincipalKind.SC):
                env = self.channel(fdu, peer).seal(b"TERMINATE", op="release" if kind == PrincipalKind.FDU else "terminate")
                self.send(fdu, peer, MsgKind.CONTROL, env, None, "terminate")
        self.world.record("terminate_issued", fdu=str(fdu), job=job)
        self.secure_deallocate(fdu)


class EnclaveDriver:
    """Thin driver inside a CPU enclave that seals DMA and MMIO transparently."""

    STAGING = 1 << 20

    def __init__(self, node: TeeNode, fdu: PrincipalId):
        self.node = node
        self.fdu = fdu
        self.dma_regions: dict[str, DmaRegion] = {}
        self.mmio_map: list[MmioMapping] = []
        self.staging_base = fdu.sub * self.STAGING
        self.staging_len = self.STAGING
        self.inbox: dict[int, bytes] = {}
        self._rid = 0

    @property
    def entry(self) -> FmtEntry:
        return self.node.entry(self.fdu)

    def register_dma(self, name: str, addr: int, length: int, direction: str, peer: PrincipalId) -> None:
        e = self.entry
        if not e.contains(e.base + addr, length):
            raise AccessDenied("DMA region must lie inside enclave memory")
        self.dma_regions[name] = DmaRegion(e.base + addr, length, direction, peer)

    def map_mmio(self, local_base: int, length: int, device: PrincipalId, device_offset: int = 0) -> None:
        if local_base % MMIO_PAGE or length % MMIO_PAGE or length <= 0:
            raise UnmappedAddress("MMIO mappings are page granular")
        self.mmio_map.append(MmioMapping(local_base, length, device, device_offset))

    def write_private(self, offset: int, data: bytes, label: int) -> None:
        e = self.entry
        if not e.contains(e.base + offset, len(data)):
            raise AccessDenied("outside enclave memory")
        self.node.memory.write(e.base + offset, data, label)

    def read_private(self, offset: int, n: int) -> bytes:
        e = self.entry
        if not e.contains(e.base + offset, n):
            raise AccessDenied("outside enclave memory")
        return self.node.memory.read(e.base + offset, n)

    def driver_dma(self, region: str, direction: str, peer: PrincipalId | None = None, envelope: Envelope | None = None, device_addr: int = 0):
        r = self.dma_regions.get(region)
        if r is None:
            raise UnregisteredRegion(f"{self.fdu}: no DMA region {region!r}")
        if direction == "out":
            if r.direction == "in":
                raise UnregisteredRegion(f"{region} is ingress only")
            env = self.node.channel(self.fdu, str(r.peer)).seal(self.node.memory.read(r.addr, r.length), op="dma_write", addr=device_addr)
            blob = env.to_bytes()
            if len(blob) > self.staging_len:
                raise AccessDenied("DMA larger than the staging buffer")
            self.node.host.write(self.staging_base, blob)
            dst = peer or r.peer
            labels = self.node.world.labels.jobs(self.node.memory.label_set(r.addr, r.length))
            hop = self.node.world.next_hop(self.fdu, dst)
            meta = {"op": "dma", "region": region, "to": str(dst)}
            self.node.world.send(Message(self.fdu, hop, MsgKind.DMA, env, frozenset(sorted(labels)), meta))
            return env
        if direction == "in":
            if r.direction == "out":
                raise UnregisteredRegion(f"{region} is egress only")
            if envelope is None:
                raise AuthFailure("ingress DMA needs an envelope")
            pt = self.node.mpe_in(self.fdu, envelope)
            if len(pt) > r.length:
                raise AccessDenied("DMA larger than the registered region")
            self.node.memory.write(r.addr, pt, self.node.world.labels.label(self.entry.owner))
            return pt
        raise ValueError("direction is 'in' or 'out'")

    def on_interrupt(self, msg: Message) -> None:
        # interrupts are unauthenticated; they may only trigger sealed driver paths
        region = msg.meta.get("region", "")
        target = msg.meta.get("target")
        self.driver_dma(region, "out", PrincipalId.parse(target) if target else None)

    def on_sealed(self, env: Envelope) -> None:
        head = env.header()
        pt = self.node.mpe_in(self.fdu, env)
        if head.get("op") == "reply":
            self.inbox[int(head.get("rid") or 0)] = pt

    def next_rid(self) -> int:
        self._rid += 1
        return self._rid

    def request(self, peer: PrincipalId, op: str, data: bytes = b"", step_limit: int | None = None, **extra) -> bytes:
        """Send a sealed request to a job peer and wait for its authenticated reply."""
        rid = self.next_rid()
        env = self.node.channel(self.fdu, str(peer)).seal(data, op=op, rid=rid, **extra)
        self.node.send(self.fdu, str(peer), MsgKind.DMA, env, self.entry.owner if data else None, op)
        self.node.world.run_until_quiescent(step_limit)
        if rid not in self.inbox:
            raise NoResponse(f"{op} to {peer} got no authenticated reply")
        return self.inbox.pop(rid)

    def _mapping(self, addr: int) -> MmioMapping:
        for m in self.mmio_map:
            if m.local_base <= addr < m.local_base + m.length:
                return m
        raise UnmappedAddress(f"{addr:#x} is not MMIO mapped")

    def driver_mmio(self, addr: int, op: str, value: int | None = None, step_limit: int | None = None):
        """Page-fault handler path: seal the access and forward it to the device."""
        m = self._mapping(addr)
        offset = m.device_offset + (addr - m.local_base)
        ch = self.node.channel(self.fdu, str(m.device))
        job = self.entry.owner
        if op == "store":
            env = ch.seal(int(value).to_bytes(8, "little", signed=False), op="store", addr=offset)
            self.node.send(self.fdu, str(m.device), MsgKind.MMIO_WRITE, env, job, "mmio")
            self.node.world.run_until_quiescent(step_limit)
            return None
        if op == "load":
            rid = self.next_rid()
            env = ch.seal(b"", op="load", addr=offset, rid=rid)
            self.node.send(self.fdu, str(m.device), MsgKind.MMIO_READ, env, None, "mmio")
            self.node.world.run_until_quiescent(step_limit)
            if rid not in self.inbox:
                raise NoResponse(f"MMIO load at {addr:#x} got no authenticated reply")
            return int.from_bytes(self.inbox.pop(rid), "little")
        raise ValueError("op is 'load' or 'store'")
