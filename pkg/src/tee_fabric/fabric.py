"""
Deterministic discrete-event message fabric.

A :class:`World` owns every principal, the event queue, the trace, attacker
taps and the leak detector. Messages are delivered in ``(tick, sender index,
send order)`` order; the trace is a pure function of topology, scenario and
seed.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable

import numpy as np

from .crypto import Envelope, KeyRegistry, get_backend, hash_bytes
from .errors import FabricError, NoRoute, StepLimitExceeded, TamperProof, UnknownPrincipal
from .taint import LabelTable, TaintRegistry, Violation

DEFAULT_STEP_LIMIT = 1_000_000


class PrincipalKind(enum.IntEnum):
    TENANT = 0
    MP = 1
    SC = 2
    NODE = 3
    FDU = 4


_KIND_NAMES = {
    PrincipalKind.TENANT: "tenant",
    PrincipalKind.MP: "mp",
    PrincipalKind.SC: "sc",
    PrincipalKind.NODE: "node",
    PrincipalKind.FDU: "fdu",
}
_NAME_KINDS = {v: k for k, v in _KIND_NAMES.items()}


@dataclass(frozen=True, order=True)
class PrincipalId:
    kind: PrincipalKind
    index: int
    sub: int = -1  # FDU index on its parent node

    def __post_init__(self):
        if (self.kind == PrincipalKind.FDU) != (self.sub >= 0):
            raise ValueError("only FDU ids carry a sub-index")

    @property
    def parent(self) -> "PrincipalId | None":
        if self.kind == PrincipalKind.FDU:
            return PrincipalId(PrincipalKind.NODE, self.index)
        return None

    def __str__(self) -> str:
        name = _KIND_NAMES[self.kind]
        if self.kind == PrincipalKind.FDU:
            return f"{name}:{self.index}.{self.sub}"
        return f"{name}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "PrincipalId":
        try:
            name, rest = text.split(":", 1)
            kind = _NAME_KINDS[name]
            if kind == PrincipalKind.FDU:
                a, b = rest.split(".", 1)
                return cls(kind, int(a), int(b))
            return cls(kind, int(rest))
        except (ValueError, KeyError):
            raise UnknownPrincipal(f"cannot parse principal {text!r}") from None


def tenant_id(i: int) -> PrincipalId:
    return PrincipalId(PrincipalKind.TENANT, i)


def node_id(i: int) -> PrincipalId:
    return PrincipalId(PrincipalKind.NODE, i)


def fdu_id(node: int, sub: int) -> PrincipalId:
    return PrincipalId(PrincipalKind.FDU, node, sub)


def sc_id(i: int) -> PrincipalId:
    return PrincipalId(PrincipalKind.SC, i)


def mp_id(i: int = 0) -> PrincipalId:
    return PrincipalId(PrincipalKind.MP, i)


class Trust(enum.Enum):
    SHIELDED = "ShieldedContainer"
    OPEN = "Open"


@dataclass(frozen=True)
class Link:
    endpoints: tuple[PrincipalId, PrincipalId]
    trust: Trust

    @classmethod
    def between(cls, a: PrincipalId, b: PrincipalId, trust: Trust) -> "Link":
        return cls(tuple(sorted((a, b))), trust)

    def __str__(self) -> str:
        return f"{self.endpoints[0]}<->{self.endpoints[1]}"


class MsgKind(enum.Enum):
    MMIO_READ = "MmioRead"
    MMIO_WRITE = "MmioWrite"
    DMA = "Dma"
    INTERRUPT = "Interrupt"
    CONTROL = "Control"
    ATT_CHALLENGE = "AttChallenge"
    ATT_RESPONSE = "AttResponse"


@dataclass(frozen=True)
class Message:
    src: PrincipalId
    dst: PrincipalId
    kind: MsgKind
    payload: bytes | Envelope = b""
    taint: frozenset = frozenset()
    meta: dict = field(default_factory=dict, compare=False)

    def payload_bytes(self) -> bytes:
        return self.payload.to_bytes() if isinstance(self.payload, Envelope) else bytes(self.payload)

    @property
    def sealed(self) -> bool:
        return isinstance(self.payload, Envelope)


@dataclass(frozen=True)
class DeliveryReceipt:
    seq: int
    due: int
    link: Link


@dataclass
class TraceEvent:
    tick: int
    event: str
    fields: dict

    def to_json(self) -> str:
        body = {"tick": self.tick, "event": self.event}
        for k in sorted(self.fields):
            body[k] = self.fields[k]
        return json.dumps(body, separators=(",", ":"), default=str)


class Trace(list):
    def to_jsonl(self) -> str:
        return "".join(ev.to_json() + "\n" for ev in self)

    def events(self, name: str) -> list[TraceEvent]:
        return [ev for ev in self if ev.event == name]


class Tap:
    """An attacker probe on an Open link."""

    def __init__(self, world: "World", link: Link):
        self.world = world
        self.link = link
        self.observed: list[Message] = []
        self.intercept: Callable[[Message], Iterable[Message]] | None = None
        self.held: list[Message] = []

    def observe(self, msg: Message) -> list[Message]:
        self.observed.append(msg)
        if self.intercept is None:
            return [msg]
        return list(self.intercept(msg))

    def inject(self, msg: Message) -> DeliveryReceipt:
        return self.world.send(msg, injected=True)

    def replay(self, index: int = -1, dst: PrincipalId | None = None) -> DeliveryReceipt:
        msg = self.observed[index]
        if dst is not None:
            msg = replace(msg, dst=dst)
        return self.inject(msg)

    def hold(self, msg: Message) -> list[Message]:
        """Intercept helper: delay ``msg`` until :meth:`release`."""
        self.held.append(msg)
        return []

    def release(self, reverse: bool = False) -> None:
        held, self.held = self.held, []
        for m in reversed(held) if reverse else held:
            self.inject(m)

    def observed_bytes(self) -> bytes:
        return b"".join(m.payload_bytes() for m in self.observed)


class LeakDetector:
    """Audits Open-link traffic and memory exposure against job membership."""

    def __init__(self, world: "World"):
        self.world = world
        self.violations: list[Violation] = []

    def flag(self, kind: str, where: str, jobs: Iterable[str] = (), detail: str = "") -> None:
        self.violations.append(Violation(self.world.tick, kind, where, sorted(jobs), detail))
        self.world.record("violation", kind=kind, where=where, jobs=sorted(jobs), detail=detail)

    def check_transit(self, msg: Message, link: Link) -> None:
        if msg.taint and not msg.sealed:
            self.flag("plaintext_on_open_link", str(link), msg.taint, f"{msg.kind.value} {msg.src}->{msg.dst}")
        hits = self.world.taint.scan(msg.payload_bytes())
        if hits:
            self.flag("tainted_bytes_on_open_link", str(link), hits, f"{sum(hits.values())} windows")

    def check_exposure(self, principal: PrincipalId, jobs: Iterable[str], where: str = "") -> None:
        bad = [j for j in jobs if principal not in self.world.job_members.get(j, ())]
        if bad:
            self.flag("unauthorized_exposure", where or str(principal), bad)

    def check_observed(self, data: bytes, where: str) -> None:
        hits = self.world.taint.scan(data)
        if hits:
            self.flag("attacker_observed_plaintext", where, hits)

    @property
    def clean(self) -> bool:
        return not self.violations


@dataclass(order=True)
class _Queued:
    due: int
    order: tuple
    seq: int
    msg: Message = field(compare=False)
    link: Link = field(compare=False)
    injected: bool = field(compare=False, default=False)


class World:
    """One simulation: principals, event loop, trace, taps and detector."""

    def __init__(self, seed: int = 0, backend: str = "test", step_limit: int = DEFAULT_STEP_LIMIT):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.backend = get_backend(backend)
        self.step_limit = step_limit
        self.keys = KeyRegistry()
        self.labels = LabelTable()
        self.taint = TaintRegistry(np.random.default_rng([seed, 0x7A1]), self.labels)
        self.detector = LeakDetector(self)
        self.principals: dict[PrincipalId, Any] = {}
        self.attached_to: dict[PrincipalId, PrincipalId] = {}
        self.job_members: dict[str, set[PrincipalId]] = {}
        self.trace = Trace()
        self.rejections: list[tuple[int, PrincipalId, str, str]] = []
        self.taps: dict[Link, list[Tap]] = {}
        self.tick = 0
        self._queue: list[_Queued] = []
        self._seq = 0
        self.attacker_knowledge: list[bytes] = []

    # -- registry -------------------------------------------------------------

    def register(self, pid: PrincipalId, handler: Any) -> None:
        self.principals[pid] = handler

    def attach(self, node: PrincipalId, sc: PrincipalId) -> None:
        self.attached_to[node] = sc

    def get(self, pid: PrincipalId) -> Any:
        try:
            return self.principals[pid]
        except KeyError:
            raise UnknownPrincipal(str(pid)) from None

    def exists(self, pid: PrincipalId) -> bool:
        if pid in self.principals:
            return True
        return pid.kind == PrincipalKind.FDU and pid.parent in self.principals

    def grant(self, job: str, *principals: PrincipalId) -> None:
        self.job_members.setdefault(job, set()).update(principals)

    def revoke_membership(self, job: str) -> None:
        self.job_members.pop(job, None)

    def random_bytes(self, n: int) -> bytes:
        return self.rng.bytes(n)

    # -- links ----------------------------------------------------------------

    @staticmethod
    def endpoint(pid: PrincipalId) -> PrincipalId:
        return pid.parent if pid.kind == PrincipalKind.FDU else pid

    def link_between(self, src: PrincipalId, dst: PrincipalId) -> Link:
        a, b = self.endpoint(src), self.endpoint(dst)
        if a == b:
            return Link.between(a, b, Trust.SHIELDED)
        sa, sb = self.attached_to.get(a), self.attached_to.get(b)
        if sa is not None or sb is not None:
            if sa == b or sb == a:
                return Link.between(a, b, Trust.SHIELDED)
            raise NoRoute(f"{a} and {b} share no physical link")
        return Link.between(a, b, Trust.OPEN)

    def next_hop(self, src: PrincipalId, dst: PrincipalId) -> PrincipalId:
        """Guarded nodes are reached through their SC unless the sender is that SC."""
        sc = self.attached_to.get(self.endpoint(dst))
        if sc is not None and self.endpoint(src) != sc:
            return sc
        return dst

    def tap(self, a: PrincipalId, b: PrincipalId) -> Tap:
        link = self.link_between(a, b)
        if link.trust is Trust.SHIELDED:
            raise TamperProof(f"{link} is inside a shielded container")
        t = Tap(self, link)
        self.taps.setdefault(link, []).append(t)
        return t

    def open_links(self) -> list[Link]:
        pids = sorted({self.endpoint(p) for p in self.principals})
        links = []
        for i, a in enumerate(pids):
            for b in pids[i + 1 :]:
                try:
                    link = self.link_between(a, b)
                except NoRoute:
                    continue
                if link.trust is Trust.OPEN:
                    links.append(link)
        return links

    # -- events ---------------------------------------------------------------

    def record(self, event: str, **fields) -> None:
        self.trace.append(TraceEvent(self.tick, event, fields))

    def send(self, msg: Message, injected: bool = False) -> DeliveryReceipt:
        if not injected and not self.exists(msg.src):
            raise UnknownPrincipal(str(msg.src))
        if not self.exists(msg.dst):
            raise UnknownPrincipal(str(msg.dst))
        link = self.link_between(msg.src, msg.dst)
        if injected and link.trust is Trust.SHIELDED:
            raise TamperProof(f"cannot inject on {link}")
        outgoing = [msg]
        if link.trust is Trust.OPEN:
            self.detector.check_transit(msg, link)
            if not injected:
                for t in self.taps.get(link, ()):
                    nxt = []
                    for m in outgoing:
                        self.attacker_knowledge.append(m.payload_bytes())
                        nxt.extend(t.observe(m))
                    outgoing = nxt
        receipt = None
        for m in outgoing:
            self._seq += 1
            due = self.tick + 1
            order = (self.endpoint(m.src).kind, m.src.index, m.src.sub)
            heapq.heappush(self._queue, _Queued(due, order, self._seq, m, link, injected or m is not msg))
            self.record(
                "send",
                src=str(m.src),
                dst=str(m.dst),
                kind=m.kind.value,
                link=link.trust.value,
                bytes=len(m.payload_bytes()),
                digest=hash_bytes(m.payload_bytes()).hex()[:16],
                sealed=m.sealed,
                taint=sorted(m.taint),
                injected=injected or m is not msg,
                meta=m.meta,
            )
            receipt = receipt or DeliveryReceipt(self._seq, due, link)
        if receipt is None:
            self.record("dropped", src=str(msg.src), dst=str(msg.dst), kind=msg.kind.value)
            receipt = DeliveryReceipt(-1, -1, link)
        return receipt

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> bool:
        if not self._queue:
            return False
        item = heapq.heappop(self._queue)
        self.tick = max(self.tick, item.due)
        msg = item.msg
        handler = self.principals.get(msg.dst) or self.principals.get(self.endpoint(msg.dst))
        self.record("deliver", src=str(msg.src), dst=str(msg.dst), kind=msg.kind.value, seq=item.seq)
        try:
            handler.on_message(msg)
        except FabricError as exc:
            self.rejections.append((self.tick, msg.dst, exc.code, str(exc)))
            self.record("rejected", dst=str(msg.dst), src=str(msg.src), code=exc.code, kind=msg.kind.value)
        return True

    def run_until_quiescent(self, step_limit: int | None = None) -> Trace:
        limit = self.step_limit if step_limit is None else step_limit
        steps = 0
        while self._queue:
            if steps >= limit:
                raise StepLimitExceeded(f"more than {limit} events")
            self.step()
            steps += 1
        return self.trace

    def rejection_codes(self, since: int = 0) -> list[str]:
        return [code for (_, _, code, _) in self.rejections[since:]]

    def trace_jsonl(self) -> str:
        return self.trace.to_jsonl()

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.trace_jsonl())
