"""
The untrusted management plane: allocation, evidence collection and the
privileged-software actions an adversarial operator can take.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import FabricError, InsufficientResources, SchemaError
from .fabric import Message, MsgKind, PrincipalId, PrincipalKind, World, mp_id
from .manifest import Manifest, ResourceRequest
from .tenant import Evidence, JobSession

STRATEGIES = ("honest", "wrong_size", "pin")


@dataclass
class Placement:
    slots: dict = field(default_factory=dict)  # resource index -> PrincipalId
    honest: bool = True

    def __getitem__(self, i: int) -> PrincipalId:
        return self.slots[i]

    def items(self):
        return sorted(self.slots.items())


class ManagementPlane:
    """Allocator and orchestrator. Nothing here is trusted by tenants."""

    def __init__(self, world: World, cluster):
        self.world = world
        self.cluster = cluster
        self.pid = mp_id(0)
        self.assigned: dict[PrincipalId, str] = {}
        self.observed: list[bytes] = []
        world.register(self.pid, self)

    # -- allocation -----------------------------------------------------------

    def healthy(self, node) -> bool:
        """Firmware the vendor still lists and has not revoked."""
        v = self.cluster.vendor
        key = f"{node.device_type}:{node.firmware_version}"
        return key in v.whitelist.firmware and not v.revocation.revoked(node.device_id, node.firmware_version, node.device_type)

    def _free_fdus(self, req: ResourceRequest, ignore_size: bool = False) -> list:
        out = []
        for node in self.cluster.tee_nodes.values():
            if node.device_type != req.resource_type or not self.healthy(node):
                continue
            for e in node.fmt:
                if not e.free:
                    continue
                if ignore_size or (len(e.cores) >= req.cores and e.length >= req.memory):
                    out.append((e.length, len(e.cores), e.fdu))
        return [f for _, _, f in sorted(out)]

    def _free_guarded(self, req: ResourceRequest) -> list:
        out = []
        for pid, node in sorted(self.cluster.guarded.items()):
            sc = self.cluster.scs[node.sc]
            if node.device_type != req.resource_type or sc._bound(pid):
                continue
            if node.cores >= req.cores and node.memory.size >= req.memory:
                out.append(pid)
        return out

    def allocate(self, manifest: Manifest, job: str = "", strategy: str = "honest", **params) -> Placement:
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        placement = Placement(honest=strategy == "honest")
        pinned = {int(k): (v if isinstance(v, PrincipalId) else PrincipalId.parse(v)) for k, v in params.get("pin", {}).items()}
        taken: set = set()
        for i, req in enumerate(manifest.resources):
            if i in pinned:
                placement.slots[i] = pinned[i]
                continue
            pool = self._free_fdus(req, strategy == "wrong_size") if req.tee else self._free_guarded(req)
            pool = [p for p in pool if p not in taken]
            if not pool:
                raise InsufficientResources(f"no free {req.resource_type} for resource {i}")
            placement.slots[i] = pool[0]
            taken.add(pool[0])
        for pid in placement.slots.values():
            self.assigned[pid] = job
        self.world.record("mp_allocate", job=job, strategy=strategy, slots={str(i): str(p) for i, p in placement.items()})
        return placement

    def release(self, job: str) -> None:
        for pid in [p for p, j in self.assigned.items() if j == job]:
            del self.assigned[pid]

    def collect_evidence(self, session: JobSession, placement: Placement) -> Evidence:
        """Ask every SM and SC for fresh evidence; abort partial locks on failure."""
        ev = Evidence(placement=dict(placement.slots))
        locked = []
        groups: dict[PrincipalId, list] = {}
        try:
            for i, pid in placement.items():
                if pid.kind == PrincipalKind.FDU:
                    node = self.world.get(pid.parent)
                    if pid not in ev.fdu_reports:
                        ev.fdu_reports[pid] = node.sm_allocate_fdu(pid, session.job, session.challenge)
                        locked.append(pid)
                else:
                    sc = self.world.attached_to.get(pid)
                    if sc is None:
                        raise InsufficientResources(f"{pid} is not a guarded node")
                    groups.setdefault(sc, []).append(pid)
            for sc_pid, nodes in sorted(groups.items()):
                sc = self.world.get(sc_pid)
                report, evidence = sc.bind_job(session.manifest, nodes, session.challenge, session.job)
                ev.sc_reports[sc_pid] = report
                for item in evidence:
                    ev.node_evidence[PrincipalId.parse(item.node)] = (sc_pid, item)
        except FabricError:
            for pid in locked:
                self.world.get(pid.parent).sm_abort(pid, session.job)
            for sc_pid in ev.sc_reports:
                self.world.get(sc_pid).abort_binding(session.job)
            self.release(session.job)
            raise
        return ev

    def deploy(self, tenant, manifest: Manifest, code: bytes = b"", strategy: str = "honest", **params) -> JobSession:
        """submit, allocate, collect, verify and provision in one call."""
        session = tenant.submit_job(manifest, code)
        placement = self.allocate(manifest, session.job, strategy, **params)
        evidence = self.collect_evidence(session, placement)
        try:
            tenant.verify_and_provision(session, evidence)
        except FabricError:
            self.release(session.job)
            raise
        return session

    # -- adversarial operator actions -----------------------------------------

    def push_config(self, node: PrincipalId, config: dict) -> None:
        sc = self.world.attached_to[node]
        body = json.dumps(config, sort_keys=True).encode()
        self.world.send(Message(self.pid, sc, MsgKind.CONTROL, body, frozenset(), {"op": "push_config", "node": str(node)}))
        self.world.run_until_quiescent()

    def reset_node(self, node: PrincipalId) -> None:
        sc = self.world.attached_to[node]
        self.world.send(Message(self.pid, sc, MsgKind.CONTROL, b"", frozenset(), {"op": "reset", "node": str(node)}))
        self.world.run_until_quiescent()

    def fake_interrupt(self, fdu: PrincipalId, region: str, target: PrincipalId | None = None) -> None:
        meta = {"region": region}
        if target is not None:
            meta["target"] = str(target)
        self.world.send(Message(self.pid, fdu, MsgKind.INTERRUPT, b"", frozenset(), meta))
        self.world.run_until_quiescent()

    def on_message(self, msg: Message) -> None:
        data = msg.payload_bytes()
        self.observed.append(data)
        if msg.taint and not msg.sealed:
            self.world.detector.check_exposure(self.pid, msg.taint, str(self.pid))
        self.world.detector.check_observed(data, str(self.pid))
        if msg.kind is MsgKind.CONTROL and msg.meta.get("op") == "nodes_free" and not msg.sealed:
            # unauthenticated bookkeeping hint; availability comes from device state anyway
            try:
                names = [PrincipalId.parse(n) for n in json.loads(data)["nodes"]]
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaError(f"malformed nodes_free notice: {exc}") from None
            for pid in names:
                self.assigned.pop(pid, None)
            self.world.record("mp_nodes_free", count=len(names))
