"""
Tenant-side job driver: submission, evidence verification, key distribution,
data exchange and termination.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from . import crypto
from .attestation import ChallengeBook, RejectReason, Vendor, verify_node_evidence, verify_report
from .crypto import Key256, KeyPair, ReplayGuard, SecureChannel
from .errors import (
    AttestationFailed,
    AuthFailure,
    CoverageGap,
    FabricError,
    ManifestInvalid,
    NoResponse,
    SchemaError,
    SessionNotRunning,
)
from .fabric import Message, MsgKind, PrincipalId, PrincipalKind, World, tenant_id
from .manifest import Manifest, verify_manifest
from .protocol import make_delivery


class SessionState(enum.IntEnum):
    SUBMITTED = 0
    ATTESTED = 1
    PROVISIONED = 2
    RUNNING = 3
    TERMINATED = 4


@dataclass
class Evidence:
    """What the management plane hands back for one job."""

    placement: dict = field(default_factory=dict)  # resource index -> PrincipalId (FDU or guarded node)
    fdu_reports: dict = field(default_factory=dict)  # FDU -> AttestationReport
    sc_reports: dict = field(default_factory=dict)  # SC -> AttestationReport
    node_evidence: dict = field(default_factory=dict)  # node -> (SC, NodeEvidence)


@dataclass
class JobSession:
    job: str
    manifest: Manifest
    tenant: PrincipalId
    challenge: bytes
    code_digest: bytes = b""
    state: SessionState = SessionState.SUBMITTED
    job_key: Key256 | None = None
    per_fdu_keys: dict = field(default_factory=dict)
    fdus: list = field(default_factory=list)
    nodes: list = field(default_factory=list)
    scs: list = field(default_factory=list)
    primary: PrincipalId | None = None
    evidence: Evidence | None = None
    guard: ReplayGuard = field(default_factory=ReplayGuard)

    @property
    def manifest_id(self) -> bytes:
        return self.manifest.manifest_id

    @property
    def members(self) -> list:
        return list(self.fdus) + list(self.nodes)

    def advance(self, state: SessionState) -> None:
        if state < self.state:
            raise ValueError(f"session cannot move from {self.state.name} back to {state.name}")
        self.state = state


class Tenant:
    def __init__(self, world: World, index: int, vendors: dict, manifest_keys: dict):
        self.world = world
        self.pid = tenant_id(index)
        self.vendors: dict[str, Vendor] = dict(vendors)
        self.manifest_keys: dict[str, bytes] = dict(manifest_keys)
        self.challenges = ChallengeBook(world.rng)
        self.sessions: dict[str, JobSession] = {}
        self.inbox: dict[tuple, bytes] = {}
        self._channels: dict[tuple, SecureChannel] = {}
        self._agreement: dict[str, KeyPair] = {}
        self._counter = 0
        self._rid = 0
        world.register(self.pid, self)

    # -- submission -----------------------------------------------------------

    def submit_job(self, manifest: Manifest, code: bytes = b"") -> JobSession:
        key = self.manifest_keys.get(manifest.vendor)
        if not manifest.signature or key is None or not verify_manifest(manifest, key):
            raise ManifestInvalid("manifest signature does not verify")
        try:
            manifest.primary_cpu_index()
        except SchemaError:
            raise ManifestInvalid("a job needs at least one CPU TEE resource") from None
        digest = crypto.hash_bytes(code) if code else b""
        if code and manifest.code_digests and digest not in manifest.code_digests:
            raise ManifestInvalid("code bundle digest is not listed in the manifest")
        self._counter += 1
        job = f"t{self.pid.index}j{self._counter}"
        session = JobSession(job, manifest, self.pid, self.challenges.issue(job), digest)
        self.sessions[job] = session
        self.world.record("job_submitted", job=job, tenant=str(self.pid), manifest=manifest.manifest_id.hex()[:16])
        return session

    # -- verification and provisioning ----------------------------------------

    def _vendor(self, name: str) -> Vendor:
        v = self.vendors.get(name)
        if v is None:
            raise AttestationFailed(RejectReason.BAD_CERTIFICATE, f"untrusted manufacturer {name}")
        return v

    def _check(self, session: JobSession, verdict, what: str) -> None:
        if not verdict:
            self.world.record("attestation_failed", job=session.job, what=what, reason=verdict.reason.value, detail=verdict.detail)
            raise AttestationFailed(verdict.reason, f"{what}: {verdict.detail}")
        self.world.record("report_accepted", job=session.job, what=what)

    def verify_and_provision(self, session: JobSession, evidence: Evidence) -> JobSession:
        if session.state != SessionState.SUBMITTED:
            raise SessionNotRunning(f"{session.job} is {session.state.name}")
        session.evidence = evidence
        try:
            self._verify(session, evidence)
        except FabricError:
            self.abort(session)
            raise
        session.advance(SessionState.ATTESTED)
        self._provision(session)
        return session

    def _verify(self, session: JobSession, evidence: Evidence) -> None:
        m = session.manifest
        challenge = session.challenge
        if not self.challenges.consume(challenge):
            raise AttestationFailed(RejectReason.STALE, "challenge already used")
        fdus, nodes, scs = [], [], set()
        for i, req in enumerate(m.resources):
            pid = evidence.placement.get(i)
            if pid is None:
                raise CoverageGap(f"resource {i} ({req.resource_type}) has no placement")
            if req.tee:
                report = evidence.fdu_reports.get(pid)
                if report is None or pid.kind != PrincipalKind.FDU:
                    raise CoverageGap(f"resource {i} has no FDU report")
                v = self._vendor(report.manufacturer)
                self._check(session, verify_report(report, m, v.whitelist, v.revocation, challenge, req), str(pid))
                if pid in fdus:
                    raise AttestationFailed(RejectReason.POLICY_UNSATISFIED, f"{pid} placed twice")
                fdus.append(pid)
            else:
                got = evidence.node_evidence.get(pid)
                if got is None:
                    raise CoverageGap(f"resource {i} has no node evidence")
                sc, ev = got
                sc_report = evidence.sc_reports.get(sc)
                if sc_report is None:
                    raise CoverageGap(f"{sc} sent no report")
                if sc not in scs:
                    v = self._vendor(sc_report.manufacturer)
                    self._check(session, verify_report(sc_report, m, v.whitelist, v.revocation, challenge), str(sc))
                    scs.add(sc)
                v = self._vendor(sc_report.manufacturer)
                if ev.node != str(pid):
                    raise AttestationFailed(RejectReason.BAD_QUOTE, f"evidence names {ev.node}, expected {pid}")
                self._check(session, verify_node_evidence(ev, sc_report, v.whitelist, challenge, req), str(pid))
                if pid in nodes:
                    raise AttestationFailed(RejectReason.POLICY_UNSATISFIED, f"{pid} placed twice")
                nodes.append(pid)
        session.fdus = fdus
        session.nodes = nodes
        session.scs = sorted(scs)
        session.primary = evidence.placement[m.primary_cpu_index()]

    def _agreement_key(self, session: JobSession) -> KeyPair:
        kp = self._agreement.get(session.job)
        if kp is None:
            kp = crypto.generate_keypair(self.world.random_bytes(32))
            self._agreement[session.job] = kp
        return kp

    def _provision(self, session: JobSession) -> None:
        w = self.world
        ev = session.evidence
        job = session.job
        # the job key exists only once every report has been accepted
        session.job_key = Key256(w.random_bytes(32), job=job, registry=w.keys)
        w.record("key_generated", job=job)
        peers = sorted([str(self.pid)] + [str(p) for p in session.fdus + session.nodes + session.scs])
        w.grant(job, self.pid, *session.fdus, *session.nodes, *session.scs)
        mine = self._agreement_key(session)
        recipients = [(f, ev.fdu_reports[f].public_key) for f in session.fdus]
        recipients += [(s, ev.sc_reports[s].public_key) for s in session.scs]
        for pid, public in recipients:
            delivery, shared = make_delivery(
                job, session.manifest_id, mine, public, session.job_key, peers, str(self.pid), str(pid), w.keys, w.backend
            )
            if pid.kind == PrincipalKind.FDU:
                session.per_fdu_keys[pid] = shared
            else:
                shared.zeroize()
            w.record("key_release", job=job, to=str(pid))
            w.send(Message(self.pid, pid, MsgKind.CONTROL, delivery.to_bytes(), frozenset(), {"op": "key_delivery"}))
        w.run_until_quiescent()
        missing = [str(p) for p in session.fdus if w.get(p.parent).entry(p).owner != job]
        missing += [str(s) for s in session.scs if job not in w.get(s).ert]
        if missing:
            self.abort(session)
            raise NoResponse(f"key installation did not complete on {missing}")
        session.advance(SessionState.PROVISIONED)
        session.advance(SessionState.RUNNING)
        w.record("job_running", job=job)

    def abort(self, session: JobSession) -> None:
        """Release whatever the evidence locked or the keys reached; all-or-nothing provisioning."""
        w = self.world
        ev = session.evidence
        if session.job_key is not None:
            for pid in session.fdus + session.scs:
                op = "release" if pid.kind == PrincipalKind.FDU else "terminate"
                env = self._channel(session, pid).seal(b"ABORT", op=op)
                w.send(Message(self.pid, pid, MsgKind.CONTROL, env, frozenset(), {"op": op}))
            w.run_until_quiescent()
        if ev is not None:
            for fdu in sorted(ev.fdu_reports):
                node = w.principals.get(fdu.parent)
                if node is not None and hasattr(node, "sm_abort"):
                    node.sm_abort(fdu, session.job)
            for sc in sorted(ev.sc_reports):
                ctl = w.principals.get(sc)
                if ctl is not None and hasattr(ctl, "abort_binding"):
                    ctl.abort_binding(session.job)
        self._forget(session)
        w.record("job_aborted", job=session.job)

    def _forget(self, session: JobSession) -> None:
        for k in list(session.per_fdu_keys.values()) + [session.job_key]:
            if k is not None:
                k.zeroize()
        session.per_fdu_keys = {}
        session.job_key = None
        self._agreement.pop(session.job, None)
        for key in [k for k in self._channels if k[0] == session.job]:
            del self._channels[key]
        session.state = SessionState.TERMINATED
        self.world.revoke_membership(session.job)

    # -- data exchange --------------------------------------------------------

    def _key_for(self, session: JobSession, peer: PrincipalId) -> Key256:
        if peer in session.per_fdu_keys and self.world.get(peer.parent).device_type == "CPU":
            return session.per_fdu_keys[peer]
        if session.job_key is None:
            raise SessionNotRunning(session.job)
        return session.job_key

    def _channel(self, session: JobSession, peer: PrincipalId) -> SecureChannel:
        key = self._key_for(session, peer)
        ch = self._channels.get((session.job, str(peer)))
        if ch is None or ch.key is not key:
            ch = SecureChannel(key, session.job, str(self.pid), str(peer), self.world.backend)
            self._channels[(session.job, str(peer))] = ch
        return ch

    def send_request(self, session: JobSession, target: PrincipalId, payload: bytes, op: str = "echo", **extra) -> int:
        if session.state != SessionState.RUNNING:
            raise SessionNotRunning(f"{session.job} is {session.state.name}")
        self._rid += 1
        env = self._channel(session, target).seal(payload, op=op, rid=self._rid, **extra)
        taint = frozenset({session.job}) if payload else frozenset()
        hop = self.world.next_hop(self.pid, target)
        self.world.send(Message(self.pid, hop, MsgKind.DMA, env, taint, {"op": op, "to": str(target)}))
        return self._rid

    def exchange(self, session: JobSession, target: PrincipalId, payload: bytes, op: str = "echo", **extra) -> bytes:
        rid = self.send_request(session, target, payload, op, **extra)
        self.world.run_until_quiescent()
        got = self.inbox.pop((session.job, rid), None)
        if got is None:
            raise NoResponse(f"{op} to {target} got no authenticated reply")
        return got

    def on_message(self, msg: Message) -> None:
        if not msg.sealed:
            if msg.taint:
                self.world.detector.check_exposure(self.pid, msg.taint, str(self.pid))
            raise AuthFailure(f"{self.pid} accepts sealed replies only")
        head = msg.payload.header()
        session = self.sessions.get(str(head.get("job")))
        if session is None or session.state != SessionState.RUNNING or head.get("dst") != str(self.pid):
            raise AuthFailure("reply for no running session")
        src = PrincipalId.parse(str(head.get("src")))
        pt = crypto.open_envelope(self._key_for(session, src), msg.payload, self.world.backend, session.guard)
        if head.get("op") == "reply":
            self.inbox[(session.job, int(head.get("rid") or 0))] = pt

    # -- termination ----------------------------------------------------------

    def terminate(self, session: JobSession) -> None:
        if session.state == SessionState.TERMINATED:
            return
        if session.state == SessionState.RUNNING and session.primary is not None:
            targets = sorted(str(p) for p in session.fdus + session.scs)
            env = self._channel(session, session.primary).seal(json.dumps(targets).encode(), op="terminate")
            self.world.send(Message(self.pid, session.primary, MsgKind.CONTROL, env, frozenset(), {"op": "terminate"}))
            self.world.run_until_quiescent()
        self._forget(session)
        self.world.record("job_terminated", job=session.job)
