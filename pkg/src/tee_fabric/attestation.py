"""
Measured boot, hierarchical property-based attestation and report checking.

PCR 0 holds the firmware measurement and PCR 23 the property chain. A vendor
publishes a :class:`PbaTree` whose leaves (the PCR 23 value after every level
has been extended) are listed in a signed :class:`ConfigWhitelist` together
with the properties each leaf guarantees.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from . import crypto
from .crypto import ZERO_DIGEST, Digest, KeyPair
from .errors import NotBooted, NotInReset
from .manifest import POLICIES, Manifest, ResourceRequest, canonical_json, format_size

PCR_COUNT = 24
PCR_FIRMWARE = 0
PCR_PBA = 23


class PcrBank:
    def __init__(self):
        self._regs = [ZERO_DIGEST] * PCR_COUNT

    def __getitem__(self, i: int) -> Digest:
        return self._regs[i]

    def extend(self, index: int, value: Digest) -> Digest:
        self._regs[index] = crypto.extend(self._regs[index], value)
        return self._regs[index]

    def values(self) -> tuple[Digest, ...]:
        return tuple(self._regs)

    def reset(self) -> None:
        self._regs = [ZERO_DIGEST] * PCR_COUNT


@dataclass(frozen=True)
class PbaEvent:
    property_name: str
    outcome_value: Digest


@dataclass(frozen=True)
class PbaOutcome:
    label: str
    value: Digest
    implies: frozenset = frozenset()


def outcome(level: str, label: str, implies: Iterable[str] = ()) -> PbaOutcome:
    return PbaOutcome(label, crypto.hash_bytes(f"pba/{level}/{label}".encode()), frozenset(implies))


@dataclass(frozen=True)
class PbaTree:
    """Levels of mutually exclusive configuration outcomes; leaves are full paths."""

    levels: tuple[tuple[str, tuple[PbaOutcome, ...]], ...]

    def events_for(self, path: Sequence[str]) -> list[PbaEvent]:
        if len(path) != len(self.levels):
            raise ValueError(f"path needs {len(self.levels)} choices")
        events = []
        for (name, outcomes), choice in zip(self.levels, path):
            match = [o for o in outcomes if o.label == choice]
            if not match:
                raise ValueError(f"{name} has no outcome {choice!r}")
            events.append(PbaEvent(name, match[0].value))
        return events

    def properties_for(self, path: Sequence[str]) -> frozenset:
        props = set()
        for (_, outcomes), choice in zip(self.levels, path):
            props |= next(o.implies for o in outcomes if o.label == choice)
        return frozenset(props)

    def paths(self) -> list[tuple[str, ...]]:
        return list(itertools.product(*[[o.label for o in outs] for _, outs in self.levels]))

    def leaf(self, path: Sequence[str]) -> Digest:
        return crypto.extend_chain(e.outcome_value for e in self.events_for(path))

    def leaves(self) -> dict[Digest, tuple[str, ...]]:
        return {self.leaf(p): p for p in self.paths()}


def reference_tree() -> PbaTree:
    """Debug port {disabled, enabled} x isolation {core sep, mem sep}."""
    return PbaTree(
        (
            ("debug", (outcome("debug", "disabled"), outcome("debug", "enabled", {"debug"}))),
            (
                "isolation",
                (
                    outcome("isolation", "core_sep", {"coreIsolation"}),
                    outcome("isolation", "mem_sep", {"memIsolation", "sharedMemoryIsolation"}),
                ),
            ),
        )
    )


def device_tree(device_type: str) -> PbaTree:
    """Vendor configuration tree used for every device of a type."""
    debug = ("debug", (outcome("debug", "disabled"), outcome("debug", "enabled", {"debug"})))
    isolation = (
        "isolation",
        (
            outcome("isolation", "core_sep", {"coreIsolation"}),
            outcome("isolation", "mem_sep", {"memIsolation", "sharedMemoryIsolation"}),
            outcome("isolation", "full_sep", {"coreIsolation", "memIsolation", "sharedMemoryIsolation"}),
        ),
    )
    cache = (
        "cache",
        (
            outcome("cache", "partitioned", {"cachePartitioned", "privateCache", "sharedCacheIsolation"}),
            outcome("cache", "shared", {"sharedCache"}),
        ),
    )
    smt = ("smt", (outcome("smt", "no-HT", {"no-HT"}), outcome("smt", "ht")))
    rowhammer = ("dram", (outcome("dram", "trr", {"rowHammerMitigation"}), outcome("dram", "none")))
    # the device class is measured first so equal-shaped trees of different types never share leaves
    device = ("device", (outcome("device", device_type),))
    if device_type == "CPU":
        return PbaTree((device, debug, smt, isolation, cache, rowhammer))
    return PbaTree((device, debug, isolation, cache))


def default_path(device_type: str) -> tuple[str, ...]:
    if device_type == "CPU":
        return (device_type, "disabled", "no-HT", "full_sep", "partitioned", "trr")
    return (device_type, "disabled", "full_sep", "partitioned")


# ---------------------------------------------------------------------------
# Vendor-signed artefacts
# ---------------------------------------------------------------------------


@dataclass
class ConfigWhitelist:
    vendor_pub: bytes
    leaves: dict[Digest, dict] = field(default_factory=dict)
    firmware: dict[str, Digest] = field(default_factory=dict)
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return canonical_json(
            {
                "leaves": {k.hex(): v for k, v in sorted(self.leaves.items())},
                "firmware": {k: v.hex() for k, v in sorted(self.firmware.items())},
            }
        )

    def verify(self) -> bool:
        return crypto.verify(self.vendor_pub, self.signed_bytes(), self.signature)

    def describe(self, leaf: Digest) -> str | None:
        info = self.leaves.get(leaf)
        return None if info is None else "/".join(info["path"])


@dataclass
class RevocationList:
    issuer_pub: bytes
    entries: set[tuple[str, str]] = field(default_factory=set)
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return canonical_json(sorted(list(e) for e in self.entries))

    def verify(self) -> bool:
        return crypto.verify(self.issuer_pub, self.signed_bytes(), self.signature)

    def revoked(self, device_id: bytes, firmware_version: str, device_type: str = "") -> bool:
        return (
            ("device", device_id.hex()) in self.entries
            or ("firmware", firmware_version) in self.entries
            or ("firmware", f"{device_type}:{firmware_version}") in self.entries
        )


class Vendor:
    """Manufacturer root of trust: certifies devices, signs whitelists and revocations."""

    def __init__(self, name: str, key: KeyPair):
        self.name = name
        self.key = key
        self.whitelist = ConfigWhitelist(key.public)
        self.revocation = RevocationList(key.public)
        self._sign_whitelist()
        self._sign_revocation()

    @property
    def public(self) -> bytes:
        return self.key.public

    def certify(self, device_id: bytes, rot_pub: bytes, device_type: str) -> bytes:
        return rot_pub + crypto.sign(self.key, _cert_body(device_id, rot_pub, device_type, self.name))

    def publish_tree(self, device_type: str, tree: PbaTree) -> None:
        for path in tree.paths():
            self.whitelist.leaves[tree.leaf(path)] = {
                "device_type": device_type,
                "path": list(path),
                "properties": sorted(tree.properties_for(path)),
            }
        self._sign_whitelist()

    def publish_firmware(self, device_type: str, version: str, digest: Digest) -> None:
        self.whitelist.firmware[f"{device_type}:{version}"] = digest
        self._sign_whitelist()

    def revoke(self, kind: str, value: str) -> None:
        self.revocation.entries.add((kind, value))
        self._sign_revocation()

    def _sign_whitelist(self) -> None:
        self.whitelist.signature = crypto.sign(self.key, self.whitelist.signed_bytes())

    def _sign_revocation(self) -> None:
        self.revocation.signature = crypto.sign(self.key, self.revocation.signed_bytes())


def _cert_body(device_id: bytes, rot_pub: bytes, device_type: str, manufacturer: str) -> bytes:
    return b"cert|" + device_id + rot_pub + device_type.encode() + b"|" + manufacturer.encode()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FduConfig:
    base: int
    stream_id: bytes
    cores: int
    memory: int

    def to_doc(self) -> dict:
        return {"BAR": hex(self.base), "streamID": "0x" + self.stream_id.hex(), "core_config": self.cores, "memory": format_size(self.memory)}


@dataclass(frozen=True)
class AttestationReport:
    device_id: bytes
    public_key: bytes
    manufacturer: str
    firmware_version: str
    device_type: str
    security_properties: dict
    pcr_values: tuple
    policy_quote: bytes
    firmware_quote: bytes
    fdu_configs: tuple
    certificate: bytes
    challenge: bytes

    def policy_body(self) -> bytes:
        return _policy_body(self.device_id, self.public_key, self.security_properties, self.pcr_values[PCR_PBA], self.fdu_configs)

    def firmware_body(self) -> bytes:
        return _firmware_body(self.device_id, self.manufacturer, self.firmware_version, self.device_type, self.pcr_values)

    def to_doc(self) -> dict:
        return {
            "DeviceID": "0x" + self.device_id.hex(),
            "PublicKey": "0x" + self.public_key.hex(),
            "Manufacturer": self.manufacturer,
            "FirmwareVersion": self.firmware_version,
            "DeviceType": self.device_type,
            "SecurityProperties": dict(sorted(self.security_properties.items())),
            "Configuration": {f"PCR{i}": "0x" + v.hex() for i, v in enumerate(self.pcr_values)},
            "PolicyQuote": "0x" + self.policy_quote.hex(),
            "FDU": {
                "FDU_Support": bool(self.fdu_configs),
                "Numbers": len(self.fdu_configs),
                "Config": [c.to_doc() for c in self.fdu_configs],
            },
            "FirmwareQuote": "0x" + self.firmware_quote.hex(),
            "Certificate": "0x" + self.certificate.hex(),
            "Challenge": "0x" + self.challenge.hex(),
        }

    def to_json(self) -> bytes:
        return canonical_json(self.to_doc())

    @classmethod
    def from_doc(cls, doc: dict) -> "AttestationReport":
        from .manifest import parse_size

        h = lambda s: bytes.fromhex(s[2:] if s.startswith("0x") else s)  # noqa: E731
        cfg = doc["Configuration"]
        return cls(
            device_id=h(doc["DeviceID"]),
            public_key=h(doc["PublicKey"]),
            manufacturer=doc["Manufacturer"],
            firmware_version=doc["FirmwareVersion"],
            device_type=doc["DeviceType"],
            security_properties=dict(doc["SecurityProperties"]),
            pcr_values=tuple(h(cfg[f"PCR{i}"]) for i in range(PCR_COUNT)),
            policy_quote=h(doc["PolicyQuote"]),
            firmware_quote=h(doc["FirmwareQuote"]),
            fdu_configs=tuple(
                FduConfig(int(c["BAR"], 16), h(c["streamID"]), c["core_config"], parse_size(c["memory"]))
                for c in doc["FDU"]["Config"]
            ),
            certificate=h(doc["Certificate"]),
            challenge=h(doc["Challenge"]),
        )


def _policy_body(device_id, public_key, props, pcr23, fdu_configs) -> bytes:
    return crypto.hash_bytes(
        canonical_json(
            {
                "DeviceID": device_id.hex(),
                "PublicKey": public_key.hex(),
                "SecurityProperties": props,
                "PCR23": pcr23.hex(),
                "FDU": [c.to_doc() for c in fdu_configs],
            }
        )
    )


def _firmware_body(device_id, manufacturer, version, device_type, pcrs) -> bytes:
    return crypto.hash_bytes(
        canonical_json(
            {
                "DeviceID": device_id.hex(),
                "Manufacturer": manufacturer,
                "FirmwareVersion": version,
                "DeviceType": device_type,
                "Configuration": [p.hex() for p in pcrs],
            }
        )
    )


class AttestedDevice:
    """Anything with a hardware root of trust that boots measured and signs quotes."""

    def __init__(
        self,
        device_type: str,
        device_id: bytes,
        vendor: Vendor,
        rot: KeyPair,
        firmware_version: str,
        firmware_digest: Digest,
        tree: PbaTree | None = None,
        declared_path: Sequence[str] | None = None,
    ):
        self.device_type = device_type
        self.device_id = device_id
        self.vendor = vendor
        self.manufacturer = vendor.name
        self.rot = rot
        self.certificate = vendor.certify(device_id, rot.public, device_type)
        self.firmware_version = firmware_version
        self.firmware_digest = firmware_digest
        self.tree = tree or device_tree(device_type)
        self.declared_path = tuple(declared_path or default_path(device_type))
        self.pcr = PcrBank()
        self.booted = False

    def measured_boot(self, events: Sequence[PbaEvent] | None = None) -> PcrBank:
        if self.booted:
            raise NotInReset(f"{self.device_type} {self.device_id.hex()} already booted")
        if events is None:
            events = self.tree.events_for(self.declared_path)
        self.pcr.reset()
        self.pcr.extend(PCR_FIRMWARE, self.firmware_digest)
        for ev in events:
            self.pcr.extend(PCR_PBA, ev.outcome_value)
        self.booted = True
        return self.pcr

    def power_cycle(self) -> None:
        self.booted = False
        self.pcr.reset()

    def security_properties(self) -> dict:
        enforced = self.tree.properties_for(self.declared_path)
        return {p: p in enforced for p in sorted(POLICIES)}

    def fdu_configs(self, fdus=None) -> tuple:
        return ()

    def generate_report(self, challenge: bytes, public_key: bytes = b"", fdus=None) -> AttestationReport:
        if not self.booted:
            raise NotBooted(f"{self.device_type} {self.device_id.hex()} has not booted")
        props = self.security_properties()
        pcrs = self.pcr.values()
        configs = self.fdu_configs(fdus)
        policy_quote = crypto.sign(self.rot, b"policy|" + challenge + _policy_body(self.device_id, public_key, props, pcrs[PCR_PBA], configs))
        firmware_quote = crypto.sign(
            self.rot,
            b"firmware|" + challenge + _firmware_body(self.device_id, self.manufacturer, self.firmware_version, self.device_type, pcrs),
        )
        return AttestationReport(
            device_id=self.device_id,
            public_key=public_key,
            manufacturer=self.manufacturer,
            firmware_version=self.firmware_version,
            device_type=self.device_type,
            security_properties=props,
            pcr_values=pcrs,
            policy_quote=policy_quote,
            firmware_quote=firmware_quote,
            fdu_configs=configs,
            certificate=self.certificate,
            challenge=challenge,
        )


def measured_boot(node: AttestedDevice, pba_events: Sequence[PbaEvent]) -> PcrBank:
    return node.measured_boot(pba_events)


def generate_report(node: AttestedDevice, challenge: bytes, public_key: bytes = b"", fdus=None) -> AttestationReport:
    return node.generate_report(challenge, public_key, fdus)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


class RejectReason(enum.Enum):
    BAD_CERTIFICATE = "BadCertificate"
    BAD_QUOTE = "BadQuote"
    STALE = "Stale"
    REVOKED = "Revoked"
    BAD_MEASUREMENT = "BadMeasurement"
    POLICY_UNSATISFIED = "PolicyUnsatisfied"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: RejectReason | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.accepted


ACCEPT = Verdict(True)


def reject(reason: RejectReason, detail: str = "") -> Verdict:
    return Verdict(False, reason, detail)


def _rot_from_cert(report_cert: bytes) -> bytes:
    return report_cert[:32]


def check_certificate(device_id: bytes, device_type: str, manufacturer: str, certificate: bytes, vendor_pub: bytes) -> bool:
    rot_pub = _rot_from_cert(certificate)
    return len(certificate) == 96 and crypto.verify(
        vendor_pub, _cert_body(device_id, rot_pub, device_type, manufacturer), certificate[32:]
    )


def verify_report(
    report: AttestationReport,
    manifest: Manifest | None,
    whitelist: ConfigWhitelist,
    revocation: RevocationList | None,
    challenge: bytes,
    request: ResourceRequest | None = None,
) -> Verdict:
    """Accept iff every check passes; otherwise the first failing check."""
    if not whitelist.verify():
        return reject(RejectReason.BAD_CERTIFICATE, "whitelist signature invalid")
    if not check_certificate(report.device_id, report.device_type, report.manufacturer, report.certificate, whitelist.vendor_pub):
        return reject(RejectReason.BAD_CERTIFICATE, "device certificate does not chain to vendor")
    rot_pub = _rot_from_cert(report.certificate)
    if len(report.pcr_values) != PCR_COUNT:
        return reject(RejectReason.BAD_QUOTE, "wrong PCR count")
    if not crypto.verify(rot_pub, b"policy|" + report.challenge + report.policy_body(), report.policy_quote):
        return reject(RejectReason.BAD_QUOTE, "policy quote")
    if not crypto.verify(rot_pub, b"firmware|" + report.challenge + report.firmware_body(), report.firmware_quote):
        return reject(RejectReason.BAD_QUOTE, "firmware quote")
    if report.challenge != challenge:
        return reject(RejectReason.STALE, "challenge mismatch")
    if revocation is not None and revocation.revoked(report.device_id, report.firmware_version, report.device_type):
        return reject(RejectReason.REVOKED, report.device_id.hex())
    fw = whitelist.firmware.get(f"{report.device_type}:{report.firmware_version}")
    if fw is None or report.pcr_values[PCR_FIRMWARE] != crypto.extend(ZERO_DIGEST, fw):
        return reject(RejectReason.BAD_MEASUREMENT, "firmware measurement")
    leaf = whitelist.leaves.get(report.pcr_values[PCR_PBA])
    if leaf is None or leaf["device_type"] != report.device_type:
        return reject(RejectReason.BAD_MEASUREMENT, "PCR23 not whitelisted")
    claimed = sorted(k for k, v in report.security_properties.items() if v)
    if claimed != leaf["properties"]:
        return reject(RejectReason.BAD_MEASUREMENT, "properties disagree with measured configuration")
    if request is None and manifest is not None:
        matches = [r for r in manifest.resources if r.resource_type == report.device_type and r.tee]
        request = matches[0] if matches else None
        if request is None and report.device_type != "SC":
            return reject(RejectReason.POLICY_UNSATISFIED, f"manifest requests no {report.device_type}")
    if request is not None:
        missing = sorted(request.policies - set(claimed))
        if missing:
            return reject(RejectReason.POLICY_UNSATISFIED, f"missing {missing}")
        if request.resource_type != report.device_type:
            return reject(RejectReason.POLICY_UNSATISFIED, "device type")
        if len(report.fdu_configs) != 1:
            return reject(RejectReason.POLICY_UNSATISFIED, "expected exactly one FDU")
        cfg = report.fdu_configs[0]
        if cfg.cores < request.cores or cfg.memory < request.memory:
            return reject(RejectReason.POLICY_UNSATISFIED, f"FDU {cfg.cores} cores/{cfg.memory} B below request")
    return ACCEPT


# ---------------------------------------------------------------------------
# Evidence for SC-guarded nodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeEvidence:
    """The SC vouches for a node it has just reset."""

    node: str
    device_type: str
    cores: int
    memory: int
    firmware_digest: Digest
    sc_device_id: bytes
    challenge: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        return canonical_json(
            {
                "node": self.node,
                "device_type": self.device_type,
                "cores": self.cores,
                "memory": self.memory,
                "firmware": self.firmware_digest.hex(),
                "sc": self.sc_device_id.hex(),
                "challenge": self.challenge.hex(),
            }
        )


def sign_node_evidence(ev: NodeEvidence, sc_rot: KeyPair) -> NodeEvidence:
    return NodeEvidence(**{**ev.__dict__, "signature": crypto.sign(sc_rot, b"node|" + ev.body())})


def verify_node_evidence(
    ev: NodeEvidence,
    sc_report: AttestationReport,
    whitelist: ConfigWhitelist,
    challenge: bytes,
    request: ResourceRequest,
) -> Verdict:
    if ev.sc_device_id != sc_report.device_id:
        return reject(RejectReason.BAD_QUOTE, "evidence from a different SC")
    if not crypto.verify(_rot_from_cert(sc_report.certificate), b"node|" + ev.body(), ev.signature):
        return reject(RejectReason.BAD_QUOTE, "node evidence signature")
    if ev.challenge != challenge:
        return reject(RejectReason.STALE, "challenge mismatch")
    if whitelist.firmware.get(f"{ev.device_type}:factory") != ev.firmware_digest:
        return reject(RejectReason.BAD_MEASUREMENT, "node not at factory firmware")
    if ev.device_type != request.resource_type or ev.cores < request.cores or ev.memory < request.memory:
        return reject(RejectReason.POLICY_UNSATISFIED, "node does not match request")
    return ACCEPT


class ChallengeBook:
    """Single-use attestation challenges drawn from the world's generator."""

    def __init__(self, rng):
        self._rng = rng
        self._issued: dict[bytes, str] = {}
        self._used: set[bytes] = set()

    def issue(self, tenant: str) -> bytes:
        while True:
            nonce = self._rng.bytes(32)
            if nonce not in self._issued:
                self._issued[nonce] = tenant
                return nonce

    def consume(self, nonce: bytes) -> bool:
        """True exactly once per issued nonce."""
        if nonce not in self._issued or nonce in self._used:
            return False
        self._used.add(nonce)
        return True

    def is_fresh(self, nonce: bytes) -> bool:
        return nonce in self._issued and nonce not in self._used

    def expire_all(self) -> None:
        self._used.update(self._issued)


def issue_challenge(book: ChallengeBook, tenant: str) -> bytes:
    return book.issue(tenant)
