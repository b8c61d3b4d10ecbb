"""Wire objects shared by the tenant, the security monitors and the SCs."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

from . import crypto
from .crypto import Envelope, Key256, KeyPair, KeyRegistry, SecureChannel
from .errors import AuthFailure


class Decision(enum.Enum):
    ALLOW = "Allow"
    DENY = "Deny"

    def __bool__(self) -> bool:
        return self is Decision.ALLOW


@dataclass(frozen=True)
class KeyDelivery:
    """Job key material sealed under a per-FDU (or per-SC) agreement key."""

    job: str
    manifest_id: bytes
    tenant_public: bytes
    envelope: Envelope

    def to_bytes(self) -> bytes:
        head = json.dumps(
            {"job": self.job, "manifest_id": self.manifest_id.hex(), "tenant_public": self.tenant_public.hex()},
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        return len(head).to_bytes(4, "big") + head + self.envelope.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyDelivery":
        try:
            n = int.from_bytes(data[:4], "big")
            head = json.loads(data[4 : 4 + n])
            env = Envelope.from_bytes(data[4 + n :])
            return cls(head["job"], bytes.fromhex(head["manifest_id"]), bytes.fromhex(head["tenant_public"]), env)
        except (ValueError, KeyError, TypeError) as exc:
            raise AuthFailure(f"malformed key delivery: {exc}") from None


def make_delivery(
    job: str,
    manifest_id: bytes,
    tenant_keys: KeyPair,
    recipient_public: bytes,
    job_key: Key256,
    peers: list[str],
    src: str,
    dst: str,
    registry: KeyRegistry,
    backend=None,
) -> tuple[KeyDelivery, Key256]:
    """Seal ``job_key`` and the member list for one recipient; returns the delivery and the shared key."""
    shared = crypto.derive_shared(tenant_keys, recipient_public, job=job, registry=registry)
    body = json.dumps({"job": job, "key": job_key.raw.hex(), "peers": sorted(peers)}, sort_keys=True).encode()
    # a dedicated channel name keeps provisioning nonces apart from later traffic under the same key
    env = SecureChannel(shared, job, src + "/provision", dst, backend).seal(body, op="key", manifest_id=manifest_id.hex())
    return KeyDelivery(job, manifest_id, tenant_keys.public, env), shared


def open_delivery(
    delivery: KeyDelivery,
    recipient: KeyPair,
    expected_job: str,
    registry: KeyRegistry,
    backend=None,
) -> tuple[Key256, Key256, list[str]]:
    """Returns (job key, per-recipient shared key, peers). Raises AuthFailure on any mismatch."""
    shared = crypto.derive_shared(recipient, delivery.tenant_public, job=expected_job, registry=registry)
    try:
        body = crypto.open_envelope(shared, delivery.envelope, backend)
    except AuthFailure:
        shared.zeroize()
        raise
    head = delivery.envelope.header()
    doc = json.loads(body)
    if doc.get("job") != expected_job or head.get("job") != expected_job or head.get("manifest_id") != delivery.manifest_id.hex():
        shared.zeroize()
        raise AuthFailure("key delivery bound to a different job or manifest")
    key = Key256(bytes.fromhex(doc["key"]), job=expected_job, registry=registry)
    return key, shared, list(doc["peers"])
