"""
Job manifests: parsing, canonical serialization, signing and verification.

File format (JSON)::

    {"Enclave": "Enclave1", "Enclave Vendor": "Vendor1", "Version": "X.YZ",
     "Resource": [
        {"Resource type": "CPU", "Policies": ["no-HT"], "Cores": 2, "Memory": "256M"},
        {"Resource type": "AI_Accelerator", "Policies": ["memIsolation", "cachePartitioned"],
         "Cores": 20, "Memory": "16G"}],
     "Code": ["<hex digest per resource>", ...],
     "SHA-3": "<hex>", "Sig": "<hex>"}

``Code`` is optional. Each resource may carry ``"Kind": "NonTEE"`` to request
a node guarded by a Security Controller; the default is a TEE FDU.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from . import crypto
from .crypto import Digest, KeyPair
from .errors import SchemaError, UnknownPolicy, UnknownResourceType

RESOURCE_TYPES = ("CPU", "AI_Accelerator", "GPU", "FPGA", "SSD")

POLICIES = frozenset(
    {
        "no-HT",
        "memIsolation",
        "cachePartitioned",
        "debug",
        "coreIsolation",
        "privateCache",
        "sharedCache",
        "sharedCacheIsolation",
        "sharedMemoryIsolation",
        "rowHammerMitigation",
    }
)

KINDS = ("FDU", "NonTEE")

_SIZE_RE = re.compile(r"^\s*(\d+)\s*([KMG]?)B?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "K": 1 << 10, "M": 1 << 20, "G": 1 << 30}


def parse_size(value) -> int:
    """``256M`` -> 268435456; plain integers are bytes."""
    if isinstance(value, bool):
        raise SchemaError("memory size must be an integer or a K/M/G string")
    if isinstance(value, int):
        return value
    if isinstance(value, str):
        m = _SIZE_RE.match(value)
        if m:
            return int(m.group(1)) * _UNITS[m.group(2).upper()]
    raise SchemaError(f"bad memory size {value!r}")


def format_size(n: int) -> str:
    for suffix in ("G", "M", "K"):
        unit = _UNITS[suffix]
        if n % unit == 0 and n >= unit:
            return f"{n // unit}{suffix}"
    return str(n)


def _hex(value, field_name: str) -> bytes:
    if not isinstance(value, str):
        raise SchemaError(f"{field_name} must be a hex string")
    text = value[2:] if value.lower().startswith("0x") else value
    try:
        return bytes.fromhex(text)
    except ValueError:
        raise SchemaError(f"{field_name} is not valid hex") from None


@dataclass(frozen=True)
class ResourceRequest:
    resource_type: str
    policies: frozenset = frozenset()
    cores: int = 1
    memory: int = 0
    kind: str = "FDU"

    @property
    def tee(self) -> bool:
        return self.kind == "FDU"

    def to_doc(self) -> dict:
        doc = {
            "Resource type": self.resource_type,
            "Policies": sorted(self.policies),
            "Cores": self.cores,
            "Memory": self.memory,
        }
        if self.kind != "FDU":
            doc["Kind"] = self.kind
        return doc


@dataclass(frozen=True)
class Manifest:
    enclave_name: str
    vendor: str
    version: str
    resources: tuple[ResourceRequest, ...]
    code_digests: tuple[Digest, ...] = ()
    digest: Digest = b""
    signature: bytes = b""

    def body_doc(self) -> dict:
        doc = {
            "Enclave": self.enclave_name,
            "Enclave Vendor": self.vendor,
            "Version": self.version,
            "Resource": [r.to_doc() for r in self.resources],
        }
        if self.code_digests:
            doc["Code"] = [d.hex() for d in self.code_digests]
        return doc

    def to_doc(self) -> dict:
        doc = self.body_doc()
        doc["SHA-3"] = self.digest.hex()
        doc["Sig"] = self.signature.hex()
        return doc

    def body_bytes(self) -> bytes:
        return canonical_json(self.body_doc())

    @property
    def manifest_id(self) -> Digest:
        return crypto.hash_bytes(canonical_json(self.to_doc()))

    def primary_cpu_index(self) -> int:
        for i, r in enumerate(self.resources):
            if r.resource_type == "CPU" and r.tee:
                return i
        raise SchemaError("manifest has no CPU TEE resource")


def canonical_json(doc) -> bytes:
    """Sorted keys, no insignificant whitespace, UTF-8."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def _require(doc: dict, key: str, typ, where: str = "manifest"):
    if key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = doc[key]
    if not isinstance(value, typ) or isinstance(value, bool) and typ is not bool:
        raise SchemaError(f"{where}: field {key!r} has wrong type")
    return value


def _parse_resource(i: int, doc) -> ResourceRequest:
    where = f"Resource[{i}]"
    if not isinstance(doc, dict):
        raise SchemaError(f"{where} must be an object")
    rtype = _require(doc, "Resource type", str, where)
    if rtype not in RESOURCE_TYPES:
        raise UnknownResourceType(f"{where}: {rtype!r}")
    policies = doc.get("Policies", [])
    if not isinstance(policies, list) or not all(isinstance(p, str) for p in policies):
        raise SchemaError(f"{where}: Policies must be a list of strings")
    unknown = sorted(set(policies) - POLICIES)
    if unknown:
        raise UnknownPolicy(f"{where}: {', '.join(unknown)}")
    cores = _require(doc, "Cores", int, where)
    if "Memory" not in doc:
        raise SchemaError(f"{where}: missing field 'Memory'")
    memory = parse_size(doc["Memory"])
    if cores <= 0 or memory <= 0:
        raise SchemaError(f"{where}: cores and memory must be positive")
    kind = doc.get("Kind", "FDU")
    if kind not in KINDS:
        raise SchemaError(f"{where}: Kind must be one of {KINDS}")
    return ResourceRequest(rtype, frozenset(policies), cores, memory, kind)


def manifest_from_doc(doc) -> Manifest:
    if not isinstance(doc, dict):
        raise SchemaError("manifest must be a JSON object")
    name = _require(doc, "Enclave", str)
    vendor = _require(doc, "Enclave Vendor", str)
    version = _require(doc, "Version", str)
    res = _require(doc, "Resource", list)
    if not res:
        raise SchemaError("manifest requests no resources")
    resources = tuple(_parse_resource(i, r) for i, r in enumerate(res))
    code = doc.get("Code", [])
    if not isinstance(code, list):
        raise SchemaError("Code must be a list of digests")
    code_digests = tuple(_hex(c, "Code") for c in code)
    if any(len(c) != crypto.DIGEST_SIZE for c in code_digests):
        raise SchemaError("Code digests must be 32 bytes")
    if code_digests and len(code_digests) != len(resources):
        raise SchemaError("Code needs one digest per resource")
    digest = _hex(doc["SHA-3"], "SHA-3") if "SHA-3" in doc else b""
    sig = _hex(doc["Sig"], "Sig") if "Sig" in doc else b""
    return Manifest(name, vendor, version, resources, code_digests, digest, sig)


def parse_manifest(data: bytes | str) -> Manifest:
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not JSON: {exc}") from None
    return manifest_from_doc(doc)


def serialize_manifest(m: Manifest) -> bytes:
    return canonical_json(m.to_doc())


def sign_manifest(m: Manifest, vendor_key: KeyPair) -> Manifest:
    digest = crypto.hash_bytes(m.body_bytes())
    return Manifest(
        m.enclave_name,
        m.vendor,
        m.version,
        m.resources,
        m.code_digests,
        digest,
        crypto.sign(vendor_key, digest),
    )


def verify_manifest(m: Manifest, vendor_pub: bytes) -> bool:
    if crypto.hash_bytes(m.body_bytes()) != m.digest:
        return False
    return crypto.verify(vendor_pub, m.digest, m.signature)


def example_manifest() -> Manifest:
    """The two-resource example: a 2-core CPU FDU and a 20-core AI accelerator FDU."""
    return manifest_from_doc(
        {
            "Enclave": "Enclave1",
            "Enclave Vendor": "Vendor1",
            "Version": "X.YZ",
            "Resource": [
                {"Resource type": "CPU", "Policies": ["no-HT"], "Cores": 2, "Memory": "256M"},
                {
                    "Resource type": "AI_Accelerator",
                    "Policies": ["memIsolation", "cachePartitioned"],
                    "Cores": 20,
                    "Memory": "16G",
                },
            ],
        }
    )


@dataclass
class ManifestBuilder:
    """Small helper for assembling manifests in code."""

    enclave_name: str = "Enclave1"
    vendor: str = "Vendor1"
    version: str = "X.YZ"
    resources: list = field(default_factory=list)

    def add(self, resource_type: str, cores: int, memory, policies=(), kind: str = "FDU") -> "ManifestBuilder":
        self.resources.append(
            _parse_resource(
                len(self.resources),
                {"Resource type": resource_type, "Policies": list(policies), "Cores": cores, "Memory": memory, "Kind": kind},
            )
        )
        return self

    def build(self, vendor_key: KeyPair | None = None) -> Manifest:
        if not self.resources:
            raise SchemaError("manifest requests no resources")
        m = Manifest(self.enclave_name, self.vendor, self.version, tuple(self.resources))
        return sign_manifest(m, vendor_key) if vendor_key is not None else m
