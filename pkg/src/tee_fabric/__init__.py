"""Deterministic simulator of a hybrid distributed TEE data center."""

from .capacity import ScCapacityParams, sc_capacity, transfer_overhead
from .errors import FabricError
from .fabric import PrincipalId, World
from .manifest import Manifest, parse_manifest, serialize_manifest, sign_manifest, verify_manifest
from .topology import Cluster, build_cluster, load_topology

__version__ = "0.1.0"

__all__ = [
    "Cluster",
    "FabricError",
    "Manifest",
    "PrincipalId",
    "ScCapacityParams",
    "World",
    "build_cluster",
    "load_topology",
    "parse_manifest",
    "sc_capacity",
    "serialize_manifest",
    "sign_manifest",
    "transfer_overhead",
    "verify_manifest",
]
