"""
Cluster construction from a topology document, plus global audits.

See ``docs/topology_schema.md`` for the file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .attestation import Vendor, device_tree
from .errors import ConfigError, FabricError
from .fabric import PrincipalId, World
from .manifest import RESOURCE_TYPES, Manifest, parse_size, sign_manifest
from .sc import DEFAULT_BUFFER, DEFAULT_STAGING, NonTeeNode, SecurityController, factory_digest
from .tee_node import FduSpec, TeeNode
from .tenant import Tenant

DEFAULT_FIRMWARE = "1.0"


def default_topology() -> dict:
    """Two racks, two SCs, three tenants, plus one revoked and one unlisted CPU node."""
    small_cpu = [{"cores": 2, "memory": "256M"}, {"cores": 2, "memory": "256M"}]
    return {
        "vendor": "Vendor1",
        "tenants": 3,
        "revoked": [["firmware", "CPU:0.9"]],
        "racks": [
            {
                "tee_nodes": [
                    {
                        "id": 0, "type": "CPU", "cores": 8, "memory": "2G",
                        "fdus": [{"cores": 2, "memory": "256M"}] * 3 + [{"cores": 2, "memory": "128M"}],
                    },
                    {
                        "id": 1, "type": "AI_Accelerator", "cores": 48, "memory": "48G",
                        "fdus": [{"cores": 20, "memory": "16G"}, {"cores": 20, "memory": "16G"}, {"cores": 8, "memory": "4G"}],
                    },
                    {"id": 3, "type": "CPU", "cores": 4, "memory": "512M", "firmware": "0.9", "fdus": small_cpu},
                    {"id": 4, "type": "CPU", "cores": 4, "memory": "512M", "firmware": "0.8", "publish_firmware": False, "fdus": small_cpu},
                ],
                "scs": [
                    {
                        "id": 0,
                        "nodes": [
                            {"id": 10, "type": "GPU", "cores": 16, "memory": "64M"},
                            {"id": 11, "type": "GPU", "cores": 16, "memory": "64M"},
                            {"id": 12, "type": "FPGA", "cores": 4, "memory": "64M"},
                        ],
                    }
                ],
            },
            {
                "tee_nodes": [
                    {
                        "id": 2, "type": "SSD", "cores": 4, "memory": "256M",
                        "fdus": [{"cores": 1, "memory": "64M"}] * 3,
                    }
                ],
                "scs": [
                    {
                        "id": 1,
                        "nodes": [
                            {"id": 20, "type": "GPU", "cores": 16, "memory": "64M"},
                            {"id": 21, "type": "GPU", "cores": 16, "memory": "64M"},
                        ],
                    }
                ],
            },
        ],
    }


def firmware_digest(device_type: str, version: str) -> bytes:
    return crypto.hash_bytes(f"fw/{device_type}/{version}".encode())


@dataclass
class Cluster:
    world: World
    vendor: Vendor
    manifest_key: crypto.KeyPair
    tee_nodes: dict = field(default_factory=dict)
    scs: dict = field(default_factory=dict)
    guarded: dict = field(default_factory=dict)
    tenants: list = field(default_factory=list)
    racks: dict = field(default_factory=dict)  # principal -> rack index
    mp: object = None

    def sign(self, manifest: Manifest) -> Manifest:
        return sign_manifest(manifest, self.manifest_key)

    def fdus(self) -> list:
        return [e.fdu for n in self.tee_nodes.values() for e in n.fmt]

    def node_of(self, pid: PrincipalId):
        return self.world.get(self.world.endpoint(pid))


def _size(value, where: str) -> int:
    try:
        return parse_size(value)
    except FabricError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build_cluster(doc: dict, seed: int = 0, backend: str = "test") -> Cluster:
    if not isinstance(doc, dict) or not isinstance(doc.get("racks"), list):
        raise ConfigError("topology needs a 'racks' list")
    world = World(seed=seed, backend=backend)
    vendor_name = doc.get("vendor", "Vendor1")
    vendor = Vendor(vendor_name, crypto.generate_keypair(world.random_bytes(32), "ed25519"))
    manifest_key = crypto.generate_keypair(world.random_bytes(32), "ed25519")
    cluster = Cluster(world, vendor, manifest_key)
    published = {"SC": {DEFAULT_FIRMWARE}}
    for extra in doc.get("published_firmware", []):
        t, _, v = str(extra).partition(":")
        published.setdefault(t, set()).add(v)
    seen: set[int] = set()

    def claim(node_index: int, where: str) -> None:
        if not isinstance(node_index, int) or node_index in seen:
            raise ConfigError(f"{where}: node ids must be unique integers")
        seen.add(node_index)

    def rot():
        return crypto.generate_keypair(world.random_bytes(32), "ed25519")

    for r, rack in enumerate(doc["racks"]):
        for spec in rack.get("tee_nodes", []):
            where = f"racks[{r}].tee_nodes"
            claim(spec.get("id"), where)
            dtype = spec.get("type", "CPU")
            if dtype not in RESOURCE_TYPES:
                raise ConfigError(f"{where}: unknown device type {dtype!r}")
            version = str(spec.get("firmware", DEFAULT_FIRMWARE))
            if spec.get("publish_firmware", True):
                published.setdefault(dtype, set()).add(version)
            node = TeeNode(
                world,
                spec["id"],
                dtype,
                int(spec.get("cores", 8)),
                _size(spec.get("memory", "1G"), where),
                vendor,
                rot(),
                version,
                firmware_digest(dtype, version),
            )
            if "pba_path" in spec:
                node.declared_path = (dtype, *spec["pba_path"])
            node.measured_boot()
            fdus = spec.get("fdus") or [{"cores": node.cores, "memory": node.memory.size}]
            node.partition_fdus([FduSpec(int(f.get("cores", 1)), _size(f.get("memory", "64M"), where)) for f in fdus])
            cluster.tee_nodes[node.pid] = node
            cluster.racks[node.pid] = r
        for sspec in rack.get("scs", []):
            where = f"racks[{r}].scs"
            sc = SecurityController(
                world,
                int(sspec.get("id", len(cluster.scs))),
                vendor,
                rot(),
                DEFAULT_FIRMWARE,
                firmware_digest("SC", DEFAULT_FIRMWARE),
                _size(sspec.get("staging", DEFAULT_STAGING), where),
                _size(sspec.get("buffer", DEFAULT_BUFFER), where),
            )
            if sc.pid in cluster.scs:
                raise ConfigError(f"{where}: duplicate SC id {sc.pid.index}")
            sc.measured_boot()
            cluster.scs[sc.pid] = sc
            cluster.racks[sc.pid] = r
            for nspec in sspec.get("nodes", []):
                claim(nspec.get("id"), where)
                node = NonTeeNode(
                    world,
                    nspec["id"],
                    nspec.get("type", "GPU"),
                    int(nspec.get("cores", 1)),
                    _size(nspec.get("memory", "64M"), where),
                )
                sc.attach(node)
                cluster.guarded[node.pid] = node
                cluster.racks[node.pid] = r
    types = {n.device_type for n in cluster.tee_nodes.values()} | {"SC"}
    for t in sorted(types):
        vendor.publish_tree(t, device_tree(t))
    for t, versions in sorted(published.items()):
        for v in sorted(versions):
            vendor.publish_firmware(t, v, firmware_digest(t, v))
    for t in sorted({n.device_type for n in cluster.guarded.values()}):
        vendor.publish_firmware(t, "factory", factory_digest(t))
    for kind, value in doc.get("revoked", []):
        vendor.revoke(kind, value)

    from .mgmt import ManagementPlane

    cluster.mp = ManagementPlane(world, cluster)
    keys = {doc.get("manifest_vendor", "Vendor1"): manifest_key.public}
    for i in range(int(doc.get("tenants", 1))):
        cluster.tenants.append(Tenant(world, i, {vendor_name: vendor}, keys))
    world.record("cluster_built", nodes=len(cluster.tee_nodes) + len(cluster.guarded), scs=len(cluster.scs))
    return cluster


def load_topology(path) -> dict:
    p = Path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"topology file {p} not found") from None
    except ValueError as exc:
        raise ConfigError(f"topology file {p}: {exc}") from None


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------


def ert_exclusive(cluster: Cluster) -> bool:
    seen: set = set()
    for sc in cluster.scs.values():
        for e in sc.ert.values():
            if seen & e.member_nodes:
                return False
            seen |= e.member_nodes
    return True


def buffers_disjoint(cluster: Cluster) -> bool:
    for sc in cluster.scs.values():
        ranges = sorted(r for e in sc.ert.values() for r in e.buffer_ranges.values())
        for (a, la), (b, _) in zip(ranges, ranges[1:]):
            if a + la > b:
                return False
    return True


def staging_clean_outside_entries(cluster: Cluster) -> bool:
    for sc in cluster.scs.values():
        ranges = sorted(r for e in sc.ert.values() for r in e.buffer_ranges.values())
        pos = 0
        for off, length in ranges + [(sc.staging_capacity, 0)]:
            if off > pos and not sc.staging.is_zero(pos, off - pos):
                return False
            pos = max(pos, off + length)
    return True


def lifecycle_problems(cluster: Cluster, job: str) -> list[str]:
    """Everything that still refers to ``job`` after it ended; empty means clean."""
    problems = []
    for node in cluster.tee_nodes.values():
        for e in node.fmt:
            if e.owner == job or e.pending == job:
                problems.append(f"{e.fdu} still bound to {job}")
            if e.owner is None and not node.memory.is_zero(e.base, e.length):
                problems.append(f"{e.fdu} released with non-zero memory")
    for sc in cluster.scs.values():
        if job in sc.ert or job in sc.bindings:
            problems.append(f"{sc.pid} still has an ERT entry for {job}")
        for g in sc.shared_regions:
            if g.job == job:
                problems.append(f"{sc.pid} keeps a shared region for {job}")
    if not staging_clean_outside_entries(cluster):
        problems.append("staging memory outside ERT entries is not zero")
    for pid, node in cluster.guarded.items():
        sc = cluster.scs[node.sc]
        if sc.entry_for_node(pid) is None and not node.memory.is_zero():
            problems.append(f"{pid} is free but its memory is not zero")
    live = cluster.world.keys.outstanding(job)
    if live:
        problems.append(f"{live} key handles for {job} were never zeroized")
    return problems
