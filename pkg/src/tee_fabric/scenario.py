"""
Scenario files: a topology, manifests, an MP strategy, a seed and the outcome
the run must produce.

``strategy`` is either an allocation strategy of the management plane
(``honest``, ``wrong_size``, ``pin``) applied to the listed manifests, or the
name of a scripted attack from :mod:`tee_fabric.attacks`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import SCENARIOS, Outcome, run_attack
from .errors import AttestationFailed, ConfigError, CoverageGap, FabricError, ManifestInvalid
from .fabric import World
from .manifest import Manifest, manifest_from_doc
from .mgmt import STRATEGIES
from .topology import build_cluster, lifecycle_problems, load_topology


@dataclass
class ScenarioConfig:
    name: str
    topology: dict
    manifests: list = field(default_factory=list)
    strategy: str = "honest"
    params: dict = field(default_factory=dict)
    seed: int = 0
    expected: Outcome = Outcome.COMPLETED
    payload: int = 256


@dataclass
class ScenarioResult:
    name: str
    expected: Outcome
    outcome: Outcome
    world: World
    notes: list = field(default_factory=list)

    def passed(self, strict: bool = False) -> bool:
        if strict and self.outcome is Outcome.HARMLESS:
            return False
        return self.outcome is self.expected

    def to_doc(self, strict: bool = False) -> dict:
        return {
            "scenario": self.name,
            "outcome": self.outcome.value,
            "expected": self.expected.value,
            "ok": self.passed(strict),
            "events": len(self.world.trace),
            "violations": [v.as_dict() for v in self.world.detector.violations],
            "notes": self.notes,
        }


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{what} {path} not found") from None
    except ValueError as exc:
        raise ConfigError(f"{what} {path}: {exc}") from None


def load_scenario(path) -> ScenarioConfig:
    p = Path(path)
    doc = _read_json(p, "scenario file")
    return scenario_from_doc(doc, p.parent, p.stem)


def scenario_from_doc(doc: dict, base: Path = Path("."), name: str = "scenario") -> ScenarioConfig:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a JSON object")
    topo = doc.get("topology")
    if isinstance(topo, str):
        topology = load_topology(base / topo)
    elif isinstance(topo, dict):
        topology = topo
    else:
        raise ConfigError("scenario needs a topology path or object")
    strategy = doc.get("strategy", "honest")
    if strategy not in STRATEGIES and strategy not in SCENARIOS:
        raise ConfigError(f"unknown strategy {strategy!r}")
    manifests = []
    for ref in doc.get("manifests", []):
        mdoc = _read_json(base / ref, "manifest") if isinstance(ref, str) else ref
        try:
            manifests.append(manifest_from_doc(mdoc))
        except FabricError as exc:
            raise ConfigError(f"manifest {ref if isinstance(ref, str) else '(inline)'}: {exc}") from None
    if strategy in STRATEGIES and not manifests:
        raise ConfigError("allocation strategies need at least one manifest")
    try:
        expected = Outcome(doc.get("expected", "Completed"))
        seed = int(doc.get("seed", 0))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return ScenarioConfig(
        str(doc.get("name", name)),
        topology,
        manifests,
        strategy,
        dict(doc.get("params", {})),
        seed,
        expected,
        int(doc.get("payload", 256)),
    )


def _deploy_all(cfg: ScenarioConfig, cluster, notes: list):
    sessions = []
    outcome = Outcome.COMPLETED
    for i, m in enumerate(cfg.manifests):
        tenant = cluster.tenants[i % len(cluster.tenants)]
        signed: Manifest = cluster.sign(m)
        try:
            sessions.append(cluster.mp.deploy(tenant, signed, strategy=cfg.strategy, **cfg.params))
        except (AttestationFailed, CoverageGap, ManifestInvalid) as exc:
            notes.append(f"manifest {i}: {exc.code}: {exc}")
            outcome = Outcome.DETECTED
        except FabricError as exc:
            notes.append(f"manifest {i}: {exc.code}: {exc}")
            if outcome is Outcome.COMPLETED:
                outcome = Outcome.BLOCKED
    return sessions, outcome


def run_scenario(cfg: ScenarioConfig, seed: int | None = None, backend: str = "test") -> ScenarioResult:
    seed = cfg.seed if seed is None else seed
    if cfg.strategy in SCENARIOS:
        rep = run_attack(cfg.strategy, seed, cfg.topology, backend)
        return ScenarioResult(cfg.name, cfg.expected, rep.outcome, rep.world, rep.notes + rep.failures)
    cluster = build_cluster(cfg.topology, seed, backend)
    w = cluster.world
    notes: list[str] = []
    sessions, outcome = _deploy_all(cfg, cluster, notes)
    broken = refused = False
    for s in sessions:
        tenant = w.get(s.tenant)
        for pid in s.members:
            data = w.taint.generate(s.job, cfg.payload)
            try:
                got = tenant.exchange(s, pid, data)
            except FabricError as exc:
                notes.append(f"{s.job} echo via {pid}: {exc.code}")
                refused = True
                continue
            if got != data:
                notes.append(f"{s.job} echo via {pid} returned altered data")
                broken = True
    for s in sessions:
        w.get(s.tenant).terminate(s)
        problems = lifecycle_problems(cluster, s.job)
        notes.extend(problems)
        broken |= bool(problems)
        if not problems:
            w.record("JobCompleted", job=s.job)
    if refused and outcome is Outcome.COMPLETED:
        outcome = Outcome.BLOCKED
    # altered data, leftover state or any detector finding is a leak
    if w.detector.violations or broken:
        outcome = Outcome.LEAK
    return ScenarioResult(cfg.name, cfg.expected, outcome, w, notes)
