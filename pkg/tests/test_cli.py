import json
from pathlib import Path

import pytest

from tee_fabric.attacks import Outcome
from tee_fabric.cli import main
from tee_fabric.errors import FabricError
from tee_fabric.scenario import load_scenario, run_scenario, scenario_from_doc

SCEN = Path(__file__).resolve().parent.parent / "scenarios"
MANIFEST = SCEN / "manifests" / "cpu_ai_gpu.json"


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip().startswith("{") else out)


SCENARIO_FILES = sorted(p for p in SCEN.glob("*.json") if p.stem != "two_rack")


@pytest.mark.parametrize("path", SCENARIO_FILES, ids=lambda p: p.stem)
def test_every_shipped_scenario_passes(path):
    cfg = load_scenario(path)
    r = run_scenario(cfg)
    assert r.passed(), r.to_doc()


def test_honest_scenario_ends_completed(capsys, tmp_path):
    trace = tmp_path / "t.jsonl"
    code, doc = run_cli(capsys, "run", "--scenario", SCEN / "honest.json", "--trace-out", trace)
    assert code == 0 and doc["ok"]
    assert doc["results"][0]["outcome"] == Outcome.COMPLETED.value
    events = [json.loads(line) for line in trace.read_text().splitlines()]
    assert any(e["event"] == "job_terminated" for e in events)
    code, summary = run_cli(capsys, "trace", trace)
    assert code == 0 and summary["events"] == len(events) and summary["violations"] == []


def test_strict_turns_harmless_into_failure(capsys):
    path = SCEN / "attack_open_link_taps.json"
    code, _ = run_cli(capsys, "run", "--scenario", path)
    assert code == 0
    code, doc = run_cli(capsys, "run", "--scenario", path, "--strict")
    assert code == 1 and not doc["ok"]


def test_outcome_mismatch_exits_one(capsys, tmp_path):
    doc = json.loads((SCEN / "honest.json").read_text())
    doc["expected"] = "Blocked"
    doc["topology"] = str(SCEN / doc["topology"])
    doc["manifests"] = [str(SCEN / m) for m in doc["manifests"]]
    p = tmp_path / "wrong.json"
    p.write_text(json.dumps(doc))
    code, out = run_cli(capsys, "run", "--scenario", p)
    assert code == 1 and not out["ok"]


def test_missing_topology_exits_two(capsys, tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"topology": "nowhere.json", "manifests": [str(MANIFEST)]}))
    code, _ = run_cli(capsys, "run", "--scenario", p)
    assert code == 2


def test_bad_scenario_doc():
    with pytest.raises(FabricError):
        scenario_from_doc({"topology": {}, "expected": "Maybe"})


def test_manifest_sign_and_verify(capsys, tmp_path):
    key, other = tmp_path / "k.json", tmp_path / "o.json"
    assert run_cli(capsys, "keygen", "--out", key, "--seed-hex", "11" * 32)[0] == 0
    assert run_cli(capsys, "keygen", "--out", other, "--seed-hex", "22" * 32)[0] == 0
    signed = tmp_path / "m.json"
    assert run_cli(capsys, "sign-manifest", MANIFEST, "--key", key, "--out", signed)[0] == 0
    code, doc = run_cli(capsys, "verify-manifest", signed, "--key", key)
    assert code == 0 and doc["valid"]
    code, doc = run_cli(capsys, "verify-manifest", signed, "--key", other)
    assert code == 1 and not doc["valid"]
    assert run_cli(capsys, "verify-manifest", MANIFEST, "--key", key)[0] == 1
    assert run_cli(capsys, "verify-manifest", tmp_path / "absent.json", "--key", key)[0] == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert run_cli(capsys, "verify-manifest", broken, "--key", key)[0] == 2


def test_keygen_is_reproducible(capsys):
    a = run_cli(capsys, "keygen", "--seed-hex", "33" * 32)[1]
    b = run_cli(capsys, "keygen", "--seed-hex", "33" * 32)[1]
    assert a == b and len(a["public"]) == 64


def test_capacity_json(capsys):
    code, doc = run_cli(capsys, "capacity")
    assert code == 0 and doc["convention"] == "GiB"
    cap = doc["capacity"]
    assert cap["streams_per_core"] == 19
    assert cap["jobs_per_sec_per_core"] == pytest.approx(6.97, abs=0.01)
    assert cap["copy_streams_per_core"] == 185
    assert doc["transfer"]["added_latency"] == pytest.approx(1.47e-6)
    code, doc = run_cli(capsys, "capacity", "--decimal")
    assert doc["capacity"]["streams_per_core"] == 18


def test_capacity_bad_params(capsys, tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"bogus": 1}))
    assert run_cli(capsys, "capacity", "--params", p)[0] == 2


def test_attest_demo(capsys):
    code, doc = run_cli(capsys, "attest-demo")
    assert code == 0 and doc["distinct"] == 4
    for level in range(2):
        code, doc = run_cli(capsys, "attest-demo", "--mutate", level)
        assert code == 0
        assert {r["reason"] for r in doc["leaves"]} == {"BadMeasurement"}
    assert run_cli(capsys, "attest-demo", "--mutate", 99)[0] == 2


def test_suite_subset_and_unknown(capsys):
    code, doc = run_cli(capsys, "suite", "bypass_sc", "hypervisor")
    assert code == 0 and [r["outcome"] for r in doc["results"]] == ["Blocked", "Blocked"]
    assert run_cli(capsys, "suite", "no_such_attack")[0] == 2


def test_fuzz_command(capsys):
    code, doc = run_cli(capsys, "fuzz", "--worlds", "5", "--seed", "2")
    assert code == 0 and doc["worlds"] == 5 and doc["leaks"] == []


def test_usage_error_exits_two(capsys):
    assert main(["run"]) == 2
    capsys.readouterr()
