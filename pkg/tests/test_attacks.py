import pytest

from tee_fabric import sc as sc_mod
from tee_fabric import tee_node as tee_mod
from tee_fabric.attacks import SCENARIOS, Outcome, run_attack
from tee_fabric.fabric import Message, MsgKind
from tee_fabric.fuzz import fuzz, fuzz_world


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_scenario_meets_expectation(name):
    r = run_attack(name)
    assert r.outcome is r.expected, (r.failures, r.violations)
    assert r.outcome is not Outcome.LEAK


def test_attack_outcome_is_recorded():
    r = run_attack("bypass_sc")
    ev = r.world.trace.events("attack_outcome")
    assert ev and ev[-1].fields["outcome"] == Outcome.BLOCKED.value


def test_unknown_scenario():
    with pytest.raises(KeyError):
        run_attack("nope")


def test_staging_bypass_is_caught(monkeypatch):
    monkeypatch.setattr(sc_mod.SecurityController, "staging_read", lambda self, node, offset, n: self.staging.read(offset, n))
    assert run_attack("staging_cross_job").outcome is Outcome.LEAK


def test_acu_bypass_is_caught(monkeypatch):
    monkeypatch.setattr(tee_mod.TeeNode, "acu_check", lambda self, accessor, addr: tee_mod.Decision.ALLOW)
    assert run_attack("cotenant_access").outcome is Outcome.LEAK


def test_fuzz_small_batch_is_clean():
    r = fuzz(60, seed=3)
    assert r["worlds"] == 60
    assert r["leaks"] == []
    assert r["jobs"] > 0 and r["rejections"] > 0


def test_fuzz_world_is_deterministic():
    a, b = fuzz_world(17), fuzz_world(17)
    assert (a.actions, a.rejections, a.jobs) == (b.actions, b.rejections, b.jobs)


def test_fuzz_catches_plaintext_proxy(monkeypatch):
    orig = sc_mod.SecurityController.proxy_out

    def leaky(self, node, data, dst, **aad):
        e = self.entry_for_node(node)
        taint = frozenset({e.job_id}) if e is not None and data else frozenset()
        self.world.send(Message(self.pid, dst, MsgKind.DMA, data, taint, {}))
        return orig(self, node, data, dst, **aad)

    monkeypatch.setattr(sc_mod.SecurityController, "proxy_out", leaky)
    assert fuzz(60, seed=0)["leaks"]
