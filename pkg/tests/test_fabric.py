import pytest

from tee_fabric.attacks import AI, CPU, GPU, Ctx
from tee_fabric.errors import AuthFailure, TamperProof, UnknownPrincipal
from tee_fabric.fabric import Message, MsgKind, PrincipalId, Trust, World, node_id, sc_id, tenant_id
from tee_fabric.topology import build_cluster, default_topology


class Sink:
    def __init__(self, fail=False):
        self.got = []
        self.fail = fail

    def on_message(self, msg):
        self.got.append(msg)
        if self.fail:
            raise AuthFailure("nope")


def small_world():
    w = World(seed=3)
    a, b, c = tenant_id(0), node_id(1), node_id(2)
    sinks = {p: Sink() for p in (a, b, c)}
    for p, s in sinks.items():
        w.register(p, s)
    return w, (a, b, c), sinks


def test_principal_parse_roundtrip():
    for p in (tenant_id(3), node_id(7), sc_id(1)):
        assert PrincipalId.parse(str(p)) == p


def test_send_to_unknown_principal():
    w, (a, _, _), _ = small_world()
    with pytest.raises(UnknownPrincipal):
        w.send(Message(a, node_id(42), MsgKind.DMA, b"x"))
    with pytest.raises(UnknownPrincipal):
        w.send(Message(node_id(42), a, MsgKind.DMA, b"x"))


def test_same_tick_order_is_by_sender():
    w, (a, b, c), sinks = small_world()
    w.send(Message(c, b, MsgKind.DMA, b"from c"))
    w.send(Message(a, b, MsgKind.DMA, b"from a"))
    w.run_until_quiescent()
    # the tenant sorts before nodes regardless of send order
    assert [m.payload for m in sinks[b].got] == [b"from a", b"from c"]
    assert w.tick == 1


def test_handler_errors_become_rejections():
    w, (a, b, _), _ = small_world()
    w.register(b, Sink(fail=True))
    w.send(Message(a, b, MsgKind.DMA, b"x"))
    w.run_until_quiescent()
    assert w.rejection_codes() == ["AuthFailure"]
    assert w.rejections[0][2] == "AuthFailure"


def test_tainted_plaintext_on_open_link_is_flagged():
    w, (a, b, _), _ = small_world()
    data = w.taint.generate("job1", 128)
    w.send(Message(a, b, MsgKind.DMA, data, frozenset({"job1"})))
    assert not w.detector.clean
    kinds = {v.kind for v in w.detector.violations}
    assert "plaintext_on_open_link" in kinds
    assert "tainted_bytes_on_open_link" in kinds


def test_untainted_plaintext_is_fine():
    w, (a, b, _), _ = small_world()
    w.send(Message(a, b, MsgKind.DMA, b"hello"))
    w.run_until_quiescent()
    assert w.detector.clean


def test_tap_observes_and_can_drop():
    w, (a, b, _), sinks = small_world()
    tap = w.tap(a, b)
    tap.intercept = tap.hold
    w.send(Message(a, b, MsgKind.DMA, b"one"))
    w.run_until_quiescent()
    assert sinks[b].got == [] and len(tap.observed) == 1
    tap.release()
    w.run_until_quiescent()
    assert [m.payload for m in sinks[b].got] == [b"one"]


def test_shielded_links_refuse_taps(cluster):
    w = cluster.world
    sc = sc_id(0)
    node = next(p for p, s in w.attached_to.items() if s == sc)
    assert w.link_between(sc, node).trust is Trust.SHIELDED
    with pytest.raises(TamperProof):
        w.tap(sc, node)
    with pytest.raises(TamperProof):
        w.send(Message(sc, node, MsgKind.DMA, b"x"), injected=True)


def test_guarded_nodes_route_via_their_sc(cluster):
    w = cluster.world
    node, sc = next(iter(sorted(w.attached_to.items())))
    assert w.next_hop(tenant_id(0), node) == sc
    assert w.next_hop(sc, node) == node


def test_replay_on_tenant_sc_link(ctx):
    s = ctx.deploy(0, CPU, GPU)
    tenant = ctx.tenant(0)
    sc = s.scs[0]
    tap = ctx.w.tap(tenant.pid, sc)
    assert ctx.roundtrip(s, s.nodes[0])
    before = len(ctx.w.rejections)
    tap.replay(0)
    ctx.w.run_until_quiescent()
    assert "ReplayDetected" in ctx.w.rejection_codes(before)
    assert ctx.w.detector.clean


def test_empty_world_has_empty_trace():
    w = World(seed=0)
    assert w.run_until_quiescent() == []
    assert w.trace_jsonl() == ""


def test_honest_job_completes(ctx):
    s = ctx.deploy(0, CPU, AI, GPU)
    for pid in s.members:
        assert ctx.roundtrip(s, pid)
    ctx.tenant(0).terminate(s)
    assert ctx.w.trace.events("job_terminated")
    assert ctx.w.detector.clean and not ctx.failures


def _run(seed):
    c = build_cluster(default_topology(), seed=seed)
    ctx = Ctx(c)
    s = ctx.deploy(0, CPU, AI, GPU)
    for pid in s.members:
        ctx.roundtrip(s, pid)
    ctx.tenant(0).terminate(s)
    return c.world.trace_jsonl()


def test_trace_is_deterministic():
    assert _run(5) == _run(5)
    assert _run(5) != _run(6)
