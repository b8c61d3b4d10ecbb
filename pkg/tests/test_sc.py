import pytest

from tee_fabric import crypto
from tee_fabric.attacks import CPU, GPU
from tee_fabric.crypto import Key256, SecureChannel
from tee_fabric.errors import AccessDenied, AlreadyAllocated, AuthFailure, NoSuchJob, NotAttached, ReplayDetected
from tee_fabric.fabric import Message, MsgKind, node_id, sc_id
from tee_fabric.manifest import ManifestBuilder
from tee_fabric.protocol import KeyDelivery, make_delivery
from tee_fabric.topology import buffers_disjoint, ert_exclusive, lifecycle_problems

N10, N11, N12, N20 = node_id(10), node_id(11), node_id(12), node_id(20)
FPGA = ("FPGA", 1, "32M", (), "NonTEE")
CHAL = b"\x11" * 32


def manifest():
    return ManifestBuilder().add("CPU", 1, "1M").add("GPU", 1, "1M", kind="NonTEE").build()


def bind_and_provision(cluster, sc, nodes, job, tamper=False):
    w = cluster.world
    m = manifest()
    report, evidence = sc.bind_job(m, nodes, CHAL, job)
    tenant_keys = crypto.generate_keypair(w.random_bytes(32))
    job_key = Key256(w.random_bytes(32), job=job, registry=w.keys)
    delivery, shared = make_delivery(
        job, m.manifest_id, tenant_keys, report.public_key, job_key, [str(n) for n in nodes], "tenant:0", str(sc.pid), w.keys
    )
    if tamper:
        env = delivery.envelope
        delivery = KeyDelivery(job, delivery.manifest_id, delivery.tenant_public, env.__class__(env.nonce, env.aad, bytes([env.ciphertext[0] ^ 1]) + env.ciphertext[1:], env.tag))
    sc.provision_key(job, delivery)
    return report, evidence, job_key


def test_reset_zeroes_memory(cluster):
    sc = cluster.scs[sc_id(0)]
    n = cluster.guarded[N10]
    n.memory.write(100, b"residue")
    sc.reset_node(N10)
    assert n.memory.is_zero()
    with pytest.raises(NotAttached):
        sc.reset_node(N20)


def test_reset_mid_job_erases_without_leak(ctx):
    s = ctx.deploy(0, CPU, GPU)
    node = s.nodes[0]
    assert ctx.roundtrip(s, node)
    sc = ctx.c.scs[ctx.w.attached_to[node]]
    assert not ctx.c.guarded[node].memory.is_zero()
    ctx.mp.reset_node(node)
    ctx.w.run_until_quiescent()
    assert ctx.c.guarded[node].memory.is_zero()
    off, length = sc.ert[s.job].buffer_ranges[node]
    assert sc.staging.is_zero(off, length)
    assert ctx.w.detector.clean


def test_bind_examples(cluster):
    sc = cluster.scs[sc_id(0)]
    report, evidence = sc.bind_job(manifest(), [N10, N11], CHAL, "j1")
    assert len(evidence) == 2 and report.device_type == "SC"
    with pytest.raises(AlreadyAllocated):
        sc.bind_job(manifest(), [N11], CHAL, "j2")
    report, evidence = sc.bind_job(manifest(), [], CHAL, "j3")
    assert evidence == [] and report.challenge == CHAL


def test_provision_creates_disjoint_entries(cluster):
    sc = cluster.scs[sc_id(0)]
    bind_and_provision(cluster, sc, [N10], "j1")
    bind_and_provision(cluster, sc, [N11, N12], "j2")
    assert set(sc.ert) == {"j1", "j2"}
    ranges = sorted(r for e in sc.ert.values() for r in e.buffer_ranges.values())
    assert len(ranges) == 3
    assert buffers_disjoint(cluster) and ert_exclusive(cluster)


def test_tampered_key_envelope(cluster):
    sc = cluster.scs[sc_id(0)]
    with pytest.raises(AuthFailure):
        bind_and_provision(cluster, sc, [N10], "j1", tamper=True)
    assert "j1" not in sc.ert


def test_proxy_out_to_tenant_opens_under_job_key(ctx):
    s = ctx.deploy(0, CPU, GPU)
    node = s.nodes[0]
    sc = ctx.c.scs[ctx.w.attached_to[node]]
    data = ctx.w.taint.generate(s.job, 64)
    env = sc.proxy_out(node, data, s.tenant)
    assert data not in env.to_bytes()
    assert crypto.open_envelope(sc.ert[s.job].key, env) == data
    assert s.job_key.same_secret(sc.ert[s.job].key)


def test_proxy_out_to_fdu_of_same_job(ctx):
    s = ctx.deploy(0, CPU, GPU)
    got = ctx.tenant(0).exchange(s, s.fdus[0], b"hello relay" * 4, op="forward", to=str(s.nodes[0]))
    assert got == b"hello relay" * 4


def test_proxy_out_to_other_job_denied(ctx):
    a = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: N10})
    b = ctx.deploy(1, CPU, GPU, strategy="pin", pin={1: N11})
    sc = ctx.c.scs[sc_id(0)]
    with pytest.raises(AccessDenied):
        sc.proxy_out(N10, b"x", N11)
    with pytest.raises(AccessDenied):
        sc.proxy_out(N10, b"x", b.fdus[0])
    assert ctx.roundtrip(a, N10) and ctx.roundtrip(b, N11)


def test_proxy_in_paths(ctx):
    a = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: N10})
    ctx.deploy(1, CPU, GPU, strategy="pin", pin={1: N11})
    sc = ctx.c.scs[sc_id(0)]
    ka = sc.ert[a.job].key
    env = SecureChannel(ka, a.job, "tenant:7", str(N10)).seal(b"payload", op="dma_write", addr=0)
    assert sc.proxy_in(env, N10) == b"payload"
    ctx.w.run_until_quiescent()
    assert ctx.c.guarded[N10].memory.read(0, 7) == b"payload"
    assert ctx.c.guarded[N11].memory.is_zero()
    with pytest.raises(ReplayDetected):
        sc.proxy_in(env, N10)
    foreign = SecureChannel(Key256(b"\x05" * 32), a.job, "tenant:9", str(N10)).seal(b"x")
    with pytest.raises(AuthFailure):
        sc.proxy_in(foreign, N10)
    with pytest.raises(AuthFailure):
        sc.proxy_in(SecureChannel(ka, a.job, "tenant:8", str(N10)).seal(b"x"), N11)


def test_local_transfer_examples(ctx):
    a = ctx.deploy(0, CPU, GPU, GPU, strategy="pin", pin={1: N10, 2: N11})
    ctx.deploy(1, CPU, FPGA, strategy="pin", pin={1: N12})
    sc = ctx.c.scs[sc_id(0)]
    data = ctx.w.taint.generate(a.job, 128)
    label = ctx.w.labels.label(a.job)
    ctx.c.guarded[N10].memory.write(0, data, label)
    sc.local_transfer(N10, N11, (0, 256, 128))
    dst = ctx.c.guarded[N11].memory
    assert dst.read(256, 128) == data
    assert dst.label_set(256, 128) == {label}
    with pytest.raises(AccessDenied):
        sc.local_transfer(N10, N12, (0, 0, 16))
    assert ctx.c.guarded[N12].memory.is_zero()
    sc.local_transfer(N10, N10, (0, 0, 16))


def test_shared_region(ctx):
    ctx.deploy(0, CPU, GPU, GPU, strategy="pin", pin={1: N10, 2: N11})
    ctx.deploy(1, CPU, FPGA, strategy="pin", pin={1: N12})
    sc = ctx.c.scs[sc_id(0)]
    ctx.c.guarded[N10].memory.write(4096, b"shared bytes")
    sc.setup_shared_region(N10, N11, (4096, 4096))
    assert sc.direct_access(N11, N10, 4096, 12) == b"shared bytes"
    with pytest.raises(AccessDenied):
        sc.direct_access(N11, N10, 0, 12)
    with pytest.raises(AccessDenied):
        sc.direct_access(N11, N10, 8190, 4)
    with pytest.raises(AccessDenied):
        sc.setup_shared_region(N10, N12, (0, 16))
    with pytest.raises(AccessDenied):
        sc.direct_access(N12, N10, 4096, 4)


def test_inter_sc_roundtrip_and_tap(ctx):
    s = ctx.deploy(0, CPU, GPU, GPU, strategy="pin", pin={1: N10, 2: N20})
    tap = ctx.w.tap(sc_id(0), sc_id(1))
    payload = ctx.w.taint.generate(s.job, 200)
    got = ctx.tenant(0).exchange(s, N10, payload, op="relay", next=str(N20))
    assert got == payload
    assert ctx.c.guarded[N20].memory.read(0, 200) == payload
    assert tap.observed and all(m.sealed for m in tap.observed)
    assert ctx.w.taint.scan(tap.observed_bytes()) == {}
    assert ctx.w.detector.clean


def test_inter_sc_without_remote_entry(ctx):
    s = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: N10})
    sc0, sc1 = ctx.c.scs[sc_id(0)], ctx.c.scs[sc_id(1)]
    with pytest.raises(NoSuchJob):
        sc1.inter_sc_send(s.job, b"x", sc0.pid)
    sc0.inter_sc_send(s.job, b"dropped", sc1.pid, to=str(N20))
    ctx.w.run_until_quiescent()
    assert ctx.w.rejections[-1][2] == "NoSuchJob"
    assert ctx.c.guarded[N20].memory.is_zero()


def test_release_and_rebind(ctx):
    s = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: N10})
    sc = ctx.c.scs[sc_id(0)]
    assert ctx.roundtrip(s, N10)
    with pytest.raises(AuthFailure):
        sc.release_job(s.job, SecureChannel(Key256(b"\x09" * 32), s.job, "tenant:0", str(sc.pid)).seal(b"", op="terminate"))
    with pytest.raises(AuthFailure):
        sc.release_job(s.job, b"plain terminate")
    assert s.job in sc.ert and ctx.roundtrip(s, N10)
    ctx.tenant(0).terminate(s)
    assert s.job not in sc.ert
    assert lifecycle_problems(ctx.c, s.job) == []
    s2 = ctx.deploy(1, CPU, GPU, strategy="pin", pin={1: N10})
    assert ctx.c.guarded[N10].memory.is_zero()
    assert ctx.roundtrip(s2, N10)


def test_push_config_only_to_idle_nodes(ctx):
    s = ctx.deploy(0, CPU, GPU, strategy="pin", pin={1: N10})
    sc = ctx.c.scs[sc_id(0)]
    with pytest.raises(AccessDenied):
        sc.mp_push_config(N10, {"mirror_to": "mp:0"})
    sc.mp_push_config(N11, {"firmware": "evil"})
    assert ctx.c.guarded[N11].firmware_digest != ctx.c.guarded[N11].factory_digest
    assert ctx.roundtrip(s, N10)


def test_plain_node_message_to_sc_rejected(ctx):
    w = ctx.w
    w.send(Message(N10, sc_id(0), MsgKind.DMA, b"hi", frozenset(), {"op": "bogus"}))
    w.run_until_quiescent()
    assert w.rejections[-1][2] == "AccessDenied"
