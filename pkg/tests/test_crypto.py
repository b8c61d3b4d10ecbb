import gc
import hashlib
import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from tee_fabric import crypto
from tee_fabric.crypto import Envelope, Key256, KeyRegistry, ReplayGuard, SecureChannel
from tee_fabric.errors import AuthFailure, InvalidPublicKey, KeyZeroized, NonceReuse, ReplayDetected

BACKENDS = ["test", "real"]


def key(i=1, registry=None, job=None):
    return Key256(bytes([i]) * 32, job=job, registry=registry)


def nonce(i):
    return i.to_bytes(12, "big")


def test_keccak_oracle_known_vector():
    assert oracles.sha3_256(b"").hex() == "a7ffc6f8bf1ed76651c14756a061d662f580ff4de43b49fa82d80a4b80f8434a"


@given(st.binary(max_size=600))
def test_hash_matches_independent_keccak(data):
    assert crypto.hash_bytes(data) == oracles.sha3_256(data)


def test_extend_from_zero_matches_oracle():
    v = hashlib.sha256(b"event").digest()
    assert crypto.extend(crypto.ZERO_DIGEST, v) == oracles.sha3_256(bytes(32) + v)


def test_extend_order_matters():
    a, b = oracles.sha3_256(b"a"), oracles.sha3_256(b"b")
    ab, ba = crypto.extend_chain([a, b]), crypto.extend_chain([b, a])
    assert ab != ba
    assert ab == oracles.chain_ref([a, b])
    assert ba == oracles.chain_ref([b, a])
    assert crypto.extend_chain([a, b]) == ab


def test_extend_rejects_short_digest():
    with pytest.raises(ValueError):
        crypto.extend(crypto.ZERO_DIGEST, b"short")


def test_chain_injective_exhaustive():
    alphabet = [crypto.hash_bytes(bytes([i])) for i in range(4)]
    seen = {}
    for n in range(7):
        for seq in itertools.product(range(4), repeat=n):
            leaf = crypto.extend_chain(alphabet[i] for i in seq)
            assert leaf not in seen, (seq, seen.get(leaf))
            seen[leaf] = seq
    assert len(seen) == sum(4**n for n in range(7))


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_roundtrip(backend):
    k = key()
    env = crypto.seal(k, nonce(1), b"aad", b"", backend)
    assert crypto.open_envelope(k, env, backend) == b""


@pytest.mark.parametrize("backend", BACKENDS)
def test_4096_roundtrip(backend):
    k = key()
    m = bytes(range(256)) * 16
    env = crypto.seal(k, nonce(2), b"aad", m, backend)
    assert env.ciphertext != m
    assert crypto.open_envelope(k, env, backend) == m


@pytest.mark.parametrize("backend", BACKENDS)
@given(k=st.binary(min_size=32, max_size=32), aad=st.binary(max_size=64), pt=st.binary(max_size=2048))
def test_roundtrip_property(backend, k, aad, pt):
    key_ = Key256(k)
    env = crypto.seal(key_, nonce(7), aad, pt, backend)
    assert crypto.open_envelope(key_, env, backend) == pt


@pytest.mark.parametrize("backend", BACKENDS)
def test_every_single_bit_flip_fails(backend):
    k = key()
    env = crypto.seal(k, nonce(3), b'{"seq":1}', bytes(range(64)), backend)
    raw = env.to_bytes()
    for bit in range(len(raw) * 8):
        mutated = bytearray(raw)
        mutated[bit // 8] ^= 1 << (bit % 8)
        with pytest.raises(AuthFailure):
            crypto.open_envelope(k, Envelope.from_bytes(bytes(mutated)), backend)


@pytest.mark.parametrize("backend", BACKENDS)
def test_wrong_key_fails(backend):
    env = crypto.seal(key(1), nonce(1), b"", b"secret", backend)
    with pytest.raises(AuthFailure):
        crypto.open_envelope(key(2), env, backend)


def test_envelope_bytes_roundtrip():
    env = crypto.seal(key(), nonce(9), b"head", b"body")
    assert Envelope.from_bytes(env.to_bytes()) == env
    assert len(env) == len(env.to_bytes())
    with pytest.raises(AuthFailure):
        Envelope.from_bytes(env.to_bytes()[:-1])


def test_nonce_reuse_refused():
    k = key()
    crypto.seal(k, nonce(1), b"", b"a")
    with pytest.raises(NonceReuse):
        crypto.seal(k, nonce(1), b"", b"b")


def test_replay_on_same_channel_detected():
    k = key()
    ch = SecureChannel(k, "j", "a", "b")
    guard = ReplayGuard()
    env = ch.seal(b"payload")
    assert crypto.open_envelope(k, env, guard=guard) == b"payload"
    with pytest.raises(ReplayDetected):
        crypto.open_envelope(k, env, guard=guard)


def test_guard_commits_only_after_authentication():
    k = key()
    ch = SecureChannel(k, "j", "a", "b")
    guard = ReplayGuard()
    env = ch.seal(b"x")
    forged = Envelope(env.nonce, env.aad, env.ciphertext, bytes(16))
    with pytest.raises(AuthFailure):
        crypto.open_envelope(k, forged, guard=guard)
    assert crypto.open_envelope(k, env, guard=guard) == b"x"


@given(st.lists(st.integers(min_value=1, max_value=40), min_size=1, max_size=30))
def test_guard_accepts_strictly_increasing_only(order):
    k = key()
    ch = SecureChannel(k, "j", "a", "b")
    envs = [ch.seal(b"%d" % i) for i in range(40)]
    guard = ReplayGuard()
    best = 0
    for seq in order:
        env = envs[seq - 1]
        if seq > best:
            crypto.open_envelope(k, env, guard=guard)
            best = seq
        else:
            with pytest.raises(ReplayDetected):
                crypto.open_envelope(k, env, guard=guard)


def test_channels_use_disjoint_nonces():
    k = key()
    a = SecureChannel(k, "j", "x", "y").seal(b"1")
    b = SecureChannel(k, "j", "y", "x").seal(b"1")
    assert a.nonce != b.nonce


def test_dh_symmetry_and_distinctness():
    a = crypto.generate_keypair(bytes([1]) * 32)
    b = crypto.generate_keypair(bytes([2]) * 32)
    c = crypto.generate_keypair(bytes([3]) * 32)
    ab = crypto.derive_shared(a, b.public)
    ba = crypto.derive_shared(b, a.public)
    assert ab.same_secret(ba)
    assert not crypto.derive_shared(c, b.public).same_secret(ab)


@pytest.mark.parametrize("pub", [b"", b"\x01" * 31, bytes(32), "not bytes"])
def test_dh_malformed_public(pub):
    a = crypto.generate_keypair(bytes([1]) * 32)
    with pytest.raises(InvalidPublicKey):
        crypto.derive_shared(a, pub)


def test_signatures():
    kp = crypto.generate_keypair(bytes([5]) * 32, "ed25519")
    other = crypto.generate_keypair(bytes([6]) * 32, "ed25519")
    sig = crypto.sign(kp, b"message")
    assert crypto.verify(kp.public, b"message", sig)
    assert not crypto.verify(kp.public, b"messagf", sig)
    assert not crypto.verify(other.public, b"message", sig)


def test_zeroized_key_is_dead_and_untracked():
    reg = KeyRegistry()
    k = key(3, reg, job="j1")
    other = key(4, reg, job="j2")
    assert len(reg.live("j1")) == 1
    k.zeroize()
    assert not k.alive
    assert reg.live("j1") == []
    assert reg.live() == [other]
    del other
    gc.collect()
    assert reg.live() == []
    assert reg.dropped("j2") == 1 and reg.outstanding() == 1
    del k
    gc.collect()
    assert reg.dropped("j1") == 0


def test_zeroized_key_refuses_raw():
    k = key(3, KeyRegistry())
    k.zeroize()
    with pytest.raises(KeyZeroized):
        k.raw


def test_backends_share_envelope_layout():
    for name in BACKENDS:
        env = crypto.seal(key(), nonce(1), b"a", b"hello", name)
        assert len(env.ciphertext) == 5 and len(env.tag) == crypto.TAG_SIZE
    with pytest.raises(ValueError):
        crypto.get_backend("rot13")
