"""
Cryptographic primitives behind one interface.

Two AEAD backends share a bit-exact envelope layout:

* ``real``: AES-256-GCM from ``cryptography``.
* ``test``: a keyed splitmix64 pseudo-cipher with a keyed BLAKE2b tag. Fast,
  deterministic and platform independent; not secure against anyone who
  reads this file.

Hashing is SHA3-256, signatures are Ed25519 and key agreement is X25519 +
HKDF-SHA256 in both backends.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import struct
import weakref
from dataclasses import dataclass, field
from typing import Iterable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import _accel
from .errors import AuthFailure, InvalidPublicKey, KeyZeroized, NonceReuse, ReplayDetected

KEY_SIZE = 32
NONCE_SIZE = 12
TAG_SIZE = 16
DIGEST_SIZE = 32

Digest = bytes
ZERO_DIGEST: Digest = bytes(DIGEST_SIZE)


def hash_bytes(data: bytes) -> Digest:
    return hashlib.sha3_256(data).digest()


def extend(pcr: Digest, value: Digest) -> Digest:
    """PCR extension: ``hash(pcr || value)``."""
    if len(pcr) != DIGEST_SIZE or len(value) != DIGEST_SIZE:
        raise ValueError("extend operates on 32-byte digests")
    return hash_bytes(pcr + value)


def extend_chain(values: Iterable[Digest], start: Digest = ZERO_DIGEST) -> Digest:
    pcr = start
    for v in values:
        pcr = extend(pcr, v)
    return pcr


# ---------------------------------------------------------------------------
# Keys
# ---------------------------------------------------------------------------


class KeyRegistry:
    """Tracks live key handles so zeroization can be audited."""

    def __init__(self):
        self._keys: weakref.WeakSet[Key256] = weakref.WeakSet()
        self._dropped: list[str | None] = []

    def track(self, key: "Key256") -> None:
        self._keys.add(key)
        # the callback holds the buffer, not the key, so collection still happens
        weakref.finalize(key, self._on_collect, key.job, key._buf)

    def _on_collect(self, job: str | None, buf: bytearray) -> None:
        if any(buf):
            self._dropped.append(job)

    def live(self, job: str | None = None) -> list["Key256"]:
        keys = [k for k in list(self._keys) if k.alive]
        if job is not None:
            keys = [k for k in keys if k.job == job]
        return keys

    def dropped(self, job: str | None = None) -> int:
        """Keys garbage-collected while still holding their secret."""
        return sum(1 for j in self._dropped if job is None or j == job)

    def outstanding(self, job: str | None = None) -> int:
        return len(self.live(job)) + self.dropped(job)


class Key256:
    """A 32-byte secret. Never serialized; zeroized on release."""

    __slots__ = ("_buf", "job", "_nonces", "_alive", "__weakref__")

    def __init__(self, raw: bytes, job: str | None = None, registry: KeyRegistry | None = None):
        if len(raw) != KEY_SIZE:
            raise ValueError("Key256 needs exactly 32 bytes")
        self._buf = bytearray(raw)
        self.job = job
        self._nonces: set[bytes] = set()
        self._alive = True
        if registry is not None:
            registry.track(self)

    @property
    def alive(self) -> bool:
        return self._alive

    @property
    def raw(self) -> bytes:
        if not self._alive:
            raise KeyZeroized(f"key for {self.job} was zeroized")
        return bytes(self._buf)

    def zeroize(self) -> None:
        for i in range(len(self._buf)):
            self._buf[i] = 0
        self._nonces.clear()
        self._alive = False

    def copy(self, registry: KeyRegistry | None = None) -> "Key256":
        return Key256(self.raw, job=self.job, registry=registry)

    def same_secret(self, other: "Key256") -> bool:
        return hmac.compare_digest(self._buf, other._buf)

    def __repr__(self) -> str:
        state = "live" if self._alive else "zeroized"
        return f"Key256(job={self.job!r}, {state})"

    def __reduce__(self):
        raise TypeError("Key256 is not serializable")


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: bytes = field(repr=False)
    scheme: str = "x25519"


def generate_keypair(seed: bytes, scheme: str = "x25519") -> KeyPair:
    """Deterministic key pair from a 32-byte seed."""
    if len(seed) != 32:
        raise ValueError("seed must be 32 bytes")
    if scheme == "x25519":
        pub = X25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()
    elif scheme == "ed25519":
        pub = Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()
    else:
        raise ValueError(f"unknown scheme {scheme}")
    return KeyPair(public=pub, private=seed, scheme=scheme)


def derive_shared(
    priv: KeyPair | bytes,
    peer_public: bytes,
    job: str | None = None,
    registry: KeyRegistry | None = None,
) -> Key256:
    """X25519 agreement followed by HKDF-SHA256 to a 32-byte key."""
    private = priv.private if isinstance(priv, KeyPair) else priv
    if not isinstance(peer_public, (bytes, bytearray)) or len(peer_public) != 32:
        raise InvalidPublicKey("peer public key must be 32 bytes")
    try:
        peer = X25519PublicKey.from_public_bytes(bytes(peer_public))
        secret = X25519PrivateKey.from_private_bytes(private).exchange(peer)
    except ValueError as exc:
        raise InvalidPublicKey(str(exc)) from exc
    okm = HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None, info=b"tee-fabric shared key").derive(secret)
    return Key256(okm, job=job, registry=registry)


def sign(priv: KeyPair | bytes, msg: bytes) -> bytes:
    private = priv.private if isinstance(priv, KeyPair) else priv
    return Ed25519PrivateKey.from_private_bytes(private).sign(msg)


def verify(pub: bytes, msg: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(bytes(pub)).verify(bytes(sig), msg)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# ---------------------------------------------------------------------------
# AEAD
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    nonce: bytes
    aad: bytes
    ciphertext: bytes
    tag: bytes

    def to_bytes(self) -> bytes:
        """nonce(12) || aad_len(4, BE) || aad || ct_len(4, BE) || ct || tag(16)"""
        return b"".join(
            (
                self.nonce,
                struct.pack(">I", len(self.aad)),
                self.aad,
                struct.pack(">I", len(self.ciphertext)),
                self.ciphertext,
                self.tag,
            )
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        try:
            nonce = data[:NONCE_SIZE]
            (alen,) = struct.unpack(">I", data[NONCE_SIZE : NONCE_SIZE + 4])
            p = NONCE_SIZE + 4
            aad = data[p : p + alen]
            p += alen
            (clen,) = struct.unpack(">I", data[p : p + 4])
            p += 4
            ct = data[p : p + clen]
            p += clen
            tag = data[p:]
        except struct.error as exc:
            raise AuthFailure("truncated envelope") from exc
        if len(nonce) != NONCE_SIZE or len(aad) != alen or len(ct) != clen or len(tag) != TAG_SIZE:
            raise AuthFailure("malformed envelope")
        return cls(nonce, aad, ct, tag)

    def header(self) -> dict:
        """Decoded associated data, or ``{}`` if it is not ours."""
        try:
            body = json.loads(self.aad)
        except (ValueError, UnicodeDecodeError):
            return {}
        return body if isinstance(body, dict) else {}

    def __len__(self) -> int:
        return NONCE_SIZE + 8 + len(self.aad) + len(self.ciphertext) + TAG_SIZE


class RealBackend:
    name = "real"

    def seal(self, key: bytes, nonce: bytes, aad: bytes, plaintext: bytes) -> tuple[bytes, bytes]:
        out = AESGCM(key).encrypt(nonce, plaintext, aad)
        return out[:-TAG_SIZE], out[-TAG_SIZE:]

    def open(self, key: bytes, nonce: bytes, aad: bytes, ciphertext: bytes, tag: bytes) -> bytes:
        try:
            return AESGCM(key).decrypt(nonce, ciphertext + tag, aad)
        except (InvalidTag, ValueError) as exc:
            raise AuthFailure("tag mismatch") from exc


class PseudoCipherBackend:
    name = "test"

    @staticmethod
    def _seed(key: bytes, nonce: bytes) -> int:
        return int.from_bytes(hashlib.blake2b(nonce, key=key, digest_size=8, person=b"tf-stream").digest(), "little")

    @staticmethod
    def _tag(key: bytes, nonce: bytes, aad: bytes, ct: bytes) -> bytes:
        h = hashlib.blake2b(key=key, digest_size=TAG_SIZE, person=b"tf-tag")
        h.update(nonce)
        h.update(struct.pack(">I", len(aad)))
        h.update(aad)
        h.update(ct)
        return h.digest()

    def seal(self, key: bytes, nonce: bytes, aad: bytes, plaintext: bytes) -> tuple[bytes, bytes]:
        ct = _accel.keystream_xor(plaintext, self._seed(key, nonce))
        return ct, self._tag(key, nonce, aad, ct)

    def open(self, key: bytes, nonce: bytes, aad: bytes, ciphertext: bytes, tag: bytes) -> bytes:
        if len(nonce) != NONCE_SIZE or not hmac.compare_digest(self._tag(key, nonce, aad, ciphertext), tag):
            raise AuthFailure("tag mismatch")
        return _accel.keystream_xor(ciphertext, self._seed(key, nonce))


BACKENDS = {"real": RealBackend(), "test": PseudoCipherBackend()}
DEFAULT_BACKEND = "test"


def get_backend(name: str | object | None = None):
    if name is None:
        return BACKENDS[DEFAULT_BACKEND]
    if isinstance(name, str):
        try:
            return BACKENDS[name]
        except KeyError:
            raise ValueError(f"unknown crypto backend {name!r}") from None
    return name


class ReplayGuard:
    """Receiver-side sequence bookkeeping, one counter per channel."""

    def __init__(self):
        self._last: dict[tuple, int] = {}

    @staticmethod
    def _channel(env: Envelope) -> tuple:
        h = env.header()
        return (h.get("job"), h.get("src"), h.get("dst"), h.get("ch"))

    def check(self, env: Envelope) -> None:
        seq = env.header().get("seq")
        if not isinstance(seq, int):
            raise AuthFailure("associated data carries no sequence number")
        if seq <= self._last.get(self._channel(env), 0):
            raise ReplayDetected(f"sequence {seq} already accepted")

    def commit(self, env: Envelope) -> None:
        self._last[self._channel(env)] = env.header()["seq"]


def seal(key: Key256, nonce: bytes, aad: bytes, plaintext: bytes, backend=None) -> Envelope:
    if len(nonce) != NONCE_SIZE:
        raise ValueError("nonce must be 12 bytes")
    if nonce in key._nonces:
        raise NonceReuse(f"nonce {nonce.hex()} already used under this key")
    key._nonces.add(nonce)
    ct, tag = get_backend(backend).seal(key.raw, nonce, bytes(aad), bytes(plaintext))
    return Envelope(nonce=nonce, aad=bytes(aad), ciphertext=ct, tag=tag)


def open_envelope(key: Key256, env: Envelope, backend=None, guard: ReplayGuard | None = None) -> bytes:
    """Authenticate and decrypt; the guard (if any) advances only on success."""
    if guard is not None:
        guard.check(env)
    pt = get_backend(backend).open(key.raw, env.nonce, env.aad, env.ciphertext, env.tag)
    if guard is not None:
        guard.commit(env)
    return pt


open = open_envelope  # noqa: A001


def channel_id(job: str, src: str, dst: str) -> int:
    return int.from_bytes(hash_bytes(f"{job}|{src}|{dst}".encode())[:4], "big")


def make_aad(job: str, src: str, dst: str, seq: int, ch: int, **extra) -> bytes:
    body = {"ch": ch, "dst": dst, "job": job, "seq": seq, "src": src}
    body.update(extra)
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


class SecureChannel:
    """Sender half of a directed channel: nonce = channel id || counter."""

    def __init__(self, key: Key256, job: str, src: str, dst: str, backend=None):
        self.key = key
        self.job = job
        self.src = src
        self.dst = dst
        self.backend = backend
        self.ch = channel_id(job, src, dst)
        self.counter = 0

    def seal(self, plaintext: bytes, **extra) -> Envelope:
        self.counter += 1
        nonce = struct.pack(">IQ", self.ch, self.counter)
        aad = make_aad(self.job, self.src, self.dst, self.counter, self.ch, **extra)
        return seal(self.key, nonce, aad, plaintext, self.backend)
