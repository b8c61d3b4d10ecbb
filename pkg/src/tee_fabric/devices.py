"""
Functional models of the two case-study devices.

Both models operate on a byte region of a :class:`~tee_fabric.taint.PagedMemory`
so secure deallocation and taint audits see their state. Neither model knows
about keys; protection is applied by the owning node.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import AccessDenied, DimensionMismatch, OutOfRange, SchemaError
from .taint import PagedMemory

BLOCK_SIZE = 4096


class BlockOp(enum.Enum):
    READ = "read"
    WRITE = "write"
    FLUSH = "flush"
    TRIM = "trim"


@dataclass(frozen=True)
class BlockCommand:
    op: BlockOp
    lba: int = 0
    block_count: int = 1
    data: bytes = b""
    fdu: str = ""

    def header(self) -> dict:
        return {"op": self.op.value, "lba": self.lba, "count": self.block_count, "fdu": self.fdu}

    def to_doc(self) -> dict:
        doc = self.header()
        if self.op is BlockOp.WRITE:
            doc["data"] = self.data.hex()
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "BlockCommand":
        try:
            op = BlockOp(doc["op"])
            data = bytes.fromhex(doc.get("data", "")) if op is BlockOp.WRITE else b""
            count = int(doc.get("count", doc.get("block_count", max(1, len(data) // BLOCK_SIZE))))
            return cls(op, int(doc.get("lba", 0)), count, data, str(doc.get("fdu", "")))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad block command: {exc}") from None


class BlockStore:
    """Flat block map over one namespace region; 4 KiB blocks."""

    def __init__(self, memory: PagedMemory, base: int, length: int):
        self.memory = memory
        self.base = base
        self.capacity_blocks = length // BLOCK_SIZE

    def _range(self, lba: int, count: int) -> tuple[int, int]:
        if lba < 0 or count < 0 or lba + count > self.capacity_blocks:
            raise OutOfRange(f"blocks [{lba}, {lba + count}) outside {self.capacity_blocks}")
        return self.base + lba * BLOCK_SIZE, count * BLOCK_SIZE

    def submit(self, cmd: BlockCommand, label: int = 0) -> bytes:
        """Execute ``cmd``; reads return data, everything else returns ``b''``."""
        if cmd.op is BlockOp.FLUSH:
            return b""
        addr, n = self._range(cmd.lba, cmd.block_count)
        if cmd.op is BlockOp.READ:
            return self.memory.read(addr, n)
        if cmd.op is BlockOp.TRIM:
            self.memory.zero(addr, n)
            return b""
        if len(cmd.data) != n:
            raise SchemaError(f"write of {cmd.block_count} blocks needs {n} bytes, got {len(cmd.data)}")
        self.memory.write(addr, cmd.data, label)
        return b""


def ssd_baseline(capacity_blocks: int) -> BlockStore:
    """An unprotected SSD namespace for functional-equivalence runs."""
    mem = PagedMemory(capacity_blocks * BLOCK_SIZE, "baseline-ssd")
    return BlockStore(mem, 0, capacity_blocks * BLOCK_SIZE)


# ---------------------------------------------------------------------------
# AI accelerator
# ---------------------------------------------------------------------------


@dataclass
class TensorJob:
    model: list = field(default_factory=list)
    input: np.ndarray | None = None
    fdu: str = ""


def run_chain(model: list, x: np.ndarray) -> np.ndarray:
    """Apply ``model`` matrices in order: ``W_k @ ... @ W_1 @ x``."""
    out = np.asarray(x, dtype=np.float64)
    squeeze = out.ndim == 1
    if squeeze:
        out = out.reshape(-1, 1)
    for w in model:
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != out.shape[0]:
            raise DimensionMismatch(f"weights {w.shape} cannot multiply {out.shape}")
        out = _accel.matmul(w, out)
    return out.ravel() if squeeze else out


def encode_tensors(tensors: list) -> bytes:
    """Self-describing float64 container: count, then (ndim, dims..., raw) per tensor."""
    parts = [struct.pack("<I", len(tensors))]
    for t in tensors:
        a = np.asarray(t, dtype="<f8", order="C")
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> list:
    try:
        (n,) = struct.unpack_from("<I", data, 0)
        pos = 4
        out = []
        for _ in range(n):
            (nd,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{nd}Q", data, pos)
            pos += 8 * nd
            size = int(np.prod(shape)) if nd else 1
            a = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
            out.append(a.astype(np.float64))
        return out
    except (struct.error, ValueError) as exc:
        raise DimensionMismatch(f"corrupt tensor blob: {exc}") from None


class AiCore:
    """Accelerator FDU compute: weights and input are read back from device memory."""

    def __init__(self, memory: PagedMemory, base: int, length: int):
        self.memory = memory
        self.base = base
        self.length = length

    def load(self, offset: int, tensors: list, label: int = 0) -> int:
        blob = encode_tensors(tensors)
        if offset < 0 or offset + len(blob) > self.length:
            raise AccessDenied("tensor buffer straddles the FDU boundary")
        self.memory.write(self.base + offset, blob, label)
        return len(blob)

    def run(self, offset: int, size: int) -> np.ndarray:
        if offset < 0 or offset + size > self.length:
            raise AccessDenied("tensor buffer straddles the FDU boundary")
        tensors = decode_tensors(self.memory.read(self.base + offset, size))
        if len(tensors) < 2:
            raise DimensionMismatch("need at least one weight matrix and an input")
        *model, x = tensors
        return run_chain(model, x)


def ai_run(job: TensorJob) -> np.ndarray:
    """Unprotected reference execution."""
    return run_chain(job.model, job.input)


def load_workload(path) -> list:
    """JSON list of block commands or tensor jobs."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    items = []
    for entry in doc:
        if "op" in entry:
            items.append(BlockCommand.from_doc(entry))
        else:
            items.append(TensorJob([np.asarray(w) for w in entry["model"]], np.asarray(entry["input"]), entry.get("fdu", "")))
    return items


def fio_workload(pattern: str, total_bytes: int, capacity_blocks: int, rng: np.random.Generator, blocks_per_cmd: int = 32) -> list:
    """FIO-like mixes: seq_write, seq_read, rand_write, rand_read, mixed, trim_mix."""
    cmds: list[BlockCommand] = []
    n_cmds = max(1, total_bytes // (blocks_per_cmd * BLOCK_SIZE))
    slots = capacity_blocks // blocks_per_cmd
    for i in range(n_cmds):
        if pattern.startswith("seq"):
            slot = i % slots
        else:
            slot = int(rng.integers(0, slots))
        lba = slot * blocks_per_cmd
        if pattern.endswith("write"):
            op = BlockOp.WRITE
        elif pattern.endswith("read"):
            op = BlockOp.READ
        else:
            r = rng.random()
            if pattern == "trim_mix" and r < 0.1:
                op = BlockOp.TRIM
            elif r < 0.55:
                op = BlockOp.WRITE
            elif r < 0.97:
                op = BlockOp.READ
            else:
                op = BlockOp.FLUSH
        data = rng.bytes(blocks_per_cmd * BLOCK_SIZE) if op is BlockOp.WRITE else b""
        cmds.append(BlockCommand(op, lba, blocks_per_cmd, data))
    return cmds
