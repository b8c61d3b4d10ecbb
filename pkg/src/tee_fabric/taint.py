"""
Byte-level taint tracking.

Memory is modelled as sparse 4 KiB pages, each carrying a parallel array of
integer job labels (0 = unlabelled). Copies move labels with the bytes.
Job data produced by :meth:`TaintRegistry.generate` is additionally indexed
by its 8-byte windows so any byte string can be scanned for leaked plaintext
without trusting the labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import OutOfRange

PAGE_SIZE = 4096


class LabelTable:
    """Bidirectional job id <-> small integer label map."""

    def __init__(self):
        self._by_job: dict[str, int] = {}
        self._by_label: dict[int, str] = {}

    def label(self, job: str) -> int:
        if job not in self._by_job:
            n = len(self._by_job) + 1
            self._by_job[job] = n
            self._by_label[n] = job
        return self._by_job[job]

    def job(self, label: int) -> str | None:
        return self._by_label.get(int(label))

    def jobs(self, labels) -> set[str]:
        return {self._by_label[int(x)] for x in labels if int(x) in self._by_label}


class PagedMemory:
    """Sparse byte-addressable memory with per-byte labels."""

    def __init__(self, size: int, name: str = ""):
        self.size = int(size)
        self.name = name
        self._pages: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _check(self, addr: int, n: int) -> None:
        if addr < 0 or n < 0 or addr + n > self.size:
            raise OutOfRange(f"{self.name}: [{addr:#x}, +{n}) outside {self.size} bytes")

    def _page(self, pno: int, create: bool):
        page = self._pages.get(pno)
        if page is None and create:
            page = (np.zeros(PAGE_SIZE, dtype=np.uint8), np.zeros(PAGE_SIZE, dtype=np.int32))
            self._pages[pno] = page
        return page

    def _spans(self, addr: int, n: int):
        end = addr + n
        pos = addr
        while pos < end:
            pno, off = divmod(pos, PAGE_SIZE)
            take = min(PAGE_SIZE - off, end - pos)
            yield pno, off, take, pos - addr
            pos += take

    def write(self, addr: int, data: bytes | np.ndarray, label: int | np.ndarray = 0) -> None:
        buf = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
        n = buf.shape[0]
        self._check(addr, n)
        labels = np.broadcast_to(np.asarray(label, dtype=np.int32), (n,))
        for pno, off, take, rel in self._spans(addr, n):
            d, lab = self._page(pno, True)
            d[off : off + take] = buf[rel : rel + take]
            lab[off : off + take] = labels[rel : rel + take]

    def read(self, addr: int, n: int) -> bytes:
        return self.read_array(addr, n).tobytes()

    def read_array(self, addr: int, n: int) -> np.ndarray:
        self._check(addr, n)
        out = np.zeros(n, dtype=np.uint8)
        for pno, off, take, rel in self._spans(addr, n):
            page = self._page(pno, False)
            if page is not None:
                out[rel : rel + take] = page[0][off : off + take]
        return out

    def labels(self, addr: int, n: int) -> np.ndarray:
        self._check(addr, n)
        out = np.zeros(n, dtype=np.int32)
        for pno, off, take, rel in self._spans(addr, n):
            page = self._page(pno, False)
            if page is not None:
                out[rel : rel + take] = page[1][off : off + take]
        return out

    def copy_from(self, src: "PagedMemory", src_addr: int, dst_addr: int, n: int) -> None:
        """Copy bytes and their labels from ``src``."""
        self.write(dst_addr, src.read_array(src_addr, n), src.labels(src_addr, n))

    def zero(self, addr: int, n: int) -> None:
        self._check(addr, n)
        for pno, off, take, _ in list(self._spans_touched(addr, n)):
            if off == 0 and take == PAGE_SIZE:
                self._pages.pop(pno, None)
                continue
            page = self._page(pno, False)
            if page is not None:
                page[0][off : off + take] = 0
                page[1][off : off + take] = 0

    def is_zero(self, addr: int = 0, n: int | None = None) -> bool:
        n = self.size - addr if n is None else n
        self._check(addr, n)
        for pno, off, take, _ in self._spans_touched(addr, n):
            d, lab = self._pages[pno]
            if not _accel.all_zero(d[off : off + take]) or lab[off : off + take].any():
                return False
        return True

    def _spans_touched(self, addr: int, n: int):
        end = addr + n
        for pno in sorted(self._pages):
            lo = max(pno * PAGE_SIZE, addr)
            hi = min((pno + 1) * PAGE_SIZE, end)
            if lo < hi:
                yield pno, lo - pno * PAGE_SIZE, hi - lo, lo - addr

    def label_set(self, addr: int = 0, n: int | None = None) -> set[int]:
        n = self.size - addr if n is None else n
        found: set[int] = set()
        for pno, off, take, _ in self._spans_touched(addr, n):
            found.update(int(x) for x in np.unique(self._pages[pno][1][off : off + take]) if x)
        return found

    def foreign_labels(self, addr: int, n: int, allowed: int) -> int:
        """Count bytes in the range labelled with anything other than ``allowed``."""
        bad = 0
        for pno, off, take, _ in self._spans_touched(addr, n):
            bad += _accel.count_foreign(self._pages[pno][1][off : off + take], allowed)
        return bad

    def touched(self) -> int:
        return len(self._pages) * PAGE_SIZE


class TaintRegistry:
    """Index of every labelled plaintext the world generated."""

    def __init__(self, rng: np.random.Generator, labels: LabelTable):
        self._rng = rng
        self._labels = labels
        self._pending: dict[str, list[np.ndarray]] = {}
        self._tables: dict[str, np.ndarray] = {}

    def generate(self, job: str, n: int) -> bytes:
        """Fresh random job data, indexed for content scans."""
        data = self._rng.bytes(n)
        self.register(job, data)
        return data

    def register(self, job: str, data: bytes) -> None:
        self._labels.label(job)
        codes = _accel.window_codes(data)
        if codes.shape[0]:
            # constant windows (zero fill, padding) would match unrelated memory
            first = codes & np.uint64(0xFF)
            flat = first * np.uint64(0x0101010101010101)
            codes = codes[codes != flat]
        self._pending.setdefault(job, []).append(codes)

    def _table(self, job: str) -> np.ndarray:
        pend = self._pending.pop(job, None)
        if pend:
            parts = [self._tables.get(job, np.empty(0, dtype=np.uint64))] + pend
            self._tables[job] = np.unique(np.concatenate(parts))
        return self._tables.get(job, np.empty(0, dtype=np.uint64))

    def jobs(self) -> list[str]:
        return sorted(set(self._tables) | set(self._pending))

    def scan(self, data: bytes) -> dict[str, int]:
        """Number of 8-byte windows of ``data`` that occur in each job's plaintext."""
        codes = _accel.window_codes(data)
        if codes.shape[0] == 0:
            return {}
        hits = {}
        for job in self.jobs():
            h = _accel.count_hits(self._table(job), codes)
            if h:
                hits[job] = h
        return hits


@dataclass
class Violation:
    tick: int
    kind: str
    where: str
    jobs: list[str] = field(default_factory=list)
    detail: str = ""

    def as_dict(self) -> dict:
        return {"tick": self.tick, "kind": self.kind, "where": self.where, "jobs": self.jobs, "detail": self.detail}
