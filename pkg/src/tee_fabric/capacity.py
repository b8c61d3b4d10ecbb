"""
Closed-form Security Controller capacity and per-block encryption overhead.

Inputs follow the convention that 1 GB/s = 1024 MB/s unless ``gib=False``;
with that reading 2.59 GB/s over 138 MB/s streams gives 19 streams per core
and 2.59 GB/s over a 380.2 MB model gives 6.97 jobs per second per core.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

MB = 1.0  # rates and sizes are expressed in MB or MB/s


def gb(value: float, gib: bool = True) -> float:
    """GB (or GB/s) expressed in MB."""
    return value * (1024.0 if gib else 1000.0)


@dataclass(frozen=True)
class ScCapacityParams:
    enc_bw_per_core: float = 2.59 * 1024  # MB/s
    copy_bw_per_core: float = 25 * 1024  # MB/s
    per_stream_rate: float = 138.0  # MB/s
    model_size: float = 380.2  # MB
    cores: int = 1
    buffer: float = 2.5 * 1024  # MB

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def standard(cls, cores: int = 1, gib: bool = True) -> "ScCapacityParams":
        return cls(gb(2.59, gib), gb(25, gib), 138.0, 380.2, cores, gb(2.5, gib))


def _truncate(x: float, places: int) -> float:
    scale = 10**places
    # guard against representation error just below an exact boundary
    return math.floor(x * scale + 1e-9) / scale


def sc_capacity(p: ScCapacityParams, round_streams: bool = False) -> dict:
    """Streams and model loads one SC can encrypt.

    ``round_streams`` rounds instead of flooring the per-core stream count,
    the other plausible reading of the 19-stream figure under decimal GB.
    """
    ratio = p.enc_bw_per_core / p.per_stream_rate
    streams = int(round(ratio)) if round_streams else math.floor(ratio + 1e-12)
    jobs = _truncate(p.enc_bw_per_core / p.model_size, 2)
    return {
        "streams_per_core": streams,
        "total_streams": p.cores * streams,
        "jobs_per_sec_per_core": jobs,
        "total_jobs_per_sec": math.floor(p.cores * jobs + 1e-9),
        "copy_streams_per_core": math.floor(p.copy_bw_per_core / p.per_stream_rate + 1e-12),
        "copy_jobs_per_sec_per_core": _truncate(p.copy_bw_per_core / p.model_size, 2),
    }


def transfer_overhead(total_bytes: int, block_size: int = 4096, per_block_latency: float = 1.47e-6) -> dict:
    """Blocks sealed for a transfer and the latency they add (seconds)."""
    if block_size <= 0:
        raise ValueError("block_size must be positive")
    if total_bytes < 0:
        raise ValueError("total_bytes must be non-negative")
    blocks = -(-total_bytes // block_size)
    return {"blocks": blocks, "added_latency": blocks * per_block_latency}
