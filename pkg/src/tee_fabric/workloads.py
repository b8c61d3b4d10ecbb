"""
Drive device workloads either through a running job (sealed end to end) or
against the unprotected reference models, so results can be compared.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .devices import BlockCommand, BlockOp, TensorJob, ai_run, decode_tensors, encode_tensors, ssd_baseline


def protected_ssd(tenant, session, fdu) -> Callable[[BlockCommand], bytes]:
    """A ``submit`` callable that sends each command to ``fdu`` over the job's channel."""

    def submit(cmd: BlockCommand) -> bytes:
        data = cmd.data if cmd.op is BlockOp.WRITE else b""
        return tenant.exchange(session, fdu, data, "ssd", cmd=cmd.op.value, lba=cmd.lba, count=cmd.block_count)

    return submit


def baseline_ssd(capacity_blocks: int) -> Callable[[BlockCommand], bytes]:
    return ssd_baseline(capacity_blocks).submit


def run_block_workload(submit: Callable[[BlockCommand], bytes], cmds: list) -> list[bytes]:
    return [submit(cmd) for cmd in cmds]


def protected_ai(tenant, session, fdu, job: TensorJob, offset: int = 0) -> np.ndarray:
    """Load weights and input into the accelerator FDU, run, and read the output back."""
    blob = encode_tensors([*job.model, job.input])
    tenant.exchange(session, fdu, blob, "ai_load", addr=offset)
    out = tenant.exchange(session, fdu, b"", "ai_run", addr=offset, len=len(blob))
    return decode_tensors(out)[0]


def baseline_ai(job: TensorJob) -> np.ndarray:
    return ai_run(job)
