"""Deterministic seed derivation and backend determinism helpers.

A single master seed drives every stage of a run. Sub-seeds are derived by
hashing the master seed together with string labels, so per-client and
per-image random streams are stable no matter in which order (or in how many
workers) the stages execute.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *labels: object) -> int:
    """Derive a 63-bit sub-seed from a master seed and a label path.

    Stable across platforms and Python versions (SHA-256 based, not hash()).
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode("ascii"))
    for label in labels:
        h.update(b"/")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def set_backend_deterministic(flag: bool) -> None:
    """Toggle torch's deterministic-algorithms mode.

    On CPU the ops used here are already deterministic given fixed seeds and
    thread count; the flag additionally makes torch raise on any op without a
    deterministic implementation. On CUDA, set CUBLAS_WORKSPACE_CONFIG as per
    the torch docs before enabling.
    """
    import torch

    torch.use_deterministic_algorithms(bool(flag))
