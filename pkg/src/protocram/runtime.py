"""Process-wide execution mode and small shared helpers.

Deterministic mode pins torch to a single thread so repeated runs of the
same seeded computation produce bit-identical floats. It is enabled either
programmatically via :func:`set_deterministic` or by setting the environment
variable ``PROTOCRAM_DETERMINISTIC=1`` before the package is imported.
"""

from __future__ import annotations

import hashlib
import os

import torch

_ENV_FLAG = "PROTOCRAM_DETERMINISTIC"
_deterministic = False


def set_deterministic(enabled: bool = True) -> None:
    """Serialize torch execution (single thread) for bit-stable reruns."""
    global _deterministic
    _deterministic = enabled
    if enabled:
        torch.set_num_threads(1)


def deterministic_mode() -> bool:
    return _deterministic


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_bytes(t: torch.Tensor) -> bytes:
    """Row-major little-endian float32 bytes of a tensor (for checksums/io)."""
    import numpy as np

    arr = t.detach().cpu().contiguous().to(torch.float32).numpy().astype("<f4", copy=False)
    return np.ascontiguousarray(arr).tobytes()


if os.environ.get(_ENV_FLAG, "") not in ("", "0"):
    set_deterministic(True)
