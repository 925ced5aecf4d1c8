"""Dense tensor primitives shared by the model, optimizers, and diagnostics.

Arrays are plain numpy ndarrays in row-major order, float64 by default
(float32 is selectable per run).  All operations here are pure functions;
randomness is confined to :class:`SeededRng`, which owns its stream.

Finite-value policing: when debug checks are on (``set_debug_checks`` or the
``MERIT_DEBUG`` environment variable), every operation asserts its result is
free of NaN/Inf.  Checks are off by default so that intentional divergence
experiments can run to the harness's stop-and-flag path.
"""

from __future__ import annotations

import os

import numpy as np

Tensor = np.ndarray

_debug_checks = os.environ.get("MERIT_DEBUG", "") not in ("", "0", "false")


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every tensor operation result."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _check(out: Tensor) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced by tensor operation")
    return out


def as_tensor(data, dtype=np.float64) -> Tensor:
    """Build a validated dense array; rejects NaN/Inf at construction."""
    arr = np.asarray(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor construction rejects NaN/Inf elements")
    return arr


class SeededRng:
    """Deterministic random stream: identical seed, identical draws.

    Thin wrapper over numpy's PCG64 generator.  ``spawn`` derives an
    independent child stream from the parent seed and a string key, so the
    harness can hand out reproducible streams for init, data sampling, and
    probes without sharing state.
    """

    def __init__(self, seed: int, _words: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._words = tuple(_words)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self._words]))
        )

    def spawn(self, key: str | int) -> "SeededRng":
        """Child stream keyed by ``key``; independent of draws made so far."""
        if isinstance(key, str):
            word = int.from_bytes(key.encode("utf-8"), "little") % (2**63)
        else:
            word = int(key)
        return SeededRng(self.seed, self._words + (word,))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
        return seeded_normal(shape, mean, std, self)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, size=None) -> Tensor:
        return self._gen.random(size=size)

    def rademacher(self, shape) -> Tensor:
        return self._gen.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def seeded_normal(shape, mean: float, std: float, rng: SeededRng) -> Tensor:
    """Normal draws from the rng's PCG64 stream (ziggurat transform).

    ``std == 0`` degenerates to a constant tensor equal to ``mean``.
    """
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.full(shape, float(mean))
    return _check(rng._gen.normal(loc=mean, scale=std, size=shape))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with explicit inner-dimension validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return _check(a @ b)


def max_norm(t: Tensor) -> float:
    """Largest absolute element value."""
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("max_norm of empty tensor is undefined")
    return float(np.max(np.abs(t)))


def l2_norm(t: Tensor) -> float:
    """Euclidean norm over all elements, regardless of shape."""
    t = np.asarray(t)
    if t.size == 0:
        raise ValueError("l2_norm of empty tensor is undefined")
    return float(np.sqrt(np.sum(t * t)))


def row_max_norms(m: Tensor) -> Tensor:
    """Per-row largest absolute value of a matrix."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"row_max_norms expects a 2-D tensor, got {m.ndim}-D")
    return _check(np.max(np.abs(m), axis=1))


def col_max_norms(m: Tensor) -> Tensor:
    """Per-column largest absolute value of a matrix."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"col_max_norms expects a 2-D tensor, got {m.ndim}-D")
    return _check(np.max(np.abs(m), axis=0))


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability.

    Rows containing -inf entries (masked positions) get exact zeros there.
    """
    m = np.asarray(m)
    shifted = m - np.max(m, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return _check(e / np.sum(e, axis=-1, keepdims=True))


def clip_elementwise(t: Tensor, c: float) -> Tensor:
    """Clamp every element to [-c, c], preserving sign and shape."""
    if c <= 0:
        raise ValueError(f"clip threshold must be > 0, got {c}")
    return _check(np.clip(t, -c, c))
