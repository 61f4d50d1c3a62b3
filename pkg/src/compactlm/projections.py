"""Seeded random projections that are regenerated instead of stored.

A projection matrix P (n x r) is a pure function of a 64-bit layer seed, so
the forward pass, the backward pass and the optimizer update can each
rebuild the identical matrix.  Entries come from SplitMix64 evaluated in
counter mode: element ``i`` only depends on ``(seed, i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import backend

KINDS = ("gaussian", "gaussian_shared_seed", "sparse_jl", "identity")
_MASK64 = (1 << 64) - 1


def _mix64(z):
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def hash64(*values):
    """Order-sensitive 64-bit hash of integers (chained SplitMix64 finalizer)."""
    h = 0x243F6A8885A308D3
    for v in values:
        h = _mix64(h ^ _mix64((int(v) & _MASK64) + 0x9E3779B97F4A7C15))
    return h


@dataclass(frozen=True)
class ProjectionSpec:
    """How every compressed layer builds its projection.

    Exactly one of ``ratio`` (rank as a fraction of the layer's input width)
    or ``rank`` (fixed) is set.  ``update_period=None`` means the projection
    never changes.
    """

    kind: str = "gaussian"
    ratio: Optional[float] = 0.25
    rank: Optional[int] = None
    base_seed: int = 0
    update_period: Optional[int] = 50
    seed_epoch: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown projection kind {self.kind!r}; expected one of {KINDS}")
        if (self.ratio is None) == (self.rank is None):
            raise ValueError("set exactly one of ratio or rank")
        if self.ratio is not None and not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.rank is not None and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.update_period is not None and self.update_period < 1:
            raise ValueError(f"update_period must be positive, got {self.update_period}")
        if self.seed_epoch < 0:
            raise ValueError("seed_epoch must be nonnegative")

    def to_dict(self):
        d = {"kind": self.kind, "base_seed": self.base_seed,
             "T": "inf" if self.update_period is None else self.update_period}
        if self.ratio is not None:
            d["ratio"] = self.ratio
        else:
            d["rank"] = self.rank
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        period = d.pop("T", d.pop("update_period", 50))
        if period in (None, "inf", "infinity", "∞") or (isinstance(period, float) and math.isinf(period)):
            period = None
        ratio = d.pop("ratio", None)
        rank = d.pop("rank", None)
        if ratio is None and rank is None:
            ratio = 0.25
        return cls(kind=d.pop("kind", "gaussian"), ratio=None if ratio is None else float(ratio),
                   rank=None if rank is None else int(rank), base_seed=int(d.pop("base_seed", 0)),
                   update_period=None if period is None else int(period),
                   seed_epoch=int(d.pop("seed_epoch", 0)))


@dataclass(frozen=True)
class LayerSeed:
    value: int
    epoch: int


def resolve_rank(spec, n):
    if n < 1:
        raise ValueError(f"layer width must be >= 1, got {n}")
    if spec.kind == "identity":
        return n
    if spec.rank is not None:
        return min(spec.rank, n)
    # round half up; Python's round() would send 0.5 to 0
    return max(1, min(n, int(math.floor(spec.ratio * n + 0.5))))


def layer_seed(spec, layer_id, n, r):
    if spec.kind == "gaussian_shared_seed":
        value = hash64(spec.base_seed, 0x5348, n, r, spec.seed_epoch)
    else:
        value = hash64(spec.base_seed, layer_id, spec.seed_epoch)
    return LayerSeed(value, spec.seed_epoch)


def advance_epoch(spec, global_step):
    """Seed epoch after ``global_step`` completed steps: bump on positive multiples of T."""
    if global_step < 0:
        raise ValueError("global_step must be nonnegative")
    T = spec.update_period
    if T is None or global_step == 0 or global_step % T != 0:
        return spec
    return replace(spec, seed_epoch=spec.seed_epoch + 1)


def epoch_at(spec, global_step):
    T = spec.update_period
    return 0 if T is None else global_step // T


def sample_gaussian(seed, n, r, dtype=np.float64):
    """n x r matrix with i.i.d. N(0, 1/r) entries; E[P P^T] = I_n."""
    if r > n or r < 1:
        raise ValueError(f"need 1 <= r <= n, got r={r}, n={n}")
    value = seed.value if isinstance(seed, LayerSeed) else int(seed)
    return backend.gaussian_fill(value, n, r, 1.0 / math.sqrt(r)).astype(dtype, copy=False)


def sample_sparse_jl(seed, n, r, dtype=np.float64):
    """Three-point sparse JL matrix: +-sqrt(3/r) w.p. 1/6 each, else 0."""
    if r > n or r < 1:
        raise ValueError(f"need 1 <= r <= n, got r={r}, n={n}")
    value = seed.value if isinstance(seed, LayerSeed) else int(seed)
    return backend.sparse_jl_fill(value, n, r, math.sqrt(3.0 / r)).astype(dtype, copy=False)


def projection_matrix(spec, seed, n, r, dtype=np.float64):
    if spec.kind == "identity":
        return np.eye(n, dtype=dtype)
    if spec.kind == "sparse_jl":
        return sample_sparse_jl(seed, n, r, dtype)
    return sample_gaussian(seed, n, r, dtype)


def singular_ratio_probe(n, m, k, r, trials, seed=0, kind="gaussian", make_matrix=None):
    """Ratios sigma_i(P^T A) / sigma_i(A), i = 1..k, for random rank-k matrices A.

    ``make_matrix(rng)`` overrides the default A = (n x k Gaussian)(k x m Gaussian).
    Zero singular values are skipped since the ratio is undefined there.
    """
    if not k <= r <= min(n, m):
        raise ValueError(f"need k <= r <= min(n, m), got k={k}, r={r}, n={n}, m={m}")
    if kind == "identity" and r != n:
        raise ValueError("identity probe needs r == n")
    rng = np.random.default_rng(seed)
    ratios = []
    for t in range(trials):
        if make_matrix is None:
            A = rng.standard_normal((n, k)) @ rng.standard_normal((k, m))
        else:
            A = np.asarray(make_matrix(rng), dtype=np.float64)
        s_true = np.linalg.svd(A, compute_uv=False)[:k]
        keep = s_true > 1e-12 * max(1.0, s_true.max(initial=0.0))
        if not keep.any():
            continue
        pseed = hash64(seed, 0x50524F42, t)
        if kind == "identity":
            P = np.eye(n)
        elif kind == "sparse_jl":
            P = sample_sparse_jl(pseed, n, r)
        else:
            P = sample_gaussian(pseed, n, r)
        s_sketch = np.linalg.svd(P.T @ A, compute_uv=False)[:k]
        ratios.extend((s_sketch[keep] / s_true[keep]).tolist())
    return ratios
