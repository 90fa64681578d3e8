"""Low-rank adapter pairs: construction, rank-1 views, and upload accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LoraAdapter",
    "GlobalLora",
    "init_adapter",
    "rank1_component",
    "effective_delta",
    "upload_size",
]


def as_matrix(value, name: str) -> np.ndarray:
    """Coerce to a finite float64 2-D array, or raise ValueError."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class LoraAdapter:
    """Trainable pair (b, a) whose residual is scale * (b @ a).

    b has shape (out_dim, rank), a has shape (rank, in_dim). Column i of b
    together with row i of a forms the i-th rank-1 component of the residual.
    Treated as immutable once constructed.
    """

    b: np.ndarray
    a: np.ndarray
    rank: int
    scale: float = 1.0

    def __post_init__(self):
        b = as_matrix(self.b, "b")
        a = as_matrix(self.a, "a")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if b.shape[1] != self.rank or a.shape[0] != self.rank:
            raise ValueError(
                f"shape mismatch: b is {b.shape}, a is {a.shape}, rank is {self.rank}"
            )
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def out_dim(self) -> int:
        return self.b.shape[0]

    @property
    def in_dim(self) -> int:
        return self.a.shape[1]


@dataclass(frozen=True)
class GlobalLora:
    """Server-side adapter plus the count of completed aggregations."""

    adapter: LoraAdapter
    round_index: int = 0

    def __post_init__(self):
        if self.round_index < 0:
            raise ValueError(f"round_index must be >= 0, got {self.round_index}")


def init_adapter(
    out_dim: int,
    in_dim: int,
    rank: int,
    scale: float = 1.0,
    seed: int = 0,
    init_std: float = 0.02,
) -> LoraAdapter:
    """Fresh adapter: a drawn from a seeded Gaussian, b all zeros.

    Zeroing b makes the initial residual exactly zero, so an untrained adapter
    never perturbs the frozen base. Identical seeds give bitwise-identical
    adapters.
    """
    if out_dim < 1 or in_dim < 1 or rank < 1:
        raise ValueError(
            f"dimensions must be >= 1, got out_dim={out_dim} in_dim={in_dim} rank={rank}"
        )
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, init_std, size=(rank, in_dim))
    b = np.zeros((out_dim, rank))
    return LoraAdapter(b=b, a=a, rank=rank, scale=scale)


def rank1_component(adapter: LoraAdapter, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (column i of b, row i of a) as fresh 1-D copies."""
    if not 0 <= i < adapter.rank:
        raise IndexError(f"rank-1 index {i} out of range for rank {adapter.rank}")
    return adapter.b[:, i].copy(), adapter.a[i, :].copy()


def effective_delta(adapter: LoraAdapter) -> np.ndarray:
    """Materialize the dense residual scale * (b @ a), shape (out_dim, in_dim)."""
    return adapter.scale * (adapter.b @ adapter.a)


def upload_size(selected_count: int, out_dim: int, in_dim: int, bytes_per_param: int) -> int:
    """Bytes uploaded for `selected_count` rank-1 components: one b column plus one a row each."""
    if selected_count < 0 or out_dim < 0 or in_dim < 0 or bytes_per_param < 0:
        raise ValueError("upload_size arguments must be non-negative")
    return selected_count * (out_dim + in_dim) * bytes_per_param
