"""Server-side aggregation of uploaded rank-1 components.

Three strategies:

* adaptive: per rank-1 index, a convex combination of the contributing
  clients' columns/rows weighted by each client's upload norm over the
  per-index norm total. Indices nobody uploaded follow a configurable stale
  rule (keep the previous value, or zero them out).
* zero_padding: every payload is scattered into a full-size zero matrix and
  the padded matrices are averaged uniformly over all payloads, so sparsely
  updated indices are diluted.
* fedavg: plain weighted mean for the homogeneous full-rank baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lora import GlobalLora, LoraAdapter
from .schemes import UploadPayload

__all__ = [
    "AggregationPolicy",
    "AggregationAccumulator",
    "accumulate",
    "aggregate_adaptive",
    "aggregate_zero_padding",
    "aggregate_fedavg",
]

AGGREGATION_KINDS = ("adaptive", "zero_padding", "fedavg")
STALE_INDEX_RULES = ("retain_previous", "zero")


@dataclass(frozen=True)
class AggregationPolicy:
    kind: str = "adaptive"
    stale_index_rule: str = "retain_previous"

    def __post_init__(self):
        if self.kind not in AGGREGATION_KINDS:
            raise ValueError(f"unknown aggregation kind {self.kind!r}")
        if self.stale_index_rule not in STALE_INDEX_RULES:
            raise ValueError(f"unknown stale_index_rule {self.stale_index_rule!r}")


@dataclass
class AggregationAccumulator:
    """Per-index norm totals, contributor counts, and weighted running sums."""

    z_totals: np.ndarray
    contributors: np.ndarray
    sum_b: np.ndarray
    sum_a: np.ndarray


def _check_payloads(payloads: Sequence[UploadPayload], r_g: int, out_dim: int, in_dim: int) -> None:
    prev_id = None
    for p in payloads:
        if prev_id is not None and p.client_id <= prev_id:
            raise ValueError(
                "payloads must be strictly ascending by client_id "
                f"(saw {prev_id} then {p.client_id})"
            )
        prev_id = p.client_id
        if p.selected[-1] >= r_g:
            raise ValueError(
                f"client {p.client_id} uploads index {p.selected[-1]} beyond global rank {r_g}"
            )
        if p.b_cols.shape[0] != out_dim or p.a_rows.shape[1] != in_dim:
            raise ValueError(
                f"client {p.client_id} payload shapes {p.b_cols.shape}/{p.a_rows.shape} "
                f"do not match global ({out_dim}, {in_dim})"
            )
        if p.norm_z < 0:
            raise ValueError(f"client {p.client_id} has negative norm {p.norm_z}")


def accumulate(
    payloads: Sequence[UploadPayload], r_g: int, out_dim: int, in_dim: int
) -> AggregationAccumulator:
    """Run the two-pass norm-weighted accumulation over sorted payloads.

    Pass one totals each index's contribution norms; pass two adds every
    contributor's column/row scaled by norm_z over the index total. When all
    contributors to an index uploaded a zero norm the weights are undefined,
    so those indices fall back to a uniform average over their contributors.
    """
    _check_payloads(payloads, r_g, out_dim, in_dim)
    z_totals = np.zeros(r_g)
    contributors = np.zeros(r_g, dtype=np.int64)
    for p in payloads:
        for j in p.selected:
            z_totals[j] += p.norm_z
            contributors[j] += 1

    sum_b = np.zeros((out_dim, r_g))
    sum_a = np.zeros((r_g, in_dim))
    for p in payloads:
        for slot, j in enumerate(p.selected):
            if z_totals[j] > 0:
                weight = p.norm_z / z_totals[j]
            else:
                weight = 1.0 / contributors[j]
            sum_b[:, j] += weight * p.b_cols[:, slot]
            sum_a[j, :] += weight * p.a_rows[slot, :]
    return AggregationAccumulator(
        z_totals=z_totals, contributors=contributors, sum_b=sum_b, sum_a=sum_a
    )


def aggregate_adaptive(
    prev_global: GlobalLora,
    payloads: Sequence[UploadPayload],
    policy: AggregationPolicy = AggregationPolicy(),
) -> GlobalLora:
    """Norm-weighted per-index aggregation into a new global adapter."""
    if policy.kind != "adaptive":
        raise ValueError(f"aggregate_adaptive called with policy kind {policy.kind!r}")
    adapter = prev_global.adapter
    acc = accumulate(payloads, adapter.rank, adapter.out_dim, adapter.in_dim)

    new_b = acc.sum_b
    new_a = acc.sum_a
    stale = acc.contributors == 0
    if policy.stale_index_rule == "retain_previous":
        new_b[:, stale] = adapter.b[:, stale]
        new_a[stale, :] = adapter.a[stale, :]
    # "zero" keeps the initialized zeros for stale indices.

    return GlobalLora(
        adapter=LoraAdapter(b=new_b, a=new_a, rank=adapter.rank, scale=adapter.scale),
        round_index=prev_global.round_index + 1,
    )


def aggregate_zero_padding(
    prev_global: GlobalLora, payloads: Sequence[UploadPayload]
) -> GlobalLora:
    """Pad every payload to full rank with zeros and average over all payloads."""
    adapter = prev_global.adapter
    if len(payloads) == 0:
        raise ValueError("zero-padding aggregation needs at least one payload")
    _check_payloads(payloads, adapter.rank, adapter.out_dim, adapter.in_dim)

    new_b = np.zeros_like(adapter.b)
    new_a = np.zeros_like(adapter.a)
    for p in payloads:
        idx = list(p.selected)
        new_b[:, idx] += p.b_cols
        new_a[idx, :] += p.a_rows
    new_b /= len(payloads)
    new_a /= len(payloads)

    return GlobalLora(
        adapter=LoraAdapter(b=new_b, a=new_a, rank=adapter.rank, scale=adapter.scale),
        round_index=prev_global.round_index + 1,
    )


def aggregate_fedavg(
    payloads: Sequence[UploadPayload],
    weights: Sequence[float] | None = None,
    *,
    scale: float = 1.0,
    round_index: int = 0,
) -> GlobalLora:
    """Weighted mean of full-rank payloads (the homogeneous baseline).

    All payloads must cover the same full index range. With equal weights
    (or none) this is the plain mean.
    """
    if len(payloads) == 0:
        raise ValueError("fedavg needs at least one payload")
    rank = len(payloads[0].selected)
    full = tuple(range(rank))
    out_dim = payloads[0].b_cols.shape[0]
    in_dim = payloads[0].a_rows.shape[1]
    _check_payloads(payloads, rank, out_dim, in_dim)
    for p in payloads:
        if p.selected != full:
            raise ValueError(
                f"fedavg requires full-rank payloads; client {p.client_id} covers {p.selected}"
            )

    if weights is None:
        w = np.full(len(payloads), 1.0 / len(payloads))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(payloads),):
            raise ValueError(f"need one weight per payload, got shape {w.shape}")
        if (w < 0).any() or not w.sum() > 0:
            raise ValueError("weights must be non-negative with a positive sum")
        w = w / w.sum()

    new_b = np.zeros((out_dim, rank))
    new_a = np.zeros((rank, in_dim))
    for p, wk in zip(payloads, w):
        new_b += wk * p.b_cols
        new_a += wk * p.a_rows

    return GlobalLora(
        adapter=LoraAdapter(b=new_b, a=new_a, rank=rank, scale=scale),
        round_index=round_index,
    )
