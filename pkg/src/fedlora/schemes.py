"""Client-side plans: top-k rank-1 selection, truncation, freezing, upload extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lora import GlobalLora, LoraAdapter, as_matrix

__all__ = [
    "MODES",
    "ClientPlan",
    "ClientCapability",
    "UploadPayload",
    "topk_indices",
    "trained_count",
    "selected_count",
    "make_plan",
    "apply_truncation",
    "apply_freezing",
    "extract_upload",
]

MODES = ("truncation", "freezing", "homogeneous")


@dataclass(frozen=True)
class ClientCapability:
    """What one client can afford: a local rank, a freeze ratio, or full rank.

    Truncation-mode clients carry `rank`, freezing-mode clients carry
    `freeze_ratio`, homogeneous clients carry neither. Templates used for
    capability mixes may leave client_id as None.
    """

    mode: str
    client_id: int | None = None
    rank: int | None = None
    freeze_ratio: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown capability mode {self.mode!r}")
        if self.mode == "truncation":
            if self.rank is None or self.freeze_ratio is not None:
                raise ValueError("truncation capability needs rank and no freeze_ratio")
            if self.rank < 1:
                raise ValueError(f"rank must be >= 1, got {self.rank}")
        elif self.mode == "freezing":
            if self.freeze_ratio is None or self.rank is not None:
                raise ValueError("freezing capability needs freeze_ratio and no rank")
            if not 0.0 <= self.freeze_ratio < 1.0:
                raise ValueError(f"freeze_ratio must lie in [0, 1), got {self.freeze_ratio}")
        else:
            if self.rank is not None or self.freeze_ratio is not None:
                raise ValueError("homogeneous capability carries neither rank nor freeze_ratio")

    def label(self) -> str:
        """Stable name of the capability class, used in reports."""
        if self.mode == "truncation":
            return f"rank_{self.rank}"
        if self.mode == "freezing":
            return f"freeze_{self.freeze_ratio:g}"
        return "full_rank"


@dataclass(frozen=True)
class ClientPlan:
    """A client's trained index set and its frozen complement over 0..r_g-1."""

    client_id: int
    selected: tuple[int, ...]
    frozen: tuple[int, ...]
    mode: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown plan mode {self.mode!r}")
        if len(self.selected) < 1:
            raise ValueError("plan must select at least one rank-1 component")
        if list(self.selected) != sorted(set(self.selected)):
            raise ValueError("selected indices must be strictly ascending")
        if set(self.selected) & set(self.frozen):
            raise ValueError("selected and frozen index sets overlap")
        combined = sorted(set(self.selected) | set(self.frozen))
        if combined != list(range(len(combined))):
            raise ValueError("selected and frozen must partition a contiguous index range")

    @property
    def total_rank(self) -> int:
        return len(self.selected) + len(self.frozen)

    def to_json_dict(self) -> dict:
        return {
            "client_id": self.client_id,
            "mode": self.mode,
            "selected": list(self.selected),
            "frozen": list(self.frozen),
        }


@dataclass(frozen=True)
class UploadPayload:
    """The rank-1 slices a client sends back, plus its contribution norm."""

    client_id: int
    selected: tuple[int, ...]
    b_cols: np.ndarray
    a_rows: np.ndarray
    norm_z: float

    def __post_init__(self):
        object.__setattr__(self, "b_cols", as_matrix(self.b_cols, "b_cols"))
        object.__setattr__(self, "a_rows", as_matrix(self.a_rows, "a_rows"))
        m = len(self.selected)
        if m < 1:
            raise ValueError("payload must carry at least one rank-1 component")
        if list(self.selected) != sorted(set(self.selected)):
            raise ValueError("payload indices must be strictly ascending")
        if self.b_cols.shape[1] != m or self.a_rows.shape[0] != m:
            raise ValueError(
                f"payload shapes {self.b_cols.shape}/{self.a_rows.shape} do not match "
                f"{m} selected indices"
            )
        if not (math.isfinite(self.norm_z) and self.norm_z >= 0):
            raise ValueError(f"norm_z must be finite and >= 0, got {self.norm_z}")


def topk_indices(scores, k: int) -> tuple[int, ...]:
    """Indices of the k largest scores, ties to the lowest index, ascending result."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be 1-D, got shape {scores.shape}")
    if not 1 <= k <= scores.shape[0]:
        raise ValueError(f"k={k} out of range for {scores.shape[0]} scores")
    # Stable sort on negated scores keeps equal-score entries in index order.
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def trained_count(alpha: float, r_max: int) -> int:
    """Number of actively trained rank-1 components for freeze ratio alpha.

    Round-half-up of (1 - alpha) * r_max, clamped to at least one.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"freeze ratio must lie in [0, 1), got {alpha}")
    return max(1, math.floor((1.0 - alpha) * r_max + 0.5))


def selected_count(cap: ClientCapability, r_g: int) -> int:
    """How many rank-1 components this capability trains out of r_g."""
    if cap.mode == "truncation":
        if cap.rank > r_g:
            raise ValueError(f"client rank {cap.rank} exceeds global rank {r_g}")
        return cap.rank
    if cap.mode == "freezing":
        return trained_count(cap.freeze_ratio, r_g)
    return r_g


def make_plan(cap: ClientCapability, scores, r_g: int) -> ClientPlan:
    """Select this client's trained components from the broadcast score list."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (r_g,):
        raise ValueError(f"expected {r_g} scores, got shape {scores.shape}")
    if cap.client_id is None:
        raise ValueError("cannot build a plan from a capability template without client_id")
    selected = topk_indices(scores, selected_count(cap, r_g))
    frozen = tuple(i for i in range(r_g) if i not in set(selected))
    return ClientPlan(client_id=cap.client_id, selected=selected, frozen=frozen, mode=cap.mode)


def apply_truncation(global_lora: GlobalLora, plan: ClientPlan) -> LoraAdapter:
    """Slice the global adapter down to the plan's selected components."""
    if plan.mode != "truncation":
        raise ValueError(f"apply_truncation requires a truncation plan, got {plan.mode!r}")
    adapter = global_lora.adapter
    if plan.selected[-1] >= adapter.rank:
        raise IndexError(
            f"plan index {plan.selected[-1]} out of range for global rank {adapter.rank}"
        )
    idx = list(plan.selected)
    return LoraAdapter(
        b=adapter.b[:, idx].copy(),
        a=adapter.a[idx, :].copy(),
        rank=len(idx),
        scale=adapter.scale,
    )


def apply_freezing(global_lora: GlobalLora, plan: ClientPlan) -> tuple[LoraAdapter, np.ndarray]:
    """Copy the full global adapter; mark only the selected components trainable.

    The returned adapter is value-identical to the global one (freezing never
    alters what a client receives); the boolean mask is True exactly on the
    plan's selected indices.
    """
    if plan.mode != "freezing":
        raise ValueError(f"apply_freezing requires a freezing plan, got {plan.mode!r}")
    adapter = global_lora.adapter
    if plan.total_rank != adapter.rank:
        raise ValueError(
            f"plan covers {plan.total_rank} components but global rank is {adapter.rank}"
        )
    mask = np.zeros(adapter.rank, dtype=bool)
    mask[list(plan.selected)] = True
    local = LoraAdapter(
        b=adapter.b.copy(), a=adapter.a.copy(), rank=adapter.rank, scale=adapter.scale
    )
    return local, mask


def extract_upload(adapter: LoraAdapter, plan: ClientPlan) -> UploadPayload:
    """Pull the plan's rank-1 slices out of a trained adapter.

    Truncation-mode adapters carry only the selected components, so the whole
    adapter is the payload; freezing-mode (and homogeneous) adapters are
    full-rank and get sliced. norm_z is the Frobenius norm of the scaled
    product of the uploaded slices.
    """
    if plan.mode == "truncation":
        if adapter.rank != len(plan.selected):
            raise ValueError(
                f"truncated adapter rank {adapter.rank} does not match "
                f"{len(plan.selected)} selected indices"
            )
        b_cols = adapter.b.copy()
        a_rows = adapter.a.copy()
    else:
        if adapter.rank != plan.total_rank:
            raise ValueError(
                f"adapter rank {adapter.rank} does not match plan span {plan.total_rank}"
            )
        idx = list(plan.selected)
        b_cols = adapter.b[:, idx].copy()
        a_rows = adapter.a[idx, :].copy()
    norm_z = float(np.linalg.norm(adapter.scale * (b_cols @ a_rows)))
    return UploadPayload(
        client_id=plan.client_id,
        selected=plan.selected,
        b_cols=b_cols,
        a_rows=a_rows,
        norm_z=norm_z,
    )
