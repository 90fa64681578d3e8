"""Server-side importance tracking for rank-1 adapter components.

Sensitivity of each adapter element is approximated from the change in the
global parameters between consecutive rounds, scaled by the learning rate.
Per-element sensitivities are smoothed with an exponential moving average,
paired with an EMA of their absolute deviation (uncertainty), and the
product of the two is summed per rank-1 component to produce the score list
broadcast to clients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .lora import LoraAdapter, as_matrix

__all__ = [
    "ImportanceTracker",
    "fresh_tracker",
    "raw_sensitivity",
    "update_tracker",
    "combined_score",
    "rank1_scores",
]

# A score list is a 1-D float64 array of length r_g, one non-negative entry
# per rank-1 component; it serializes as a plain JSON array in round logs.
ScoreList = np.ndarray


@dataclass(frozen=True)
class ImportanceTracker:
    """Smoothed sensitivity and uncertainty state for every adapter element."""

    prev_b: np.ndarray
    prev_a: np.ndarray
    smoothed_b: np.ndarray
    smoothed_a: np.ndarray
    uncertainty_b: np.ndarray
    uncertainty_a: np.ndarray
    beta1: float
    beta2: float
    eta: float
    rounds_seen: int = 0

    def __post_init__(self):
        for name in ("prev_b", "prev_a", "smoothed_b", "smoothed_a",
                     "uncertainty_b", "uncertainty_a"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        if self.smoothed_b.shape != self.prev_b.shape or self.uncertainty_b.shape != self.prev_b.shape:
            raise ValueError("b-side tracker matrices must share one shape")
        if self.smoothed_a.shape != self.prev_a.shape or self.uncertainty_a.shape != self.prev_a.shape:
            raise ValueError("a-side tracker matrices must share one shape")
        if self.prev_b.shape[1] != self.prev_a.shape[0]:
            raise ValueError(
                f"rank mismatch between b {self.prev_b.shape} and a {self.prev_a.shape}"
            )
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"smoothing factors must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if (self.smoothed_b < 0).any() or (self.smoothed_a < 0).any():
            raise ValueError("smoothed sensitivities must be non-negative")
        if (self.uncertainty_b < 0).any() or (self.uncertainty_a < 0).any():
            raise ValueError("uncertainties must be non-negative")

    @property
    def rank(self) -> int:
        return self.prev_b.shape[1]


def fresh_tracker(adapter: LoraAdapter, beta1: float, beta2: float, eta: float) -> ImportanceTracker:
    """Tracker for a newly initialized global adapter: EMAs start at zero.

    With zero smoothed/uncertainty state the first broadcast score list is
    all zeros, and the deterministic lowest-index tie-break makes round-0
    selection well-defined.
    """
    return ImportanceTracker(
        prev_b=adapter.b.copy(),
        prev_a=adapter.a.copy(),
        smoothed_b=np.zeros_like(adapter.b),
        smoothed_a=np.zeros_like(adapter.a),
        uncertainty_b=np.zeros_like(adapter.b),
        uncertainty_a=np.zeros_like(adapter.a),
        beta1=beta1,
        beta2=beta2,
        eta=eta,
    )


def raw_sensitivity(current, previous, eta: float):
    """|w * delta_w / eta| with delta_w the change since the previous round.

    Works elementwise on arrays; scalars in, scalar out.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    value = np.abs(current * (np.asarray(current) - previous) / eta)
    return float(value) if np.ndim(value) == 0 else value


def update_tracker(tracker: ImportanceTracker, new_b: np.ndarray, new_a: np.ndarray) -> ImportanceTracker:
    """Fold one round of new global parameters into the tracker.

    Per element: sensitivity from the parameter delta, then the smoothed EMA,
    then the uncertainty EMA of |sensitivity - freshly updated smoothed value|.
    Returns a new tracker; the input is untouched.
    """
    new_b = as_matrix(new_b, "new_b")
    new_a = as_matrix(new_a, "new_a")
    if new_b.shape != tracker.prev_b.shape or new_a.shape != tracker.prev_a.shape:
        raise ValueError(
            f"parameter shapes {new_b.shape}/{new_a.shape} do not match tracker "
            f"{tracker.prev_b.shape}/{tracker.prev_a.shape}"
        )
    b1, b2 = tracker.beta1, tracker.beta2

    sens_b = raw_sensitivity(new_b, tracker.prev_b, tracker.eta)
    sens_a = raw_sensitivity(new_a, tracker.prev_a, tracker.eta)
    smoothed_b = b1 * tracker.smoothed_b + (1.0 - b1) * sens_b
    smoothed_a = b1 * tracker.smoothed_a + (1.0 - b1) * sens_a
    uncertainty_b = b2 * tracker.uncertainty_b + (1.0 - b2) * np.abs(sens_b - smoothed_b)
    uncertainty_a = b2 * tracker.uncertainty_a + (1.0 - b2) * np.abs(sens_a - smoothed_a)

    return replace(
        tracker,
        prev_b=new_b.copy(),
        prev_a=new_a.copy(),
        smoothed_b=smoothed_b,
        smoothed_a=smoothed_a,
        uncertainty_b=uncertainty_b,
        uncertainty_a=uncertainty_a,
        rounds_seen=tracker.rounds_seen + 1,
    )


def combined_score(tracker: ImportanceTracker) -> tuple[np.ndarray, np.ndarray]:
    """Per-element importance: smoothed sensitivity times uncertainty, for b and a."""
    return tracker.smoothed_b * tracker.uncertainty_b, tracker.smoothed_a * tracker.uncertainty_a


def rank1_scores(tracker: ImportanceTracker) -> ScoreList:
    """Score of rank-1 component i: sum of combined scores over b column i and a row i."""
    score_b, score_a = combined_score(tracker)
    return score_b.sum(axis=0) + score_a.sum(axis=1)
