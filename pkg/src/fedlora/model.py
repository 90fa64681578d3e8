"""Frozen linear classifier with a trainable low-rank residual.

The base weight matrix maps features (in_dim) to class logits (out_dim) and
never changes; all learning happens in the adapter. Gradients of the
softmax cross-entropy (plus an L2 penalty on the trainable slices) are
analytic, and updates use bias-corrected Adam restricted to the trainable
rank-1 components.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .lora import LoraAdapter, as_matrix

if TYPE_CHECKING:
    from .data import Dataset

__all__ = [
    "FrozenBase",
    "TrainingConfig",
    "AdamState",
    "init_adam_state",
    "forward",
    "l2_penalty",
    "loss_and_grads",
    "adam_step",
    "local_train",
    "evaluate",
]


@dataclass(frozen=True)
class FrozenBase:
    """Fixed pretrained weights, shape (out_dim, in_dim)."""

    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", as_matrix(self.weights, "weights"))

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    local_epochs: int = 1
    batch_size: int = 32

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError(f"adam_eps must be positive, got {self.adam_eps}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class AdamState:
    """First/second moments over the trainable slices of b and a."""

    m_b: np.ndarray
    v_b: np.ndarray
    m_a: np.ndarray
    v_a: np.ndarray
    step: int = 0


def init_adam_state(out_dim: int, in_dim: int, n_active: int) -> AdamState:
    return AdamState(
        m_b=np.zeros((out_dim, n_active)),
        v_b=np.zeros((out_dim, n_active)),
        m_a=np.zeros((n_active, in_dim)),
        v_a=np.zeros((n_active, in_dim)),
    )


def _as_mask(mask, rank: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (rank,):
        raise ValueError(f"mask must have shape ({rank},), got {mask.shape}")
    return mask


def forward(base: FrozenBase, adapter: LoraAdapter, x) -> np.ndarray:
    """Logits for one feature vector; the dense residual is never materialized."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (base.in_dim,):
        raise ValueError(f"x must have shape ({base.in_dim},), got {x.shape}")
    if adapter.out_dim != base.out_dim or adapter.in_dim != base.in_dim:
        raise ValueError(
            f"adapter ({adapter.out_dim}, {adapter.in_dim}) does not match "
            f"base ({base.out_dim}, {base.in_dim})"
        )
    return base.weights @ x + adapter.scale * (adapter.b @ (adapter.a @ x))


def _batch_logits(base: FrozenBase, adapter: LoraAdapter, features: np.ndarray) -> np.ndarray:
    return features @ base.weights.T + adapter.scale * ((features @ adapter.a.T) @ adapter.b.T)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def l2_penalty(adapter: LoraAdapter, mask, weight_decay: float) -> float:
    """(weight_decay / 2) * squared Frobenius mass of the trainable slices."""
    mask = _as_mask(mask, adapter.rank)
    return 0.5 * weight_decay * (
        float(np.sum(adapter.b[:, mask] ** 2)) + float(np.sum(adapter.a[mask, :] ** 2))
    )


def loss_and_grads(
    base: FrozenBase,
    adapter: LoraAdapter,
    mask,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainingConfig,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus L2 on trainable slices, with analytic gradients.

    Frozen components still shape the forward pass but get no gradient:
    the returned grad_b has shape (out_dim, n_active) for the active columns
    of b, grad_a has shape (n_active, in_dim) for the active rows of a.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, in_dim) array")
    if labels.shape != (features.shape[0],):
        raise ValueError("labels must match the batch length")
    mask = _as_mask(mask, adapter.rank)
    if not mask.any():
        raise ValueError("mask must select at least one trainable component")

    n = features.shape[0]
    log_probs = _log_softmax(_batch_logits(base, adapter, features))
    ce = -float(log_probs[np.arange(n), labels].mean())
    loss = ce + l2_penalty(adapter, mask, cfg.weight_decay)

    residual = np.exp(log_probs)                      # softmax probabilities
    residual[np.arange(n), labels] -= 1.0             # minus one-hot targets
    activ = features @ adapter.a[mask, :].T            # (n, n_active)
    grad_b = adapter.scale * (residual.T @ activ) / n + cfg.weight_decay * adapter.b[:, mask]
    grad_a = (
        adapter.scale * (adapter.b[:, mask].T @ residual.T) @ features / n
        + cfg.weight_decay * adapter.a[mask, :]
    )
    return loss, grad_b, grad_a


def adam_step(
    adapter: LoraAdapter,
    mask,
    grads: tuple[np.ndarray, np.ndarray],
    state: AdamState,
    cfg: TrainingConfig,
) -> tuple[LoraAdapter, AdamState]:
    """One bias-corrected Adam update on the trainable slices.

    Frozen columns/rows come back bit-identical; both the adapter and the
    moment state are returned as new objects.
    """
    mask = _as_mask(mask, adapter.rank)
    grad_b, grad_a = grads
    if grad_b.shape != state.m_b.shape or grad_a.shape != state.m_a.shape:
        raise ValueError(
            f"gradient shapes {grad_b.shape}/{grad_a.shape} do not match "
            f"state {state.m_b.shape}/{state.m_a.shape}"
        )
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    t = state.step + 1
    m_b = b1 * state.m_b + (1 - b1) * grad_b
    v_b = b2 * state.v_b + (1 - b2) * grad_b**2
    m_a = b1 * state.m_a + (1 - b1) * grad_a
    v_a = b2 * state.v_a + (1 - b2) * grad_a**2
    correct1 = 1 - b1**t
    correct2 = 1 - b2**t

    new_b = adapter.b.copy()
    new_a = adapter.a.copy()
    new_b[:, mask] -= cfg.learning_rate * (m_b / correct1) / (np.sqrt(v_b / correct2) + cfg.adam_eps)
    new_a[mask, :] -= cfg.learning_rate * (m_a / correct1) / (np.sqrt(v_a / correct2) + cfg.adam_eps)

    updated = LoraAdapter(b=new_b, a=new_a, rank=adapter.rank, scale=adapter.scale)
    return updated, AdamState(m_b=m_b, v_b=v_b, m_a=m_a, v_a=v_a, step=t)


def local_train(
    base: FrozenBase,
    adapter: LoraAdapter,
    mask,
    shard: "Dataset",
    cfg: TrainingConfig,
    seed: int,
) -> LoraAdapter:
    """Seeded mini-batch Adam over the shard; returns the updated adapter.

    Each epoch reshuffles the shard with the same generator, so the result is
    a pure function of (inputs, seed).
    """
    if shard.n_samples == 0:
        raise ValueError("cannot train on an empty shard")
    mask = _as_mask(mask, adapter.rank)
    state = init_adam_state(adapter.out_dim, adapter.in_dim, int(mask.sum()))
    rng = np.random.default_rng(seed)
    current = adapter
    for _ in range(cfg.local_epochs):
        order = rng.permutation(shard.n_samples)
        for start in range(0, shard.n_samples, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, grad_b, grad_a = loss_and_grads(
                base, current, mask, shard.features[batch], shard.labels[batch], cfg
            )
            current, state = adam_step(current, mask, (grad_b, grad_a), state, cfg)
    return current


def evaluate(base: FrozenBase, adapter: LoraAdapter, dataset: "Dataset") -> tuple[float, float]:
    """Argmax accuracy and mean unregularized cross-entropy over a dataset."""
    if dataset.n_samples == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    log_probs = _log_softmax(_batch_logits(base, adapter, dataset.features))
    predictions = log_probs.argmax(axis=1)
    accuracy = float((predictions == dataset.labels).mean())
    mean_loss = -float(log_probs[np.arange(dataset.n_samples), dataset.labels].mean())
    return accuracy, mean_loss
