"""Dataset synthesis with a planted low-rank residual, TSV ingestion, and IID partitioning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lora import LoraAdapter
from .model import FrozenBase

__all__ = [
    "Dataset",
    "SyntheticSpec",
    "SyntheticTask",
    "generate_synthetic",
    "load_tsv",
    "partition_iid",
]

# Entry scales for the synthesized task. The planted residual dominates the
# base so that label structure genuinely depends on the adapter target, which
# keeps low-rank client models capacity-limited when true_rank exceeds them.
# Magnitudes are small so the default learning rate traverses them within a
# hundred federated rounds; argmax labels are invariant to the overall scale.
BASE_WEIGHT_STD = 0.0056
PLANT_FACTOR_STD = 0.1


@dataclass(frozen=True)
class Dataset:
    """Feature rows with integer class labels below class_count."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if not np.isfinite(features).all():
            raise ValueError("features contain non-finite values")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must be one per feature row")
        if self.class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {self.class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int
    feature_dim: int
    true_rank: int
    n_train: int
    n_test: int
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2 or self.feature_dim < 1:
            raise ValueError("need class_count >= 2 and feature_dim >= 1")
        if not 1 <= self.true_rank <= min(self.class_count, self.feature_dim):
            raise ValueError(
                f"true_rank must lie in [1, {min(self.class_count, self.feature_dim)}], "
                f"got {self.true_rank}"
            )
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError(f"label_noise must lie in [0, 0.5), got {self.label_noise}")


@dataclass(frozen=True)
class SyntheticTask:
    """Generated task: frozen base, the planted residual factors, and splits."""

    base: FrozenBase
    planted: LoraAdapter
    train: Dataset
    test: Dataset


def _draw_split(rng: np.random.Generator, spec: SyntheticSpec, target: np.ndarray, n: int) -> Dataset:
    features = rng.standard_normal((n, spec.feature_dim))
    labels = (features @ target.T).argmax(axis=1)
    if spec.label_noise > 0:
        flip = rng.random(n) < spec.label_noise
        # Flipped labels move to a uniformly random *other* class.
        offsets = rng.integers(1, spec.class_count, size=n)
        labels = np.where(flip, (labels + offsets) % spec.class_count, labels)
    return Dataset(features=features, labels=labels, class_count=spec.class_count)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticTask:
    """Draw a frozen base, plant a rank-`true_rank` residual, and sample both splits.

    Labels are the argmax of (base + planted residual) applied to standard
    Gaussian features, each flipped to another class with probability
    label_noise. Pure function of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    base = FrozenBase(
        weights=rng.normal(0.0, BASE_WEIGHT_STD, size=(spec.class_count, spec.feature_dim))
    )
    planted = LoraAdapter(
        b=rng.normal(0.0, PLANT_FACTOR_STD, size=(spec.class_count, spec.true_rank)),
        a=rng.normal(0.0, PLANT_FACTOR_STD, size=(spec.true_rank, spec.feature_dim)),
        rank=spec.true_rank,
    )
    target = base.weights + planted.b @ planted.a
    train = _draw_split(rng, spec, target, spec.n_train)
    test = _draw_split(rng, spec, target, spec.n_test)
    return SyntheticTask(base=base, planted=planted, train=train, test=test)


def load_tsv(path, feature_dim: int, class_count: int) -> Dataset:
    """Parse `label<TAB>f1<TAB>...<TAB>f_dim` rows; blank lines are skipped.

    Malformed rows raise ValueError naming the 1-based line number. An empty
    file yields an empty dataset.
    """
    features: list[list[float]] = []
    labels: list[int] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != feature_dim + 1:
                raise ValueError(
                    f"{path}: line {lineno}: expected label plus {feature_dim} features, "
                    f"got {len(parts)} fields"
                )
            try:
                label = int(parts[0])
                row = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            if not 0 <= label < class_count:
                raise ValueError(
                    f"{path}: line {lineno}: label {label} outside [0, {class_count})"
                )
            labels.append(label)
            features.append(row)
    return Dataset(
        features=np.asarray(features, dtype=np.float64).reshape(len(labels), feature_dim),
        labels=np.asarray(labels, dtype=np.int64),
        class_count=class_count,
    )


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> list[Dataset]:
    """Seeded shuffle then round-robin deal into n_clients shards.

    Shard sizes differ by at most one and the multiset union of shards is
    exactly the input.
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    order = np.random.default_rng(seed).permutation(dataset.n_samples)
    return [
        Dataset(
            features=dataset.features[order[i::n_clients]],
            labels=dataset.labels[order[i::n_clients]],
            class_count=dataset.class_count,
        )
        for i in range(n_clients)
    ]
