"""Round orchestration: sampling, broadcast, local training, aggregation, reporting.

Every source of randomness is derived from the experiment seed through
namespaced sub-seeds, so a full experiment is a pure function of its config
and client work can run under any parallelism degree without changing a bit
of the output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Collection, Sequence

import numpy as np

from .aggregation import (
    AggregationPolicy,
    aggregate_adaptive,
    aggregate_fedavg,
    aggregate_zero_padding,
)
from .data import Dataset, SyntheticSpec, generate_synthetic, partition_iid
from .importance import ImportanceTracker, fresh_tracker, rank1_scores, update_tracker
from .lora import GlobalLora, LoraAdapter, init_adapter, upload_size
from .model import FrozenBase, TrainingConfig, evaluate, local_train
from .schemes import (
    ClientCapability,
    ClientPlan,
    UploadPayload,
    apply_freezing,
    apply_truncation,
    extract_upload,
    make_plan,
)

__all__ = [
    "SCHEMES",
    "FederationConfig",
    "FederationData",
    "ServerState",
    "RoundReport",
    "derive_seed",
    "round_seed",
    "client_seed",
    "prepare_data",
    "init_server_state",
    "sample_clients",
    "run_round",
    "run_experiment",
    "evaluate_distributed_clients",
]

SCHEMES = ("italora", "ifalora", "ifzlora", "homlora")

_SCHEME_MODES = {
    "italora": "truncation",
    "ifalora": "freezing",
    "ifzlora": "freezing",
    "homlora": "homogeneous",
}

# Namespace salts keeping the derived seed streams disjoint.
_INIT_NS = 101
_PARTITION_NS = 202
_SAMPLE_NS = 303
_CLIENT_NS = 404


def derive_seed(*parts: int) -> int:
    """Stable sub-seed from integer parts via a seed sequence."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, dtype=np.uint64)[0])


def round_seed(experiment_seed: int, round_index: int) -> int:
    return derive_seed(experiment_seed, _SAMPLE_NS, round_index)


def client_seed(experiment_seed: int, round_index: int, client_id: int) -> int:
    return derive_seed(experiment_seed, _CLIENT_NS, round_index, client_id)


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int
    sample_size: int
    rounds: int
    scheme: str
    capability_mix: tuple[tuple[int, ClientCapability], ...]
    r_min: int
    r_max: int
    seed: int
    training: TrainingConfig = TrainingConfig()
    policy: AggregationPolicy = AggregationPolicy()
    smoothing_beta1: float = 0.85
    smoothing_beta2: float = 0.85
    lora_scale: float = 1.0
    init_std: float = 0.02
    bytes_per_param: int = 4

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 1 <= self.sample_size <= self.n_clients:
            raise ValueError(
                f"sample_size must lie in [1, {self.n_clients}], got {self.sample_size}"
            )
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if not 1 <= self.r_min <= self.r_max:
            raise ValueError(f"need 1 <= r_min <= r_max, got {self.r_min}, {self.r_max}")
        total = sum(count for count, _ in self.capability_mix)
        if total != self.n_clients:
            raise ValueError(
                f"capability counts sum to {total}, expected n_clients={self.n_clients}"
            )
        expected_mode = _SCHEME_MODES[self.scheme]
        for count, cap in self.capability_mix:
            if count < 1:
                raise ValueError("capability mix counts must be >= 1")
            if cap.mode != expected_mode:
                raise ValueError(
                    f"scheme {self.scheme} requires {expected_mode} capabilities, "
                    f"got {cap.mode}"
                )
            if cap.mode == "truncation" and not self.r_min <= cap.rank <= self.r_max:
                raise ValueError(
                    f"capability rank {cap.rank} outside [{self.r_min}, {self.r_max}]"
                )

    def expand_capabilities(self) -> list[ClientCapability]:
        """Concrete per-client capabilities, ids 0..n_clients-1 in mix order."""
        caps: list[ClientCapability] = []
        for count, template in self.capability_mix:
            for _ in range(count):
                caps.append(
                    ClientCapability(
                        mode=template.mode,
                        client_id=len(caps),
                        rank=template.rank,
                        freeze_ratio=template.freeze_ratio,
                    )
                )
        return caps


@dataclass(frozen=True)
class FederationData:
    base: FrozenBase
    shards: tuple[Dataset, ...]
    test: Dataset


@dataclass
class ServerState:
    global_lora: GlobalLora
    tracker: ImportanceTracker
    round_index: int = 0  # rounds executed, including any that collected no payloads


@dataclass(frozen=True)
class RoundReport:
    round_index: int
    sampled: tuple[int, ...]
    global_accuracy: float
    global_loss: float
    client_accuracy_mean: float
    client_accuracy_by_class: tuple[tuple[str, float], ...]
    uploaded_params: int
    uploaded_bytes: int
    n_payloads: int
    scores: tuple[float, ...] = field(default=(), repr=False)
    plans: tuple[ClientPlan, ...] = field(default=(), repr=False)

    def to_json_dict(self) -> dict:
        return {
            "round": self.round_index,
            "sampled": list(self.sampled),
            "global_accuracy": self.global_accuracy,
            "global_loss": self.global_loss,
            "client_accuracy_mean": self.client_accuracy_mean,
            "client_accuracy_by_class": dict(self.client_accuracy_by_class),
            "uploaded_params": self.uploaded_params,
            "uploaded_bytes": self.uploaded_bytes,
            "n_payloads": self.n_payloads,
            "scores": list(self.scores),
            "plans": [plan.to_json_dict() for plan in self.plans],
        }


def prepare_data(spec: SyntheticSpec, n_clients: int, experiment_seed: int) -> FederationData:
    """Synthesize the task and deal the training split across clients."""
    task = generate_synthetic(spec)
    shards = partition_iid(task.train, n_clients, derive_seed(experiment_seed, _PARTITION_NS))
    return FederationData(base=task.base, shards=tuple(shards), test=task.test)


def init_server_state(config: FederationConfig, out_dim: int, in_dim: int) -> ServerState:
    adapter = init_adapter(
        out_dim,
        in_dim,
        config.r_max,
        scale=config.lora_scale,
        seed=derive_seed(config.seed, _INIT_NS),
        init_std=config.init_std,
    )
    tracker = fresh_tracker(
        adapter,
        beta1=config.smoothing_beta1,
        beta2=config.smoothing_beta2,
        eta=config.training.learning_rate,
    )
    return ServerState(global_lora=GlobalLora(adapter=adapter), tracker=tracker)


def sample_clients(n_clients: int, sample_size: int, seed: int) -> tuple[int, ...]:
    """Uniform draw without replacement, returned ascending."""
    if not 1 <= sample_size <= n_clients:
        raise ValueError(f"sample_size must lie in [1, {n_clients}], got {sample_size}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(n_clients, size=sample_size, replace=False)
    return tuple(sorted(int(c) for c in picked))


def _train_client(
    config: FederationConfig,
    data: FederationData,
    global_lora: GlobalLora,
    scores: np.ndarray,
    cap: ClientCapability,
    this_round: int,
) -> tuple[ClientPlan, UploadPayload]:
    plan = make_plan(cap, scores, config.r_max)
    if config.scheme == "italora":
        adapter = apply_truncation(global_lora, plan)
        mask = np.ones(adapter.rank, dtype=bool)
    elif config.scheme in ("ifalora", "ifzlora"):
        adapter, mask = apply_freezing(global_lora, plan)
    else:  # homlora: full copy, everything trainable
        src = global_lora.adapter
        adapter = LoraAdapter(b=src.b.copy(), a=src.a.copy(), rank=src.rank, scale=src.scale)
        mask = np.ones(adapter.rank, dtype=bool)
    trained = local_train(
        data.base,
        adapter,
        mask,
        data.shards[cap.client_id],
        config.training,
        client_seed(config.seed, this_round, cap.client_id),
    )
    return plan, extract_upload(trained, plan)


def _aggregate(
    config: FederationConfig,
    data: FederationData,
    prev: GlobalLora,
    payloads: Sequence[UploadPayload],
) -> GlobalLora:
    if config.scheme in ("italora", "ifalora"):
        return aggregate_adaptive(prev, payloads, config.policy)
    if config.scheme == "ifzlora":
        return aggregate_zero_padding(prev, payloads)
    weights = [data.shards[p.client_id].n_samples for p in payloads]
    return aggregate_fedavg(
        payloads, weights, scale=prev.adapter.scale, round_index=prev.round_index + 1
    )


def run_round(
    state: ServerState,
    config: FederationConfig,
    data: FederationData,
    *,
    workers: int = 1,
    exclude_clients: Collection[int] = (),
) -> tuple[ServerState, RoundReport]:
    """Execute one communication round and report its metrics.

    Clients listed in exclude_clients are sampled but contribute no payload;
    a round in which every sampled client dropped out leaves the global model
    and tracker untouched (n_payloads = 0 flags it).
    """
    this_round = state.round_index
    caps = config.expand_capabilities()
    sampled = sample_clients(
        config.n_clients, config.sample_size, round_seed(config.seed, this_round)
    )
    scores = rank1_scores(state.tracker)
    active = [cid for cid in sampled if cid not in set(exclude_clients)]

    def task(cid: int) -> tuple[ClientPlan, UploadPayload]:
        return _train_client(config, data, state.global_lora, scores, caps[cid], this_round)

    if workers > 1 and len(active) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, active))
    else:
        results = [task(cid) for cid in active]
    # Collection order never matters: aggregation consumes payloads sorted by client id.
    results.sort(key=lambda pair: pair[1].client_id)
    plans = tuple(pair[0] for pair in results)
    payloads = [pair[1] for pair in results]

    if payloads:
        new_global = _aggregate(config, data, state.global_lora, payloads)
        tracker = update_tracker(state.tracker, new_global.adapter.b, new_global.adapter.a)
    else:
        new_global = state.global_lora
        tracker = state.tracker
    new_state = ServerState(global_lora=new_global, tracker=tracker, round_index=this_round + 1)

    d, l = data.base.out_dim, data.base.in_dim
    uploaded_params = sum(upload_size(len(p.selected), d, l, 1) for p in payloads)
    uploaded_bytes = sum(
        upload_size(len(p.selected), d, l, config.bytes_per_param) for p in payloads
    )

    global_accuracy, global_loss = evaluate(data.base, new_global.adapter, data.test)
    by_class = evaluate_distributed_clients(new_state, config, data.base, data.test)
    class_counts = {}
    for count, template in config.capability_mix:
        class_counts[template.label()] = class_counts.get(template.label(), 0) + count
    mean_client = (
        sum(class_counts[label] * acc for label, acc in by_class.items()) / config.n_clients
    )

    report = RoundReport(
        round_index=new_state.round_index,
        sampled=sampled,
        global_accuracy=global_accuracy,
        global_loss=global_loss,
        client_accuracy_mean=mean_client,
        client_accuracy_by_class=tuple(by_class.items()),
        uploaded_params=uploaded_params,
        uploaded_bytes=uploaded_bytes,
        n_payloads=len(payloads),
        scores=tuple(float(s) for s in scores),
        plans=plans,
    )
    return new_state, report


def run_experiment(
    config: FederationConfig,
    data: FederationData,
    *,
    workers: int = 1,
    exclude_clients: Collection[int] = (),
) -> tuple[ServerState, list[RoundReport]]:
    """Run the configured number of rounds from a fresh server state."""
    state = init_server_state(config, data.base.out_dim, data.base.in_dim)
    reports: list[RoundReport] = []
    for _ in range(config.rounds):
        state, report = run_round(
            state, config, data, workers=workers, exclude_clients=exclude_clients
        )
        reports.append(report)
    return state, reports


def evaluate_distributed_clients(
    state: ServerState,
    config: FederationConfig,
    base: FrozenBase,
    test: Dataset,
) -> dict[str, float]:
    """Accuracy of the model each capability class would receive.

    Freezing-mode clients receive a bit-identical copy of the global adapter,
    so their accuracy equals the global accuracy exactly; truncation-mode
    clients evaluate the sliced adapter their rank allows.
    """
    scores = rank1_scores(state.tracker)
    results: dict[str, float] = {}
    for _, template in config.capability_mix:
        label = template.label()
        if label in results:
            continue
        cap = ClientCapability(
            mode=template.mode,
            client_id=-1 if template.client_id is None else template.client_id,
            rank=template.rank,
            freeze_ratio=template.freeze_ratio,
        )
        plan = make_plan(cap, scores, config.r_max)
        if cap.mode == "truncation":
            client_adapter = apply_truncation(state.global_lora, plan)
        elif cap.mode == "freezing":
            client_adapter, _ = apply_freezing(state.global_lora, plan)
        else:
            client_adapter = state.global_lora.adapter
        accuracy, _ = evaluate(base, client_adapter, test)
        results[label] = accuracy
    return results
