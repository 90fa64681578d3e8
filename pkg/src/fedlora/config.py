"""Experiment configuration: flat key-value files, validation, and builders.

Config files hold one `key = value` pair per line; blank lines and lines
starting with `#` are ignored. Every key has a default, so an empty file is
a complete configuration. Parsing rejects unknown keys and values of the
wrong type, and cross-field validation names the offending keys.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .aggregation import STALE_INDEX_RULES, AggregationPolicy
from .data import SyntheticSpec
from .federation import SCHEMES, FederationConfig
from .model import TrainingConfig
from .schemes import ClientCapability

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "parse_config_text",
    "serialize_config",
    "resolve_scheme_token",
    "synthetic_spec",
    "federation_config",
    "CONFIG_KEYS",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # federation
    scheme: str = "ifalora"
    n_clients: int = 100
    sample_size: int = 10
    rounds: int = 100
    r_min: int = 2
    r_max: int = 16
    homlora_rank: int = 16
    rank_mix: tuple[tuple[int, int], ...] = ((2, 33), (4, 33), (16, 34))
    freeze_mix: tuple[tuple[float, int], ...] = ((0.875, 33), (0.75, 33), (0.0, 34))
    # synthetic task
    class_count: int = 20
    feature_dim: int = 64
    true_rank: int = 8
    n_train: int = 40000
    n_test: int = 2000
    label_noise: float = 0.05
    # local training
    learning_rate: float = 0.001
    weight_decay: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    local_epochs: int = 3
    batch_size: int = 50
    # importance smoothing
    smoothing_beta1: float = 0.85
    smoothing_beta2: float = 0.85
    # adapter
    lora_scale: float = 1.0
    lora_scale_div_rank: bool = False
    init_std: float = 0.02
    # aggregation and accounting
    stale_index_rule: str = "retain_previous"
    bytes_per_param: int = 4
    # runner
    seeds: tuple[int, ...] = (0, 1, 42)
    checkpoints: tuple[int, ...] = (50, 100)
    out_dir: str = "runs"


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_str(text: str) -> str:
    return text


def _parse_int_list(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    return tuple(int(part.strip()) for part in text.split(","))


def _parse_rank_mix(text: str) -> tuple[tuple[int, int], ...]:
    return tuple(
        (int(value), int(count))
        for value, count in (pair.split(":") for pair in text.split(","))
    )


def _parse_freeze_mix(text: str) -> tuple[tuple[float, int], ...]:
    return tuple(
        (float(value), int(count))
        for value, count in (pair.split(":") for pair in text.split(","))
    )


_PARSERS = {
    "scheme": _parse_str,
    "n_clients": _parse_int,
    "sample_size": _parse_int,
    "rounds": _parse_int,
    "r_min": _parse_int,
    "r_max": _parse_int,
    "homlora_rank": _parse_int,
    "rank_mix": _parse_rank_mix,
    "freeze_mix": _parse_freeze_mix,
    "class_count": _parse_int,
    "feature_dim": _parse_int,
    "true_rank": _parse_int,
    "n_train": _parse_int,
    "n_test": _parse_int,
    "label_noise": _parse_float,
    "learning_rate": _parse_float,
    "weight_decay": _parse_float,
    "adam_beta1": _parse_float,
    "adam_beta2": _parse_float,
    "adam_eps": _parse_float,
    "local_epochs": _parse_int,
    "batch_size": _parse_int,
    "smoothing_beta1": _parse_float,
    "smoothing_beta2": _parse_float,
    "lora_scale": _parse_float,
    "lora_scale_div_rank": _parse_bool,
    "init_std": _parse_float,
    "stale_index_rule": _parse_str,
    "bytes_per_param": _parse_int,
    "seeds": _parse_int_list,
    "checkpoints": _parse_int_list,
    "out_dir": _parse_str,
}

CONFIG_KEYS = tuple(_PARSERS)
assert set(CONFIG_KEYS) == {f.name for f in fields(ExperimentConfig)}


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _PARSERS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}: line {lineno}: bad value for {key!r}: {exc}") from None
    config = ExperimentConfig(**values)
    validate(config)
    return config


def parse_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, str)):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{_format_value(v)}:{c}" for v, c in value)
        return ",".join(str(v) for v in value)
    raise TypeError(f"cannot serialize {value!r}")


def serialize_config(config: ExperimentConfig) -> str:
    lines = [f"{key} = {_format_value(getattr(config, key))}" for key in CONFIG_KEYS]
    return "\n".join(lines) + "\n"


def validate(config: ExperimentConfig) -> None:
    """Cross-field consistency checks; every error names the keys involved."""
    def fail(message: str) -> None:
        raise ConfigError(message)

    inner_dim = min(config.class_count, config.feature_dim)
    if config.scheme not in SCHEMES:
        fail(f"scheme: must be one of {SCHEMES}, got {config.scheme!r}")
    if config.n_clients < 1:
        fail(f"n_clients: must be >= 1, got {config.n_clients}")
    if not 1 <= config.sample_size <= config.n_clients:
        fail(f"sample_size: must lie in [1, n_clients={config.n_clients}], got {config.sample_size}")
    if config.rounds < 0:
        fail(f"rounds: must be >= 0, got {config.rounds}")
    if config.class_count < 2:
        fail(f"class_count: must be >= 2, got {config.class_count}")
    if config.feature_dim < 1:
        fail(f"feature_dim: must be >= 1, got {config.feature_dim}")
    if not 1 <= config.r_min <= config.r_max:
        fail(f"r_min/r_max: need 1 <= r_min <= r_max, got {config.r_min}, {config.r_max}")
    if config.r_max > inner_dim:
        fail(
            f"r_max: rank {config.r_max} exceeds min(class_count, feature_dim) = {inner_dim}"
        )
    if not 1 <= config.homlora_rank <= inner_dim:
        fail(f"homlora_rank: must lie in [1, {inner_dim}], got {config.homlora_rank}")
    if not 1 <= config.true_rank <= inner_dim:
        fail(f"true_rank: must lie in [1, {inner_dim}], got {config.true_rank}")
    if config.n_train < 1 or config.n_test < 1:
        fail(f"n_train/n_test: must be >= 1, got {config.n_train}, {config.n_test}")
    if not 0.0 <= config.label_noise < 0.5:
        fail(f"label_noise: must lie in [0, 0.5), got {config.label_noise}")

    rank_total = sum(count for _, count in config.rank_mix)
    if rank_total != config.n_clients:
        fail(f"rank_mix: counts sum to {rank_total}, expected n_clients={config.n_clients}")
    for rank, _ in config.rank_mix:
        if not config.r_min <= rank <= config.r_max:
            fail(f"rank_mix: rank {rank} outside [r_min={config.r_min}, r_max={config.r_max}]")
    freeze_total = sum(count for _, count in config.freeze_mix)
    if freeze_total != config.n_clients:
        fail(f"freeze_mix: counts sum to {freeze_total}, expected n_clients={config.n_clients}")
    for ratio, _ in config.freeze_mix:
        if not 0.0 <= ratio < 1.0:
            fail(f"freeze_mix: ratio {ratio} outside [0, 1)")

    if not config.learning_rate > 0:
        fail(f"learning_rate: must be positive, got {config.learning_rate}")
    if config.weight_decay < 0:
        fail(f"weight_decay: must be >= 0, got {config.weight_decay}")
    for key in ("adam_beta1", "adam_beta2", "smoothing_beta1", "smoothing_beta2"):
        value = getattr(config, key)
        if not 0.0 < value < 1.0:
            fail(f"{key}: must lie in (0, 1), got {value}")
    if not config.adam_eps > 0:
        fail(f"adam_eps: must be positive, got {config.adam_eps}")
    if config.local_epochs < 0:
        fail(f"local_epochs: must be >= 0, got {config.local_epochs}")
    if config.batch_size < 1:
        fail(f"batch_size: must be >= 1, got {config.batch_size}")
    if not config.lora_scale > 0:
        fail(f"lora_scale: must be positive, got {config.lora_scale}")
    if not config.init_std > 0:
        fail(f"init_std: must be positive, got {config.init_std}")
    if config.stale_index_rule not in STALE_INDEX_RULES:
        fail(f"stale_index_rule: must be one of {STALE_INDEX_RULES}, got {config.stale_index_rule!r}")
    if config.bytes_per_param < 0:
        fail(f"bytes_per_param: must be >= 0, got {config.bytes_per_param}")
    if not config.seeds:
        fail("seeds: need at least one seed")
    if any(c < 1 for c in config.checkpoints):
        fail(f"checkpoints: rounds must be >= 1, got {config.checkpoints}")


def resolve_scheme_token(token: str) -> tuple[str, int | None]:
    """Split a scheme token like 'homlora:2' into (scheme, rank override)."""
    name, _, rank_text = token.partition(":")
    name = name.strip().lower()
    if name not in SCHEMES:
        raise ConfigError(f"unknown scheme token {token!r}; valid schemes: {SCHEMES}")
    if not rank_text:
        return name, None
    if name != "homlora":
        raise ConfigError(f"scheme {name!r} does not take a rank suffix (got {token!r})")
    try:
        return name, int(rank_text)
    except ValueError:
        raise ConfigError(f"bad rank in scheme token {token!r}") from None


def synthetic_spec(config: ExperimentConfig, seed: int) -> SyntheticSpec:
    return SyntheticSpec(
        class_count=config.class_count,
        feature_dim=config.feature_dim,
        true_rank=config.true_rank,
        n_train=config.n_train,
        n_test=config.n_test,
        label_noise=config.label_noise,
        seed=seed,
    )


def federation_config(
    config: ExperimentConfig, seed: int, scheme_token: str | None = None
) -> FederationConfig:
    """Concrete per-run federation config for one scheme and one seed."""
    scheme, rank_override = resolve_scheme_token(scheme_token or config.scheme)
    if scheme == "italora":
        mix = tuple(
            (count, ClientCapability(mode="truncation", rank=rank))
            for rank, count in config.rank_mix
        )
        r_min, r_max = config.r_min, config.r_max
        policy = AggregationPolicy(kind="adaptive", stale_index_rule=config.stale_index_rule)
    elif scheme in ("ifalora", "ifzlora"):
        mix = tuple(
            (count, ClientCapability(mode="freezing", freeze_ratio=ratio))
            for ratio, count in config.freeze_mix
        )
        r_min, r_max = config.r_min, config.r_max
        kind = "adaptive" if scheme == "ifalora" else "zero_padding"
        policy = AggregationPolicy(kind=kind, stale_index_rule=config.stale_index_rule)
    else:
        rank = config.homlora_rank if rank_override is None else rank_override
        inner_dim = min(config.class_count, config.feature_dim)
        if not 1 <= rank <= inner_dim:
            raise ConfigError(f"homlora rank {rank} outside [1, {inner_dim}]")
        mix = ((config.n_clients, ClientCapability(mode="homogeneous")),)
        r_min = r_max = rank
        policy = AggregationPolicy(kind="fedavg", stale_index_rule=config.stale_index_rule)

    scale = config.lora_scale / r_max if config.lora_scale_div_rank else config.lora_scale
    return FederationConfig(
        n_clients=config.n_clients,
        sample_size=config.sample_size,
        rounds=config.rounds,
        scheme=scheme,
        capability_mix=mix,
        r_min=r_min,
        r_max=r_max,
        seed=seed,
        training=TrainingConfig(
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
            adam_beta1=config.adam_beta1,
            adam_beta2=config.adam_beta2,
            adam_eps=config.adam_eps,
            local_epochs=config.local_epochs,
            batch_size=config.batch_size,
        ),
        policy=policy,
        smoothing_beta1=config.smoothing_beta1,
        smoothing_beta2=config.smoothing_beta2,
        lora_scale=scale,
        init_std=config.init_std,
        bytes_per_param=config.bytes_per_param,
    )


def with_overrides(config: ExperimentConfig, **changes) -> ExperimentConfig:
    """Apply field overrides and re-validate."""
    updated = replace(config, **changes)
    validate(updated)
    return updated
