"""Command-line experiment runner: run, compare, and validate subcommands."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    federation_config,
    parse_config,
    resolve_scheme_token,
    synthetic_spec,
    with_overrides,
)
from .federation import FederationData, RoundReport, prepare_data, run_experiment

__all__ = ["main", "cmd_run", "cmd_compare", "cmd_validate"]

CSV_HEADER = (
    "round",
    "seed",
    "scheme",
    "global_acc",
    "global_loss",
    "mean_client_acc",
    "uploaded_params",
    "uploaded_bytes",
)


def _write_atomic(path: Path, content: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(content, encoding="utf-8")
    os.replace(tmp, path)


def _csv_rows(scheme: str, seed: int, reports: list[RoundReport]) -> list[tuple]:
    return [
        (
            r.round_index,
            seed,
            scheme,
            repr(r.global_accuracy),
            repr(r.global_loss),
            repr(r.client_accuracy_mean),
            r.uploaded_params,
            r.uploaded_bytes,
        )
        for r in reports
    ]


def _render_csv(rows: list[tuple]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buffer.getvalue()


def _mean_std(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def _checkpoint_summary(
    per_seed: dict[int, list[RoundReport]], checkpoints: tuple[int, ...]
) -> dict[str, dict]:
    summary: dict[str, dict] = {}
    for checkpoint in checkpoints:
        picked = {
            seed: next((r for r in reports if r.round_index == checkpoint), None)
            for seed, reports in per_seed.items()
        }
        if any(r is None for r in picked.values()):
            continue
        summary[str(checkpoint)] = {
            "global_acc": _mean_std([r.global_accuracy for r in picked.values()]),
            "global_loss": _mean_std([r.global_loss for r in picked.values()]),
            "mean_client_acc": _mean_std([r.client_accuracy_mean for r in picked.values()]),
        }
    return summary


def _run_scheme(
    exp: ExperimentConfig,
    scheme_token: str,
    seed: int,
    data: FederationData,
    workers: int,
) -> list[RoundReport]:
    fed = federation_config(exp, seed, scheme_token)
    _, reports = run_experiment(fed, data, workers=workers)
    return reports


def cmd_run(exp: ExperimentConfig, out_dir: Path, workers: int = 1) -> int:
    """Run the configured scheme once per seed; emit CSV, summary, and round logs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[tuple] = []
    log_lines: list[str] = []
    per_seed: dict[int, list[RoundReport]] = {}
    for seed in exp.seeds:
        data = prepare_data(synthetic_spec(exp, seed), exp.n_clients, seed)
        reports = _run_scheme(exp, exp.scheme, seed, data, workers)
        per_seed[seed] = reports
        rows.extend(_csv_rows(exp.scheme, seed, reports))
        for report in reports:
            entry = {"seed": seed, "scheme": exp.scheme, **report.to_json_dict()}
            log_lines.append(json.dumps(entry, sort_keys=True))

    _write_atomic(out_dir / "rounds.csv", _render_csv(rows))
    _write_atomic(out_dir / "rounds.jsonl", "\n".join(log_lines) + ("\n" if log_lines else ""))

    all_reports = [r for reports in per_seed.values() for r in reports]
    summary = {
        "scheme": exp.scheme,
        "seeds": list(exp.seeds),
        "rounds": exp.rounds,
        "checkpoints": _checkpoint_summary(per_seed, exp.checkpoints),
        "mean_uploaded_params_per_round": (
            float(np.mean([r.uploaded_params for r in all_reports])) if all_reports else 0.0
        ),
        "mean_uploaded_bytes_per_round": (
            float(np.mean([r.uploaded_bytes for r in all_reports])) if all_reports else 0.0
        ),
    }
    _write_atomic(out_dir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_dir / 'rounds.csv'} ({len(rows)} rows)")
    return 0


def cmd_compare(
    exp: ExperimentConfig, scheme_tokens: list[str], out_dir: Path, workers: int = 1
) -> int:
    """Run several schemes on identical per-seed data; emit a merged CSV and ranking."""
    for token in scheme_tokens:
        resolve_scheme_token(token)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[tuple] = []
    by_scheme: dict[str, dict[int, list[RoundReport]]] = {t: {} for t in scheme_tokens}
    for seed in exp.seeds:
        data = prepare_data(synthetic_spec(exp, seed), exp.n_clients, seed)
        for token in scheme_tokens:
            reports = _run_scheme(exp, token, seed, data, workers)
            by_scheme[token][seed] = reports
            rows.extend(_csv_rows(token, seed, reports))
    _write_atomic(out_dir / "compare.csv", _render_csv(rows))

    ranking: dict[str, list[dict]] = {}
    for checkpoint in exp.checkpoints:
        entries = []
        for token, per_seed in by_scheme.items():
            summary = _checkpoint_summary(per_seed, (checkpoint,))
            if str(checkpoint) in summary:
                entries.append(
                    {"scheme": token, "global_acc": summary[str(checkpoint)]["global_acc"]}
                )
        if entries:
            entries.sort(key=lambda e: -e["global_acc"]["mean"])
            ranking[str(checkpoint)] = entries
    _write_atomic(out_dir / "ranking.json", json.dumps(ranking, indent=2, sort_keys=True) + "\n")

    print(f"wrote {out_dir / 'compare.csv'} ({len(rows)} rows)")
    for checkpoint, entries in ranking.items():
        print(f"round {checkpoint}:")
        for position, entry in enumerate(entries, start=1):
            acc = entry["global_acc"]
            print(
                f"  {position}. {entry['scheme']}: "
                f"{acc['mean']:.4f} (std {acc['std']:.4f})"
            )
    return 0


def cmd_validate(path: str) -> int:
    parse_config(path)
    print("ok")
    return 0


def _apply_cli_overrides(exp: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    changes = {}
    if args.seeds is not None:
        changes["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if args.checkpoints is not None:
        changes["checkpoints"] = tuple(int(c) for c in args.checkpoints.split(","))
    if args.out_dir is not None:
        changes["out_dir"] = args.out_dir
    return with_overrides(exp, **changes) if changes else exp


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlora",
        description="Deterministic federated LoRA fine-tuning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="path to a flat key-value config file")
        p.add_argument("--out-dir", default=None, help="output directory override")
        p.add_argument("--seeds", default=None, help="comma-separated seed override")
        p.add_argument("--checkpoints", default=None, help="comma-separated checkpoint override")
        p.add_argument("--workers", type=int, default=1, help="client training threads per round")

    run_p = sub.add_parser("run", help="run the configured scheme over all seeds")
    add_common(run_p)

    cmp_p = sub.add_parser("compare", help="run several schemes on identical data and seeds")
    add_common(cmp_p)
    cmp_p.add_argument(
        "--schemes",
        required=True,
        help="comma-separated scheme tokens, e.g. homlora:16,homlora:2,italora,ifalora,ifzlora",
    )

    val_p = sub.add_parser("validate", help="parse and validate a config file")
    val_p.add_argument("config", help="path to a flat key-value config file")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args.config)
        exp = _apply_cli_overrides(parse_config(args.config), args)
        out_dir = Path(exp.out_dir)
        if args.command == "run":
            return cmd_run(exp, out_dir, workers=args.workers)
        tokens = [t.strip() for t in args.schemes.split(",") if t.strip()]
        if not tokens:
            raise ConfigError("--schemes needs at least one scheme token")
        return cmd_compare(exp, tokens, out_dir, workers=args.workers)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
