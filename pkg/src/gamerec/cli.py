"""Command-line entry point wiring the whole pipeline.

Subcommands: gen-synthetic, analyze, build-graph, train, evaluate, recommend,
grad-check, sweep. Configuration comes from an optional JSON file plus
``--set key=value`` overrides; unknown keys are rejected. Every run writes a
``run_manifest.json`` with the resolved config, versions and input checksums.
Human-readable progress goes to stderr; training also emits a JSON-lines log.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import write_analysis_reports
from .checkpoint import load_checkpoint, save_checkpoint
from .context_graph import build_context_graph, save_relations
from .data import Dataset, ParseError, Split, filter_users, load_dataset_with_report, sample_users, split_holdout
from .evaluation import (
    ModelRecommender,
    ablation_config,
    evaluate,
    metrics_to_csv,
    metrics_to_json_dict,
    popularity_baseline,
    rank_for_user,
)
from .gradcheck import run_gradient_check
from .model import ForwardConfig, FusionWeights, SocialGraph, UserItemIndex
from .synthetic import SynthConfig, save_synthetic
from .training import Hyperparams, fit_recommender

COMMANDS = ("gen-synthetic", "analyze", "build-graph", "train", "evaluate", "recommend", "grad-check", "sweep")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    # data paths and run layout
    engagements_path: str = "gamerec_out/engagements.tsv"
    social_path: str = "gamerec_out/social.tsv"
    catalog_path: str = "gamerec_out/catalog.tsv"
    output_dir: str = "gamerec_out"
    seed: int = 0
    threads: int = 1
    # filtering / sampling
    min_games: int = 5
    min_total_minutes: float = 60.0
    sample_fraction: float = 1.0
    # holdout split
    num_eval_users: int = 500
    holdout_fraction: float = 0.1
    # context graph thresholds
    tau_p: float = 0.01
    tau_t: float = 0.5
    time_scale: float | None = None  # None = mean dwelling gap over candidate pairs
    normalization: str = "mean"
    # model / training
    embedding_dim: int = 32
    learning_rate: float = 0.03
    batch_size: int = 1024
    reg_lambda: float = 1e-4
    w_social: float = 0.1
    w_context: float = 0.5
    patience: int = 10
    max_epochs: int = 100
    negatives_per_positive: int = 1
    variant: str = "full"  # or ablation variant A / B / C
    # synthetic generator
    n_users: int = 5000
    n_games: int = 300
    n_genres: int = 8
    n_developers: int = 40
    n_publishers: int = 20
    engagements_per_user: int = 12
    homophily: float = 0.7
    dwell_scale: float = 1.0
    # analysis
    top_genres: int = 5
    matrix_games: int = 20
    correlation_games: int = 10
    # weight sweep grids
    w_social_grid: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    w_context_grid: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


_INT_FIELDS = {
    "seed", "threads", "min_games", "num_eval_users", "embedding_dim", "batch_size",
    "patience", "max_epochs", "negatives_per_positive", "n_users", "n_games", "n_genres",
    "n_developers", "n_publishers", "engagements_per_user", "top_genres", "matrix_games",
    "correlation_games",
}
_FLOAT_FIELDS = {
    "min_total_minutes", "sample_fraction", "holdout_fraction", "tau_p", "tau_t",
    "learning_rate", "reg_lambda", "w_social", "w_context", "homophily", "dwell_scale",
}


def _coerce(name: str, value):
    if name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"field '{name}': expected an integer, got {value!r}")
        return int(value)
    if name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field '{name}': expected a number, got {value!r}")
        return float(value)
    if name == "time_scale":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field 'time_scale': expected a number or null, got {value!r}")
        return float(value)
    if name in ("w_social_grid", "w_context_grid"):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"field '{name}': expected a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if not isinstance(value, str):
        raise ConfigError(f"field '{name}': expected a string, got {value!r}")
    return value


def _validate(cfg: RunConfig) -> None:
    checks = [
        (cfg.threads >= 1, "threads", "must be >= 1"),
        (cfg.min_games >= 1, "min_games", "must be >= 1"),
        (cfg.min_total_minutes >= 0, "min_total_minutes", "must be >= 0"),
        (0.0 < cfg.sample_fraction <= 1.0, "sample_fraction", "must be in (0, 1]"),
        (cfg.num_eval_users >= 0, "num_eval_users", "must be >= 0"),
        (0.0 < cfg.holdout_fraction < 0.5, "holdout_fraction", "must be in (0, 0.5)"),
        (cfg.tau_p >= 0.0, "tau_p", "must be >= 0"),
        (0.0 <= cfg.tau_t < 1.0, "tau_t", "must be in [0, 1)"),
        (cfg.time_scale is None or cfg.time_scale > 0, "time_scale", "must be > 0 or null"),
        (cfg.normalization in ("mean", "symmetric"), "normalization", "must be 'mean' or 'symmetric'"),
        (cfg.embedding_dim >= 1, "embedding_dim", "must be >= 1"),
        (cfg.learning_rate >= 0, "learning_rate", "must be >= 0"),
        (cfg.batch_size >= 1, "batch_size", "must be >= 1"),
        (cfg.reg_lambda >= 0, "reg_lambda", "must be >= 0"),
        (0.0 <= cfg.w_social <= 1.0, "w_social", "must be in [0, 1]"),
        (0.0 <= cfg.w_context <= 1.0, "w_context", "must be in [0, 1]"),
        (cfg.w_social + cfg.w_context <= 1.0 + 1e-12, "w_social", "w_social + w_context must not exceed 1"),
        (cfg.patience >= 1, "patience", "must be >= 1"),
        (cfg.max_epochs >= 1, "max_epochs", "must be >= 1"),
        (cfg.negatives_per_positive >= 1, "negatives_per_positive", "must be >= 1"),
        (cfg.variant in ("full", "A", "B", "C"), "variant", "must be one of full, A, B, C"),
        (0.0 <= cfg.homophily <= 1.0, "homophily", "must be in [0, 1]"),
        (cfg.top_genres >= 1, "top_genres", "must be >= 1"),
    ]
    for ok, name, message in checks:
        if not ok:
            raise ConfigError(f"field '{name}': {message}")


def load_config(config_path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, JSON config file and overrides; reject unknown keys."""
    known = {f.name for f in fields(RunConfig)}
    merged: dict = {}
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        merged.update(raw)
    merged.update(overrides or {})
    for key in merged:
        if key not in known:
            raise ConfigError(f"unknown config key: '{key}'")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    _validate(cfg)
    return cfg


# ----------------------------------------------------------------- plumbing


def _progress(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(cfg: RunConfig, command: str) -> None:
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    checksums = {}
    for p in (cfg.engagements_path, cfg.social_path, cfg.catalog_path):
        path = Path(p)
        if path.is_file():
            checksums[str(path)] = _sha256(path)
    manifest = {
        "command": command,
        "config": dataclasses.asdict(cfg),
        "versions": {"gamerec": __version__, "numpy": np.__version__},
        "input_checksums": checksums,
    }
    (outdir / "run_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _load_prepared(cfg: RunConfig) -> tuple[Dataset, Split]:
    """Load, filter, sample and split; deterministic given the config."""
    d, _ = load_dataset_with_report(cfg.engagements_path, cfg.social_path, cfg.catalog_path)
    d = filter_users(d, cfg.min_games, cfg.min_total_minutes)
    if cfg.sample_fraction < 1.0:
        d = sample_users(d, cfg.sample_fraction, cfg.seed)
    n_eval = min(cfg.num_eval_users, d.n_users)
    split = split_holdout(d, n_eval, cfg.holdout_fraction, cfg.seed)
    return d, split


def _serving_structures(cfg: RunConfig, split: Split):
    graph, relations, time_scale = build_context_graph(
        split.train, tau_p=cfg.tau_p, tau_t=cfg.tau_t, time_scale=cfg.time_scale
    )
    index = UserItemIndex.build(split.train)
    social = SocialGraph.build(split.train, index.user_ids)
    return graph, relations, time_scale, index, social


def _hyperparams(cfg: RunConfig) -> Hyperparams:
    return Hyperparams(
        dim=cfg.embedding_dim,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        reg_lambda=cfg.reg_lambda,
        fusion=FusionWeights(context=cfg.w_context, social=cfg.w_social),
        patience=cfg.patience,
        seed=cfg.seed,
        max_epochs=cfg.max_epochs,
        negatives_per_positive=cfg.negatives_per_positive,
    )


def _forward_config(cfg: RunConfig) -> ForwardConfig:
    base = ForwardConfig(
        fusion=FusionWeights(context=cfg.w_context, social=cfg.w_social),
        normalization=cfg.normalization,
    )
    if cfg.variant == "full":
        return base
    return ablation_config(base, cfg.variant)


# ----------------------------------------------------------------- commands


def _cmd_gen_synthetic(cfg: RunConfig) -> int:
    synth = SynthConfig(
        n_users=cfg.n_users,
        n_games=cfg.n_games,
        n_genres=cfg.n_genres,
        n_developers=cfg.n_developers,
        n_publishers=cfg.n_publishers,
        engagements_per_user=cfg.engagements_per_user,
        homophily=cfg.homophily,
        dwell_scale=cfg.dwell_scale,
        seed=cfg.seed,
    )
    paths = save_synthetic(
        synth,
        cfg.output_dir,
        engagements_path=cfg.engagements_path,
        social_path=cfg.social_path,
        catalog_path=cfg.catalog_path,
    )
    _progress(f"wrote synthetic dataset: {paths['engagements']}")
    return EXIT_OK


def _cmd_analyze(cfg: RunConfig) -> int:
    d, _ = load_dataset_with_report(cfg.engagements_path, cfg.social_path, cfg.catalog_path)
    summary = write_analysis_reports(
        d,
        Path(cfg.output_dir) / "analysis",
        top_genres_k=cfg.top_genres,
        matrix_games=cfg.matrix_games,
        correlation_games=cfg.correlation_games,
        time_scale=cfg.time_scale,
        seed=cfg.seed,
        threads=cfg.threads,
    )
    _progress(f"analysis reports written for {summary['users']} users / {summary['games']} games")
    return EXIT_OK


def _cmd_build_graph(cfg: RunConfig) -> int:
    _, split = _load_prepared(cfg)
    _, relations, time_scale, _, _ = _serving_structures(cfg, split)
    manifest = save_relations(
        relations,
        Path(cfg.output_dir) / "graph",
        tau_p=cfg.tau_p,
        tau_t=cfg.tau_t,
        time_scale=time_scale,
        n_games=split.train.n_games,
    )
    _progress(f"graph manifest written to {manifest}")
    return EXIT_OK


def _cmd_train(cfg: RunConfig) -> int:
    _, split = _load_prepared(cfg)
    graph, _, _, index, social = _serving_structures(cfg, split)
    hp = _hyperparams(cfg)
    forward = _forward_config(cfg)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    log_path = outdir / "training_log.jsonl"
    with log_path.open("w", encoding="utf-8") as log_file:

        def sink(record: dict) -> None:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
            _progress(
                f"epoch {record['epoch']}: loss={record['train_loss']:.4f} "
                f"val_ndcg10={record['val_ndcg10']:.4f}"
            )

        rec, log = fit_recommender(
            split, graph, social, index, hp, forward=forward, threads=cfg.threads, log_sink=sink
        )
    save_checkpoint(
        outdir / "checkpoint.bin",
        rec.state,
        index.user_ids,
        index.game_ids,
        forward,
        hyperparams=dataclasses.asdict(hp) | {"variant": cfg.variant},
    )
    best = max((r.val_ndcg10 for r in log), default=0.0)
    _progress(f"training done after {len(log)} epochs; best val NDCG@10 = {best:.4f}")
    return EXIT_OK


def _load_model(cfg: RunConfig, graph, index, social) -> ModelRecommender:
    ckpt = Path(cfg.output_dir) / "checkpoint.bin"
    state, user_ids, game_ids, config, _ = load_checkpoint(ckpt)
    if not np.array_equal(user_ids, index.user_ids) or not np.array_equal(game_ids, index.game_ids):
        raise RuntimeError(f"{ckpt}: checkpoint users/games do not match the configured dataset")
    return ModelRecommender(state, graph, social, index, config)


def _cmd_evaluate(cfg: RunConfig) -> int:
    _, split = _load_prepared(cfg)
    graph, _, _, index, social = _serving_structures(cfg, split)
    model = _load_model(cfg, graph, index, social)
    methods = {
        "model": model,
        "popularity_count": popularity_baseline(split.train, "count"),
        "popularity_time": popularity_baseline(split.train, "time"),
    }
    reports = {
        phase: {name: evaluate(rec, split, phase, threads=cfg.threads) for name, rec in methods.items()}
        for phase in ("validation", "test")
    }
    outdir = Path(cfg.output_dir)
    (outdir / "metrics.json").write_text(
        json.dumps(metrics_to_json_dict(reports), indent=2) + "\n", encoding="utf-8"
    )
    (outdir / "metrics.csv").write_text(metrics_to_csv(reports), encoding="utf-8")
    test_model = reports["test"]["model"].ndcg[10]
    _progress(f"evaluation written; model test NDCG@10 = {test_model:.4f}")
    return EXIT_OK


def _cmd_recommend(cfg: RunConfig, user: int, k: int) -> int:
    d, split = _load_prepared(cfg)
    graph, _, _, index, social = _serving_structures(cfg, split)
    model = _load_model(cfg, graph, index, social)
    engaged, _ = d.user_games(user)
    ranked = rank_for_user(model, user, engaged, k)
    scores = model.scores_for(user)
    by_id = dict(zip((int(g) for g in model.game_ids), scores))
    for gid in ranked:
        print(f"{int(gid)}\t{float(by_id[int(gid)])!r}")
    return EXIT_OK


def _cmd_grad_check(cfg: RunConfig) -> int:
    report = run_gradient_check()
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "grad_check.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    for t in report.tensors:
        _progress(f"{t.name}: max relative error {t.max_rel_error:.3e} ({'ok' if t.passed else 'FAIL'})")
    if not report.passed:
        raise RuntimeError("gradient check failed; see grad_check.json")
    _progress("gradient check passed")
    return EXIT_OK


def _cmd_sweep(cfg: RunConfig) -> int:
    _, split = _load_prepared(cfg)
    graph, _, _, index, social = _serving_structures(cfg, split)
    hp_base = _hyperparams(cfg)
    rows = []
    for ws, wc in itertools.product(cfg.w_social_grid, cfg.w_context_grid):
        if ws + wc > 1.0 + 1e-12:
            continue
        fusion = FusionWeights(context=wc, social=ws)
        hp = dataclasses.replace(hp_base, fusion=fusion)
        forward = ForwardConfig(fusion=fusion, normalization=cfg.normalization)
        rec, log = fit_recommender(split, graph, social, index, hp, forward=forward, threads=cfg.threads)
        val = evaluate(rec, split, "validation", threads=cfg.threads).ndcg[10]
        test = evaluate(rec, split, "test", threads=cfg.threads).ndcg[10]
        rows.append((ws, wc, val, test, len(log)))
        _progress(f"sweep w_social={ws} w_context={wc}: val={val:.4f} test={test:.4f}")
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with (outdir / "sweep.csv").open("w", encoding="utf-8") as fh:
        fh.write("w_social,w_context,val_ndcg10,test_ndcg10,epochs\n")
        for ws, wc, val, test, n in rows:
            fh.write(f"{ws!r},{wc!r},{val!r},{test!r},{n}\n")
    (outdir / "sweep.json").write_text(
        json.dumps(
            [
                {"w_social": ws, "w_context": wc, "val_ndcg10": val, "test_ndcg10": test, "epochs": n}
                for ws, wc, val, test, n in rows
            ],
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return EXIT_OK


# --------------------------------------------------------------------- entry


def run(command: str, config_path: str | None = None, overrides: dict | None = None, **kwargs) -> int:
    """Execute one subcommand; returns a process exit status."""
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _write_manifest(cfg, command)
        if command == "gen-synthetic":
            return _cmd_gen_synthetic(cfg)
        if command == "analyze":
            return _cmd_analyze(cfg)
        if command == "build-graph":
            return _cmd_build_graph(cfg)
        if command == "train":
            return _cmd_train(cfg)
        if command == "evaluate":
            return _cmd_evaluate(cfg)
        if command == "recommend":
            return _cmd_recommend(cfg, kwargs["user"], kwargs.get("k", 10))
        if command == "grad-check":
            return _cmd_grad_check(cfg)
        if command == "sweep":
            return _cmd_sweep(cfg)
        print(f"unknown command: {command}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, FileNotFoundError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _parse_set(values: list[str]) -> dict:
    overrides: dict = {}
    for item in values:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="gamerec", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--output-dir", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "recommend":
            p.add_argument("--user", type=int, required=True)
            p.add_argument("--k", type=int, default=10)
    args = parser.parse_args(argv)

    try:
        overrides = _parse_set(args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir

    extra = {}
    if args.command == "recommend":
        extra = {"user": args.user, "k": args.k}
    return run(args.command, args.config, overrides, **extra)


if __name__ == "__main__":
    sys.exit(main())
