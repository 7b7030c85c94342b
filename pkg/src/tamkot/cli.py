"""Command-line entry point.

Every command reads a YAML config (``--config``) and writes into a fixed
output layout::

    <out>/manifest.json
    <out>/checkpoints/
    <out>/reports/
    <out>/exports/

Exit status is 0 on success, 1 for an invalid config and 2 for runtime
failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .analysis import (compare_transfer_matrices, export_heatmap_csv, export_trajectory_csv,
                       knowledge_state_trajectory)
from .data import (ASSESSED, SyntheticConfig, generate_synthetic, load_interactions, normalize_scores,
                   save_interactions, split_validation)
from .errors import ConfigError, TamkotError
from .evaluation import cross_validate, evaluate, write_metrics_report
from .model import GATES, TRANSITIONS, Hyperparams
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("tamkot")

COMMANDS = ("train", "crossval", "grid-search", "analyze-transfer",
            "export-knowledge-states", "generate-synthetic")

_HYPER_KEYS = set(Hyperparams.field_names()) - {"seed"}
_SYNTH_KEYS = {f.name for f in fields(SyntheticConfig)} - {"seed"}


@dataclass
class RunConfig:
    data: str | None = None
    checkpoint: str | None = None
    out: str = "runs/default"
    seed: int = 0
    folds: int = 5
    exclude_cold_start: bool = False
    validation_fraction: float = 0.2
    max_scores: dict | None = None
    hyperparams: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    synthetic: dict = field(default_factory=dict)
    gate: str = "f"
    pairs: list = field(default_factory=lambda: [["QL", "LQ"]])
    student_id: str | None = None
    assessed_ids: list | None = None

    @classmethod
    def from_mapping(cls, raw: Any) -> "RunConfig":
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(["config must be a mapping of keys to values"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in unknown])
        return cls(**raw)

    def hyper(self, response_mode: str | None = None, **overrides) -> Hyperparams:
        values = dict(self.hyperparams)
        if response_mode is not None:
            values.setdefault("response_mode", response_mode)
        values.update(overrides)
        return Hyperparams(seed=self.seed, **values)

    def validate(self, command: str) -> None:
        problems = []

        def need(name):
            if getattr(self, name) in (None, ""):
                problems.append(f"{name}: required for {command}")

        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            problems.append(f"seed: must be an integer, got {self.seed!r}")
        if not isinstance(self.folds, int) or self.folds < 2:
            problems.append(f"folds: must be an integer >= 2, got {self.folds!r}")
        if not isinstance(self.validation_fraction, (int, float)) or not 0 <= self.validation_fraction < 1:
            problems.append(f"validation_fraction: must lie in [0, 1), got {self.validation_fraction!r}")
        if not isinstance(self.exclude_cold_start, bool):
            problems.append("exclude_cold_start: must be true or false")
        if not isinstance(self.hyperparams, dict):
            problems.append("hyperparams: must be a mapping")
        else:
            for k in sorted(set(self.hyperparams) - _HYPER_KEYS):
                problems.append(f"hyperparams.{k}: unknown key" if k != "seed"
                                else "hyperparams.seed: set the top-level seed instead")
            if not problems:
                try:
                    self.hyper()
                except (TypeError, ValueError) as exc:
                    problems.append(f"hyperparams: {exc}")
        if self.max_scores is not None and not isinstance(self.max_scores, dict):
            problems.append("max_scores: must be a mapping of material id to maximum score")

        if command in ("train", "crossval", "grid-search", "export-knowledge-states"):
            need("data")
            if self.data and not Path(self.data).is_file():
                problems.append(f"data: file {self.data!r} does not exist")
        if command in ("analyze-transfer", "export-knowledge-states"):
            need("checkpoint")
            if self.checkpoint and not Path(self.checkpoint).is_file():
                problems.append(f"checkpoint: file {self.checkpoint!r} does not exist")
        if command == "export-knowledge-states":
            need("student_id")
        if command == "grid-search":
            if not isinstance(self.grid, dict) or not self.grid:
                problems.append("grid: a non-empty mapping of hyperparameter -> candidate list is required")
            else:
                for k, v in self.grid.items():
                    if k not in _HYPER_KEYS:
                        problems.append(f"grid.{k}: not a hyperparameter")
                    elif not isinstance(v, list) or not v:
                        problems.append(f"grid.{k}: must be a non-empty list")
        if command == "generate-synthetic":
            if not isinstance(self.synthetic, dict):
                problems.append("synthetic: must be a mapping")
            else:
                for k in sorted(set(self.synthetic) - _SYNTH_KEYS):
                    problems.append(f"synthetic.{k}: unknown key")
                if not problems:
                    try:
                        SyntheticConfig(seed=self.seed, **self.synthetic)
                    except (TypeError, ValueError) as exc:
                        problems.append(f"synthetic: {exc}")
        if command == "analyze-transfer":
            if self.gate not in GATES:
                problems.append(f"gate: must be one of {', '.join(GATES)}")
            if not isinstance(self.pairs, list) or not self.pairs:
                problems.append("pairs: must be a non-empty list of [transition, transition]")
            else:
                for p in self.pairs:
                    if not (isinstance(p, list) and len(p) == 2 and all(t in TRANSITIONS for t in p)):
                        problems.append(f"pairs: {p!r} is not a pair of {'/'.join(TRANSITIONS)}")
        if problems:
            raise ConfigError(problems)


def load_config(path, overrides: dict) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"config {path} is not valid YAML: {exc}"]) from None
    cfg = RunConfig.from_mapping(raw)
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _layout(out: Path) -> dict[str, Path]:
    dirs = {name: out / name for name in ("checkpoints", "reports", "exports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def write_manifest(out: Path, command: str, cfg: RunConfig) -> None:
    resolved = asdict(cfg)
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    manifest = {
        "command": command,
        "config": resolved,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": cfg.seed,
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_dataset(cfg: RunConfig):
    ds = load_interactions(cfg.data)
    if cfg.max_scores:
        ds = normalize_scores(ds, cfg.max_scores)
    return ds


def _write_history(history, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "valid_metric"))
        for i, loss in enumerate(history.train_loss):
            metric = history.valid_metric[i] if i < len(history.valid_metric) else ""
            w.writerow((i + 1, repr(loss), repr(metric) if metric != "" else ""))


def _vocabulary(ds) -> dict:
    return {"problems": list(ds.problem_names), "lectures": list(ds.lecture_names)}


def cmd_generate_synthetic(cfg: RunConfig, dirs) -> None:
    ds = generate_synthetic(SyntheticConfig(seed=cfg.seed, **cfg.synthetic))
    save_interactions(ds, dirs["exports"] / "interactions.csv")
    log.info("wrote %d students (%d activities)", len(ds.sequences), ds.n_activities())


def cmd_train(cfg: RunConfig, dirs) -> None:
    ds = _load_dataset(cfg)
    hyper = cfg.hyper(ds.response_mode)
    train_ids, valid_ids = split_validation(ds.student_ids, cfg.validation_fraction, cfg.seed)
    params, history = train(ds, hyper, train_ids, valid_ids or None)
    save_checkpoint(params, dirs["checkpoints"] / "model.json", _vocabulary(ds))
    _write_history(history, dirs["reports"] / "history.csv")
    log.info("trained %d epochs in %.1fs, best epoch %s", len(history), sum(history.wall_time),
             history.best_epoch)


def cmd_crossval(cfg: RunConfig, dirs) -> None:
    ds = _load_dataset(cfg)
    result = cross_validate(ds, cfg.hyper(ds.response_mode), cfg.folds, cfg.seed,
                            cfg.exclude_cold_start, cfg.validation_fraction)
    write_metrics_report(result, dirs["reports"] / "metrics.csv")
    for name, (mean, std) in result.summary.items():
        log.info("%s: %.4f +- %.4f", name, mean, std)


def cmd_grid_search(cfg: RunConfig, dirs) -> None:
    ds = _load_dataset(cfg)
    train_ids, valid_ids = split_validation(ds.student_ids, cfg.validation_fraction or 0.2, cfg.seed)
    keys = sorted(cfg.grid)
    rows = []
    for values in itertools.product(*(cfg.grid[k] for k in keys)):
        point = dict(zip(keys, values))
        hyper = cfg.hyper(ds.response_mode, **point)
        params, _ = train(ds, hyper, train_ids)
        res = evaluate(params, ds, valid_ids, cfg.exclude_cold_start)
        if ds.response_mode == "binary" and "auc" in res:
            metric, score = "auc", res["auc"]
        else:
            metric, score = "rmse", -res["rmse"]
        rows.append((point, metric, res[metric], score))
        log.info("grid point %s: %s=%.4f", point, metric, res[metric])
    best = max(range(len(rows)), key=lambda i: rows[i][3])
    with (dirs["reports"] / "grid.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("point", "hyperparams", "metric", "value"))
        for i, (point, metric, value, _) in enumerate(rows):
            w.writerow((i, json.dumps(point, sort_keys=True), metric, repr(value)))
    point, metric, value, _ = rows[best]
    (dirs["reports"] / "grid_best.json").write_text(
        json.dumps({"point": best, "hyperparams": point, "metric": metric, "value": value},
                   indent=1, sort_keys=True) + "\n", encoding="utf-8")


def cmd_analyze_transfer(cfg: RunConfig, dirs) -> None:
    params, _ = load_checkpoint(cfg.checkpoint)
    for a, b in cfg.pairs:
        report = compare_transfer_matrices(params, cfg.gate, (a, b))
        report.save(dirs["reports"] / f"transfer_{cfg.gate}_{a}_{b}.json")
        for tr, mat in zip((a, b), report.zscored_matrices):
            export_heatmap_csv(mat, dirs["exports"] / f"heatmap_{cfg.gate}_{tr}.csv")
        log.info("gate %s %s vs %s: W=%.1f p=%.4g rho=%.4f p=%.4g", cfg.gate, a, b,
                 report.wilcoxon_W, report.wilcoxon_p, report.spearman_rho, report.spearman_p)


def cmd_export_knowledge_states(cfg: RunConfig, dirs) -> None:
    params, vocab = load_checkpoint(cfg.checkpoint)
    ds = _load_dataset(cfg)
    if vocab and (list(ds.problem_names) != vocab.get("problems")
                  or list(ds.lecture_names) != vocab.get("lectures")):
        raise TamkotError("data vocabulary does not match the checkpoint's")
    if (ds.Q, ds.L) != (params.Q, params.L):
        raise TamkotError(f"data has Q={ds.Q}, L={ds.L}; checkpoint expects Q={params.Q}, L={params.L}")
    seqs = {s.student_id: s for s in ds.sequences}
    if cfg.student_id not in seqs:
        raise TamkotError(f"student {cfg.student_id!r} not found in {cfg.data}")
    seq = seqs[cfg.student_id]
    if cfg.assessed_ids is None:
        ids = list(range(ds.Q))
    else:
        index = {name: i for i, name in enumerate(ds.problem_names)}
        missing = [str(n) for n in cfg.assessed_ids if str(n) not in index]
        if missing:
            raise TamkotError(f"unknown assessed materials: {', '.join(missing)}")
        ids = [index[str(n)] for n in cfg.assessed_ids]
    traj = knowledge_state_trajectory(params, seq, ids)
    cols = []
    for a in seq.activities:
        if a.material_type == ASSESSED:
            cols.append(f"{ds.problem_names[a.material_id]}={a.response:g}")
        else:
            cols.append(ds.lecture_names[a.material_id])
    export_trajectory_csv(traj, dirs["exports"] / f"knowledge_states_{cfg.student_id}.csv",
                          [ds.problem_names[i] for i in ids], cols)


HANDLERS = {
    "train": cmd_train,
    "crossval": cmd_crossval,
    "grid-search": cmd_grid_search,
    "analyze-transfer": cmd_analyze_transfer,
    "export-knowledge-states": cmd_export_knowledge_states,
    "generate-synthetic": cmd_generate_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tamkot", description="Transition-aware knowledge tracing: training, evaluation and transfer analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--folds", type=int, help="override the number of folds")
    parser.add_argument("--exclude-cold-start", action="store_true", default=None,
                        help="leave each chunk's zero-state prediction out of the metrics")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, cfg: RunConfig) -> int:
    try:
        cfg.validate(command)
    except ConfigError as exc:
        print(f"tamkot: {exc}", file=sys.stderr)
        return 1
    out = Path(cfg.out)
    try:
        dirs = _layout(out)
        HANDLERS[command](cfg, dirs)
        write_manifest(out, command, cfg)
    except (TamkotError, OSError, ValueError, IndexError) as exc:
        print(f"tamkot {command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; a bad invocation counts as a config error here
        return 1 if exc.code == 2 else int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "folds": args.folds,
                                        "exclude_cold_start": args.exclude_cold_start})
    except ConfigError as exc:
        print(f"tamkot: {exc}", file=sys.stderr)
        return 1
    except TypeError as exc:
        print(f"tamkot: invalid config: {exc}", file=sys.stderr)
        return 1
    return run(args.command, cfg)


if __name__ == "__main__":
    sys.exit(main())
