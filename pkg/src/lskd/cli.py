"""Command-line runner: ``lskd generate | train | sweep | report``.

Experiments are described by a JSON document::

    {
      "dataset": {...GeneratorConfig fields...}   # or "dataset_path": "data.jsonl"
      "model": {"hidden_dim": 128, "repr_dim": 128, "init_scale": 1.0, "tau": 1.0, "checkpoint": null},
      "train": {...TrainConfig fields...},
      "eval": {"ks": [50, 100]},
      "sweep": {"alpha": [3, 4, 5]},
      "seeds": [0, 1, 2]
    }

Every section is optional. ``--override train.alpha=5`` edits any dotted path;
values are parsed as JSON when possible. Exit codes: 0 success, 2 bad
configuration or input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .metrics import DEFAULT_KS, EvalReport, evaluate
from .model import (
    ConfigurationError,
    ModelDims,
    RelationModel,
    checkpoint_hash,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .synthetic_data import (
    DatasetFormatError,
    DatasetSplit,
    GeneratorConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .training import TrainConfig, TrainState, train

log = logging.getLogger("lskd")

OUT_ENV = "LSKD_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SWEEP_AXES = ("alpha", "tau", "interval_epochs")
METRIC_COLUMNS = ("mR@50", "mR@100", "R@50", "R@100", "Mean", "calibration_kl")
MODEL_DEFAULTS = {"hidden_dim": 128, "repr_dim": 128, "init_scale": 1.0, "tau": 1.0, "checkpoint": None}
SPEC_SECTIONS = {"dataset", "dataset_path", "model", "train", "eval", "sweep", "seeds"}


class SpecError(ValueError):
    """Invalid experiment description (exit code 2)."""


# -- experiment spec ----------------------------------------------------------


@dataclass
class ExperimentSpec:
    dataset: dict = field(default_factory=dict)
    dataset_path: str | None = None
    model: dict = field(default_factory=lambda: dict(MODEL_DEFAULTS))
    train: dict = field(default_factory=dict)
    ks: tuple[int, ...] = DEFAULT_KS
    sweep: dict[str, list] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])

    @classmethod
    def from_dict(cls, d: Mapping) -> ExperimentSpec:
        unknown = set(d) - SPEC_SECTIONS
        if unknown:
            raise SpecError(f"unknown config sections: {sorted(unknown)}")
        model = dict(MODEL_DEFAULTS)
        extra = set(d.get("model", {})) - set(MODEL_DEFAULTS)
        if extra:
            raise SpecError(f"unknown model keys: {sorted(extra)}")
        model.update(d.get("model", {}))
        eval_cfg = dict(d.get("eval", {}))
        if set(eval_cfg) - {"ks"}:
            raise SpecError(f"unknown eval keys: {sorted(set(eval_cfg) - {'ks'})}")
        spec = cls(
            dataset=dict(d.get("dataset", {})),
            dataset_path=d.get("dataset_path"),
            model=model,
            train=dict(d.get("train", {})),
            ks=tuple(int(k) for k in eval_cfg.get("ks", DEFAULT_KS)),
            sweep={k: list(v) for k, v in d.get("sweep", {}).items()},
            seeds=[int(s) for s in d.get("seeds", [0])],
        )
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset, "dataset_path": self.dataset_path, "model": self.model,
            "train": self.train, "eval": {"ks": list(self.ks)}, "sweep": self.sweep, "seeds": self.seeds,
        }

    def generator_config(self, seed: int | None = None) -> GeneratorConfig:
        d = dict(self.dataset)
        if seed is not None:
            d["seed"] = seed
        try:
            cfg = GeneratorConfig.from_dict(d)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise SpecError(f"dataset: {exc}") from exc
        return cfg

    def train_config(self, seed: int | None = None, **axes) -> TrainConfig:
        d = {**self.train, **axes}
        if seed is not None:
            d["seed"] = seed
        try:
            cfg = TrainConfig.from_dict(d)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise SpecError(f"train: {exc}") from exc
        return cfg

    def validate(self) -> None:
        if not self.seeds:
            raise SpecError("seeds: list must be non-empty")
        if any(k < 1 for k in self.ks) or not self.ks:
            raise SpecError("eval.ks: need positive integers")
        bad_axes = set(self.sweep) - set(SWEEP_AXES)
        if bad_axes:
            raise SpecError(f"sweep: unknown axes {sorted(bad_axes)}; allowed {list(SWEEP_AXES)}")
        for name, values in self.sweep.items():
            if not values:
                raise SpecError(f"sweep.{name}: axis must be non-empty")
        for key in ("hidden_dim", "repr_dim"):
            if not isinstance(self.model[key], int) or self.model[key] < 1:
                raise SpecError(f"model.{key}: must be a positive integer")
        if self.dataset_path is None:
            self.generator_config()
        self.train_config()

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise SpecError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides:
        path, value = parse_override(text)
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise SpecError(f"override {text!r}: {part!r} is not a section")
        node[path[-1]] = value
    return doc


def load_spec(config: str | None, overrides: Sequence[str] = ()) -> ExperimentSpec:
    doc: dict = {}
    if config is not None:
        try:
            doc = json.loads(Path(config).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise SpecError(f"config file not found: {config}") from exc
        except json.JSONDecodeError as exc:
            raise SpecError(f"{config}: invalid JSON ({exc})") from exc
    return ExperimentSpec.from_dict(apply_overrides(doc, overrides))


# -- single runs --------------------------------------------------------------


def build_model(spec: ExperimentSpec, data: DatasetSplit, strategy: str, seed: int) -> RelationModel:
    if spec.model.get("checkpoint"):
        model = load_checkpoint(spec.model["checkpoint"])
        if strategy == "lskd_syn" and model.teacher_head is None:
            raise ConfigurationError("lskd_syn needs a checkpoint with a teacher head")
        return model
    dims = ModelDims(data.feature_dim, spec.model["hidden_dim"], spec.model["repr_dim"], data.num_classes)
    return init_model(dims, seed=seed, scale=float(spec.model["init_scale"]),
                      teacher_head=strategy == "lskd_syn", tau=float(spec.model["tau"]))


def get_dataset(spec: ExperimentSpec, seed: int | None = None) -> DatasetSplit:
    if spec.dataset_path is not None:
        return load_dataset(spec.dataset_path)
    return generate_dataset(spec.generator_config(seed))


@dataclass
class RunResult:
    model: RelationModel
    state: TrainState
    report: EvalReport


def run_single(spec: ExperimentSpec, data: DatasetSplit, seed: int, **axes) -> RunResult:
    """Train one model and evaluate it on the test split."""
    cfg = spec.train_config(seed=seed, **axes)
    model = build_model(spec, data, cfg.strategy, seed)
    trained, state = train(cfg, data, model)
    report = evaluate(trained, data.test, data.vocabulary, truth=data.truth_matrix(data.test), ks=spec.ks)
    report.config_hash = spec.config_hash()
    return RunResult(trained, state, report)


def metric_row(report: EvalReport) -> dict[str, float | None]:
    row = report.csv_row()
    return {k: row[k] for k in METRIC_COLUMNS}


def write_history(state: TrainState, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in state.history:
            fh.write(json.dumps({"epoch": rec.epoch, "train_loss": rec.train_loss, "lr": rec.lr, **rec.val},
                                sort_keys=True) + "\n")


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


# -- subcommands --------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = load_spec(args.config, args.override)
    cfg = spec.generator_config(args.seed)
    out = Path(args.out) if args.out else default_out()
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(cfg)
    path = out / "dataset.jsonl"
    save_dataset(data, path)
    vocab = data.vocabulary
    fg = np.array(vocab.frequencies[1:])
    n_all = sum(len(data.split(s)) for s in ("train", "val", "test"))
    n_missing = sum(int(data.split(s).missing.sum()) for s in ("train", "val", "test"))
    ranked = sorted(range(1, vocab.num_classes), key=lambda c: -vocab.frequencies[c])
    counts = {g: [vocab.frequencies[c] for c in vocab.members(g)] for g in ("head", "body", "tail")}
    summary = {
        "path": str(path),
        "sha256": file_sha256(path),
        "splits": {s: len(data.split(s)) for s in ("train", "val", "test")},
        "miss_rate": n_missing / max(n_all, 1),
        "long_tail_ratio": float(fg.max() / max(fg.min(), 1)),
        "group_sizes": {g: len(vocab.members(g)) for g in ("head", "body", "tail")},
        "group_boundaries": {g: [max(counts[g]), min(counts[g])] for g in ("head", "body", "tail")},
        "train_frequencies": {vocab.names[c]: vocab.frequencies[c] for c in ranked},
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    spec = load_spec(args.config, args.override)
    if args.dataset:
        spec.dataset_path = args.dataset
    seed = args.seed if args.seed is not None else spec.seeds[0]
    out = Path(args.out) if args.out else default_out()
    out.mkdir(parents=True, exist_ok=True)
    data = get_dataset(spec, seed if spec.dataset_path is None else None)
    result = run_single(spec, data, seed)
    save_checkpoint(result.model, out / "checkpoint.jsonl")
    write_history(result.state, out / "history.jsonl")
    (out / "eval.json").write_text(result.report.to_json() + "\n", encoding="utf-8")
    (out / "eval.csv").write_text(result.report.to_csv(), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({
        "checkpoint_sha256": checkpoint_hash(result.model),
        "epochs": len(result.state.history),
        **{k: v for k, v in metric_row(result.report).items()},
    }, indent=2))
    return EXIT_OK


def sweep_cells(spec: ExperimentSpec) -> list[dict[str, Any]]:
    axes = [a for a in SWEEP_AXES if a in spec.sweep]
    return [dict(zip(axes, combo)) for combo in itertools.product(*(spec.sweep[a] for a in axes))]


def _sweep_job(spec_dict: dict, cell: dict, seed: int) -> dict:
    spec = ExperimentSpec.from_dict(spec_dict)
    row: dict[str, Any] = {**cell, "seed": seed}
    try:
        data = get_dataset(spec, seed if spec.dataset_path is None else None)
        result = run_single(spec, data, seed, **cell)
        row.update(metric_row(result.report), status="ok")
    except Exception as exc:  # a failed cell must not stop the sweep
        log.error("cell %s seed %d failed: %s", cell, seed, exc)
        row.update({k: None for k in METRIC_COLUMNS}, status=f"failed: {exc}")
    return row


def run_sweep(spec: ExperimentSpec, jobs: int = 1) -> list[dict]:
    if not spec.sweep:
        raise SpecError("sweep: at least one axis is required")
    tasks = [(cell, seed) for cell in sweep_cells(spec) for seed in spec.seeds]
    spec_dict = spec.to_dict()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_job, *zip(*[(spec_dict, c, s) for c, s in tasks])))
    return [_sweep_job(spec_dict, c, s) for c, s in tasks]


def sweep_fieldnames(spec: ExperimentSpec) -> list[str]:
    return [a for a in SWEEP_AXES if a in spec.sweep] + ["seed", "status", *METRIC_COLUMNS]


def write_rows_csv(rows: Sequence[Mapping], fieldnames: Sequence[str], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row[k], float)
                                 else row[k]) for k in fieldnames})


def read_sweep_csv(path: Path) -> list[dict]:
    """Inverse of the sweep CSV writer (floats restored exactly)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row: dict[str, Any] = {}
            for k, v in raw.items():
                if k == "status":
                    row[k] = v
                elif k == "seed":
                    row[k] = int(v)
                elif v == "":
                    row[k] = None
                else:
                    row[k] = json.loads(v) if k in SWEEP_AXES else float(v)
            rows.append(row)
    return rows


def aggregate(rows: Sequence[Mapping], axes: Sequence[str]) -> list[dict]:
    """mean and sample std per cell over successful seeds."""
    cells: dict[tuple, list[Mapping]] = {}
    for row in rows:
        cells.setdefault(tuple(row[a] for a in axes), []).append(row)
    out = []
    for key, group in cells.items():
        ok = [r for r in group if r["status"] == "ok"]
        agg: dict[str, Any] = dict(zip(axes, key))
        agg["runs"], agg["failed"] = len(ok), len(group) - len(ok)
        for m in METRIC_COLUMNS:
            vals = [r[m] for r in ok if r[m] is not None]
            agg[f"{m}_mean"] = statistics.fmean(vals) if vals else None
            agg[f"{m}_std"] = statistics.stdev(vals) if len(vals) > 1 else 0.0 if vals else None
        out.append(agg)
    return out


def markdown_table(agg: Sequence[Mapping], axes: Sequence[str]) -> str:
    cols = ("mR@50", "mR@100", "R@50", "R@100", "Mean")
    head = "| " + " | ".join([*axes, *cols]) + " |"
    sep = "|" + "---|" * (len(axes) + len(cols))
    lines = [head, sep]
    for row in agg:
        cells = [str(row[a]) for a in axes]
        for c in cols:
            m, s = row[f"{c}_mean"], row[f"{c}_std"]
            cells.append("failed" if m is None else f"{100 * m:.1f} ± {100 * s:.1f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def cmd_sweep(args) -> int:
    spec = load_spec(args.config, args.override)
    if args.seed is not None:
        spec.seeds = [args.seed]
    if not spec.sweep:
        raise SpecError("sweep: at least one axis is required")
    out = Path(args.out) if args.out else default_out()
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(spec, jobs=args.jobs)
    axes = [a for a in SWEEP_AXES if a in spec.sweep]
    write_rows_csv(rows, sweep_fieldnames(spec), out / "sweep.csv")
    agg = aggregate(rows, axes)
    agg_fields = [*axes, "runs", "failed"] + [f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "std")]
    write_rows_csv(agg, agg_fields, out / "sweep_summary.csv")
    table = markdown_table(agg, axes)
    (out / "sweep.md").write_text(table, encoding="utf-8")
    print(table, end="")
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"{failed} of {len(rows)} runs failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- report -------------------------------------------------------------------


def monotone(values: Sequence[float], direction: str) -> bool:
    pairs = list(zip(values, values[1:]))
    if direction == "increases":
        return all(b > a for a, b in pairs)
    return all(b < a for a, b in pairs)


def trend_checks(rows: Sequence[Mapping]) -> list[dict]:
    """Strict monotonicity of seed-averaged mR@100 and R@100 along each swept axis."""
    axes = [a for a in SWEEP_AXES if a in rows[0]]
    checks = []
    for axis in axes:
        others = [a for a in axes if a != axis]
        agg = aggregate(rows, axes)
        groups: dict[tuple, list[Mapping]] = {}
        for row in agg:
            groups.setdefault(tuple(row[a] for a in others), []).append(row)
        for key, group in groups.items():
            group = sorted(group, key=lambda r: r[axis])
            for metric in ("mR@100", "R@100"):
                vals = [r[f"{metric}_mean"] for r in group]
                if any(v is None for v in vals):
                    continue
                for direction in ("increases", "decreases"):
                    checks.append({
                        "check": f"{metric} {direction} with {axis}",
                        "fixed": dict(zip(others, key)),
                        "values": vals,
                        "axis_values": [r[axis] for r in group],
                        "holds": monotone(vals, direction),
                    })
    return checks


def predicate_table(reports: Sequence[EvalReport]) -> list[dict]:
    base = reports[0]
    rows = []
    for c in sorted(base.per_predicate):
        row = {"predicate": base.predicate_names.get(c, str(c)), "id": c,
               "group": base.predicate_groups.get(c, ""), "recall": [r.per_predicate.get(c) for r in reports]}
        if len(reports) == 2 and None not in row["recall"]:
            row["delta"] = row["recall"][1] - row["recall"][0]
        rows.append(row)
    return rows


def cmd_report(args) -> int:
    reports = []
    for path in args.evals:
        if not Path(path).exists():
            raise FileNotFoundError(f"eval file not found: {path}")
        reports.append(EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8"))))
    result: dict[str, Any] = {}
    lines = []
    if reports:
        table = predicate_table(reports)
        result["per_predicate"] = table
        result["group_recall"] = [r.group_recall for r in reports]
        header = "| predicate | group | " + " | ".join(Path(p).parent.name or p for p in args.evals)
        header += " | delta |" if len(reports) == 2 else " |"
        lines += [header, "|---|---|" + "---|" * (len(reports) + (len(reports) == 2))]
        for row in table:
            cells = [row["predicate"], row["group"]] + [f"{100 * v:.1f}" for v in row["recall"]]
            if "delta" in row:
                cells.append(f"{100 * row['delta']:+.1f}")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
        lines.append("| run | head | body | tail | mean |")
        lines.append("|---|---|---|---|---|")
        for p, r in zip(args.evals, reports):
            g = r.group_recall
            lines.append(f"| {p} | " + " | ".join(f"{100 * g[k]:.1f}" for k in ("head", "body", "tail", "mean")) + " |")
    if args.sweep:
        if not Path(args.sweep).exists():
            raise FileNotFoundError(f"sweep file not found: {args.sweep}")
        checks = trend_checks(read_sweep_csv(Path(args.sweep)))
        result["trends"] = checks
        lines.append("")
        for c in checks:
            fixed = f" at {c['fixed']}" if c["fixed"] else ""
            lines.append(f"{c['check']}{fixed}: {'yes' if c['holds'] else 'no'}")
    if not reports and not args.sweep:
        raise SpecError("report: give at least one eval file or --sweep")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lskd", description="Soft-label self-distillation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="experiment JSON file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, repeatable (e.g. train.alpha=5)")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model and evaluate it on the test split")
    common(p)
    p.add_argument("--dataset", help="existing dataset file (overrides the dataset section)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over alpha / tau / interval_epochs and seeds")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="per-predicate tables and trend checks")
    p.add_argument("evals", nargs="*", help="eval.json files; two files add a delta column")
    p.add_argument("--sweep", help="sweep.csv to run trend checks on")
    p.add_argument("--out", help="write the machine-readable report here (JSON)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SpecError, ConfigurationError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
