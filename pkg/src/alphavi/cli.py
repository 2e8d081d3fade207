"""Command line entry point: ``avi <command> --config path.json [--override key=value ...] [--quick]``.

Configuration is layered: built-in defaults for the command, then the
``--quick`` profile, then the JSON file, then ``--override`` flags (dot paths
into the document, values parsed as JSON when possible).

Every output is a CSV preceded by ``#`` comment lines holding the resolved
configuration, the seed and the library version. Data rows contain no
timestamps, so reruns with the same configuration are byte-identical.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core_math import RngStream
from .errors import AlphaVIError, ConfigError, MissingClass, ParseError
from .experiments import (
    LogRegSettings,
    factorized_validation,
    final_elbo_summary,
    fullrank_validation,
    gauss_initial_error,
    gauss_scale_sweep,
    logreg_sweep,
    snr_path_trace,
    template_for,
    variance_check,
)
from .models import BUILTIN_DATASETS, LogRegTarget, load_csv, standardize, subsample
from .optimizers import DEFAULT_GRID
from .snr_empirical import snr_along_path
from .snr_theory import (
    snr_factorized_gaussian,
    snr_fullrank_bound,
    snr_fullrank_exact,
    variance_bound_factorized,
)

EXPERIMENTS = ("gauss-scale", "logreg", "snr-table", "snr-validate", "snr-path", "var-check")
EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG = 0, 1, 2
QUICK_SAMPLES = 100_000


@dataclass
class DatasetConfig:
    name: Optional[str] = "iris"
    path: Optional[str] = None
    label_column: object = -1
    positive_label: Optional[str] = None
    classes: Optional[list] = None
    standardize: bool = True
    subset_size: int = 100
    subset_seed: int = 0
    prior_scale: float = 1.0


@dataclass
class SigmaGrid:
    low: float = 0.5
    high: float = 4.0
    points: int = 40

    def values(self) -> np.ndarray:
        return np.geomspace(self.low, self.high, self.points)


@dataclass
class ExperimentConfig:
    experiment: str
    d: list = field(default_factory=lambda: [8, 32, 128])
    alphas: list = field(default_factory=lambda: [0.0, 0.4, 0.9, 1.5])
    n_samples_list: list = field(default_factory=lambda: [1, 10, 100, 1000, 10000])
    lambdas: list = field(default_factory=lambda: [0.25, 1.0, 4.0])
    steps: int = 1000
    replications: int = 15
    step_size_grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    optimizer: str = "sgd"
    estimator: str = "drep"
    seed_base: int = 0
    mc_samples: int = 10_000_000
    fullrank_pairs: int = 0
    fullrank_alphas: list = field(default_factory=lambda: [0.4, -0.5])
    init_scale: float = 2.0
    loss_every: int = 10
    loss_samples: int = 1000
    final_samples: int = 250_000
    path_step_size: float = 0.01
    record_every: int = 50
    sigma_q_grid: SigmaGrid = field(default_factory=SigmaGrid)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    workers: int = 1
    output_dir: str = "results"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = copy.deepcopy(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown field")
        if "experiment" not in data:
            raise ConfigError("experiment: required")
        for name, sub in (("dataset", DatasetConfig), ("sigma_q_grid", SigmaGrid)):
            if name in data:
                if not isinstance(data[name], dict):
                    raise ConfigError(f"{name}: must be an object")
                sub_known = {f.name for f in fields(sub)}
                bad = sorted(set(data[name]) - sub_known)
                if bad:
                    raise ConfigError(f"{name}.{bad[0]}: unknown field")
                data[name] = sub(**data[name])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def fail(path, msg):
            raise ConfigError(f"{path}: {msg}")

        if self.experiment not in EXPERIMENTS:
            fail("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
        for name in ("d", "alphas", "n_samples_list", "lambdas", "step_size_grid"):
            value = getattr(self, name)
            if not isinstance(value, list) or not value:
                fail(name, "must be a non-empty list")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                fail(name, "must contain numbers only")
        if any(int(v) != v or v < 1 for v in self.d):
            fail("d", "entries must be positive integers")
        if any(int(v) != v or v < 1 for v in self.n_samples_list):
            fail("n_samples_list", "entries must be positive integers")
        if any(v <= 0 for v in self.lambdas):
            fail("lambdas", "entries must be positive")
        if any(v <= 0 for v in self.step_size_grid):
            fail("step_size_grid", "entries must be positive")
        for name in ("steps", "replications", "mc_samples", "loss_every", "loss_samples", "final_samples", "record_every", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                fail(name, "must be a positive integer")
        if self.mc_samples < 2:
            fail("mc_samples", "must be >= 2")
        if not isinstance(self.seed_base, int) or self.seed_base < 0:
            fail("seed_base", "must be a non-negative integer")
        if self.optimizer not in ("sgd", "adam"):
            fail("optimizer", "must be 'sgd' or 'adam'")
        if self.estimator not in ("rep", "drep"):
            fail("estimator", "must be 'rep' or 'drep'")
        if self.estimator == "rep" and 1.0 in self.alphas:
            fail("alphas", "the rep estimator has no form at alpha = 1")
        if self.init_scale <= 0 or self.path_step_size <= 0:
            fail("init_scale" if self.init_scale <= 0 else "path_step_size", "must be positive")
        g = self.sigma_q_grid
        if not (0 < g.low < g.high) or g.points < 2:
            fail("sigma_q_grid", "needs 0 < low < high and points >= 2")
        ds = self.dataset
        if ds.name is None and ds.path is None:
            fail("dataset", "needs a name or a path")
        if ds.name is not None and ds.path is None and ds.name not in BUILTIN_DATASETS:
            fail("dataset.name", f"must be one of {', '.join(BUILTIN_DATASETS)} when no path is given")
        if ds.prior_scale <= 0:
            fail("dataset.prior_scale", "must be positive")
        if ds.subset_size < 2:
            fail("dataset.subset_size", "must be >= 2")


COMMAND_DEFAULTS = {
    "gauss-scale": {},
    "logreg": {"alphas": [0.0, 0.1, 0.2, 0.3], "init_scale": 1.0},
    "snr-table": {"d": [1, 10, 50, 128], "alphas": [0.0, 0.4, 0.9, 1.5]},
    "snr-validate": {"d": [1, 2, 4], "fullrank_pairs": 20, "fullrank_alphas": [0.4, -0.5]},
    "snr-path": {
        "alphas": [0.0, 0.1, 0.2, 0.3],
        "mc_samples": 10_000,
        "init_scale": 1.0,
        "dataset": {"name": "australian"},
    },
    "var-check": {"d": [1, 4, 16, 8, 32, 128], "alphas": [0.1, 0.25, 0.4], "lambdas": [1.0, 2.0, 4.0]},
}

QUICK_PROFILES = {
    "gauss-scale": {"d": [8, 32], "alphas": [0.0, 0.4, 1.5], "n_samples_list": [1, 10, 100]},
    "logreg": {"n_samples_list": [1, 10, 1000], "final_samples": 25_000},
    "snr-table": {},
    "snr-validate": {"fullrank_pairs": 5},
    "snr-path": {"steps": 200, "record_every": 20, "mc_samples": 1000},
    "var-check": {"d": [1, 4, 16]},
}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"{assignment}: override must look like key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"{key}: malformed field path")
    doc = copy.deepcopy(doc)
    node = doc
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{key}: {part} is not an object")
        node = child
    node[parts[-1]] = _parse_value(raw)
    return doc


def resolve_config(command: str, file_doc: Optional[dict] = None, overrides=(), quick: bool = False) -> ExperimentConfig:
    base = ExperimentConfig(experiment=command).to_dict()
    doc = _merge(base, COMMAND_DEFAULTS[command])
    if quick:
        doc = _merge(doc, {"replications": 5, "mc_samples": min(doc["mc_samples"], QUICK_SAMPLES)})
        doc = _merge(doc, QUICK_PROFILES[command])
    if file_doc:
        if not isinstance(file_doc, dict):
            raise ConfigError("config: top level must be a JSON object")
        if file_doc.get("experiment", command) != command:
            raise ConfigError(f"experiment: config is for {file_doc['experiment']!r}, not {command!r}")
        doc = _merge(doc, file_doc)
    for assignment in overrides:
        doc = apply_override(doc, assignment)
    return ExperimentConfig.from_dict(doc)


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return "" if value is None else str(value)


class CsvOutput:
    """Writes result tables under the configured output directory."""

    def __init__(self, config: ExperimentConfig, command: str):
        self.config = config
        self.command = command
        self.root = Path(config.output_dir)
        self.written = []

    def write(self, name: str, header, rows) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / name
        with path.open("w", newline="") as fh:
            fh.write(f"# command: {self.command}\n")
            fh.write(f"# config: {self.config.to_json()}\n")
            fh.write(f"# seed_base: {self.config.seed_base}\n")
            fh.write(f"# version: {__version__}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
        self.written.append(path)
        return path


def _alpha_tag(alpha: float) -> str:
    return f"{alpha:g}".replace("-", "m")


def cmd_gauss_scale(cfg: ExperimentConfig, out: CsvOutput) -> int:
    initial = gauss_initial_error(cfg.init_scale)
    summary = []
    for d in cfg.d:
        for alpha in cfg.alphas:
            for n in cfg.n_samples_list:
                result = gauss_scale_sweep(
                    int(d), float(alpha), int(n),
                    grid=cfg.step_size_grid, replications=cfg.replications, steps=cfg.steps,
                    seed_base=cfg.seed_base, optimizer=cfg.optimizer, estimator=cfg.estimator,
                    init_scale=cfg.init_scale, workers=cfg.workers,
                )
                cell = result.chosen
                name = f"gauss_scale_d{int(d)}_a{_alpha_tag(alpha)}_N{int(n)}.csv"
                if cell is None:
                    out.write(name, ["step", "mean_error", "stderr_error", "chosen_step_size"], [])
                    summary.append([int(d), alpha, int(n), math.nan, math.nan, math.nan, initial, "failed"])
                    continue
                mean, se = cell.mean_errors(), cell.stderr_errors()
                out.write(
                    name,
                    ["step", "mean_error", "stderr_error", "chosen_step_size"],
                    ([t, mean[t], se[t], cell.step_size] for t in range(len(mean))),
                )
                progress = "barely" if mean[-1] > 0.5 * initial else "converging"
                summary.append([int(d), alpha, int(n), cell.step_size, mean[-1], se[-1], initial, progress])
    out.write(
        "gauss_scale_summary.csv",
        ["d", "alpha", "n_samples", "chosen_step_size", "final_mean_error", "final_stderr_error", "initial_error", "progress"],
        summary,
    )
    return EXIT_OK


def load_dataset(ds_cfg: DatasetConfig):
    if ds_cfg.path is not None:
        ds = load_csv(ds_cfg.path, ds_cfg.label_column, ds_cfg.positive_label, ds_cfg.classes, name=ds_cfg.name)
        ds = subsample(ds, ds_cfg.subset_size, RngStream(ds_cfg.subset_seed, stream_id=1))
        return standardize(ds) if ds_cfg.standardize else ds
    if ds_cfg.name == "australian":
        return BUILTIN_DATASETS["australian"](seed=ds_cfg.subset_seed, n=ds_cfg.subset_size, standardized=ds_cfg.standardize)
    return BUILTIN_DATASETS[ds_cfg.name](standardized=ds_cfg.standardize)


def cmd_logreg(cfg: ExperimentConfig, out: CsvOutput) -> int:
    target = LogRegTarget(load_dataset(cfg.dataset), cfg.dataset.prior_scale)
    settings = LogRegSettings(
        steps=cfg.steps, loss_every=cfg.loss_every, loss_samples=cfg.loss_samples,
        final_samples=cfg.final_samples, init_scale=cfg.init_scale, optimizer=cfg.optimizer,
    )
    summary = []
    for alpha in cfg.alphas:
        for n in cfg.n_samples_list:
            result = logreg_sweep(target, float(alpha), int(n), cfg.step_size_grid, cfg.replications, cfg.seed_base, settings, cfg.workers)
            cell = result.chosen
            name = f"logreg_{target.dataset.name}_a{_alpha_tag(alpha)}_N{int(n)}.csv"
            header = ["step", "mean_loss", "stderr_loss", "chosen_step_size"]
            if cell is None:
                out.write(name, header, [])
                summary.append([target.dataset.name, alpha, int(n), math.nan, math.nan, math.nan, cfg.final_samples])
                continue
            losses = np.array([t.losses for t in cell.traces])
            mean = losses.mean(axis=0)
            se = losses.std(axis=0, ddof=1) / math.sqrt(len(cell.traces)) if len(cell.traces) > 1 else np.zeros_like(mean)
            steps = cell.traces[0].loss_steps
            out.write(name, header, ([steps[i], mean[i], se[i], cell.step_size] for i in range(len(steps))))
            final, final_se = final_elbo_summary(result)
            summary.append([target.dataset.name, alpha, int(n), cell.step_size, final, final_se, cfg.final_samples])
    out.write(
        f"logreg_{target.dataset.name}_summary.csv",
        ["dataset", "alpha", "n_samples", "chosen_step_size", "final_alpha_elbo", "stderr_final", "final_samples"],
        summary,
    )
    return EXIT_OK


def _report_cells(report, use_bound=False):
    value = report.upper_bound if use_bound else report.value
    return report.status.value, value, report.existence_margin


def cmd_snr_table(cfg: ExperimentConfig, out: CsvOutput) -> int:
    rows = []
    for d in cfg.d:
        d = int(d)
        for alpha in cfg.alphas:
            for lam in cfg.lambdas:
                sq = np.full(d, math.sqrt(lam))
                lam = f"iso:{lam:g}"
                rep = snr_factorized_gaussian(np.ones(d), sq, alpha, 0)
                rows.append(["factorized", "snr", d, alpha, lam, *_report_cells(rep)])
                exact = snr_fullrank_exact(np.eye(d), np.diag(sq), alpha)
                rows.append(["fullrank", "snr", d, alpha, lam, *_report_cells(exact)])
                bound = snr_fullrank_bound(np.eye(d), np.diag(sq), alpha)
                rows.append(["fullrank", "snr_bound", d, alpha, lam, *_report_cells(bound, use_bound=True)])
                if alpha != 0:
                    try:
                        vb = variance_bound_factorized(np.ones(d), sq, alpha, 0)
                        rows.append(["factorized", "variance_bound", d, alpha, lam, "defined", vb, rep.existence_margin])
                    except AlphaVIError:
                        rows.append(["factorized", "variance_bound", d, alpha, lam, "undefined-infinite-variance", math.nan, rep.existence_margin])
    out.write(
        "snr_table.csv",
        ["family", "quantity", "d", "alpha", "lambda_spec", "status", "snr_or_bound", "existence_margin"],
        rows,
    )
    sweep_rows = []
    d = int(max(cfg.d))
    for alpha in cfg.alphas:
        for s in cfg.sigma_q_grid.values():
            rep = snr_factorized_gaussian(np.ones(d), np.full(d, s), alpha, 0)
            sweep_rows.append([d, alpha, s, *_report_cells(rep)])
    out.write("snr_sigma_sweep.csv", ["d", "alpha", "sigma_q", "status", "snr", "existence_margin"], sweep_rows)
    return EXIT_OK


VALIDATION_HEADER = ["family", "d", "alpha", "lambdas", "component", "verdict", "theory", "mc", "mc_se", "rel_error", "bound", "bound_holds", "fourth_moment_margin"]


def _validation_rows(rows):
    return [[r.family, r.d, r.alpha, r.lambdas, r.component, r.verdict, r.theory, r.mc, r.mc_se, r.rel_error, r.bound, r.bound_holds, r.fourth_moment_margin] for r in rows]


def cmd_snr_validate(cfg: ExperimentConfig, out: CsvOutput) -> int:
    rng = RngStream(cfg.seed_base)
    rows = factorized_validation([int(d) for d in cfg.d], cfg.alphas, cfg.lambdas, cfg.mc_samples, rng.substream(0))
    if cfg.fullrank_pairs > 0:
        fr_d = [int(d) for d in cfg.d if d >= 2] or [2]
        rows += fullrank_validation(fr_d, cfg.fullrank_alphas, cfg.fullrank_pairs, cfg.mc_samples, rng.substream(1))
    out.write("snr_validate.csv", VALIDATION_HEADER, _validation_rows(rows))
    failed = [r for r in rows if r.failed]
    for r in failed:
        print(f"FAIL {r.family} d={r.d} alpha={r.alpha:g} lambdas={r.lambdas} {r.component}: theory={r.theory:.6g} mc={r.mc:.6g}", file=sys.stderr)
    return EXIT_VALIDATION if failed else EXIT_OK


def cmd_snr_path(cfg: ExperimentConfig, out: CsvOutput) -> int:
    target = LogRegTarget(load_dataset(cfg.dataset), cfg.dataset.prior_scale)
    rng = RngStream(cfg.seed_base)
    trace = snr_path_trace(
        target, cfg.path_step_size, cfg.steps, cfg.record_every, rng.substream(0),
        n_samples=int(cfg.n_samples_list[0]), init_scale=cfg.init_scale, optimizer=cfg.optimizer,
    )
    if trace.aborted:
        raise ConfigError(f"path_step_size: the zero-limit path diverged at step {trace.metadata['aborted_at']}")
    steps = [t for t, _ in trace.param_history]
    params = [p for _, p in trace.param_history]
    cells = snr_along_path(steps, params, template_for(target), target, cfg.alphas, cfg.mc_samples, rng.substream(1))
    out.write(
        f"snr_path_{target.dataset.name}.csv",
        ["step", "alpha", "status", "snr", "se_snr", "n_nonfinite"],
        ([c.step, c.alpha, c.status, c.snr, c.se_snr, c.n_nonfinite] for c in cells),
    )
    return EXIT_OK


def cmd_var_check(cfg: ExperimentConfig, out: CsvOutput) -> int:
    rng = RngStream(cfg.seed_base)
    rows = variance_check([int(d) for d in cfg.d], cfg.alphas, cfg.lambdas, cfg.mc_samples, rng)
    out.write(
        "var_check.csv",
        ["d", "alpha", "lambda", "mc_variance_component_0", "bound", "bound_holds"],
        ([r.d, r.alpha, r.lambda_, r.mc_variance, r.bound, r.bound_holds] for r in rows),
    )
    violated = [r for r in rows if not r.bound_holds]
    for r in violated:
        print(f"FAIL d={r.d} alpha={r.alpha:g} lambda={r.lambda_:g}: mc={r.mc_variance:.6g} > bound={r.bound:.6g}", file=sys.stderr)
    return EXIT_VALIDATION if violated else EXIT_OK


COMMANDS = {
    "gauss-scale": cmd_gauss_scale,
    "logreg": cmd_logreg,
    "snr-table": cmd_snr_table,
    "snr-validate": cmd_snr_validate,
    "snr-path": cmd_snr_path,
    "var-check": cmd_var_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avi", description="Alpha-divergence VI estimators, SNR theory and experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=EXPERIMENTS)
    parser.add_argument("--config", type=Path, help="JSON configuration file")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="set a config field by dot path")
    parser.add_argument("--quick", action="store_true", help="use the reduced desk-scale profile")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_doc = None
        if args.config is not None:
            with args.config.open() as fh:
                file_doc = json.load(fh)
        cfg = resolve_config(args.command, file_doc, args.override, args.quick)
        out = CsvOutput(cfg, args.command)
        code = COMMANDS[args.command](cfg, out)
    except (ConfigError, ParseError, MissingClass) as exc:
        print(f"avi: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"avi: config is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"avi: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in out.written:
        print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
