"""Experiment runner: run configuration files, per-epoch metrics, run summaries.

A run configuration is a flat ``key = value`` text file. Blank lines and text
after ``#`` are ignored; ``none`` clears an optional value. Recognised keys
(defaults in brackets):

Run
    ``mode`` [serial]: serial, parallel_penalty, parallel_al,
    parallel_penalty_auxnet or parallel_penalty_reauxnet.
    ``seed`` [0] model, batching and noise seed. ``epochs`` [10].
    ``batch_size`` [32]. ``output_dir`` [runs/latest]. ``workers`` [none = K].
    ``serial_reference`` [none]: directory of a finished serial run whose mean
    epoch time gives the measured speedup. ``plot_fields``
    [train_loss,test_accuracy,violation_mean]. ``checkpoint`` [false].
Data
    ``dataset`` [spirals]: blobs, spirals, rings or csv. ``n_samples`` [600].
    ``n_classes`` [3]. ``noise`` [0.05]. ``data_seed`` [0] (also fixes the
    80/20 split). ``csv_path`` [none] required for ``dataset = csv``.
Model
    ``blocks`` [6]. ``width`` [16]. ``hidden`` [32]. ``residual_scale`` [0.5].
Optimiser
    ``lr`` [0.05]. ``lr_schedule`` [cosine]: cosine, constant or step.
    ``lr_milestones`` [empty, comma-separated epochs]. ``lr_factor`` [0.1].
    ``momentum`` [0.9].
Decoupling
    ``K`` [3]. ``beta`` [0.01]. ``beta_gamma`` [1.0]. ``beta_every`` [0].
    ``psi`` [l2_squared]. ``lambda_lr`` [none = lr]. ``lambda_contraction``
    [none]. ``kappa_lr`` [none = lr]. ``noise_sigma`` [0.001].
Auxiliary networks
    ``aux_hidden`` [none = hidden/2]. ``aux_blocks`` [1]. ``aux_lr_scale`` [1.0].
    ``distill_steps`` [1]. ``reaux_shared_prefix`` [false].
Augmentation
    ``augment`` [none]: none, gaussian_jitter, random_shift or flip_sign.
    ``augment_sigma`` [0.0]. ``augment_offset`` [0.0]. ``augment_p`` [0.0].
    ``augment_ratio`` [inf]: a positive integer or inf.

Environment overrides: ``LAYERPAR_OUTPUT_DIR`` replaces ``output_dir`` and
``LAYERPAR_THREADS`` replaces ``workers``.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AugmentPolicy, Dataset, gen_dataset, load_csv, train_test_split
from .model import ResidualModel, save_checkpoint
from .parallel import (AUGMENTED_LAGRANGIAN, PENALTY, NumericalDivergence, ParallelConfig, ParallelTrainer,
                       StageError)
from .serial import SerialTrainer, SgdConfig, evaluate
from .speedup import IncompleteMetrics, measure_phases, speedup_report
from .tensor import SeededRng

MODES = ("serial", "parallel_penalty", "parallel_al", "parallel_penalty_auxnet", "parallel_penalty_reauxnet")
_MODE_SETTINGS = {
    "parallel_penalty": (PENALTY, "persistent"),
    "parallel_al": (AUGMENTED_LAGRANGIAN, "persistent"),
    "parallel_penalty_auxnet": (PENALTY, "auxnet"),
    "parallel_penalty_reauxnet": (PENALTY, "reauxnet"),
}

TIMING_FIELDS = ("T_d", "T_f", "T_b", "t_psi", "t_aux_f", "t_aux_b", "epoch_time")
METRIC_FIELDS = ("epoch", "train_loss", "train_accuracy", "test_loss", "test_accuracy", "violation_mean",
                 "violation_max", "distill_loss", "lr", "beta", "aux_bytes", "steps") + TIMING_FIELDS
METRICS_FILE = "metrics.csv"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.txt"

ENV_OUTPUT_DIR = "LAYERPAR_OUTPUT_DIR"
ENV_THREADS = "LAYERPAR_THREADS"


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "serial"
    seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    output_dir: str = "runs/latest"
    workers: int | None = None
    serial_reference: str | None = None
    plot_fields: tuple = ("train_loss", "test_accuracy", "violation_mean")
    checkpoint: bool = False
    dataset: str = "spirals"
    n_samples: int = 600
    n_classes: int = 3
    noise: float = 0.05
    data_seed: int = 0
    csv_path: str | None = None
    blocks: int = 6
    width: int = 16
    hidden: int = 32
    residual_scale: float = 0.5
    lr: float = 0.05
    lr_schedule: str = "cosine"
    lr_milestones: tuple = ()
    lr_factor: float = 0.1
    momentum: float = 0.9
    K: int = 3
    beta: float = 0.01
    beta_gamma: float = 1.0
    beta_every: int = 0
    psi: str = "l2_squared"
    lambda_lr: float | None = None
    lambda_contraction: float | None = None
    kappa_lr: float | None = None
    noise_sigma: float = 1e-3
    aux_hidden: int | None = None
    aux_blocks: int = 1
    aux_lr_scale: float = 1.0
    distill_steps: int = 1
    reaux_shared_prefix: bool = False
    augment: str = "none"
    augment_sigma: float = 0.0
    augment_offset: float = 0.0
    augment_p: float = 0.0
    augment_ratio: int | None = None

    def __post_init__(self):
        try:
            self.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.dataset == "csv" and not self.csv_path:
            raise ValueError("dataset = csv requires csv_path")
        if self.mode != "serial" and not 1 <= self.K <= self.blocks:
            raise ValueError(f"K must lie in [1, blocks={self.blocks}], got {self.K}")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1")
        # constructing the component configs runs their own checks
        self.sgd_config()
        self.augment_policy()
        if self.mode != "serial":
            self.parallel_config()

    @property
    def effective_K(self) -> int:
        return 1 if self.mode == "serial" else self.K

    def sgd_config(self) -> SgdConfig:
        return SgdConfig(self.lr, self.epochs, self.batch_size, self.lr_schedule, self.momentum,
                         tuple(int(m) for m in self.lr_milestones), self.lr_factor)

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.augment, self.augment_sigma, self.augment_offset, self.augment_p,
                             self.augment_ratio, self.seed)

    def parallel_config(self) -> ParallelConfig:
        mode, source = _MODE_SETTINGS[self.mode]
        return ParallelConfig(
            K=self.K, mode=mode, beta=self.beta, beta_gamma=self.beta_gamma, beta_every=self.beta_every,
            psi_kind=self.psi, lambda_lr=self.lambda_lr, lambda_contraction=self.lambda_contraction,
            kappa_lr=self.kappa_lr, noise_sigma=self.noise_sigma, lambda_source=source, workers=self.workers,
            aux_hidden=self.aux_hidden, aux_blocks=self.aux_blocks, aux_lr_scale=self.aux_lr_scale,
            distill_steps=self.distill_steps, reaux_shared_prefix=self.reaux_shared_prefix,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # text form -------------------------------------------------------------
    @classmethod
    def from_text(cls, text: str, env: dict | None = None) -> "RunConfig":
        values: dict = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            try:
                values[key] = _convert(types[key], value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        env = os.environ if env is None else env
        if env.get(ENV_OUTPUT_DIR):
            values["output_dir"] = env[ENV_OUTPUT_DIR]
        if env.get(ENV_THREADS):
            try:
                values["workers"] = int(env[ENV_THREADS])
            except ValueError as exc:
                raise ConfigError(f"{ENV_THREADS} must be an integer") from exc
        return cls(**values)

    @classmethod
    def from_file(cls, path, env: dict | None = None) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), env)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def _convert(type_name: str, value: str):
    optional = "None" in type_name
    if optional and value.lower() == "none":
        return None
    if type_name.startswith("int"):
        if type_name == "int | None" and value.lower() == "inf":
            return None
        return int(value)
    if type_name.startswith("float"):
        return float(value)
    if type_name == "bool":
        low = value.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if type_name == "tuple":
        if value.strip().lower() == "none":
            return ()
        return tuple(s.strip() for s in value.split(",") if s.strip())
    return value


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) if value else "none"
    return str(value)


# metrics ------------------------------------------------------------------------

def _fmt_metric(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


class MetricsWriter:
    """Append-only CSV writer that flushes every record."""

    def __init__(self, path: Path):
        self.path = path
        self._fh = path.open("w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(METRIC_FIELDS)
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([_fmt_metric(row[k]) for k in METRIC_FIELDS])
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> tuple[list[str], list[dict]]:
    """Header and parsed rows of a metrics file; an incomplete trailing line is dropped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty metrics file")
    header = rows[0]
    out = []
    for r in rows[1:]:
        if len(r) != len(header):
            break
        try:
            out.append({k: float(v) for k, v in zip(header, r)})
        except ValueError:
            break
    return header, out


# running ------------------------------------------------------------------------

def build_dataset(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "csv":
        ds = load_csv(cfg.csv_path)
    else:
        ds = gen_dataset(cfg.dataset, cfg.n_samples, cfg.n_classes, cfg.noise, cfg.data_seed)
    return train_test_split(ds, cfg.data_seed)


def build_trainer(cfg: RunConfig, model: ResidualModel, n_train: int):
    if cfg.mode == "serial":
        return SerialTrainer(model, cfg.sgd_config(), cfg.seed, cfg.augment_policy(), n_train)
    return ParallelTrainer(model, cfg.parallel_config(), cfg.sgd_config(), cfg.seed, cfg.augment_policy(),
                           n_train, cfg.hidden)


def _aux_tensors(trainer) -> dict:
    out = {}
    for k, net in enumerate(getattr(trainer, "auxnets", [])):
        for i, a in enumerate(net.arrays()):
            out[f"aux.{k}.{i}"] = a
    rn = getattr(trainer, "reauxnet", None)
    if rn is not None:
        for j, seg in enumerate(rn.segments()):
            for i, a in enumerate(seg.arrays()):
                out[f"reaux.{j}.{i}"] = a
    return out


def run_experiment(cfg: RunConfig, log=None) -> dict:
    """Train according to ``cfg`` and write metrics, summary and optional figures.

    Raises :class:`NumericalDivergence` (after writing a summary with the
    diagnostic) when a loss or activation becomes non-finite.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_text())
    train, test = build_dataset(cfg)
    model = ResidualModel.init(SeededRng(cfg.seed), train.raw_dim, cfg.width, cfg.hidden, train.n_classes,
                               cfg.blocks, cfg.residual_scale)
    trainer = build_trainer(cfg, model, len(train))
    parallel = isinstance(trainer, ParallelTrainer)
    writer = MetricsWriter(out / METRICS_FILE)
    records, phase_a, rows = [], [], []
    status, diagnostic = "completed", None
    t_run = time.perf_counter()
    try:
        for epoch in range(cfg.epochs):
            lr = trainer.lr()
            beta = trainer.pcfg.beta_at(epoch) if parallel else math.nan
            t0 = time.perf_counter()
            try:
                res = trainer.train_epoch(train)
            except StageError as exc:
                if isinstance(exc.__cause__, (FloatingPointError, OverflowError)):
                    raise NumericalDivergence(str(exc), epoch, exc.stage) from exc
                raise
            epoch_time = time.perf_counter() - t0
            train_loss, train_acc = evaluate(model, train)
            test_loss, test_acc = evaluate(model, test)
            if not (math.isfinite(res.loss) and math.isfinite(train_loss)):
                stage = None
                if parallel:
                    bad = [k for k, v in enumerate(res.stage_losses) if not math.isfinite(v)]
                    stage = bad[0] if bad else None
                raise NumericalDivergence(f"non-finite training loss at epoch {epoch}", epoch, stage)
            row = {
                "epoch": epoch, "train_loss": train_loss, "train_accuracy": train_acc,
                "test_loss": test_loss, "test_accuracy": test_acc,
                "violation_mean": getattr(res, "violation_mean", 0.0),
                "violation_max": getattr(res, "violation_max", 0.0),
                "distill_loss": getattr(res, "distill_loss", math.nan),
                "lr": lr, "beta": beta,
                "aux_bytes": trainer.persistent_aux_bytes() if parallel else 0,
                "steps": res.steps, "epoch_time": epoch_time,
            }
            for key in TIMING_FIELDS[:-1]:
                row[key] = res.timings.get(key, 0.0)
            writer.write(row)
            rows.append(row)
            records.append(res.timings)
            phase_a.append(res.timings.get("phase_a", 0.0))
            if log is not None:
                log(f"epoch {epoch}: train_loss={train_loss:.4f} test_acc={test_acc:.4f} "
                    f"violation={row['violation_mean']:.3g}")
    except NumericalDivergence as exc:
        status = "diverged"
        diagnostic = {"message": str(exc), "epoch": exc.epoch, "stage": exc.stage}
        raise
    finally:
        writer.close()
        if parallel:
            trainer.close()
        summary = _summary(cfg, rows, records, phase_a, status, diagnostic, time.perf_counter() - t_run,
                           model, trainer)
        (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    if cfg.checkpoint:
        tensors = model.state_dict("model.")
        tensors.update(_aux_tensors(trainer))
        save_checkpoint(out / "checkpoint.npz", tensors, {"mode": cfg.mode, "epochs": len(rows)})
    if cfg.plot_fields and rows:
        from .plotting import render_curves
        summary["figures"] = [str(p) for p in render_curves(out / METRICS_FILE, cfg.plot_fields, out)]
    return summary


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def _finite_or_none(x):
    return x if isinstance(x, (int, float)) and math.isfinite(x) else None


def _summary(cfg, rows, records, phase_a, status, diagnostic, wall, model, trainer) -> dict:
    K = cfg.effective_K
    summary = {
        "status": status,
        "mode": cfg.mode,
        "K": K,
        "epochs_completed": len(rows),
        "wall_time": wall,
        "n_params": model.n_params(),
        "config": dataclasses.asdict(cfg),
    }
    if diagnostic:
        summary["diagnostic"] = diagnostic
    if not rows:
        return summary
    final = {k: _finite_or_none(v) for k, v in rows[-1].items() if k not in TIMING_FIELDS}
    summary["final"] = final
    summary["final_violation_mean"] = final["violation_mean"]
    summary["final_violation_max"] = final["violation_max"]
    summary["mean_epoch_time"] = float(np.mean([r["epoch_time"] for r in rows]))
    try:
        timings = measure_phases(records, K)
    except (IncompleteMetrics, ValueError):
        return summary
    summary["timings"] = timings.as_dict()
    if K > 1:
        serial_time = _reference_epoch_time(cfg.serial_reference)
        report = speedup_report(timings, K, serial_time, summary["mean_epoch_time"], float(np.mean(phase_a)))
        report["upper_bound"] = _finite_or_none(report["upper_bound"])
        summary["speedup"] = report
    return summary


def _reference_epoch_time(ref: str | None) -> float | None:
    if not ref:
        return None
    path = Path(ref) / SUMMARY_FILE
    if not path.is_file():
        return None
    return json.loads(path.read_text()).get("mean_epoch_time")


# comparison ---------------------------------------------------------------------

def compare_runs(run_dirs) -> list[dict]:
    """Final accuracy, violation and speedups per run, with deltas to the first run."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    loaded = []
    base_header = None
    for d in run_dirs:
        d = Path(d)
        header, rows = read_metrics(d / METRICS_FILE)
        if base_header is None:
            base_header = header
        elif header != base_header:
            raise SchemaError(f"{d / METRICS_FILE}: columns differ from {Path(run_dirs[0]) / METRICS_FILE}")
        if not rows:
            raise SchemaError(f"{d / METRICS_FILE}: no complete epoch records")
        summary_path = d / SUMMARY_FILE
        summary = json.loads(summary_path.read_text()) if summary_path.is_file() else {}
        loaded.append((d, rows, summary))
    base_rows, base_summary = loaded[0][1], loaded[0][2]
    base_time = float(np.mean([r["epoch_time"] for r in base_rows]))
    report = []
    for d, rows, summary in loaded:
        last = rows[-1]
        epoch_time = float(np.mean([r["epoch_time"] for r in rows]))
        speed = summary.get("speedup") or {}
        entry = {
            "run": str(d),
            "mode": summary.get("mode", ""),
            "K": summary.get("K", ""),
            "test_accuracy": last["test_accuracy"],
            "violation_mean": last["violation_mean"],
            "predicted_speedup": speed.get("predicted", math.nan),
            "measured_speedup": base_time / epoch_time if base_summary.get("mode") == "serial" else math.nan,
        }
        entry["delta_accuracy"] = entry["test_accuracy"] - base_rows[-1]["test_accuracy"]
        entry["delta_violation"] = entry["violation_mean"] - base_rows[-1]["violation_mean"]
        report.append(entry)
    return report


COMPARE_COLUMNS = ("run", "mode", "K", "test_accuracy", "delta_accuracy", "violation_mean", "delta_violation",
                   "predicted_speedup", "measured_speedup")


def format_comparison(report: list[dict]) -> str:
    cells = [list(COMPARE_COLUMNS)]
    for e in report:
        cells.append([e[c] if isinstance(e[c], str) else (f"{e[c]:.4g}" if isinstance(e[c], float) else str(e[c]))
                      for c in COMPARE_COLUMNS])
    widths = [max(len(row[i]) for row in cells) for i in range(len(COMPARE_COLUMNS))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells)


def write_comparison(report: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        for e in report:
            w.writerow({c: e[c] for c in COMPARE_COLUMNS})
