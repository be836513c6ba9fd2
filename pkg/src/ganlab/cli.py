"""Experiment runner: INI configs, single runs, grid sweeps, rendering.

Config files are flat typed key=value INI sections ([run], [data], [prior],
[model], [augment], [train], [optim], [metrics], [sweep]). The [sweep]
section maps TrainConfig field names to comma-separated value lists; a sweep
trains the cartesian product of those lists once per seed.

Outputs per run directory: metrics.csv (fixed schema, see CSV_COLUMNS),
report.txt (recomputable from the CSV), and per-seed checkpoints. Sweeps add
sweep.csv with one row per grid point. Identical config + seeds reproduce
byte-identical CSVs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import itertools
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentationSpec, Step
from .data import DatasetSpec, PriorSpec, load_external, save_icrd
from .gradcheck import run_gradient_suite
from .metrics import MetricsRecord
from .models import NetworkSpec, generator_forward
from .train import (DivergenceError, TrainConfig, load_checkpoint,
                    train_loop)

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = ("step", "seed", "frechet", "mode_coverage",
               "high_quality_fraction", "artifact_fraction", "base_d",
               "base_g", "l_real", "l_fake", "l_dis", "l_gen", "total_d",
               "total_g")

RENDER_SEED = 0
GRID_CAP_DEFAULT = 64

ENV_OUT_DIR = "GANLAB_OUT_DIR"
ENV_WORKERS = "GANLAB_WORKERS"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> List[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _parse_width_list(text: str) -> Tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


# section -> key -> (parser, default)
_SCHEMA = {
    "run": {
        "name": (str, "experiment"),
        "out_dir": (str, "runs"),
        "seeds": (_parse_int_list, [0]),
        "workers": (int, 1),
        "grid_cap": (int, GRID_CAP_DEFAULT),
    },
    "data": {
        "kind": (str, "gaussian_ring"),
        "n_modes": (int, 8),
        "radius": (float, 2.0),
        "mode_std": (float, 0.05),
        "side": (int, 5),
        "spacing": (float, 2.0),
        "height": (int, 16),
        "width": (int, 16),
        "channels": (int, 1),
        "path": (str, ""),
    },
    "prior": {
        "latent_dim": (int, 16),
    },
    "model": {
        "g_hidden": (_parse_width_list, (128, 128)),
        "d_hidden": (_parse_width_list, (128, 128)),
        "activation": (str, "leaky_relu"),
        "leaky_alpha": (float, 0.1),
        "spectral_norm": (_parse_bool, True),
    },
    "augment": {
        "steps": (str, None),
    },
    "train": {
        "loss": (str, "hinge"),
        "regularizer": (str, "none"),
        "lambda_real": (float, 10.0),
        "lambda_fake": (float, 10.0),
        "lambda_dis": (float, 5.0),
        "lambda_gen": (float, 0.5),
        "sigma_noise": (float, 0.03),
        "n_disc": (int, 1),
        "batch_size": (int, 64),
        "total_steps": (int, 20000),
        "eval_interval": (int, 1000),
        "eval_samples": (int, 2048),
        "checkpoint_interval": (int, 0),
    },
    "optim": {
        "lr": (float, 2e-4),
        "beta1": (float, 0.5),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
    },
    "metrics": {
        "capture_radius": (float, 0.0),
        "artifact_patch": (int, 0),
        "artifact_tol": (float, 0.25),
        "feature_dim": (int, 16),
    },
}

# TrainConfig fields a [sweep] section may vary, with their value parsers.
SWEEPABLE = {
    "loss": str,
    "regularizer": str,
    "lambda_real": float,
    "lambda_fake": float,
    "lambda_dis": float,
    "lambda_gen": float,
    "sigma_noise": float,
    "n_disc": int,
    "batch_size": int,
    "total_steps": int,
    "eval_interval": int,
    "eval_samples": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
}


@dataclass
class ExperimentConfig:
    """A TrainConfig template plus run metadata and an optional sweep grid."""

    name: str
    out_dir: Path
    seeds: List[int]
    workers: int
    grid_cap: int
    train: TrainConfig
    grid: Dict[str, List] = field(default_factory=dict)

    def grid_points(self) -> List[Dict[str, object]]:
        if not self.grid:
            return []
        names = list(self.grid)
        points = []
        for combo in itertools.product(*(self.grid[n] for n in names)):
            points.append(dict(zip(names, combo)))
        return points


def _parse_steps(text: str) -> Tuple[Step, ...]:
    steps = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            kind, value = token.split(":")
            steps.append(Step(kind.strip(), float(value)))
        except ValueError as exc:
            raise ConfigError(
                f"augment.steps: bad step {token!r} "
                f"(expected kind:value)") from exc
    return tuple(steps)


def _build_dataset(vals: dict) -> DatasetSpec:
    kind = vals["kind"]
    if kind == "external_file":
        if not vals["path"]:
            raise ConfigError("data.path is required for external_file")
        return load_external(vals["path"])
    try:
        return DatasetSpec(
            kind=kind, n_modes=vals["n_modes"], radius=vals["radius"],
            mode_std=vals["mode_std"], side=vals["side"],
            spacing=vals["spacing"], height=vals["height"],
            width=vals["width"], channels=vals["channels"])
    except ValueError as exc:
        raise ConfigError(f"data: {exc}") from exc


def load_experiment(path) -> ExperimentConfig:
    """Parse and validate an experiment config file."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    for section in parser.sections():
        if section != "sweep" and section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")

    vals: Dict[str, dict] = {}
    for section, schema in _SCHEMA.items():
        vals[section] = {}
        in_file = parser[section] if parser.has_section(section) else {}
        for key in in_file:
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in section "
                                  f"[{section}]")
        for key, (parse, default) in schema.items():
            if key in in_file:
                try:
                    vals[section][key] = parse(in_file[key])
                except (ValueError, TypeError) as exc:
                    raise ConfigError(
                        f"[{section}] {key}: cannot parse "
                        f"{in_file[key]!r}: {exc}") from exc
            else:
                vals[section][key] = default

    dataset = _build_dataset(vals["data"])
    prior = PriorSpec(latent_dim=vals["prior"]["latent_dim"])

    steps_text = vals["augment"]["steps"]
    if steps_text is None:
        steps_text = "flip:0.5,shift:2" if dataset.is_image else "noise:0.05"
    steps = _parse_steps(steps_text)
    if dataset.is_image:
        h, w, c = dataset.geometry()
        augment = AugmentationSpec(steps=steps, height=h, width=w, channels=c)
    else:
        if any(s.kind != "noise" for s in steps):
            raise ConfigError(
                "augment.steps: image steps are invalid for point datasets")
        augment = AugmentationSpec(steps=steps)

    model = vals["model"]
    g_spec = NetworkSpec(
        input_dim=prior.latent_dim, hidden_widths=model["g_hidden"],
        output_dim=dataset.dim, activation=model["activation"],
        output_activation="tanh" if dataset.is_image else "identity",
        spectral_norm=False, leaky_alpha=model["leaky_alpha"])
    d_spec = NetworkSpec(
        input_dim=dataset.dim, hidden_widths=model["d_hidden"],
        output_dim=1, activation=model["activation"],
        output_activation="identity",
        spectral_norm=model["spectral_norm"],
        leaky_alpha=model["leaky_alpha"])

    tr, op, me = vals["train"], vals["optim"], vals["metrics"]
    try:
        train = TrainConfig(
            dataset=dataset, prior=prior, g_spec=g_spec, d_spec=d_spec,
            augment=augment, loss=tr["loss"], regularizer=tr["regularizer"],
            lambda_real=tr["lambda_real"], lambda_fake=tr["lambda_fake"],
            lambda_dis=tr["lambda_dis"], lambda_gen=tr["lambda_gen"],
            sigma_noise=tr["sigma_noise"], n_disc=tr["n_disc"],
            batch_size=tr["batch_size"], total_steps=tr["total_steps"],
            eval_interval=tr["eval_interval"],
            eval_samples=tr["eval_samples"],
            checkpoint_interval=tr["checkpoint_interval"],
            lr=op["lr"], beta1=op["beta1"], beta2=op["beta2"],
            adam_eps=op["eps"], capture_radius=me["capture_radius"],
            artifact_patch=me["artifact_patch"],
            artifact_tol=me["artifact_tol"],
            feature_dim=me["feature_dim"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    grid: Dict[str, List] = {}
    if parser.has_section("sweep"):
        for key in parser["sweep"]:
            if key == "seed":
                raise ConfigError(
                    "sweep over 'seed' is not allowed; use run.seeds")
            if key not in SWEEPABLE:
                raise ConfigError(
                    f"sweep parameter {key!r} is not a sweepable "
                    f"TrainConfig field")
            parse = SWEEPABLE[key]
            try:
                values = [parse(tok.strip())
                          for tok in parser["sweep"][key].split(",")
                          if tok.strip()]
            except ValueError as exc:
                raise ConfigError(f"[sweep] {key}: {exc}") from exc
            if not values:
                raise ConfigError(f"[sweep] {key}: empty value list")
            grid[key] = values

    run = vals["run"]
    out_dir = Path(os.environ.get(ENV_OUT_DIR, run["out_dir"]))
    workers = int(os.environ.get(ENV_WORKERS, run["workers"]))
    if not run["seeds"]:
        raise ConfigError("run.seeds must list at least one seed")
    return ExperimentConfig(
        name=run["name"], out_dir=out_dir, seeds=run["seeds"],
        workers=max(1, workers), grid_cap=run["grid_cap"], train=train,
        grid=grid)


# -- execution ---------------------------------------------------------------

@dataclass
class RunJob:
    index: int
    seed: int
    overrides: Dict[str, object]
    config: TrainConfig
    run_dir: Path


@dataclass
class JobResult:
    index: int
    records: List[MetricsRecord]
    error: Optional[str]


def _execute_job(job: RunJob) -> JobResult:
    try:
        _, records = train_loop(job.config, out_dir=job.run_dir)
        return JobResult(job.index, records, None)
    except DivergenceError as exc:
        (job.run_dir / "FAILED").write_text(
            f"step {exc.snapshot.get('step', '?')}: {exc}\n")
        return JobResult(job.index, exc.snapshot.get("records", []),
                         str(exc))


def _execute_jobs(jobs: Sequence[RunJob], workers: int) -> List[JobResult]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_execute_job, jobs))
    else:
        results = [_execute_job(job) for job in jobs]
    return sorted(results, key=lambda r: r.index)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _record_row(seed: int, rec: MetricsRecord) -> List[str]:
    loss = rec.losses
    return [str(rec.step), str(seed), _fmt(rec.frechet),
            _fmt(rec.mode_coverage), _fmt(rec.high_quality_fraction),
            _fmt(rec.artifact_fraction), _fmt(loss.base_d), _fmt(loss.base_g),
            _fmt(loss.l_real), _fmt(loss.l_fake), _fmt(loss.l_dis),
            _fmt(loss.l_gen), _fmt(loss.total_d), _fmt(loss.total_g)]


def write_metrics_csv(path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)


def read_metrics_csv(path) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {k: float(v) for k, v in raw.items()}
            row["step"] = int(raw["step"])
            row["seed"] = int(raw["seed"])
            rows.append(row)
    return rows


@dataclass
class RunReport:
    """Aggregates recomputed from metrics.csv rows (no hidden state)."""

    final_rows: List[Dict[str, float]]
    medians: Dict[str, float]
    iqr: Dict[str, Tuple[float, float]]

    METRICS = ("frechet", "mode_coverage", "high_quality_fraction",
               "artifact_fraction")

    @classmethod
    def from_rows(cls, rows: List[Dict[str, float]]) -> "RunReport":
        by_seed: Dict[int, Dict[str, float]] = {}
        for row in rows:
            seed = row["seed"]
            if seed not in by_seed or row["step"] > by_seed[seed]["step"]:
                by_seed[seed] = row
        finals = [by_seed[s] for s in sorted(by_seed)]
        medians = {}
        iqr = {}
        for name in cls.METRICS:
            values = np.array([r[name] for r in finals]) if finals else \
                np.array([])
            if values.size:
                medians[name] = float(np.median(values))
                iqr[name] = (float(np.percentile(values, 25)),
                             float(np.percentile(values, 75)))
            else:
                medians[name] = float("nan")
                iqr[name] = (float("nan"), float("nan"))
        return cls(final_rows=finals, medians=medians, iqr=iqr)

    def render(self, title: str) -> str:
        lines = [f"run: {title}", f"csv schema: v{CSV_SCHEMA_VERSION}",
                 f"seeds with rows: {len(self.final_rows)}", ""]
        lines.append("final metrics per seed:")
        for row in self.final_rows:
            lines.append(
                f"  seed {row['seed']} (step {row['step']}): "
                f"frechet={row['frechet']!r} "
                f"mode_coverage={row['mode_coverage']!r} "
                f"high_quality_fraction={row['high_quality_fraction']!r} "
                f"artifact_fraction={row['artifact_fraction']!r}")
        lines.append("")
        lines.append("aggregates over seeds (median, [q25, q75]):")
        for name in self.METRICS:
            q25, q75 = self.iqr[name]
            lines.append(f"  {name}: {self.medians[name]!r} "
                         f"[{q25!r}, {q75!r}]")
        return "\n".join(lines) + "\n"


def _point_label(overrides: Dict[str, object]) -> str:
    if not overrides:
        return "base"
    return "__".join(f"{k}={v}" for k, v in overrides.items())


def _finalize_config(exp: ExperimentConfig, seed: int,
                     overrides: Dict[str, object]) -> TrainConfig:
    try:
        return dataclasses.replace(exp.train, seed=seed, **overrides)
    except ValueError as exc:
        raise ConfigError(f"grid point {overrides}: {exc}") from exc


def run_experiment(exp: ExperimentConfig) -> int:
    """Train every seed of a single configuration; write CSV + report."""
    base = exp.out_dir / exp.name
    base.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i, seed in enumerate(exp.seeds):
        run_dir = base / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        jobs.append(RunJob(i, seed, {}, _finalize_config(exp, seed, {}),
                           run_dir))
    results = _execute_jobs(jobs, exp.workers)

    rows: List[List[str]] = []
    failed = False
    for job, result in zip(jobs, results):
        for rec in result.records:
            rows.append(_record_row(job.seed, rec))
        failed = failed or result.error is not None
    write_metrics_csv(base / "metrics.csv", rows)
    report = RunReport.from_rows(read_metrics_csv(base / "metrics.csv"))
    (base / "report.txt").write_text(report.render(exp.name))
    return EXIT_RUNTIME if failed else EXIT_OK


def sweep_experiment(exp: ExperimentConfig) -> int:
    """Train the cartesian grid once per seed; write per-point outputs plus
    sweep.csv (one summary row per grid point) and a comparison report."""
    points = exp.grid_points()
    if not points:
        raise ConfigError("sweep requires a non-empty [sweep] section")
    if len(points) > exp.grid_cap:
        raise ConfigError(
            f"sweep grid has {len(points)} points, cap is {exp.grid_cap}")

    base = exp.out_dir / exp.name
    base.mkdir(parents=True, exist_ok=True)
    jobs: List[RunJob] = []
    point_dirs: List[Path] = []
    index = 0
    for overrides in points:
        point_dir = base / _point_label(overrides)
        point_dirs.append(point_dir)
        for seed in exp.seeds:
            run_dir = point_dir / f"seed_{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            jobs.append(RunJob(index, seed, overrides,
                               _finalize_config(exp, seed, overrides),
                               run_dir))
            index += 1
    results = _execute_jobs(jobs, exp.workers)
    by_index = {r.index: r for r in results}

    failed = False
    summary_rows: List[List[str]] = []
    grid_names = list(points[0])
    medians_by_point: List[Tuple[str, float]] = []
    job_iter = iter(jobs)
    for overrides, point_dir in zip(points, point_dirs):
        rows: List[List[str]] = []
        for seed in exp.seeds:
            job = next(job_iter)
            result = by_index[job.index]
            for rec in result.records:
                rows.append(_record_row(seed, rec))
            failed = failed or result.error is not None
        write_metrics_csv(point_dir / "metrics.csv", rows)
        parsed = read_metrics_csv(point_dir / "metrics.csv")
        report = RunReport.from_rows(parsed)
        (point_dir / "report.txt").write_text(
            report.render(f"{exp.name}/{_point_label(overrides)}"))
        label = _point_label(overrides)
        medians_by_point.append((label, report.medians["frechet"]))
        summary_rows.append(
            [str(overrides[n]) for n in grid_names]
            + [str(len(report.final_rows)),
               _fmt(report.medians["frechet"]),
               _fmt(report.iqr["frechet"][0]),
               _fmt(report.iqr["frechet"][1]),
               _fmt(report.medians["mode_coverage"]),
               _fmt(report.medians["artifact_fraction"])])

    with open(base / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(grid_names)
                        + ["seeds", "median_frechet", "q25_frechet",
                           "q75_frechet", "median_mode_coverage",
                           "median_artifact_fraction"])
        writer.writerows(summary_rows)

    lines = [f"sweep: {exp.name}", ""]
    lines.append("pairwise median-frechet comparisons (negative = first "
                 "point better):")
    for (la, ma), (lb, mb) in itertools.combinations(medians_by_point, 2):
        lines.append(f"  {la} vs {lb}: {ma - mb!r}")
    (base / "report.txt").write_text("\n".join(lines) + "\n")
    return EXIT_RUNTIME if failed else EXIT_OK


# -- rendering ---------------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; input pixels are in [-1, 1] (-1 -> 0, +1 -> 255)."""
    levels = np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)
    header = f"P5\n{levels.shape[1]} {levels.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(levels.tobytes())


def render_samples(checkpoint_path, n: int, out_path) -> Tuple[Path, Path]:
    """Deterministic sample grid (PGM) plus raw samples (ICRD) from a
    checkpoint. Latents come from the fixed RENDER_SEED stream."""
    if n < 1:
        raise ConfigError("render: n must be >= 1")
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.geometry is None:
        raise ConfigError(
            "render: checkpoint has no image geometry (point dataset)")
    h, w, c = ckpt.geometry
    rng = np.random.default_rng(RENDER_SEED)
    z = rng.standard_normal((n, ckpt.latent_dim))
    samples = generator_forward(ckpt.params_g, z)

    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    canvas = np.full((rows * h, cols * w), -1.0)
    images = samples.reshape(n, h, w, c).mean(axis=3)
    for i in range(n):
        r, col = divmod(i, cols)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = images[i]

    pgm_path = Path(out_path)
    icrd_path = pgm_path.with_suffix(".icrd")
    write_pgm(pgm_path, canvas)
    save_icrd(icrd_path, samples, (h, w, c))
    return pgm_path, icrd_path


def check_grads(n_configs: int, seed: int) -> int:
    results = run_gradient_suite(n_configs=n_configs, seed=seed)
    ok = True
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{status} {result.name}: max relative error "
              f"{result.report.max_rel_error:.3e} "
              f"(tolerance {result.report.tolerance:.0e})")
        ok = ok and result.passed
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ganlab",
        description="Toy GAN training lab with consistency regularization")
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="train one configuration per seed")
    p_run.add_argument("config")
    p_sweep = sub.add_parser("sweep", help="train a [sweep] grid per seed")
    p_sweep.add_argument("config")
    p_render = sub.add_parser("render",
                              help="write a PGM sample grid + ICRD file")
    p_render.add_argument("checkpoint")
    p_render.add_argument("--n", type=int, default=16)
    p_render.add_argument("--out", required=True)
    p_check = sub.add_parser("check-grads",
                             help="finite-difference gradient suite")
    p_check.add_argument("--configs", type=int, default=10)
    p_check.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    try:
        if args.verb == "run":
            return run_experiment(load_experiment(args.config))
        if args.verb == "sweep":
            return sweep_experiment(load_experiment(args.config))
        if args.verb == "render":
            pgm, icrd = render_samples(args.checkpoint, args.n, args.out)
            print(f"wrote {pgm} and {icrd}")
            return EXIT_OK
        return check_grads(args.configs, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
