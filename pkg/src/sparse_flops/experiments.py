"""Orchestration: training sweeps, sparsity-matched calibration and benchmarking.

A sweep directory holds one ``<name>.spfm`` checkpoint and one
``<name>.log.csv`` training log per run, plus ``manifest.json``::

    {
      "version": 1,
      "config": {...base RunConfig...},
      "dense": {"name": ..., "checkpoint": "dense.spfm", "log": ...} | null,
      "runs": [{"name", "regularizer", "lambda", "checkpoint", "log", "p_mean"}, ...]
    }

Paths inside the manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bench
from .io import atomic_write_text, write_csv
from .sparse_core import DEFAULT_K, DEFAULT_THRESHOLD
from .trainer import LOG_COLUMNS, RunConfig, generate_synthetic, load_model, save_model, train
from .trainer.model import Activation
from .trainer.losses import RegularizerKind

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


def dataset_for(config: RunConfig):
    return generate_synthetic(config.num_classes, config.per_class, config.input_dim, config.noise, config.data_seed)


def dense_config(config: RunConfig) -> RunConfig:
    """The unregularized, linear-output baseline used for exhaustive search and re-ranking."""
    return config.replace(regularizer_kind=RegularizerKind.NONE, lambda_max=0.0, output_activation=Activation.LINEAR)


def run_name(kind, lam: float) -> str:
    return f"{RegularizerKind(kind).value.lower()}_lam{lam:g}"


@dataclass
class RunResult:
    name: str
    config: RunConfig
    checkpoint: Path | None
    log_path: Path | None
    p_mean: float
    r_sub: float


def train_one(config: RunConfig, out_dir=None, name: str = "model", dataset=None) -> RunResult:
    """Train one model and, with ``out_dir``, write its checkpoint and log CSV."""
    dataset = dataset_for(config) if dataset is None else dataset
    model, tlog = train(config, dataset)
    last = tlog.last
    ckpt = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = out_dir / f"{name}.spfm"
        log_path = out_dir / f"{name}.log.csv"
        save_model(ckpt, model)
        write_csv(log_path, LOG_COLUMNS, tlog.rows)
    return RunResult(name, config, ckpt, log_path, float(last["p_mean"]), float(last["r_sub"]))


def _train_job(args):
    cfg_dict, out_dir, name = args
    return train_one(RunConfig.from_dict(cfg_dict), out_dir, name)


def calibrate_lambda(
    config: RunConfig,
    target_p: float,
    lam0: float,
    tol: float = 0.05,
    max_iter: int = 10,
    dataset=None,
) -> tuple[float, RunResult]:
    """Search ``lambda_max`` (log-scale bisection) until eval ``p_mean`` is within ``tol`` of ``target_p``.

    Assumes ``p_mean`` decreases with ``lambda``. Returns the closest run
    found if the tolerance is not met within ``max_iter`` trainings.
    """
    dataset = dataset_for(config) if dataset is None else dataset
    lo = hi = None
    lam = lam0
    best = None
    for _ in range(max_iter):
        res = train_one(config.replace(lambda_max=lam), dataset=dataset)
        err = abs(res.p_mean - target_p) / target_p
        if best is None or err < best[0]:
            best = (err, lam, res)
        log.info("calibrate %s lambda=%g p=%.4f target=%.4f", config.regularizer_kind.value, lam, res.p_mean, target_p)
        if err <= tol:
            break
        if res.p_mean > target_p:
            lo = lam
        else:
            hi = lam
        if lo is not None and hi is not None:
            lam = math.sqrt(lo * hi)
        elif lo is not None:
            lam = lo * 2.0
        else:
            lam = hi / 2.0
    return best[1], best[2]


def write_manifest(path, base: RunConfig, runs: list[dict], dense: dict | None) -> None:
    doc = {"version": MANIFEST_VERSION, "config": base.to_dict(), "dense": dense, "runs": runs}
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _entry(res: RunResult, kind, lam, root: Path) -> dict:
    return {
        "name": res.name,
        "regularizer": RegularizerKind(kind).value,
        "lambda": lam,
        "checkpoint": str(res.checkpoint.relative_to(root)),
        "log": str(res.log_path.relative_to(root)),
        "p_mean": res.p_mean,
        "r_sub": res.r_sub,
    }


def run_sweep(
    base: RunConfig,
    lambdas,
    kinds=("FLOPS", "L1"),
    out_dir=".",
    with_dense: bool = True,
    jobs: int = 1,
) -> Path:
    """Train every ``(kind, lambda)`` combination plus the dense baseline; returns the manifest path.

    ``jobs > 1`` trains independent runs in worker processes; outputs are
    identical to the serial run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = [(RegularizerKind(k), float(l)) for k in kinds for l in lambdas]
    tasks = [(base.replace(regularizer_kind=k, lambda_max=l).to_dict(), out_dir, run_name(k, l)) for k, l in plan]
    if with_dense:
        tasks.append((dense_config(base).to_dict(), out_dir, "dense"))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_train_job, tasks))
    else:
        results = [_train_job(t) for t in tasks]
    runs = [_entry(r, k, l, out_dir) for r, (k, l) in zip(results, plan)]
    dense = None
    if with_dense:
        d = results[-1]
        dense = {"name": d.name, "checkpoint": str(d.checkpoint.relative_to(out_dir)), "log": str(d.log_path.relative_to(out_dir))}
    path = out_dir / "manifest.json"
    write_manifest(path, base, runs, dense)
    return path


def run_matched_sweep(
    base: RunConfig,
    flops_lambdas,
    out_dir=".",
    l1_guess_ratio: float = 0.1,
    tol: float = 0.05,
    max_iter: int = 10,
    with_dense: bool = True,
) -> Path:
    """FLOPS runs at ``flops_lambdas``, each paired with an L1 run calibrated to the same eval ``p_mean``.

    The L1 search for each pair starts from the lambda ratio of the previous
    pair (``l1_guess_ratio`` for the first).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_for(base)
    runs = []
    ratio = l1_guess_ratio
    for lam in flops_lambdas:
        cfg_f = base.replace(regularizer_kind=RegularizerKind.FLOPS, lambda_max=float(lam))
        rf = train_one(cfg_f, out_dir, run_name("FLOPS", lam), dataset)
        cfg_l = base.replace(regularizer_kind=RegularizerKind.L1)
        lam_l, _ = calibrate_lambda(cfg_l, rf.p_mean, lam * ratio, tol, max_iter, dataset)
        rl = train_one(cfg_l.replace(lambda_max=lam_l), out_dir, run_name("L1", lam_l), dataset)
        ratio = lam_l / lam if lam > 0 else ratio
        runs.append(_entry(rf, "FLOPS", float(lam), out_dir) | {"pair": len(runs) // 2})
        runs.append(_entry(rl, "L1", float(lam_l), out_dir) | {"pair": len(runs) // 2})
    dense = None
    if with_dense:
        d = train_one(dense_config(base), out_dir, "dense", dataset)
        dense = {"name": d.name, "checkpoint": str(d.checkpoint.relative_to(out_dir)), "log": str(d.log_path.relative_to(out_dir))}
    path = out_dir / "manifest.json"
    write_manifest(path, base, runs, dense)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("version") != MANIFEST_VERSION or "runs" not in doc or "config" not in doc:
        raise ManifestError(f"{path}: not a sweep manifest")
    root = path.parent
    for entry in doc["runs"] + ([doc["dense"]] if doc.get("dense") else []):
        ckpt = root / entry["checkpoint"]
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint for run {entry['name']!r} not found: {ckpt}")
    return doc


@dataclass
class BenchResult:
    rows: list[bench.BenchRow]
    dense: bench.BenchRow | None


def run_bench(
    manifest_path,
    threshold: float = DEFAULT_THRESHOLD,
    k: int = DEFAULT_K,
    recall_k: int = 10,
    timing_passes: int = 3,
) -> BenchResult:
    """Benchmark every run of a manifest on the unseen-class split."""
    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    root = manifest_path.parent
    base = RunConfig.from_dict(doc["config"])
    ds = dataset_for(base)
    dense_emb = dense_row = None
    if doc.get("dense"):
        dense_emb = load_model(root / doc["dense"]["checkpoint"]).embed(ds.eval_x)
        dense_row = bench.bench_dense(doc["dense"]["name"], dense_emb, ds.eval_y, recall_k, timing_passes)
    rows = []
    for entry in doc["runs"]:
        z = load_model(root / entry["checkpoint"]).embed(ds.eval_x)
        rows.append(
            bench.bench_sparse(
                entry["name"],
                entry["regularizer"],
                entry["lambda"],
                z,
                ds.eval_y,
                dense_emb,
                d_dense=None if dense_emb is None else dense_emb.shape[1],
                threshold=threshold,
                k=k,
                recall_k=recall_k,
                timing_passes=timing_passes,
            )
        )
    all_rows = rows + ([dense_row] if dense_row else [])
    return BenchResult(bench.order_rows(all_rows), dense_row)


def tradeoff_table(rows: list[bench.BenchRow]) -> str:
    """Fixed-width text table of the FLOPs / recall tradeoff."""
    head = f"{'name':<22}{'reg':<7}{'p_mean':>8}{'r_sub':>8}{'flops/row':>11}{'speedup':>9}{'R@1':>7}{'R@1 sp':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.name:<22}{r.regularizer:<7}{r.p_mean:>8.4f}{r.r_sub:>8.3f}{r.flops_per_row:>11.3f}"
            f"{r.flops_speedup:>9.1f}{r.recall_at_1:>7.3f}{r.recall_at_1_sparse:>8.3f}"
        )
    return "\n".join(lines) + "\n"


def write_bench(result: BenchResult, csv_path, table_path=None) -> None:
    write_csv(csv_path, bench.BENCH_COLUMNS, [r.as_tuple() for r in result.rows])
    if table_path is not None:
        atomic_write_text(table_path, tradeoff_table(result.rows))


def ks_samples_from_model(model, x, dim: int | None = None) -> np.ndarray:
    """Activations of one output dimension (or all, flattened) before normalization."""
    _, cache = model.forward(x)
    act = cache.post[-1]
    return act.ravel() if dim is None else act[:, dim]
