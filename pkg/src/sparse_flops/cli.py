"""Command-line interface: ``sparse-flops <command> ...``.

Exit codes: 0 success, 2 usage or config error, 3 data-format error,
4 numerical failure. Relative output paths resolve against ``--out-dir``,
which defaults to ``$SPARSE_FLOPS_OUT`` or the working directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments, gaussian
from .io import FormatError, load_embeddings, load_index, save_embeddings, save_index, write_csv
from .sparse_core import (
    DEFAULT_K,
    DEFAULT_THRESHOLD,
    DimensionError,
    InvertedIndex,
    SparseVec,
    rerank,
    search,
)
from .trainer import RunConfig, TrainingDiverged, load_model
from .trainer.model import Activation
from .trainer.losses import RegularizerKind

OUT_ENV = "SPARSE_FLOPS_OUT"

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("sparse_flops")


class UsageError(Exception):
    pass


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_ENV) or ".")


def _out_path(args, name) -> Path:
    p = Path(name)
    return p if p.is_absolute() else _out_dir(args) / p


def _parse_floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


# ---------------------------------------------------------------- train


def _config_fields():
    return [f for f in dataclasses.fields(RunConfig)]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("RunConfig overrides")
    for f in _config_fields():
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar=f.name.upper())


def _coerce(field: dataclasses.Field, raw: str):
    default = field.default
    if field.name == "lr_decay_step":
        return None if raw.lower() in ("none", "") else int(raw)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, (RegularizerKind, Activation)):
        return type(default)(raw if isinstance(default, Activation) else raw.upper())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    for f in _config_fields():
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            try:
                data[f.name] = _coerce(f, raw)
            except ValueError as exc:
                raise UsageError(f"--{f.name.replace('_', '-')}: {exc}") from exc
    try:
        return RunConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args)
    if args.match_sparsity:
        lams = _parse_floats(args.match_sparsity)
        path = experiments.run_matched_sweep(cfg, lams, out, with_dense=not args.no_dense)
        print(f"wrote {path}")
    elif args.sweep_lambdas:
        lams = _parse_floats(args.sweep_lambdas)
        kinds = [k.strip().upper() for k in args.sweep_kinds.split(",") if k.strip()]
        try:
            kinds = [RegularizerKind(k) for k in kinds]
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        path = experiments.run_sweep(cfg, lams, kinds, out, with_dense=not args.no_dense, jobs=args.jobs)
        print(f"wrote {path}")
    else:
        if args.dense:
            cfg = experiments.dense_config(cfg)
        res = experiments.train_one(cfg, out, args.name)
        print(f"wrote {res.checkpoint} and {res.log_path} (p_mean={res.p_mean:.4f}, r_sub={res.r_sub:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------- embed / index / query


def cmd_embed(args) -> int:
    model = load_model(args.checkpoint)
    cfg = load_config(args)
    ds = experiments.dataset_for(cfg)
    x = ds.eval_x if args.split == "eval" else ds.train_x
    y = ds.eval_y if args.split == "eval" else ds.train_y
    save_embeddings(_out_path(args, args.out), model.embed(x))
    if args.labels:
        write_csv(_out_path(args, args.labels), ["row", "label"], [(i, int(l)) for i, l in enumerate(y)])
    print(f"wrote {x.shape[0]} embeddings to {_out_path(args, args.out)}")
    return EXIT_OK


def cmd_index(args) -> int:
    emb = load_embeddings(args.embeddings)
    index = InvertedIndex.from_dense(emb.reshape(emb.shape[0], emb.shape[1]), dim=emb.shape[1])
    save_index(_out_path(args, args.out), index)
    if args.csv:
        rows = ((j, r, v) for j in range(index.dim) for r, v in index.posting(j))
        write_csv(_out_path(args, args.csv), ["column", "row", "value"], rows)
    print(f"indexed {index.num_rows} rows x {index.dim} dims, nnz={index.nnz}")
    return EXIT_OK


def cmd_query(args) -> int:
    index = load_index(args.index)
    queries = load_embeddings(args.queries)
    if queries.shape[1] != index.dim:
        raise DimensionError(f"queries have dim {queries.shape[1]}, index has dim {index.dim}")
    dense_db = dense_q = None
    if args.rerank_db or args.rerank_queries:
        if not (args.rerank_db and args.rerank_queries):
            raise UsageError("--rerank-db and --rerank-queries go together")
        dense_db = load_embeddings(args.rerank_db)
        dense_q = load_embeddings(args.rerank_queries)
        if dense_db.shape[0] != index.num_rows or dense_q.shape[0] != queries.shape[0]:
            raise DimensionError("re-ranking embeddings do not match index rows / queries")
        if dense_db.shape[1] != dense_q.shape[1]:
            raise DimensionError("dense database and dense queries differ in dim")
    rows = []
    for qi, q in enumerate(queries):
        t0 = time.perf_counter()
        res = search(index, SparseVec.from_dense(q), args.threshold, args.k)
        cands = res.candidates
        if dense_db is not None:
            cands = rerank([c for c, _ in cands], dense_db, dense_q[qi], args.final_k)
        elapsed = (time.perf_counter() - t0) * 1e6
        rows.append(
            (
                qi,
                " ".join(str(c) for c, _ in cands),
                " ".join(repr(s) for _, s in cands),
                res.flops_used,
                f"{elapsed:.1f}",
            )
        )
    write_csv(_out_path(args, args.out), ["query_id", "ids", "scores", "flops_used", "elapsed_us"], rows)
    print(f"wrote {len(rows)} results to {_out_path(args, args.out)}")
    return EXIT_OK


# ---------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    try:
        result = experiments.run_bench(args.manifest, args.threshold, args.k, args.recall_k, args.timing_passes)
    except FileNotFoundError as exc:
        raise FormatError(str(exc)) from exc
    csv_path = _out_path(args, args.out)
    table = _out_path(args, args.table) if args.table else csv_path.with_suffix(".txt")
    experiments.write_bench(result, csv_path, table)
    print(experiments.tradeoff_table(result.rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------- trajectory / ksfit


def cmd_trajectory(args) -> int:
    init_vals = _parse_floats(args.init, 4)
    init = [gaussian.GaussianDim(init_vals[0], init_vals[2]), gaussian.GaussianDim(init_vals[1], init_vals[3])]
    regs = ["F", "F_TILDE", "L1"] if args.regularizer.upper() == "ALL" else [args.regularizer.upper()]
    for reg in regs:
        try:
            reg = gaussian.PopulationRegularizer(reg)
        except ValueError as exc:
            raise UsageError(f"unknown regularizer {reg!r}") from exc
        st = gaussian.run_trajectory(init, reg, args.lr, args.max_steps, args.stop_prob, args.record_every)
        header = st.header() + ["rate_ratio"]
        rows = [
            (*r, gaussian.rate_ratio(st.mus[i], st.sigmas[i], reg)) for i, r in enumerate(st.to_rows())
        ]
        name = args.out if len(regs) == 1 else f"{Path(args.out).stem}_{reg.name.lower()}.csv"
        write_csv(_out_path(args, name), header, rows)
        p = st.final_probs
        print(
            f"{reg.name}: steps={int(st.steps[-1])} stop={st.stop_reason} "
            f"final p=({', '.join(f'{v:.5f}' for v in p)}) "
            f"step0 rate_ratio={rows[0][-1]:.4f} sigma_clamped={st.sigma_clamped}"
        )
    return EXIT_OK


def _ks_samples(args) -> np.ndarray:
    if args.samples:
        path = Path(args.samples)
        if path.suffix == ".spfe":
            emb = load_embeddings(path)
            return emb[:, args.dim] if args.dim is not None else emb.ravel()
        try:
            return np.loadtxt(path, delimiter=",", ndmin=1).ravel()
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if args.checkpoint:
        model = load_model(args.checkpoint)
        ds = experiments.dataset_for(load_config(args))
        return experiments.ks_samples_from_model(model, ds.eval_x, args.dim)
    if args.synthetic:
        mu, sigma, n = _parse_floats(args.synthetic, 3)
        if sigma <= 0:
            raise gaussian.DomainError("sigma must be > 0")
        rng = np.random.default_rng(args.sample_seed)
        return np.maximum(rng.normal(mu, sigma, int(n)), 0.0)
    raise UsageError("one of --samples, --checkpoint or --synthetic is required")


def cmd_ksfit(args) -> int:
    samples = _ks_samples(args)
    try:
        fit = gaussian.ks_fit(samples)
    except ValueError as exc:
        if isinstance(exc, gaussian.DomainError):
            raise
        raise UsageError(str(exc)) from exc
    x, emp, fitted = gaussian.cdf_table(samples, fit, args.points)
    write_csv(_out_path(args, args.out), ["x", "empirical_cdf", "fitted_cdf"], zip(x.tolist(), emp.tolist(), fitted.tolist()))
    print(f"mu={fit.mu:.6f} sigma={fit.sigma:.6f} ks_distance={fit.ks_distance:.6f} degenerate={fit.degenerate}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse already exits with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparse-flops", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ENV} or .)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model or a lambda sweep")
    p.add_argument("--config", help="JSON file of RunConfig fields")
    p.add_argument("--name", default="model")
    p.add_argument("--dense", action="store_true", help="train the dense (linear, unregularized) baseline")
    p.add_argument("--sweep-lambdas", help="comma-separated lambda grid; writes manifest.json")
    p.add_argument("--sweep-kinds", default="FLOPS,L1")
    p.add_argument("--match-sparsity", metavar="LAMBDAS", help="FLOPS lambdas, each paired with a p-matched L1 run")
    p.add_argument("--no-dense", action="store_true", help="skip the dense baseline in sweeps")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write embeddings of a synthetic split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="JSON config that defines the dataset")
    p.add_argument("--split", choices=["eval", "train"], default="eval")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="also write a row,label CSV")
    _add_config_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("index", help="build an inverted index from an embeddings file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also export postings as CSV")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="sparse nearest-neighbour queries against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("-k", "--k", type=int, default=DEFAULT_K)
    p.add_argument("--rerank-db", help="dense embeddings of the indexed rows")
    p.add_argument("--rerank-queries", help="dense embeddings of the queries")
    p.add_argument("--final-k", type=int, default=10)
    p.add_argument("--out", default="results.csv")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="benchmark a sweep manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("-k", "--k", type=int, default=DEFAULT_K)
    p.add_argument("--recall-k", type=int, default=10)
    p.add_argument("--timing-passes", type=int, default=3)
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--table", help="tradeoff table path (default: CSV path with .txt)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("trajectory", help="population-regularizer descent on ReLU-Gaussian dims")
    p.add_argument("--regularizer", default="ALL", help="F, F_TILDE, L1 or ALL")
    p.add_argument("--init", default="-0.25,-1.3,1,1", help="mu1,mu2,sigma1,sigma2")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--max-steps", type=int, default=1_000_000)
    p.add_argument("--stop-prob", type=float, default=0.01)
    p.add_argument("--record-every", type=int, default=100)
    p.add_argument("--out", default="trajectory.csv")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("ksfit", help="KS fit of a ReLU-Gaussian CDF to activations")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--samples", help="CSV of values or an .spfe embeddings file")
    src.add_argument("--checkpoint", help="fit the pre-normalization activations of a model")
    src.add_argument("--synthetic", metavar="MU,SIGMA,N", help="draw ReLU(N(MU, SIGMA^2)) samples")
    p.add_argument("--dim", type=int, default=None, help="single embedding dimension (default: all)")
    p.add_argument("--sample-seed", type=int, default=0, help="RNG seed for --synthetic")
    p.add_argument("--config", help="JSON config that defines the dataset (with --checkpoint)")
    p.add_argument("--points", type=int, default=200)
    p.add_argument("--out", default="ksfit.csv")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ksfit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DimensionError, experiments.ManifestError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except FileNotFoundError as exc:
        print(f"format error: file not found: {exc.filename or exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (TrainingDiverged, gaussian.DomainError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
