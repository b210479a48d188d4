import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from sparse_flops import cli, gaussian
from sparse_flops.io import load_embeddings, load_index, save_embeddings
from sparse_flops.trainer import RunConfig

SMALL_FLAGS = [
    "--num-classes", "40", "--per-class", "10", "--input-dim", "16", "--output-dim", "8",
    "--hidden-dim", "16", "--batch-size", "32", "--steps", "60", "--anneal-T", "30",
    "--eval-interval", "30", "--lr-decay-step", "none",
]  # fmt: skip


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, *args):
    return cli.main(["--out-dir", str(tmp_path), *args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert cli.main(["--out-dir", str(out), "train", "--name", "sparse", "--lambda-max", "0.5", *SMALL_FLAGS]) == 0
    assert cli.main(["--out-dir", str(out), "train", "--name", "dense", "--dense", *SMALL_FLAGS]) == 0
    for name in ("sparse", "dense"):
        rc = cli.main(["--out-dir", str(out), "embed", "--checkpoint", str(out / f"{name}.spfm"), "--out", f"{name}.spfe", *SMALL_FLAGS])
        assert rc == 0
    return out


def test_train_outputs_are_deterministic(trained, tmp_path):
    assert run(tmp_path, "train", "--name", "sparse", "--lambda-max", "0.5", *SMALL_FLAGS) == 0
    assert (tmp_path / "sparse.log.csv").read_bytes() == (trained / "sparse.log.csv").read_bytes()
    assert (tmp_path / "sparse.spfm").read_bytes() == (trained / "sparse.spfm").read_bytes()


def test_config_file_and_overrides(tmp_path):
    cfg = RunConfig(num_classes=40, per_class=10, input_dim=16, output_dim=8, hidden_dim=16, batch_size=32, steps=20, anneal_T=10)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert run(tmp_path, "train", "--config", str(tmp_path / "c.json"), "--steps", "30") == 0
    rows = read_csv(tmp_path / "model.log.csv")
    assert rows[-1]["step"] == "30"


def test_missing_config(tmp_path, capsys):
    assert run(tmp_path, "train", "--config", str(tmp_path / "absent.json")) == 2
    assert "absent.json" in capsys.readouterr().err


@pytest.mark.parametrize(
    "args",
    [
        ["train", "--steps", "many"],
        ["train", "--anneal-T", "5000"],
        ["train", "--regularizer-kind", "L7"],
        ["trajectory", "--init", "1,2"],
        ["nonsense"],
    ],
)
def test_usage_errors(tmp_path, args):
    try:
        rc = run(tmp_path, *args)
    except SystemExit as exc:
        rc = exc.code
    assert rc == 2


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert cli.main(["trajectory", "--regularizer", "L1", "--max-steps", "10", "--record-every", "5"]) == 0
    assert (tmp_path / "trajectory.csv").exists()


def test_index_and_query_toy(tmp_path):
    save_embeddings(tmp_path / "db.spfe", np.array([[0.0, 2.0, 0.0], [1.0, 0.0, 3.0]]))
    save_embeddings(tmp_path / "q.spfe", np.array([[0.0, 1.0, 1.0]]))
    assert run(tmp_path, "index", "--embeddings", str(tmp_path / "db.spfe"), "--out", "db.spfx", "--csv", "post.csv") == 0
    assert [r["column"] for r in read_csv(tmp_path / "post.csv")] == ["0", "1", "2"]
    assert run(tmp_path, "query", "--index", str(tmp_path / "db.spfx"), "--queries", str(tmp_path / "q.spfe")) == 0
    (row,) = read_csv(tmp_path / "results.csv")
    assert row["ids"] == "1 0"
    assert [float(s) for s in row["scores"].split()] == [3.0, 2.0]
    assert row["flops_used"] == "2"


def test_empty_embeddings_index(tmp_path):
    save_embeddings(tmp_path / "e.spfe", np.zeros((0, 5)))
    assert run(tmp_path, "index", "--embeddings", str(tmp_path / "e.spfe"), "--out", "e.spfx") == 0
    index = load_index(tmp_path / "e.spfx")
    assert index.num_rows == 0 and index.nnz == 0 and index.dim == 5


def test_query_defaults():
    args = cli.build_parser().parse_args(["query", "--index", "a", "--queries", "b"])
    assert (args.threshold, args.k) == (0.25, 1000)


def test_rerank_recall(trained, tmp_path):
    ds_y = np.asarray([int(r["label"]) for r in read_csv(_labels(trained))])
    assert run(trained, "index", "--embeddings", str(trained / "sparse.spfe"), "--out", "sparse.spfx") == 0
    common = ["query", "--index", str(trained / "sparse.spfx"), "--queries", str(trained / "sparse.spfe"), "--threshold", "0.0"]
    assert run(tmp_path, *common, "--out", "plain.csv") == 0
    extra = ["--rerank-db", str(trained / "dense.spfe"), "--rerank-queries", str(trained / "dense.spfe"), "--final-k", "2"]
    assert run(tmp_path, *common, *extra, "--out", "rr.csv") == 0

    def recall(path):
        # self-match is always first, so the neighbour is the second id
        hits = [ds_y[int(r["ids"].split()[1])] == ds_y[int(r["query_id"])] for r in read_csv(path)]
        return np.mean(hits)

    assert recall(tmp_path / "rr.csv") >= recall(tmp_path / "plain.csv")


def _labels(out):
    path = out / "labels.csv"
    if not path.exists():
        cli.main(["--out-dir", str(out), "embed", "--checkpoint", str(out / "sparse.spfm"), "--out", "tmp.spfe", "--labels", "labels.csv", *SMALL_FLAGS])
    return path


def test_query_format_errors(trained, tmp_path):
    assert run(tmp_path, "query", "--index", str(trained / "sparse.spfe"), "--queries", str(trained / "sparse.spfe")) == 3
    blob = (trained / "sparse.spfx")
    if not blob.exists():
        run(trained, "index", "--embeddings", str(trained / "sparse.spfe"), "--out", "sparse.spfx")
    (tmp_path / "trunc.spfx").write_bytes(blob.read_bytes()[:-3])
    assert run(tmp_path, "query", "--index", str(tmp_path / "trunc.spfx"), "--queries", str(trained / "sparse.spfe")) == 3
    assert run(tmp_path, "query", "--index", str(tmp_path / "none.spfx"), "--queries", "x") == 3
    save_embeddings(tmp_path / "wide.spfe", np.ones((2, 3)))
    assert run(tmp_path, "query", "--index", str(blob), "--queries", str(tmp_path / "wide.spfe")) == 3


def test_sweep_and_bench(tmp_path):
    rc = run(tmp_path, "train", "--sweep-lambdas", "0,1,3,10", "--sweep-kinds", "FLOPS,L1", "--no-dense", *SMALL_FLAGS)
    assert rc == 0
    assert len(list(tmp_path.glob("*.spfm"))) == 8
    assert len(json.loads((tmp_path / "manifest.json").read_text())["runs"]) == 8
    assert run(tmp_path, "bench", "--manifest", str(tmp_path / "manifest.json"), "--timing-passes", "0") == 0
    assert len(read_csv(tmp_path / "bench.csv")) == 8
    assert (tmp_path / "bench.txt").exists()


def test_bench_missing_checkpoint(tmp_path, capsys):
    doc = {"version": 1, "config": RunConfig().to_dict(), "dense": None,
           "runs": [{"name": "a", "regularizer": "FLOPS", "lambda": 1.0, "checkpoint": "a.spfm", "log": "a.log.csv"}]}  # fmt: skip
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    assert run(tmp_path, "bench", "--manifest", str(tmp_path / "manifest.json")) == 3
    assert "a.spfm" in capsys.readouterr().err


def test_trajectory_columns(tmp_path):
    assert run(tmp_path, "trajectory", "--regularizer", "ALL", "--max-steps", "200", "--record-every", "100") == 0
    ratios = {}
    for reg in ("f", "f_tilde", "l1"):
        rows = read_csv(tmp_path / f"trajectory_{reg}.csv")
        assert list(rows[0]) == ["step", "p1", "p2", "mu1", "mu2", "sigma1", "sigma2", "rate_ratio"]
        assert (float(rows[0]["p1"]), float(rows[0]["p2"])) == (pytest.approx(0.4013, abs=1e-4), pytest.approx(0.0968, abs=1e-4))
        ratios[reg] = float(rows[0]["rate_ratio"])
    assert ratios["l1"] != ratios["f_tilde"]
    assert ratios["f"] > ratios["l1"] and ratios["f_tilde"] > ratios["l1"]


def test_ksfit_synthetic(tmp_path, capsys):
    assert run(tmp_path, "ksfit", "--synthetic=-0.5,1,20000", "--points", "50") == 0
    rows = read_csv(tmp_path / "ksfit.csv")
    assert len(rows) == 50 and list(rows[0]) == ["x", "empirical_cdf", "fitted_cdf"]
    fields = dict(kv.split("=") for kv in capsys.readouterr().out.split())
    assert float(fields["mu"]) == pytest.approx(-0.5, abs=0.1)


def test_ksfit_checkpoint_and_samples(trained, tmp_path):
    assert run(tmp_path, "ksfit", "--checkpoint", str(trained / "sparse.spfm"), "--dim", "0", *SMALL_FLAGS) == 0
    assert len(read_csv(tmp_path / "ksfit.csv")) == 200
    np.savetxt(tmp_path / "s.csv", np.maximum(np.random.default_rng(0).normal(0, 1, 500), 0), delimiter=",")
    assert run(tmp_path, "ksfit", "--samples", str(tmp_path / "s.csv"), "--out", "s_fit.csv") == 0
    assert run(tmp_path, "ksfit", "--synthetic", "0,0,100") == 4
    assert run(tmp_path, "ksfit") == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise gaussian.DomainError("sigma must be > 0")

    monkeypatch.setattr(gaussian, "run_trajectory", boom)
    assert run(tmp_path, "trajectory") == 4


def test_console_script_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "sparse_flops.cli", "--out-dir", str(tmp_path), "trajectory", "--regularizer", "L1", "--max-steps", "5"],
        capture_output=True,
        text=True,
    )
    assert out.returncode == 0, out.stderr
    assert "L1: steps=5" in out.stdout


def test_embed_roundtrip(trained):
    emb = load_embeddings(trained / "sparse.spfe")
    assert emb.shape == (100, 8)
    assert_array_equal(np.linalg.norm(emb, axis=1) > 0.99, True)
