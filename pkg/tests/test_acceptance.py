"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.
"""

import time

import mpmath
import numpy as np
import pytest

import gradsuite
from oracles import fd_gauss, filter_sort_topk
from sparse_flops import gaussian, metrics
from sparse_flops.experiments import dataset_for, load_model, read_manifest, run_bench, run_matched_sweep
from sparse_flops.sparse_core import InvertedIndex, SparseVec, search, spmv_query
from sparse_flops.trainer import RunConfig

RESULTS: dict[int, str] = {}


def report(num: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
    RESULTS[num] = line
    print(line)
    assert ok, line


# 1. retrieval exactness


def _random_db(rng, n, d, p, dyadic):
    mask = rng.random((n, d)) < p
    if dyadic:
        # quarter-integers: every dot product is exact, so ties are real ties
        vals = rng.integers(-8, 9, (n, d)) / 4.0
    else:
        vals = rng.normal(size=(n, d))
    return np.where(mask, vals, 0.0)


def test_retrieval_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, mismatched, ties = 0.0, 0, 0
    for case in range(1000):
        n, d = int(rng.integers(1, 5001)), int(rng.integers(1, 513))
        p = float(rng.choice([0.01, 0.05, 0.2]))
        dyadic = case % 3 == 0
        db = _random_db(rng, n, d, p, dyadic)
        q = _random_db(rng, 1, d, p, dyadic)[0]
        threshold = float(rng.choice([-np.inf, 0.0, 0.25]))
        k = int(rng.choice([1, 10, 100, 1000]))

        index = InvertedIndex.from_dense(db, dim=d)
        scores, flops = spmv_query(index, SparseVec.from_dense(q))
        dense = db @ q
        worst = max(worst, float(np.max(np.abs(scores - dense), initial=0.0)))
        got = search(index, SparseVec.from_dense(q), threshold, k).candidates
        want = filter_sort_topk(dense, threshold, k)
        mismatched += [i for i, _ in got] != [i for i, _ in want]
        ties += len({s for _, s in want}) < len(want)
        assert flops == int(((db != 0).astype(np.int64) @ (q != 0)).sum())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and mismatched == 0 and elapsed < 120
    report(1, ok, f"max |sparse - dense| = {worst:.2e}, top-k mismatches = {mismatched}/1000 "
                  f"({ties} cases with tied scores), {elapsed:.1f}s")  # fmt: skip


# 2. FLOPs law with per-column Bernoulli sparsity


def test_flops_law_bernoulli_columns():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    n, d = 10_000, 128
    p = rng.uniform(0.01, 0.4, d)
    db = np.where(rng.random((n, d)) < p, rng.normal(size=(n, d)), 0.0)
    queries = np.where(rng.random((1000, d)) < p, rng.normal(size=(1000, d)), 0.0)
    index = InvertedIndex.from_dense(db)
    flops = np.array([spmv_query(index, SparseVec.from_dense(u))[1] for u in queries])
    predicted = n * np.sum(p**2)
    rel = abs(flops.mean() - predicted) / predicted
    elapsed = time.perf_counter() - t0
    report(2, rel < 0.05 and elapsed < 60,
           f"mean FLOPs/query {flops.mean():.0f} vs n*sum(p^2) {predicted:.0f} (rel {rel:.2%}), {elapsed:.1f}s")  # fmt: skip


# 3. uniform-optimum speedup


def test_uniform_speedup():
    rng = np.random.default_rng(303)
    n, d, p = 10_000, 1024, 0.05
    db = np.where(rng.random((n, d)) < p, rng.random((n, d)) + 0.01, 0.0)
    queries = np.where(rng.random((1000, d)) < p, rng.random((1000, d)) + 0.01, 0.0)
    index = InvertedIndex.from_dense(db)
    flops = np.array([spmv_query(index, SparseVec.from_dense(u))[1] for u in queries])
    per_row = flops.mean() / n
    rel = abs(per_row - d * p**2) / (d * p**2)
    report(3, rel < 0.05, f"FLOPs/row {per_row:.4f} vs d*p^2 {d * p**2:.4f} (rel {rel:.2%}), "
                          f"reduction vs dense {d / per_row:.0f}x (ideal {1 / p**2:.0f}x)")  # fmt: skip


# 4. ReLU-Gaussian closed forms

MUS = np.linspace(-3.0, 1.0, 9)
SIGMAS = np.linspace(0.2, 3.0, 8)


def _second_moment(mu, sigma):
    with mpmath.workdps(50):
        mu, sigma = mpmath.mpf(mu), mpmath.mpf(sigma)
        z = mu / sigma
        return (mu**2 + sigma**2) * mpmath.ncdf(z) + mu * sigma * mpmath.npdf(z)


def test_gaussian_closed_forms():
    t0 = time.perf_counter()
    N = 10_000_000
    x = np.random.default_rng(404).standard_normal(N)
    worst_z = 0.0
    for mu in MUS[::2]:
        for sigma in SIGMAS[::2]:
            y = np.maximum(mu + sigma * x, 0.0)
            mean_mc, prob_mc = y.mean(), np.count_nonzero(y) / N
            mean, prob = gaussian.relu_gauss_mean(mu, sigma), gaussian.relu_gauss_prob(mu, sigma)
            # standard errors from the exact variances, so empty tails are judged fairly
            se_mean = float(mpmath.sqrt(max(_second_moment(mu, sigma) - mean**2, 0) / N))
            se_prob = np.sqrt(prob * (1 - prob) / N)
            for est, exact, se in ((mean_mc, mean, se_mean), (prob_mc, prob, se_prob)):
                z = abs(est - exact) / se if se > 0 else (0.0 if est == exact else np.inf)
                worst_z = max(worst_z, z)

    grads = {"prob": gaussian.grad_prob, "mean": gaussian.grad_mean,
             "prob_sq": gaussian.grad_prob_sq, "mean_sq": gaussian.grad_mean_sq}  # fmt: skip
    worst_rel = 0.0
    for name, grad in grads.items():
        for mu in MUS:
            for sigma in SIGMAS:
                for a, b in zip(grad(mu, sigma), fd_gauss(name, mu, sigma)):
                    if abs(b) > 1e-9:  # d/dsigma of P vanishes at mu = 0
                        worst_rel = max(worst_rel, abs(a - b) / abs(b))
    elapsed = time.perf_counter() - t0
    ok = worst_z <= 3 and worst_rel < 1e-6 and elapsed < 60
    report(4, ok, f"Monte Carlo worst deviation {worst_z:.2f} sigma over {len(MUS[::2]) * len(SIGMAS[::2])} points, "
                  f"gradient worst rel err {worst_rel:.2e} over {MUS.size * SIGMAS.size} points, {elapsed:.1f}s")  # fmt: skip


# 5. population trajectories


def test_trajectories():
    mu, sigma = np.array([-0.25, -1.3]), np.ones(2)
    p0 = gaussian.relu_gauss_prob(mu, sigma)
    init_ok = abs(p0[0] - 0.401) <= 1e-3 and abs(p0[1] - 0.097) <= 1e-3
    ratios = {r: gaussian.rate_ratio(mu, sigma, r) for r in ("F", "F_TILDE", "L1")}
    rate_ok = ratios["F"] > ratios["L1"] and ratios["F_TILDE"] > ratios["L1"]
    finals, steps = {}, {}
    for r in ratios:
        st = gaussian.run_trajectory(regularizer=r, record_every=10_000)
        finals[r], steps[r] = st.final_probs, int(st.steps[-1])
    conv_ok = all(np.all(f < 0.01) for f in finals.values())
    detail = (f"p0=({p0[0]:.4f}, {p0[1]:.4f}); step-0 rate ratio F {ratios['F']:.3f}, "
              f"F_tilde {ratios['F_TILDE']:.3f}, L1 {ratios['L1']:.3f}; final max p "
              + ", ".join(f"{r} {finals[r].max():.5f} @ {steps[r]} steps" for r in finals))  # fmt: skip
    report(5, init_ok and rate_ok and conv_ok, detail)


# 6. regularizer identities


def test_regularizer_identities():
    rng = np.random.default_rng(606)
    worst_pair = worst_lasso = 0.0
    for _ in range(100):
        n, d = int(rng.integers(2, 65)), int(rng.integers(1, 65))
        b = rng.normal(size=(n, d)) * (rng.random((n, d)) < rng.uniform(0.1, 1.0))
        norms = np.linalg.norm(b, axis=1, keepdims=True)
        b = np.where(norms > 0, b / np.where(norms > 0, norms, 1), 0.0)
        f = float(np.sum(np.abs(b).mean(axis=0) ** 2))  # sum_j abar_j^2, written out
        worst_pair = max(worst_pair, abs(metrics.relaxed_flops_pairwise(b) - f) / f)
        lasso = metrics.exclusive_lasso(b, metrics.column_groups(n, d))
        worst_lasso = max(worst_lasso, abs(lasso - n * n * f) / (n * n * f))
    report(6, worst_pair <= 1e-9 and worst_lasso <= 1e-9,
           f"pairwise form worst rel err {worst_pair:.1e}, exclusive lasso worst rel err {worst_lasso:.1e}")  # fmt: skip


# 7 and 8 share one matched sweep on the standard benchmark


@pytest.fixture(scope="module")
def matched_sweep(tmp_path_factory):
    t0 = time.perf_counter()
    path = run_matched_sweep(RunConfig(), [0.15, 0.3, 0.45, 0.6], tmp_path_factory.mktemp("matched"))
    return path, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bench_rows(matched_sweep):
    path, _ = matched_sweep
    return {t: run_bench(path, threshold=t, timing_passes=0) for t in (0.25, 0.1, 0.0)}


def test_training_sparsity_distribution(matched_sweep, bench_rows):
    path, elapsed = matched_sweep
    runs = read_manifest(path)["runs"]
    rows = {r.name: r for r in bench_rows[0.25].rows}
    pairs = {}
    for entry in runs:
        pairs.setdefault(entry["pair"], {})[entry["regularizer"]] = rows[entry["name"]]
    wins, matched, lines = 0, 0, []
    for k in sorted(pairs):
        f, l = pairs[k]["FLOPS"], pairs[k]["L1"]
        matched += abs(f.p_mean - l.p_mean) <= 0.1 * f.p_mean
        wins += f.r_sub <= l.r_sub
        lines.append(f"p {f.p_mean:.3f}/{l.p_mean:.3f} r_sub {f.r_sub:.3f}/{l.r_sub:.3f}")
    floor_ok = all(r.r_sub >= 1 for r in rows.values() if r.regularizer != "DENSE")
    ok = matched == len(pairs) and wins >= 3 and floor_ok and elapsed < 900
    report(7, ok, f"FLOPS r_sub <= L1 r_sub in {wins}/{len(pairs)} pairs, {matched} matched within 10%, "
                  f"all r_sub >= 1: {floor_ok}, sweep {elapsed:.0f}s [FLOPS/L1: " + "; ".join(lines) + "]")  # fmt: skip


def test_rerank_benefit(matched_sweep, bench_rows):
    path, _ = matched_sweep
    base = RunConfig.from_dict(read_manifest(path)["config"])
    ds = dataset_for(base)

    never_worse = all(
        r.recall_at_1 >= r.recall_at_1_sparse for res in bench_rows.values() for r in res.rows if r.regularizer != "DENSE"
    )
    dense_r1 = bench_rows[0.25].dense.recall_at_1
    sparse_runs = [r for r in bench_rows[0.25].rows if r.regularizer != "DENSE" and r.p_mean <= 0.1]
    gaps = {r.name: dense_r1 - r.recall_at_1 for r in sparse_runs}
    close = bool(gaps) and all(g <= 0.02 for g in gaps.values())

    # how the gap moves with the shortlist threshold, with the mean shortlist size
    sens = []
    for t, res in bench_rows.items():
        for r in res.rows:
            if r.name in gaps:
                z = load_model(path.parent / f"{r.name}.spfm").embed(ds.eval_x)
                index = InvertedIndex.from_dense(z)
                size = np.mean([len(search(index, SparseVec.from_dense(q), t, r.rerank_k, exclude=i).candidates)
                                for i, q in enumerate(z)])  # fmt: skip
                sens.append(f"t={t}: {r.name} R@1 {r.recall_at_1:.3f} shortlist {size:.0f}/{z.shape[0]}")
    detail = (f"rerank >= sparse-only on all {sum(len(x.rows) - 1 for x in bench_rows.values())} configurations: "
              f"{never_worse}; dense R@1 {dense_r1:.3f}; at threshold 0.25, k=1000 gaps "
              + ", ".join(f"{n} {g * 100:.1f}pp" for n, g in gaps.items())
              + " [sensitivity: " + "; ".join(sens) + "]")  # fmt: skip
    report(8, never_worse and close, detail)


# 9. gradient suite


def test_gradient_suite():
    worst = gradsuite.run_suite(points=100, seed=909)
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    report(9, not bad, f"worst rel err {max(worst.values()):.1e} over {len(worst)} gradients x 100 points"
                       + (f"; failing: {bad}" if bad else ""))  # fmt: skip


# 10. KS-fit recovery


def test_ks_fit_recovery():
    x = np.maximum(np.random.default_rng(1010).normal(-0.5, 1.0, 100_000), 0.0)
    fit = gaussian.ks_fit(x)
    ok = abs(fit.mu + 0.5) <= 0.05 and abs(fit.sigma - 1.0) <= 0.05 and fit.ks_distance < 0.01
    report(10, ok, f"recovered mu {fit.mu:.4f} (true -0.5), sigma {fit.sigma:.4f} (true 1.0), KS {fit.ks_distance:.4f}")
