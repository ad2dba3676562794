"""Acceptance gate: the nine primary criteria, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v -s``; each criterion prints a
single ``[ACCEPTANCE] criterion N ... PASS|FAIL`` line in addition to the
usual pytest verdict.  Criteria 1-2 share one 100-replicate benchmark run at
the planted-design scale and dominate the runtime.
"""

import itertools
import json
import warnings

import numpy as np
import pytest
from scipy.stats import rankdata

from corgroup import elastic_net as enet
from corgroup import pipeline, simbench
from corgroup.cli import dispatch
from corgroup.data_model import ExpressionMatrix, correlation_matrix, standardize
from corgroup.hcluster import build_dendrogram, make_rule, representatives_std
from corgroup.precluster import PartitionSet, cluster_genes, derive_seed
from corgroup.simbench import BlockSpec, SyntheticDesign


_CAPMAN = []


@pytest.fixture(scope="session", autouse=True)
def _capture_manager(pytestconfig):
    _CAPMAN.append(pytestconfig.pluginmanager.getplugin("capturemanager"))
    yield
    _CAPMAN.clear()


def _verdict(num, description, ok):
    line = (f"\n[ACCEPTANCE] criterion {num} ({description}): "
            f"{'PASS' if ok else 'FAIL'}")
    # Emit past pytest's output capture so the verdict always reaches the
    # terminal (and piped logs), not only failure reports.
    if _CAPMAN and _CAPMAN[0] is not None:
        with _CAPMAN[0].global_and_fixture_disabled():
            print(line)
    else:
        print(line)
    assert ok, f"criterion {num} ({description}) failed"


# --------------------------------------------------------------------------
# Criteria 1-2: planted-design benchmark, grouped vs ungrouped directions.
# --------------------------------------------------------------------------

N_CELLS = 300
N_GENES = 1200
N_BLOCKS = 8
BLOCK_SIZE = 15
RHO = 0.95
N_CAUSAL_BLOCKS = 4
CAUSAL_GENES_PER_BLOCK = None  # equal-weight truth across each causal block
EFFECT = 3.0
JITTER_SD = 0.1
REPS = 100
BENCH_ALPHA = 1.0
BENCH_SEED = 0


@pytest.fixture(scope="module")
def benchmark():
    blocks = tuple(
        BlockSpec(size=BLOCK_SIZE, rho=RHO, signs="alternating",
                  causal=(b < N_CAUSAL_BLOCKS), effect=EFFECT,
                  causal_genes=CAUSAL_GENES_PER_BLOCK if b < N_CAUSAL_BLOCKS
                  else None)
        for b in range(N_BLOCKS)
    )
    design = SyntheticDesign(n_cells=N_CELLS, n_genes=N_GENES, blocks=blocks,
                             seed=2024)
    x = simbench.synth_expression(design)
    blueprint = simbench.blueprint_from_design(design)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = simbench.run_benchmark(
            x, blueprint, reps=REPS, sd_fraction=JITTER_SD, seed=BENCH_SEED,
            folds=10, alpha=BENCH_ALPHA, tol=1e-4,
        )
    return result


def test_criterion_1_mse_direction(benchmark):
    d = benchmark.differences("mse")
    ok = (np.median(d) < 0) and (benchmark.pvalues["mse"] < 0.01)
    _verdict(1, f"paired MSE: median {np.median(d):+.5f}, "
                f"Wilcoxon p {benchmark.pvalues['mse']:.2e}", ok)


def test_criterion_2_selection_directions(benchmark):
    df1 = benchmark.differences("f1")
    drec = benchmark.differences("recall")
    dprec = benchmark.differences("precision")
    ok = (
        np.median(df1) > 0 and benchmark.pvalues["f1"] < 0.01
        and np.median(drec) > 0 and benchmark.pvalues["recall"] < 0.01
        and np.median(dprec) >= 0 and benchmark.pvalues["precision"] < 0.05
    )
    _verdict(2, f"F1 med {np.median(df1):+.3f} p {benchmark.pvalues['f1']:.1e}; "
                f"recall med {np.median(drec):+.3f} "
                f"p {benchmark.pvalues['recall']:.1e}; "
                f"precision med {np.median(dprec):+.3f} "
                f"p {benchmark.pvalues['precision']:.1e}", ok)


# --------------------------------------------------------------------------
# Criterion 3: degeneracy equivalence on 20 random instances.
# --------------------------------------------------------------------------

def _random_instance(seed, n=90, n_blocks=2, block=4, extra=5):
    rng = np.random.default_rng(seed)
    cols = []
    eta = np.zeros(n)
    for b in range(n_blocks):
        f = rng.standard_normal(n)
        for i in range(block):
            g = np.sqrt(0.9) * f + np.sqrt(0.1) * rng.standard_normal(n)
            if i % 2 == 1:
                g = -g
            cols.append(g)
        eta += 1.0 * f
    for _ in range(extra):
        cols.append(rng.standard_normal(n))
    values = np.column_stack(cols)
    p = values.shape[1]
    x = ExpressionMatrix(values, gene_ids=tuple(f"g{i:03d}" for i in range(p)),
                         cell_ids=tuple(f"c{i:03d}" for i in range(n)))
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    if y.sum() in (0, n):
        y[0] = 1.0 - y[0]
    return x, y


def test_criterion_3_degeneracy_bit_identity():
    failures = []
    for seed in range(20):
        x, y = _random_instance(seed)
        structure = pipeline.build_structure(x, seed=seed)
        heights = np.concatenate([d.heights for d in structure.dendrograms
                                  if d.heights.size])
        c = float(heights.min()) / 2.0 if heights.size else 1e-12
        grouped = pipeline.fit_final(x, y, c, seed=seed, inner_folds=4,
                                     path_length=10, structure=structure)
        f_u, std = pipeline.fit_ungrouped(x, y, seed=seed, inner_folds=4,
                                          path_length=10, std=structure.std)
        q_g = pipeline.predict(grouped, x)
        q_u = enet.predict_prob(f_u, std.values)
        flags_g = pipeline.expand_selection(grouped, gene_ids=x.gene_ids)
        flags_u = np.zeros(x.n_genes, dtype=bool)
        flags_u[np.array(std.retained, dtype=int)] = f_u.coefficients != 0.0
        if not (np.array_equal(q_g, q_u)
                and np.array_equal(flags_g, flags_u)):
            failures.append(seed)
    _verdict(3, f"degeneracy bit-identity on 20 instances "
                f"(failing seeds: {failures or 'none'})", not failures)


# --------------------------------------------------------------------------
# Criterion 4: dendrogram oracle + planted K-Means recovery.
# --------------------------------------------------------------------------

def _naive_average_linkage(d0):
    """O(p^3) oracle: heights recomputed from explicit leaf sets."""
    m = d0.shape[0]
    clusters = [[i] for i in range(m)]
    merges = []
    for _ in range(m - 1):
        best = (np.inf, None, None)
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                h = np.mean([d0[i, j] for i in clusters[a] for j in clusters[b]])
                if h < best[0] - 1e-15:
                    best = (h, a, b)
        h, a, b = best
        merges.append((frozenset(clusters[a]), frozenset(clusters[b]), h))
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return merges


def _partitions_by_level(merge_heights, merge_leafsets, tol=1e-8):
    """Partition (set of frozensets) after each distinct height level."""
    order = np.argsort(merge_heights, kind="stable")
    out = []
    active = {}
    singletons = set()
    for fs_pair in merge_leafsets:
        singletons |= fs_pair[0] | fs_pair[1]
    parts = {frozenset([i]) for i in singletons}
    i = 0
    heights = [merge_heights[j] for j in order]
    pairs = [merge_leafsets[j] for j in order]
    while i < len(order):
        level = heights[i]
        while i < len(order) and heights[i] <= level + tol:
            a, b = pairs[i]
            merged = a | b
            parts = {p for p in parts if not (p <= merged)} | {frozenset(merged)}
            i += 1
        out.append((level, frozenset(parts)))
    return out


def test_criterion_4_clustering_oracles():
    rng = np.random.default_rng(404)
    dendro_fail = 0
    for _ in range(200):
        n = int(rng.integers(10, 40))
        p = int(rng.integers(2, 9))
        values = rng.standard_normal((n, p))
        std = standardize(ExpressionMatrix(
            values, gene_ids=tuple(f"g{i}" for i in range(p)),
            cell_ids=tuple(f"c{i}" for i in range(n))))
        dend = build_dendrogram(std.values, np.arange(p))
        d0 = 1.0 - correlation_matrix(std.values)
        oracle = _naive_average_linkage(d0)
        # Heights agree to 1e-8 ...
        got_h = np.sort(dend.heights)
        want_h = np.sort([h for _, _, h in oracle])
        if not np.allclose(got_h, want_h, atol=1e-8):
            dendro_fail += 1
            continue
        # ... and the merge sequences agree modulo tie order: compare the
        # partitions after every distinct height level (levels matched by
        # tolerance, partitions exactly).
        got_pairs = []
        sets = {i: frozenset([i]) for i in range(p)}
        for k, (a, b, h) in enumerate(dend.merges):
            fa, fb = sets[int(a)], sets[int(b)]
            sets[p + k] = fa | fb
            got_pairs.append((fa, fb))
        want_pairs = [(a, b) for a, b, _ in oracle]
        got_levels = _partitions_by_level(list(dend.merges[:, 2]), got_pairs)
        want_levels = _partitions_by_level([h for _, _, h in oracle],
                                           want_pairs)
        if len(got_levels) != len(want_levels):
            dendro_fail += 1
            continue
        for (hg, pg), (hw, pw) in zip(got_levels, want_levels):
            if abs(hg - hw) > 1e-8 or pg != pw:
                dendro_fail += 1
                break

    kmeans_fail = 0
    for seed in range(50):
        rng_i = np.random.default_rng(seed)
        n = 80
        sizes = (6, 6, 6)
        cols, truth, true_signs = [], [], []
        for b, size in enumerate(sizes):
            f = rng_i.standard_normal(n)
            for i in range(size):
                g = np.sqrt(0.995) * f + np.sqrt(0.005) * rng_i.standard_normal(n)
                s = 1 if i % 2 == 0 else -1
                cols.append(s * g)
                truth.append(b)
                true_signs.append(s)
        std = standardize(ExpressionMatrix(
            np.column_stack(cols),
            gene_ids=tuple(f"g{i}" for i in range(len(cols))),
            cell_ids=tuple(f"c{i}" for i in range(n))))
        res = cluster_genes(std.values, len(sizes), seed=seed)
        truth = np.array(truth)
        true_signs = np.array(true_signs)
        # Exact recovery: same partition and the within-block sign pattern.
        remap = {}
        ok = True
        for lab_got, lab_true in zip(res.membership, truth):
            if lab_got in remap and remap[lab_got] != lab_true:
                ok = False
                break
            remap[lab_got] = lab_true
        ok = ok and len(set(remap.values())) == len(remap)
        if ok:
            for b in range(len(sizes)):
                members = np.flatnonzero(truth == b)
                rel_got = res.signs[members] * res.signs[members[0]]
                rel_true = true_signs[members] * true_signs[members[0]]
                if not np.array_equal(rel_got, rel_true):
                    ok = False
                    break
        if not ok:
            kmeans_fail += 1

    _verdict(4, f"dendrogram oracle (200 subsets, {dendro_fail} mismatches); "
                f"planted K-Means recovery (50 seeds, {kmeans_fail} misses)",
             dendro_fail == 0 and kmeans_fail == 0)


# --------------------------------------------------------------------------
# Criterion 5: solver oracles.
# --------------------------------------------------------------------------

def _kkt_residuals(X, y, f):
    sds = X.std(axis=0, ddof=1)
    means = X.mean(axis=0)
    Xs = (X - means) / sds
    beta_std = f.coefficients * sds
    b0_std = f.intercept + f.coefficients @ means
    n = X.shape[0]
    q = 1.0 / (1.0 + np.exp(-(b0_std + Xs @ beta_std)))
    g = Xs.T @ (q - y) / n
    lam, alpha = f.lam, f.alpha
    nz = beta_std != 0.0
    stationarity = np.abs(
        g[nz] + lam * alpha * np.sign(beta_std[nz])
        + lam * (1 - alpha) * beta_std[nz]
    )
    band_slack = lam * alpha - np.abs(g[~nz])
    return stationarity, band_slack, abs(np.mean(q - y))


def _newton_mle(X, y, iters=200):
    n, p = X.shape
    Z = np.hstack([np.ones((n, 1)), X])
    w = np.zeros(p + 1)
    for _ in range(iters):
        q = 1.0 / (1.0 + np.exp(-(Z @ w)))
        grad = Z.T @ (q - y)
        hess = Z.T @ (Z * (q * (1 - q))[:, None])
        step = np.linalg.solve(hess + 1e-12 * np.eye(p + 1), grad)
        w = w - step
        if np.abs(step).max() < 1e-12:
            break
    return w[0], w[1:]


def test_criterion_5_solver_oracles():
    rng = np.random.default_rng(505)
    kkt_bad = 0
    for _ in range(100):
        n = int(rng.integers(40, 120))
        p = int(rng.integers(3, 25))
        X = rng.standard_normal((n, p)) * rng.uniform(0.5, 2.0, p) \
            + rng.uniform(-1, 1, p)
        beta = np.zeros(p)
        k = min(p, 4)
        beta[:k] = rng.uniform(0.8, 1.6, k) * rng.choice([-1.0, 1.0], k)
        eta = X @ beta - (X @ beta).mean()
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        if y.sum() in (0, n):
            y[0] = 1.0 - y[0]
        alpha = float(rng.choice([0.2, 0.5, 1.0]))
        lam = float(rng.uniform(0.05, 0.7)) * enet.lambda_max(X, y, alpha)
        f = enet.fit(X, y, alpha, lam)
        stationarity, band_slack, intercept_grad = _kkt_residuals(X, y, f)
        if ((stationarity.size and stationarity.max() > 1e-6)
                or (band_slack.size and band_slack.min() < -1e-6)
                or intercept_grad > 1e-6):
            kkt_bad += 1

    # lambda -> 0 equals the unpenalized MLE on a well-conditioned 50x3.
    rng2 = np.random.default_rng(506)
    X = rng2.standard_normal((50, 3))
    beta = np.array([1.0, -0.8, 0.5])
    y = (rng2.random(50) < 1.0 / (1.0 + np.exp(-(X @ beta)))).astype(float)
    f0 = enet.fit(X, y, alpha=0.5, lam=0.0, tol=1e-10)
    b0_ref, beta_ref = _newton_mle(X, y)
    mle_ok = (np.max(np.abs(f0.coefficients - beta_ref)) <= 1e-3
              and abs(f0.intercept - b0_ref) <= 1e-3)

    # lambda >= lambda_max -> exactly zero coefficients.
    zero_ok = True
    for seed in range(10):
        Xz, yz = X, y
        lam_max = enet.lambda_max(Xz, yz, 0.5)
        fz = enet.fit(Xz, yz, 0.5, lam_max * (1.0 + seed / 10.0))
        if np.any(fz.coefficients != 0.0):
            zero_ok = False

    _verdict(5, f"KKT <= 1e-6 on 100 instances ({kkt_bad} violations); "
                f"MLE match {mle_ok}; lambda_max zeros {zero_ok}",
             kkt_bad == 0 and mle_ok and zero_ok)


# --------------------------------------------------------------------------
# Criterion 6: AUC equals exhaustive pair counting, exactly.
# --------------------------------------------------------------------------

def _auc_pairs(y, q):
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    total = 0.0
    for i in pos:
        for j in neg:
            if q[i] > q[j]:
                total += 1.0
            elif q[i] == q[j]:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_criterion_6_auc_oracle():
    rng = np.random.default_rng(606)
    bad = 0
    for _ in range(500):
        n = int(rng.integers(4, 31))
        y = rng.integers(0, 2, n)
        if y.sum() in (0, n):
            y[0] = 1 - y[0]
        if rng.random() < 0.5:
            q = rng.integers(0, 6, n) / 5.0  # coarse scores force ties
        else:
            q = rng.random(n)
        if pipeline.auc(y, q) != _auc_pairs(y, q):
            bad += 1
    _verdict(6, f"AUC pair-counting equality on 500 instances "
                f"({bad} mismatches)", bad == 0)


# --------------------------------------------------------------------------
# Criterion 7: exact Wilcoxon equals 2^n sign enumeration.
# --------------------------------------------------------------------------

def _wilcoxon_enumeration(d):
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    n = len(d)
    count_le = 0
    count_ge = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for s, r in zip(signs, ranks) if s)
        count_le += w <= w_obs
        count_ge += w >= w_obs
    total = 2 ** n
    return min(1.0, 2.0 * min(count_le / total, count_ge / total))


def test_criterion_7_wilcoxon_oracle():
    rng = np.random.default_rng(707)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(6, 11))  # >= 6 nonzero differences required
        d = rng.normal(0.2, 1.0, n)
        if rng.random() < 0.4:  # force |d| ties
            d = np.round(d, 1)
            d[d == 0] = 0.1
        if simbench.wilcoxon_signed_rank(d) != _wilcoxon_enumeration(d):
            bad += 1
    _verdict(7, f"Wilcoxon exact = 2^n enumeration on 100 vectors "
                f"({bad} mismatches)", bad == 0)


# --------------------------------------------------------------------------
# Criterion 8: worked example x1 = -x2 = x3.
# --------------------------------------------------------------------------

def test_criterion_8_worked_example():
    rng = np.random.default_rng(808)
    base = rng.standard_normal(50)
    extra = rng.standard_normal((50, 2))
    values = np.column_stack([base, -base, base.copy(), extra])
    x = ExpressionMatrix(values, gene_ids=("x1", "x2", "x3", "u1", "u2"),
                         cell_ids=tuple(f"c{i}" for i in range(50)))
    structure = pipeline.build_structure(x, seed=0)
    ok = True
    for c in (1e-6, 1e-4, 1e-2, 1e-1):
        rule = make_rule(structure.partition, list(structure.dendrograms), c,
                         structure.std)
        trio = [g for g in rule.groups
                if {rule.gene_ids[j] for j in g} >= {"x1", "x2", "x3"}]
        if len(trio) != 1 or len(trio[0]) != 3:
            ok = False
            continue
        z = representatives_std(rule, structure.std)
        gi = [i for i, g in enumerate(rule.groups) if g is trio[0]][0]
        col_x1 = rule.gene_ids.index("x1")
        sign_x1 = rule.signs[col_x1]
        if not np.array_equal(z[:, gi] * sign_x1,
                              structure.std.values[:, col_x1]):
            ok = False
    _verdict(8, "x1=-x2=x3 groups at every threshold > 0 and the "
                "representative equals standardized x1 exactly", ok)


# --------------------------------------------------------------------------
# Criterion 9: CLI byte-identical reruns, independent of --threads.
# --------------------------------------------------------------------------

def test_criterion_9_cli_determinism(tmp_path):
    import csv as _csv

    from corgroup.data_model import write_matrix

    rng = np.random.default_rng(909)
    n = 60
    cols = []
    eta = np.zeros(n)
    for b in range(3):
        f = rng.standard_normal(n)
        for i in range(4):
            g = np.sqrt(0.95) * f + np.sqrt(0.05) * rng.standard_normal(n)
            cols.append(-g if i % 2 else g)
        if b < 2:
            eta += 1.5 * f
    cols.extend(rng.standard_normal((n, 4)).T)
    values = np.column_stack(cols)
    x = ExpressionMatrix(values,
                         gene_ids=tuple(f"g{i:02d}" for i in range(values.shape[1])),
                         cell_ids=tuple(f"c{i:02d}" for i in range(n)))
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    if y.sum() in (0, n):
        y[0] = 1.0 - y[0]
    expr = tmp_path / "expr.csv"
    write_matrix(x, expr)
    labels = tmp_path / "labels.csv"
    with labels.open("w", newline="", encoding="utf-8") as handle:
        w = _csv.writer(handle)
        w.writerow(["cell_id", "label"])
        for cid, yi in zip(x.cell_ids, y):
            w.writerow([cid, int(yi)])

    fit_args = ["fit", "--input", str(expr), "--labels", str(labels),
                "--folds", "4", "--seed", "17", "--tol", "1e-5"]
    fit_a, fit_b = tmp_path / "fa.json", tmp_path / "fb.json"
    ok = dispatch(["--threads", "1", *fit_args, "--out", str(fit_a)]) == 0
    ok &= dispatch(["--threads", "8", *fit_args, "--out", str(fit_b)]) == 0
    fit_ok = ok and fit_a.read_bytes() == fit_b.read_bytes()

    design = SyntheticDesign(
        n_cells=50, n_genes=16,
        blocks=(BlockSpec(size=5, rho=0.95, signs="alternating", causal=True,
                          effect=8.0),
                BlockSpec(size=5, rho=0.95, signs="alternating")),
        seed=3)
    design_path = tmp_path / "design.json"
    design_path.write_text(json.dumps(simbench.design_to_dict(design)))
    bench_args = ["bench", "--design", str(design_path), "--reps", "4",
                  "--folds", "4", "--grid", "0.1,1e-6", "--tol", "1e-4",
                  "--seed", "23"]
    out_a, out_b = tmp_path / "ba.csv", tmp_path / "bb.csv"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ok = dispatch(["--threads", "1", *bench_args, "--out", str(out_a)]) == 0
        ok &= dispatch(["--threads", "8", *bench_args, "--out", str(out_b)]) == 0
    bench_ok = (ok and out_a.read_bytes() == out_b.read_bytes()
                and (tmp_path / "ba_summary.json").read_bytes()
                == (tmp_path / "bb_summary.json").read_bytes())

    _verdict(9, f"CLI byte-identical reruns (fit {fit_ok}, bench {bench_ok})",
             fit_ok and bench_ok)
