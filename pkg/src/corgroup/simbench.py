"""Simulation and benchmark harness.

Factor-model generation of correlated expression blocks, blueprint models
with jittered coefficients, Bernoulli phenotype simulation, prediction and
selection metrics, and the paired Wilcoxon comparison of the grouped versus
the standard elastic net.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from . import elastic_net as enet
from . import pipeline
from .data_model import ExpressionMatrix, correlation_matrix
from .precluster import derive_seed


class EmptyBlueprintError(ValueError):
    """No gene survives the pairwise-correlation filter."""


class InvalidExperimentError(ValueError):
    """The ground truth has no feature genes; selection metrics undefined."""


@dataclass(frozen=True)
class BlockSpec:
    """One correlated block: ``size`` genes sharing a latent factor at
    within-block correlation ``rho``, with a +-1 sign per gene.

    For a causal block, ``causal_genes`` limits the true support to that
    many randomly chosen member genes (weights drawn uniformly in
    ``[0.5, 1.5] * effect``); ``None`` makes every member causal with the
    equal weight ``effect / size``.
    """

    size: int
    rho: float
    signs: tuple[int, ...] | str = "positive"
    causal: bool = False
    effect: float = 0.0
    causal_genes: int | None = None

    def __post_init__(self):
        if self.causal_genes is not None and not 1 <= self.causal_genes <= self.size:
            raise ValueError("causal_genes must be between 1 and the block size")

    def resolved_signs(self) -> np.ndarray:
        if isinstance(self.signs, str):
            if self.signs == "positive":
                return np.ones(self.size, dtype=np.int64)
            if self.signs == "alternating":
                return np.array([1 if i % 2 == 0 else -1 for i in range(self.size)])
            raise ValueError(f"unknown sign pattern: {self.signs!r}")
        signs = np.asarray(self.signs, dtype=np.int64)
        if signs.shape != (self.size,) or not np.all(np.isin(signs, (-1, 1))):
            raise ValueError("signs must be +-1 and match block size")
        return signs


@dataclass(frozen=True)
class SyntheticDesign:
    n_cells: int
    n_genes: int
    blocks: tuple[BlockSpec, ...]
    seed: int = 0

    def __post_init__(self):
        total = sum(b.size for b in self.blocks)
        if total > self.n_genes:
            raise ValueError("block sizes exceed gene count")
        for b in self.blocks:
            if not 0.0 <= b.rho < 1.0:
                raise ValueError("rho must be in [0, 1)")


@dataclass(frozen=True)
class BlueprintModel:
    """Ground-truth coefficient vector for phenotype simulation."""

    beta: np.ndarray
    intercept: float
    source: str
    min_cor: float = 0.9

    @property
    def support(self) -> np.ndarray:
        return self.beta != 0.0


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    replicate: int
    mse: float
    precision: float
    recall: float
    f1: float
    empty_selection: bool = False


def design_to_dict(design: SyntheticDesign) -> dict:
    return {
        "n_cells": design.n_cells,
        "n_genes": design.n_genes,
        "seed": design.seed,
        "blocks": [
            {
                "size": b.size,
                "rho": b.rho,
                "signs": list(b.signs) if not isinstance(b.signs, str) else b.signs,
                "causal": b.causal,
                "effect": b.effect,
                "causal_genes": b.causal_genes,
            }
            for b in design.blocks
        ],
    }


def design_from_dict(payload: dict) -> SyntheticDesign:
    blocks = tuple(
        BlockSpec(
            size=int(b["size"]),
            rho=float(b["rho"]),
            signs=b.get("signs", "positive")
            if isinstance(b.get("signs", "positive"), str)
            else tuple(int(s) for s in b["signs"]),
            causal=bool(b.get("causal", False)),
            effect=float(b.get("effect", 0.0)),
            causal_genes=(None if b.get("causal_genes") is None
                          else int(b["causal_genes"])),
        )
        for b in payload["blocks"]
    )
    return SyntheticDesign(
        n_cells=int(payload["n_cells"]),
        n_genes=int(payload["n_genes"]),
        blocks=blocks,
        seed=int(payload.get("seed", 0)),
    )


def synth_expression(design: SyntheticDesign) -> ExpressionMatrix:
    """Correlated-block expression from a per-block latent factor.

    Gene i of a block is s_i * (sqrt(rho) f + sqrt(1-rho) eps_i); genes
    outside every block are independent standard Gaussians.
    """
    rng = np.random.default_rng(design.seed)
    n, p = design.n_cells, design.n_genes
    values = np.empty((n, p))
    col = 0
    for block in design.blocks:
        f = rng.standard_normal(n)
        eps = rng.standard_normal((n, block.size))
        signs = block.resolved_signs()
        values[:, col : col + block.size] = signs * (
            math.sqrt(block.rho) * f[:, None] + math.sqrt(1.0 - block.rho) * eps
        )
        col += block.size
    if col < p:
        values[:, col:] = rng.standard_normal((n, p - col))
    gene_ids = tuple(f"gene{i:05d}" for i in range(p))
    cell_ids = tuple(f"cell{i:05d}" for i in range(n))
    return ExpressionMatrix(values, gene_ids=gene_ids, cell_ids=cell_ids)


def blueprint_from_design(design: SyntheticDesign) -> BlueprintModel:
    """Direct ground-truth coefficients for a synthetic design.

    A causal block with ``causal_genes=None`` distributes its total effect
    equally over its genes with the block's sign pattern, contributing
    effect * sqrt(rho) * f to the linear predictor.  With ``causal_genes``
    set, that many member genes are drawn at random (rng derived from the
    design seed) and given weights sign * U(0.5, 1.5) * effect, so the true
    support is sparse within the block.
    """
    beta = np.zeros(design.n_genes)
    col = 0
    for idx, block in enumerate(design.blocks):
        if block.causal:
            signs = block.resolved_signs()
            if block.causal_genes is None:
                beta[col : col + block.size] = signs * (block.effect / block.size)
            else:
                rng = np.random.default_rng(derive_seed(design.seed, 14, idx))
                pick = rng.choice(block.size, block.causal_genes, replace=False)
                weights = rng.uniform(0.5, 1.5, block.causal_genes)
                beta[col + pick] = signs[pick] * weights * block.effect
        col += block.size
    return BlueprintModel(beta=beta, intercept=0.0, source="design", min_cor=1.0)


def make_blueprint(
    x: ExpressionMatrix,
    y,
    min_cor: float = 0.9,
    alpha: float = 0.5,
    seed: int = 0,
    inner_folds: int = 5,
    path_length: int = 50,
    refit: bool = True,
) -> BlueprintModel:
    """Blueprint model learned from data.

    Genes whose maximum absolute correlation with any other gene falls below
    ``min_cor`` are forced to zero; an elastic net (penalty chosen by CV) is
    fit on the surviving genes.  With ``refit=False`` the net is fit on all
    genes and the filtered coefficients zeroed afterwards.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    r = correlation_matrix(x.values)
    np.fill_diagonal(r, 0.0)
    max_abs = np.abs(r).max(axis=1)
    keep = max_abs >= min_cor
    if not keep.any():
        raise EmptyBlueprintError(
            f"no gene has |correlation| >= {min_cor} with another gene"
        )
    beta = np.zeros(x.n_genes)
    if refit:
        sub = x.values[:, keep]
        cvres = enet.cv_lambda(sub, y, alpha, folds=inner_folds, seed=seed,
                               path_length=path_length)
        f = enet.fit(sub, y, alpha, cvres.lambda_best)
        beta[keep] = f.coefficients
        intercept = f.intercept
    else:
        cvres = enet.cv_lambda(x.values, y, alpha, folds=inner_folds, seed=seed,
                               path_length=path_length)
        f = enet.fit(x.values, y, alpha, cvres.lambda_best)
        beta = np.where(keep, f.coefficients, 0.0)
        intercept = f.intercept
    return BlueprintModel(beta=beta, intercept=float(intercept),
                          source="fitted", min_cor=float(min_cor))


def jitter(b: BlueprintModel, sd_fraction: float, seed: int) -> BlueprintModel:
    """Gaussian noise on the nonzero coefficients; support is preserved.

    The noise sd is ``sd_fraction`` times the sample sd of the nonzero
    coefficients, so jitter is scale-free.
    """
    if sd_fraction < 0:
        raise ValueError("sd_fraction must be non-negative")
    nz = np.flatnonzero(b.beta)
    beta = b.beta.copy()
    if sd_fraction > 0 and nz.size >= 2:
        sigma = float(np.std(b.beta[nz], ddof=1))
        if sigma > 0:
            rng = np.random.default_rng(seed)
            beta[nz] += rng.normal(0.0, sd_fraction * sigma, size=nz.size)
    return BlueprintModel(beta=beta, intercept=b.intercept,
                          source=b.source, min_cor=b.min_cor)


def simulate_phenotypes(
    x: ExpressionMatrix, b: BlueprintModel, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Bernoulli phenotypes from the logistic model; returns (y, true q)."""
    if b.beta.shape[0] != x.n_genes:
        raise ValueError("blueprint dimension does not match gene count")
    eta = x.values @ b.beta + b.intercept
    with np.errstate(over="ignore"):
        q = 1.0 / (1.0 + np.exp(-eta))
    rng = np.random.default_rng(seed)
    y = (rng.random(x.n_cells) < q).astype(np.float64)
    return y, q


def compute_metrics(
    true_support,
    selected,
    q_true,
    q_hat,
    method: str = "",
    replicate: int = 0,
) -> MetricsRecord:
    """Prediction MSE against the true probabilities plus selection metrics."""
    true_support = np.asarray(true_support, dtype=bool)
    selected = np.asarray(selected, dtype=bool)
    q_true = np.asarray(q_true, dtype=np.float64)
    q_hat = np.asarray(q_hat, dtype=np.float64)
    if true_support.shape != selected.shape or q_true.shape != q_hat.shape:
        raise ValueError("mismatched lengths")
    n_true = int(true_support.sum())
    if n_true == 0:
        raise InvalidExperimentError("ground truth selects no genes")
    mse = float(np.mean((q_true - q_hat) ** 2))
    n_sel = int(selected.sum())
    hits = int((true_support & selected).sum())
    empty = n_sel == 0
    precision = 0.0 if empty else hits / n_sel
    recall = hits / n_true
    f1 = 0.0 if precision == 0.0 or recall == 0.0 else 2.0 / (1.0 / precision + 1.0 / recall)
    return MetricsRecord(
        method=method,
        replicate=replicate,
        mse=mse,
        precision=precision,
        recall=recall,
        f1=f1,
        empty_selection=empty,
    )


def wilcoxon_signed_rank(differences) -> float:
    """Two-sided paired Wilcoxon signed-rank p-value.

    Exact (conditional on observed midranks) for up to 25 nonzero
    differences, otherwise normal approximation with midrank tie handling
    and continuity correction.  p = min(1, 2 min(P(W<=w), P(W>=w))).
    """
    d = np.asarray(differences, dtype=np.float64).ravel()
    d = d[d != 0.0]
    if d.size == 0:
        warnings.warn("all differences are zero; p-value set to 1",
                      RuntimeWarning, stacklevel=2)
        return 1.0
    if d.size < 6:
        raise ValueError("need at least 6 nonzero differences")
    ranks = rankdata(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    if d.size <= 25:
        return _wilcoxon_exact(ranks, w_pos)
    mu = ranks.sum() / 2.0
    sigma = math.sqrt(float((ranks * ranks).sum()) / 4.0)
    delta = w_pos - mu
    cc = 0.5 * np.sign(delta)
    z = (delta - cc) / sigma
    return float(min(1.0, 2.0 * norm.sf(abs(z))))


def _wilcoxon_exact(ranks: np.ndarray, w_pos: float) -> float:
    # Midranks are half-integers; doubling gives exact integer weights.
    weights = np.rint(2.0 * ranks).astype(np.int64)
    total = int(weights.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for wt in weights:
        shifted = np.zeros_like(counts)
        shifted[wt:] = counts[: total + 1 - wt]
        counts = counts + shifted
    w2 = int(round(2.0 * w_pos))
    n_assign = 2.0 ** len(weights)
    p_le = counts[: w2 + 1].sum() / n_assign
    p_ge = counts[w2:].sum() / n_assign
    return float(min(1.0, 2.0 * min(p_le, p_ge)))


@dataclass(frozen=True)
class BenchmarkResult:
    records: tuple[MetricsRecord, ...]
    pvalues: dict[str, float]
    redraws: int
    config: dict = field(default_factory=dict)

    def differences(self, metric: str) -> np.ndarray:
        grouped = {r.replicate: getattr(r, metric) for r in self.records
                   if r.method == "grouped"}
        standard = {r.replicate: getattr(r, metric) for r in self.records
                    if r.method == "ungrouped"}
        reps = sorted(grouped)
        return np.array([grouped[r] - standard[r] for r in reps])


def _one_replicate(x, structure, blueprint, rep, sd_fraction, seed, grid,
                   folds, alpha, inner_folds, path_length, max_subset, tol):
    jittered = jitter(blueprint, sd_fraction, derive_seed(seed, 10, rep))
    redraws = 0
    while True:
        y, q_true = simulate_phenotypes(
            x, jittered, derive_seed(seed, 11, rep, redraws)
        )
        if 0 < y.sum() < y.size:
            break
        redraws += 1
        if redraws > 1000:
            raise RuntimeError("could not draw a two-class phenotype")
    rep_seed = derive_seed(seed, 12, rep)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        probs: dict = {}
        report = pipeline.cv_threshold_sweep(
            x, y, grid=grid, folds=folds, seed=rep_seed, alpha=alpha,
            max_subset=max_subset, inner_folds=inner_folds,
            path_length=path_length, tol=tol, structure=structure,
            probs_out=probs,
        )
        grouped = pipeline.fit_final(
            x, y, report.best_c, seed=rep_seed, alpha=alpha,
            max_subset=max_subset, inner_folds=inner_folds,
            path_length=path_length, tol=tol, structure=structure,
            report=report,
        )
        # Eq.-style q-hat: pooled out-of-fold probabilities (Alg. 2's
        # cross-validated predictions), not in-sample refit predictions.
        q_g = probs[report.best_c]
        if q_g is None:  # no non-constant predictors at the chosen threshold
            q_g = enet.predict_prob(
                grouped.fit, pipeline.representatives_std(grouped.rule, structure.std)
            )
        flags_g = pipeline.expand_selection(grouped, gene_ids=x.gene_ids)
        f_u, std = pipeline.fit_ungrouped(
            x, y, seed=rep_seed, alpha=alpha, inner_folds=inner_folds,
            path_length=path_length, tol=tol, std=structure.std,
        )
        # The ungrouped arm's pooled probabilities coincide bitwise with the
        # sweep's at an all-singleton threshold; reuse them when available.
        q_u = None
        n_retained = std.values.shape[1]
        for c, count in zip(report.grid, report.group_counts):
            if count == n_retained and probs.get(c) is not None:
                q_u = probs[c]
                break
        if q_u is None:
            q_u = pipeline.cv_pooled_probs(
                std.values, y, folds=folds, seed=rep_seed, alpha=alpha,
                inner_folds=inner_folds, path_length=path_length, tol=tol,
            )
    flags_u = np.zeros(x.n_genes, dtype=bool)
    flags_u[np.array(std.retained, dtype=int)] = f_u.coefficients != 0.0
    truth = jittered.support
    rec_g = compute_metrics(truth, flags_g, q_true, q_g, "grouped", rep)
    rec_u = compute_metrics(truth, flags_u, q_true, q_u, "ungrouped", rep)
    return rec_g, rec_u, redraws


def run_benchmark(
    x: ExpressionMatrix,
    blueprint: BlueprintModel,
    reps: int = 100,
    sd_fraction: float = 0.1,
    seed: int = 0,
    grid=None,
    folds: int = 10,
    alpha: float = 0.5,
    inner_folds: int = 5,
    path_length: int = 50,
    max_subset: int = 1000,
    tol: float = enet.DEFAULT_TOL,
    n_jobs: int = 1,
) -> BenchmarkResult:
    """Paired grouped-vs-ungrouped comparison over jittered replicates.

    Per replicate: jitter the blueprint, simulate phenotypes, run both
    methods under identical folds and seeds, and record the four metrics;
    single-class phenotype draws are redrawn under an incremented sub-seed.
    MSE compares the true probabilities against each method's pooled
    out-of-fold cross-validated probabilities (the same predictions that
    drive threshold selection); selection flags come from the final
    full-data fits.
    """
    structure = pipeline.build_structure(x, seed=seed, max_subset=max_subset)
    arg_list = [
        (x, structure, blueprint, rep, sd_fraction, seed, grid, folds,
         alpha, inner_folds, path_length, max_subset, tol)
        for rep in range(reps)
    ]
    if n_jobs == 1:
        results = [_one_replicate(*a) for a in arg_list]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_one_replicate)(*a) for a in arg_list
        )
    records: list[MetricsRecord] = []
    redraws = 0
    for rec_g, rec_u, rd in results:
        records.append(rec_g)
        records.append(rec_u)
        redraws += rd
    result = BenchmarkResult(records=tuple(records), pvalues={}, redraws=redraws)
    pvalues = {}
    for metric in ("mse", "precision", "recall", "f1"):
        diffs = result.differences(metric)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                pvalues[metric] = wilcoxon_signed_rank(diffs)
        except ValueError:
            warnings.warn(
                f"too few nonzero {metric} differences for a Wilcoxon test; "
                "p-value recorded as NaN",
                RuntimeWarning,
                stacklevel=2,
            )
            pvalues[metric] = float("nan")
    return BenchmarkResult(records=tuple(records), pvalues=pvalues,
                           redraws=redraws)


def write_results_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["replicate", "method", "mse", "precision", "recall", "f1"])
        for r in records:
            writer.writerow([r.replicate, r.method, repr(r.mse), repr(r.precision),
                             repr(r.recall), repr(r.f1)])


def read_results_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            out.append(
                MetricsRecord(
                    method=row["method"],
                    replicate=int(row["replicate"]),
                    mse=float(row["mse"]),
                    precision=float(row["precision"]),
                    recall=float(row["recall"]),
                    f1=float(row["f1"]),
                )
            )
    return out
