"""End-to-end grouped prediction pipeline.

Pre-group genes, build per-subset dendrograms once, sweep a threshold grid
with pooled 10-fold cross-validated AUC, refit at the winning threshold, and
predict new cells through the stored grouping rule.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata

from . import elastic_net as enet
from .data_model import ExpressionMatrix, StandardizedMatrix, standardize
from .hcluster import (
    Dendrogram,
    GroupingRule,
    build_dendrogram,
    make_rule,
    representatives,
    representatives_std,
    rule_from_dict,
    rule_to_dict,
)
from .precluster import PartitionSet, derive_seed, iterative_split

#: Dendrogram-cut thresholds swept by default, largest first.
DEFAULT_GRID = (
    1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6,
)

_TAG_SPLIT = 1
_TAG_FOLDS = 2
_TAG_INNER = 3
_TAG_FINAL = 4


@dataclass(frozen=True)
class ThresholdReport:
    grid: tuple[float, ...]
    auc_per_threshold: tuple[float, ...]
    best_c: float
    group_counts: tuple[int, ...]


@dataclass(frozen=True)
class GroupedModel:
    rule: GroupingRule
    fit: enet.EnetFit
    report: ThresholdReport | None
    fold_seed: int


@dataclass(frozen=True)
class GroupingStructure:
    """Unsupervised half of the pipeline: shared by every threshold and fold."""

    std: StandardizedMatrix
    partition: PartitionSet
    dendrograms: tuple[Dendrogram, ...]


def auc(y, q) -> float:
    """Mann-Whitney AUC with the half-credit convention for ties."""
    y = np.asarray(y)
    q = np.asarray(q, dtype=np.float64)
    if y.shape != q.shape:
        raise ValueError("y and q have mismatched lengths")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = y.shape[0] - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined: single-class labels")
    ranks = rankdata(q)
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def build_structure(
    x: ExpressionMatrix, seed: int = 0, k: int = 10, max_subset: int = 1000
) -> GroupingStructure:
    """Standardize, pre-group, and build one dendrogram per subset."""
    std = standardize(x)
    partition = iterative_split(std, k=k, max_size=max_subset, seed=derive_seed(seed, _TAG_SPLIT))
    dendrograms = []
    for subset in partition.subsets:
        xs = std.values[:, subset] * partition.signs[subset]
        dendrograms.append(build_dendrogram(xs, subset))
    return GroupingStructure(std=std, partition=partition, dendrograms=tuple(dendrograms))


def _grouping_key(rule: GroupingRule):
    return tuple(tuple(int(j) for j in g) for g in rule.groups)


def _cv_one_fold(z, y, tr, te, alpha, inner_folds, inner_seed, path_length, tol, max_iter):
    cvres = enet.cv_lambda(
        z[tr], y[tr], alpha, folds=inner_folds, seed=inner_seed,
        path_length=path_length, tol=tol, max_iter=max_iter,
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        f = enet.fit(z[tr], y[tr], alpha, cvres.lambda_best, tol=tol, max_iter=max_iter)
    return enet.predict_prob(f, z[te])


def cv_threshold_sweep(
    x: ExpressionMatrix,
    y,
    grid=None,
    folds: int = 10,
    seed: int = 0,
    alpha: float = 0.5,
    max_subset: int = 1000,
    inner_folds: int = 5,
    path_length: int = 50,
    tol: float = enet.DEFAULT_TOL,
    max_iter: int = enet.DEFAULT_MAX_SWEEPS,
    structure: GroupingStructure | None = None,
    n_jobs: int = 1,
    probs_out: dict | None = None,
) -> ThresholdReport:
    """Pooled cross-validated AUC for every candidate cut threshold.

    One stratified fold split is shared across thresholds so AUC values are
    directly comparable; identical groupings share a single CV evaluation.
    Ties in AUC prefer the largest threshold.  When ``probs_out`` is a dict
    it is filled with threshold -> pooled out-of-fold probabilities (None
    for degenerate thresholds without non-constant predictors).
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if structure is None:
        structure = build_structure(x, seed=seed, max_subset=max_subset)
    grid = tuple(float(c) for c in (DEFAULT_GRID if grid is None else grid))
    grid = tuple(sorted(grid, reverse=True))
    n = y.shape[0]
    if n < folds:
        raise ValueError("fewer cells than folds")
    fold_list = enet.stratified_folds(y, folds, derive_seed(seed, _TAG_FOLDS))
    inner_seeds = [derive_seed(seed, _TAG_INNER, fi) for fi in range(len(fold_list))]

    cache: dict[tuple, tuple] = {}
    aucs: list[float] = []
    group_counts: list[int] = []
    for c in grid:
        rule = make_rule(structure.partition, list(structure.dendrograms), c, structure.std)
        key = _grouping_key(rule)
        group_counts.append(rule.n_groups)
        if key in cache:
            value, qhat = cache[key]
            aucs.append(value)
            if probs_out is not None:
                probs_out[c] = qhat
            continue
        z = representatives_std(rule, structure.std)
        z_sds = z.std(axis=0, ddof=1) if z.size else np.empty(0)
        if rule.n_groups == 0 or not np.any(z_sds >= 1e-12):
            warnings.warn(
                f"threshold {c:g}: no non-constant predictors; AUC recorded as 0.5",
                RuntimeWarning,
                stacklevel=2,
            )
            cache[key] = (0.5, None)
            aucs.append(0.5)
            if probs_out is not None:
                probs_out[c] = None
            continue
        qhat = np.empty(n)
        results = Parallel(n_jobs=n_jobs)(
            delayed(_cv_one_fold)(
                z, y, tr, te, alpha, inner_folds, inner_seeds[fi],
                path_length, tol, max_iter,
            )
            for fi, (tr, te) in enumerate(fold_list)
        )
        for (_tr, te), q_te in zip(fold_list, results):
            qhat[te] = q_te
        value = auc(y, qhat)
        cache[key] = (value, qhat)
        aucs.append(value)
        if probs_out is not None:
            probs_out[c] = qhat
    best = int(np.argmax(aucs))  # grid descending: first max = largest c
    return ThresholdReport(
        grid=grid,
        auc_per_threshold=tuple(aucs),
        best_c=grid[best],
        group_counts=tuple(group_counts),
    )


def cv_pooled_probs(
    z,
    y,
    folds: int = 10,
    seed: int = 0,
    alpha: float = 0.5,
    inner_folds: int = 5,
    path_length: int = 50,
    tol: float = enet.DEFAULT_TOL,
    max_iter: int = enet.DEFAULT_MAX_SWEEPS,
    n_jobs: int = 1,
):
    """Pooled out-of-fold probabilities for an arbitrary predictor matrix.

    Uses the same fold and inner-seed derivation as ``cv_threshold_sweep``,
    so for equal ``seed`` the folds coincide with the sweep's and the result
    on singleton representatives is bit-identical to the sweep's pooled
    probabilities at an all-singleton threshold.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.shape[0]
    if n < folds:
        raise ValueError("fewer cells than folds")
    fold_list = enet.stratified_folds(y, folds, derive_seed(seed, _TAG_FOLDS))
    inner_seeds = [derive_seed(seed, _TAG_INNER, fi) for fi in range(len(fold_list))]
    qhat = np.empty(n)
    results = Parallel(n_jobs=n_jobs)(
        delayed(_cv_one_fold)(
            z, y, tr, te, alpha, inner_folds, inner_seeds[fi],
            path_length, tol, max_iter,
        )
        for fi, (tr, te) in enumerate(fold_list)
    )
    for (_tr, te), q_te in zip(fold_list, results):
        qhat[te] = q_te
    return qhat


def fit_final(
    x: ExpressionMatrix,
    y,
    best_c: float,
    seed: int = 0,
    alpha: float = 0.5,
    max_subset: int = 1000,
    inner_folds: int = 5,
    path_length: int = 50,
    tol: float = enet.DEFAULT_TOL,
    max_iter: int = enet.DEFAULT_MAX_SWEEPS,
    structure: GroupingStructure | None = None,
    report: ThresholdReport | None = None,
) -> GroupedModel:
    """Grouping rule at ``best_c`` plus an elastic net fit on all cells."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if structure is None:
        structure = build_structure(x, seed=seed, max_subset=max_subset)
    rule = make_rule(structure.partition, list(structure.dendrograms), best_c, structure.std)
    z = representatives_std(rule, structure.std)
    cvres = enet.cv_lambda(
        z, y, alpha, folds=inner_folds, seed=derive_seed(seed, _TAG_FINAL),
        path_length=path_length, tol=tol, max_iter=max_iter,
    )
    f = enet.fit(z, y, alpha, cvres.lambda_best, tol=tol, max_iter=max_iter)
    return GroupedModel(rule=rule, fit=f, report=report, fold_seed=int(seed))


def fit_grouped(
    x: ExpressionMatrix,
    y,
    grid=None,
    folds: int = 10,
    seed: int = 0,
    alpha: float = 0.5,
    max_subset: int = 1000,
    inner_folds: int = 5,
    path_length: int = 50,
    tol: float = enet.DEFAULT_TOL,
    max_iter: int = enet.DEFAULT_MAX_SWEEPS,
    structure: GroupingStructure | None = None,
    n_jobs: int = 1,
) -> GroupedModel:
    """Full pipeline: threshold sweep then final fit at the winning cut."""
    if structure is None:
        structure = build_structure(x, seed=seed, max_subset=max_subset)
    report = cv_threshold_sweep(
        x, y, grid=grid, folds=folds, seed=seed, alpha=alpha,
        max_subset=max_subset, inner_folds=inner_folds, path_length=path_length,
        tol=tol, max_iter=max_iter, structure=structure, n_jobs=n_jobs,
    )
    return fit_final(
        x, y, report.best_c, seed=seed, alpha=alpha, max_subset=max_subset,
        inner_folds=inner_folds, path_length=path_length,
        tol=tol, max_iter=max_iter, structure=structure, report=report,
    )


def fit_ungrouped(
    x: ExpressionMatrix,
    y,
    seed: int = 0,
    alpha: float = 0.5,
    inner_folds: int = 5,
    path_length: int = 50,
    tol: float = enet.DEFAULT_TOL,
    max_iter: int = enet.DEFAULT_MAX_SWEEPS,
    std: StandardizedMatrix | None = None,
) -> tuple[enet.EnetFit, StandardizedMatrix]:
    """Standard elastic net on individual standardized genes (the baseline)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if std is None:
        std = standardize(x)
    cvres = enet.cv_lambda(
        std.values, y, alpha, folds=inner_folds, seed=derive_seed(seed, _TAG_FINAL),
        path_length=path_length, tol=tol, max_iter=max_iter,
    )
    f = enet.fit(std.values, y, alpha, cvres.lambda_best, tol=tol, max_iter=max_iter)
    return f, std


def expand_selection(model: GroupedModel, gene_ids=None) -> np.ndarray:
    """Per-gene selection flags: a gene is selected iff its group's
    representative carries a nonzero coefficient.

    With ``gene_ids`` the flags are aligned to that universe (absent genes
    False); otherwise to the rule's own gene order.
    """
    rule = model.rule
    flags_rule = np.zeros(len(rule.gene_ids), dtype=bool)
    for gi, group in enumerate(rule.groups):
        if model.fit.coefficients[gi] != 0.0:
            flags_rule[group] = True
    if gene_ids is None:
        return flags_rule
    pos = {g: i for i, g in enumerate(rule.gene_ids)}
    flags = np.zeros(len(gene_ids), dtype=bool)
    for i, g in enumerate(gene_ids):
        j = pos.get(g)
        if j is not None:
            flags[i] = flags_rule[j]
    return flags


def predict(model: GroupedModel, x_new: ExpressionMatrix) -> np.ndarray:
    """Probabilities for new cells through the stored grouping rule."""
    z = representatives(model.rule, x_new)
    return enet.predict_prob(model.fit, z)


def report_to_dict(report: ThresholdReport) -> dict:
    return {
        "grid": list(report.grid),
        "auc_per_threshold": list(report.auc_per_threshold),
        "best_c": report.best_c,
        "group_counts": list(report.group_counts),
    }


def report_from_dict(payload: dict) -> ThresholdReport:
    return ThresholdReport(
        grid=tuple(payload["grid"]),
        auc_per_threshold=tuple(payload["auc_per_threshold"]),
        best_c=float(payload["best_c"]),
        group_counts=tuple(int(g) for g in payload["group_counts"]),
    )


def model_to_dict(model: GroupedModel) -> dict:
    return {
        "rule": rule_to_dict(model.rule),
        "fit": enet.fit_to_dict(model.fit, model.rule.group_ids()),
        "report": None if model.report is None else report_to_dict(model.report),
        "fold_seed": model.fold_seed,
    }


def model_from_dict(payload: dict) -> GroupedModel:
    rule = rule_from_dict(payload["rule"])
    return GroupedModel(
        rule=rule,
        fit=enet.fit_from_dict(payload["fit"], rule.group_ids()),
        report=None if payload.get("report") is None else report_from_dict(payload["report"]),
        fold_seed=int(payload["fold_seed"]),
    )
