"""Elastic-net penalized logistic regression.

IRLS outer loop with cyclic coordinate descent and soft-thresholding on the
weighted quadratic approximation; predictors are standardized internally and
coefficients restored to the input scale.  Numba-compiled inner loops.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit
from sklearn.model_selection import StratifiedKFold

from .data_model import CONSTANT_SD_TOL

DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 100_000
_MAX_OUTER = 200
_WEIGHT_FLOOR = 1e-5


class DegenerateLabelsError(ValueError):
    """Binary response with a single class."""


@dataclass(frozen=True)
class EnetFit:
    """A fitted penalized logistic model on the original predictor scale."""

    coefficients: np.ndarray
    intercept: float
    alpha: float
    lam: float
    converged: bool
    objective: float
    n_sweeps: int


@dataclass(frozen=True)
class CvLambdaResult:
    lambda_best: float
    lambdas: np.ndarray
    mean_deviance: np.ndarray


@njit(cache=True)
def _soft(u, t):
    if u > t:
        return u - t
    if u < -t:
        return u + t
    return 0.0


@njit(cache=True)
def _penalized_nll(eta, y, beta, lam, alpha):
    n = eta.shape[0]
    nll = 0.0
    for i in range(n):
        e = eta[i]
        if e > 0.0:
            nll += e + np.log1p(np.exp(-e)) - y[i] * e
        else:
            nll += np.log1p(np.exp(e)) - y[i] * e
    nll /= n
    l1 = 0.0
    l2 = 0.0
    for j in range(beta.shape[0]):
        l1 += abs(beta[j])
        l2 += beta[j] * beta[j]
    return nll + lam * (alpha * l1 + 0.5 * (1.0 - alpha) * l2)


@njit(cache=True)
def _eta_from_active(X, active, b0, beta, eta):
    n = eta.shape[0]
    for i in range(n):
        eta[i] = b0
    for jj in range(active.shape[0]):
        j = active[jj]
        bj = beta[j]
        if bj != 0.0:
            for i in range(n):
                eta[i] += X[i, j] * bj


@njit(cache=True)
def _irls_loop(X, X2, y, active, lam, alpha, tol, budget, b0, beta, eta,
               trace, trace_start):
    """IRLS with cyclic coordinate descent restricted to ``active``.

    Updates ``beta`` and ``eta`` in place; appends the penalized objective
    after every outer iteration to ``trace``.  Returns
    (b0, converged, sweeps_used, objective, trace_count).
    """
    n = y.shape[0]
    m = active.shape[0]
    lam_l1 = lam * alpha
    lam_l2 = lam * (1.0 - alpha)
    used = 0
    converged = False
    obj = _penalized_nll(eta, y, beta, lam, alpha)
    ti = trace_start
    w = np.empty(n)
    r = np.empty(n)
    r0 = np.empty(n)
    eta_start = np.empty(n)
    v = np.empty(m)
    beta_start = np.empty(m)
    for _outer in range(_MAX_OUTER):
        sw = 0.0
        for i in range(n):
            pr = 1.0 / (1.0 + np.exp(-eta[i]))
            wi = pr * (1.0 - pr)
            if wi < _WEIGHT_FLOOR:
                wi = _WEIGHT_FLOOR
            w[i] = wi
            r[i] = (y[i] - pr) / wi
            r0[i] = r[i]
            eta_start[i] = eta[i]
            sw += wi
        for jj in range(m):
            j = active[jj]
            s = 0.0
            for i in range(n):
                s += w[i] * X2[i, j]
            v[jj] = s / n
        b0_start = b0
        for jj in range(m):
            beta_start[jj] = beta[active[jj]]
        # Cyclic CD on the weighted quadratic approximation.
        while True:
            max_delta = 0.0
            d0 = 0.0
            for i in range(n):
                d0 += w[i] * r[i]
            d0 /= sw
            b0 += d0
            for i in range(n):
                r[i] -= d0
            if abs(d0) > max_delta:
                max_delta = abs(d0)
            for jj in range(m):
                j = active[jj]
                vj = v[jj]
                if vj <= 0.0:
                    continue
                u = 0.0
                for i in range(n):
                    u += w[i] * X[i, j] * r[i]
                u = u / n + beta[j] * vj
                bn = _soft(u, lam_l1) / (vj + lam_l2)
                d = bn - beta[j]
                if d != 0.0:
                    beta[j] = bn
                    for i in range(n):
                        r[i] -= d * X[i, j]
                    if abs(d) > max_delta:
                        max_delta = abs(d)
            used += 1
            if max_delta < tol or used >= budget:
                break
        for i in range(n):
            eta[i] = eta_start[i] + (r0[i] - r[i])
        obj_new = _penalized_nll(eta, y, beta, lam, alpha)
        if obj_new > obj + 1e-12:
            # Safeguard: step-halve toward the previous iterate so the
            # penalized objective never increases.
            frac = 1.0
            success = False
            for _half in range(40):
                frac *= 0.5
                b0 = b0_start + frac * (b0 - b0_start)
                for jj in range(m):
                    j = active[jj]
                    beta[j] = beta_start[jj] + frac * (beta[j] - beta_start[jj])
                _eta_from_active(X, active, b0, beta, eta)
                obj_new = _penalized_nll(eta, y, beta, lam, alpha)
                if obj_new <= obj + 1e-12:
                    success = True
                    break
            if not success:
                b0 = b0_start
                for jj in range(m):
                    beta[active[jj]] = beta_start[jj]
                _eta_from_active(X, active, b0, beta, eta)
                obj_new = obj
                converged = True
        move = abs(b0 - b0_start)
        for jj in range(m):
            mj = abs(beta[active[jj]] - beta_start[jj])
            if mj > move:
                move = mj
        obj = obj_new
        trace[ti] = obj
        ti += 1
        if move < tol:
            converged = True
        if converged or used >= budget:
            break
    return b0, converged, used, obj, ti


@njit(cache=True)
def _fit_kernel(X, X2, y, alpha, lam, tol, max_sweeps, b0_init, beta_init,
                trace):
    """Fit at a single lambda from a warm start on standardized predictors.

    Coordinate descent runs on an active set; between runs a full KKT check
    on the exact logistic gradient admits any violating feature.  Returns
    (b0, beta, converged, total_sweeps, objective, trace_count).
    """
    n, p = X.shape
    b0 = b0_init
    beta = beta_init.copy()
    active_mask = np.zeros(p, dtype=np.bool_)
    for j in range(p):
        if beta[j] != 0.0:
            active_mask[j] = True
    eta = np.empty(n)
    total_sweeps = 0
    converged = False
    obj = 0.0
    thr = lam * alpha
    ti = 0
    for _round in range(100):
        active = np.flatnonzero(active_mask)
        _eta_from_active(X, active, b0, beta, eta)
        b0, conv, used, obj, ti = _irls_loop(
            X, X2, y, active, lam, alpha, tol, max_sweeps - total_sweeps,
            b0, beta, eta, trace, ti,
        )
        total_sweeps += used
        resid = np.empty(n)
        for i in range(n):
            resid[i] = 1.0 / (1.0 + np.exp(-eta[i])) - y[i]
        g = np.dot(X.T, resid) / n
        added = False
        for j in range(p):
            if not active_mask[j] and abs(g[j]) > thr:
                active_mask[j] = True
                added = True
        if not added:
            converged = conv
            break
        if total_sweeps >= max_sweeps:
            break
    return b0, beta, converged, total_sweeps, obj, ti


@njit(cache=True)
def _path_kernel(X, X2, y, alpha, lambdas, tol, max_sweeps, b0_init):
    """Warm-started fits along a descending lambda path (standardized X)."""
    n, p = X.shape
    n_lam = lambdas.shape[0]
    b0s = np.empty(n_lam)
    betas = np.zeros((n_lam, p))
    conv = np.zeros(n_lam, dtype=np.bool_)
    b0 = b0_init
    beta = np.zeros(p)
    trace = np.empty(110 * _MAX_OUTER)
    for li in range(n_lam):
        b0, beta, ok, _sweeps, _obj, _ti = _fit_kernel(
            X, X2, y, alpha, lambdas[li], tol, max_sweeps, b0, beta, trace
        )
        b0s[li] = b0
        betas[li] = beta
        conv[li] = ok
    return b0s, betas, conv


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2:
        raise ValueError("X must be 2-D")
    if y.shape[0] != X.shape[0]:
        raise ValueError("X and y have mismatched lengths")
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise ValueError("y must be binary 0/1")
    if classes.size < 2:
        raise DegenerateLabelsError("y contains a single class")
    return X, y


def _standardize_columns(X):
    means = X.mean(axis=0)
    sds = X.std(axis=0, ddof=1)
    ok = sds >= CONSTANT_SD_TOL
    Xs = np.zeros_like(X)
    Xs[:, ok] = (X[:, ok] - means[ok]) / sds[ok]
    return Xs, means, sds, ok


def lambda_max(X, y, alpha: float) -> float:
    """Smallest penalty at which every coefficient is exactly zero."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    X, y = _check_xy(X, y)
    Xs, _, _, ok = _standardize_columns(X)
    if not ok.any():
        return 0.0
    resid = y - y.mean()
    n = y.shape[0]
    value = float(np.max(np.abs(Xs[:, ok].T @ resid)) / (n * alpha))
    # Tiny guard so soft-thresholding at exactly this penalty cannot leave
    # O(eps) coefficients behind.
    return value * (1.0 + 1e-10)


def _null_intercept(y):
    ybar = y.mean()
    return float(np.log(ybar / (1.0 - ybar)))


def fit(
    X,
    y,
    alpha: float = 0.5,
    lam: float = 0.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_SWEEPS,
    warm: tuple[float, np.ndarray] | None = None,
    return_trace: bool = False,
) -> EnetFit:
    """Fit the penalized logistic model at a single penalty weight.

    ``max_iter`` caps the total number of coordinate sweeps.  ``warm`` is an
    optional (intercept, coefficients) start on the original scale.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must be in (0, 1]")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    X, y = _check_xy(X, y)
    Xs, means, sds, ok = _standardize_columns(X)
    p = X.shape[1]
    if warm is None:
        b0_init = _null_intercept(y)
        beta_init = np.zeros(p)
    else:
        b0_w, beta_w = warm
        beta_init = np.zeros(p)
        beta_init[ok] = np.asarray(beta_w)[ok] * sds[ok]
        b0_init = float(b0_w) + float(np.asarray(beta_w)[ok] @ means[ok])
    XsF = np.asfortranarray(Xs)
    X2 = XsF * XsF
    trace = np.empty(110 * _MAX_OUTER)
    b0, beta_std, converged, sweeps, obj, n_trace = _fit_kernel(
        XsF, X2, y, alpha, float(lam), float(tol), int(max_iter),
        b0_init, beta_init, trace
    )
    if not converged:
        warnings.warn("elastic-net fit did not converge", RuntimeWarning, stacklevel=2)
    if abs(b0) > 30.0:
        warnings.warn(
            "very large intercept; labels may be perfectly separated",
            RuntimeWarning,
            stacklevel=2,
        )
    coef = np.zeros(p)
    coef[ok] = beta_std[ok] / sds[ok]
    intercept = float(b0 - coef[ok] @ means[ok])
    result = EnetFit(
        coefficients=coef,
        intercept=intercept,
        alpha=float(alpha),
        lam=float(lam),
        converged=bool(converged),
        objective=float(obj),
        n_sweeps=int(sweeps),
    )
    if return_trace:
        return result, trace[:n_trace].copy()
    return result


def fit_with_trace(X, y, alpha: float = 0.5, lam: float = 0.0, **kwargs):
    """Like :func:`fit` but also returns the per-outer-iteration objectives."""
    return fit(X, y, alpha, lam, return_trace=True, **kwargs)


def lambda_path(lam_max: float, path_length: int = 50, ratio: float = 1e-3) -> np.ndarray:
    """Descending geometric path from lambda_max to lambda_max * ratio."""
    if lam_max <= 0:
        return np.array([0.0])
    if path_length < 2:
        return np.array([lam_max])
    return lam_max * ratio ** (np.arange(path_length) / (path_length - 1))


def fit_path(
    X,
    y,
    alpha: float = 0.5,
    lambdas: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_SWEEPS,
    path_length: int = 50,
) -> list[EnetFit]:
    """Warm-started fits along a descending lambda path."""
    X, y = _check_xy(X, y)
    if lambdas is None:
        lambdas = lambda_path(lambda_max(X, y, alpha), path_length)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    Xs, means, sds, ok = _standardize_columns(X)
    XsF = np.asfortranarray(Xs)
    b0s, betas, conv = _path_kernel(
        XsF, XsF * XsF, y, float(alpha), lambdas, float(tol), int(max_iter),
        _null_intercept(y),
    )
    fits = []
    p = X.shape[1]
    for li, lam in enumerate(lambdas):
        coef = np.zeros(p)
        coef[ok] = betas[li, ok] / sds[ok]
        intercept = float(b0s[li] - coef[ok] @ means[ok])
        fits.append(
            EnetFit(
                coefficients=coef,
                intercept=intercept,
                alpha=float(alpha),
                lam=float(lam),
                converged=bool(conv[li]),
                objective=np.nan,
                n_sweeps=-1,
            )
        )
    return fits


def predict_prob(fit_result: EnetFit, X) -> np.ndarray:
    """Predicted probabilities logistic(intercept + X beta)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != fit_result.coefficients.shape[0]:
        raise ValueError(
            f"predictor count mismatch: X has {X.shape[1] if X.ndim == 2 else '?'} "
            f"columns, fit expects {fit_result.coefficients.shape[0]}"
        )
    eta = fit_result.intercept + X @ fit_result.coefficients
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-eta))


def binomial_deviance(y, q) -> float:
    """Mean binomial deviance, probabilities clipped away from 0/1."""
    y = np.asarray(y, dtype=np.float64)
    q = np.clip(np.asarray(q, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return float(-2.0 * np.mean(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)))


def stratified_folds(y, folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic stratified fold split; reduces folds if a class is small."""
    y = np.asarray(y)
    min_class = int(min(np.sum(y == 0), np.sum(y == 1)))
    if min_class < folds:
        warnings.warn(
            f"reducing folds from {folds} to {min_class}: smallest class too small",
            RuntimeWarning,
            stacklevel=2,
        )
        folds = min_class
    if folds < 2:
        raise ValueError("need at least 2 folds")
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed % (2**32 - 1))
    return [(tr, te) for tr, te in skf.split(np.zeros_like(y), y)]


def cv_lambda(
    X,
    y,
    alpha: float = 0.5,
    folds: int = 5,
    seed: int = 0,
    path_length: int = 50,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_SWEEPS,
) -> CvLambdaResult:
    """Choose the penalty by cross-validated binomial deviance.

    The path runs geometrically from the full-data lambda_max down three
    decades; ties prefer the larger lambda.
    """
    X, y = _check_xy(X, y)
    lam_max = lambda_max(X, y, alpha)
    lambdas = lambda_path(lam_max, path_length)
    if lambdas.size == 1:
        return CvLambdaResult(float(lambdas[0]), lambdas, np.zeros(1))
    fold_list = stratified_folds(y, folds, seed)
    n = y.shape[0]
    dev_sum = np.zeros(lambdas.size)
    for tr, te in fold_list:
        fits = fit_path(X[tr], y[tr], alpha, lambdas, tol, max_iter)
        coefs = np.stack([f.coefficients for f in fits], axis=1)  # (p, L)
        intercepts = np.array([f.intercept for f in fits])
        with np.errstate(over="ignore"):
            q = 1.0 / (1.0 + np.exp(-(X[te] @ coefs + intercepts)))
        qc = np.clip(q, 1e-12, 1.0 - 1e-12)
        dev_sum += -2.0 * np.sum(
            y[te, None] * np.log(qc) + (1.0 - y[te, None]) * np.log(1.0 - qc),
            axis=0,
        )
    mean_dev = dev_sum / n
    best = int(np.argmin(mean_dev))  # first occurrence = largest lambda
    return CvLambdaResult(float(lambdas[best]), lambdas, mean_dev)


def fit_to_dict(fit_result: EnetFit, predictor_ids) -> dict:
    predictor_ids = list(predictor_ids)
    if len(predictor_ids) != fit_result.coefficients.shape[0]:
        raise ValueError("predictor id count mismatch")
    return {
        "alpha": fit_result.alpha,
        "lambda": fit_result.lam,
        "intercept": fit_result.intercept,
        "coefficients": {
            pid: float(c) for pid, c in zip(predictor_ids, fit_result.coefficients)
        },
        "converged": fit_result.converged,
    }


def fit_from_dict(payload: dict, predictor_ids=None) -> EnetFit:
    coefs = payload["coefficients"]
    if predictor_ids is None:
        predictor_ids = list(coefs)
    return EnetFit(
        coefficients=np.array([coefs[pid] for pid in predictor_ids]),
        intercept=float(payload["intercept"]),
        alpha=float(payload["alpha"]),
        lam=float(payload["lambda"]),
        converged=bool(payload["converged"]),
        objective=np.nan,
        n_sweeps=-1,
    )
