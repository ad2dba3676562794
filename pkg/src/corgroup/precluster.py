"""Pre-grouping of genes into manageable subsets.

A sign-tracking K-Means variant clusters genes by 1 - |correlation| to their
cluster centers; applied iteratively to the largest cluster it caps subset
sizes for the downstream hierarchical step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data_model import CONSTANT_SD_TOL, StandardizedMatrix, correlation_matrix


@dataclass(frozen=True)
class SignedClustering:
    """Cluster membership plus per-gene sign relative to its cluster center."""

    membership: np.ndarray  # (m,) cluster index per gene, 0-based, compact
    signs: np.ndarray  # (m,) entries in {+1, -1}
    centers: np.ndarray  # (n, k) signed-average centers
    iterations: int
    converged: bool
    objective: float = np.inf  # sum over genes of 1 - |r(gene, center)|

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[1]


@dataclass(frozen=True)
class PartitionSet:
    """Disjoint cover of the retained genes with per-gene composed signs."""

    subsets: tuple[np.ndarray, ...]  # index arrays into the retained columns
    signs: np.ndarray  # (n_retained,) composed sign per gene
    max_size: int


def derive_seed(seed: int, *tags: int) -> int:
    """Stable 32-bit sub-seed from a master seed and integer tags."""
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1)[0])


def kmeans_init(xs: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Initial membership from k-means++ style seeding under 1 - |correlation|.

    Seeding must use the clustering dissimilarity, not Euclidean distance: a
    gene and its negation are Euclidean-antipodal but identical under
    1 - |r|, so Euclidean k-means++ systematically spends two centers on the
    +- sides of one sign-mixed block and leaves other blocks merged.  Center
    genes are drawn with probability proportional to the squared 1 - |r|
    distance to the nearest chosen center; every gene is then assigned to
    its closest center gene.
    """
    m = xs.shape[1]
    if k > m:
        raise ValueError(f"K={k} exceeds gene count {m}")
    if k == m:
        return np.arange(m)
    rng = np.random.default_rng(seed)
    d = 1.0 - np.abs(correlation_matrix(xs))
    centers = [int(rng.integers(m))]
    for _ in range(1, k):
        dist = d[:, centers].min(axis=1)
        weights = dist * dist
        total = weights.sum()
        if total <= 0.0:
            centers.append(int(rng.integers(m)))
        else:
            centers.append(int(rng.choice(m, p=weights / total)))
    return np.argmin(d[:, centers], axis=1)


def _compact_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel to 0..k-1 preserving order of first appearance of cluster ids."""
    uniq = np.unique(labels)
    lut = {int(c): i for i, c in enumerate(uniq)}
    return np.array([lut[int(c)] for c in labels])


def modified_kmeans(
    xs: np.ndarray, k: int, init: np.ndarray, max_iter: int = 100
) -> SignedClustering:
    """Sign-tracking K-Means under 1 - |correlation| dissimilarity.

    Alternates signed-average center updates with assignment of every gene to
    the center of highest absolute correlation, updating the gene's sign to
    the sign of that correlation.  Converged when neither membership nor
    signs change across an iteration.
    """
    n, m = xs.shape
    init = np.asarray(init)
    if init.shape != (m,):
        raise ValueError("init membership has wrong length")
    labels = _compact_labels(init)

    xc = xs - xs.mean(axis=0, keepdims=True)
    xnorm = np.sqrt((xc * xc).sum(axis=0))
    if np.any(xnorm < CONSTANT_SD_TOL):
        raise ValueError("constant gene in modified_kmeans input")

    # Initial signs must be coherent within each cluster or the first signed
    # average cancels for sign-mixed groups (e.g. a block whose genes carry
    # alternating signs averages to noise), destroying even a perfect init.
    # Reference each cluster to its first member.
    signs = np.ones(m, dtype=np.int64)
    for kk in range(labels.max() + 1):
        members = np.flatnonzero(labels == kk)
        ref = members[0]
        r_ref = (xc[:, members].T @ xc[:, ref]) / (xnorm[members] * xnorm[ref])
        signs[members] = np.where(r_ref < 0, -1, 1)

    centers = np.empty((n, 0))
    converged = False
    iterations = 0
    objective = np.inf
    for iterations in range(1, max_iter + 1):
        k_cur = labels.max() + 1
        centers = np.zeros((n, k_cur))
        for kk in range(k_cur):
            members = labels == kk
            centers[:, kk] = (xs[:, members] * signs[members]).mean(axis=1)
        cc = centers - centers.mean(axis=0, keepdims=True)
        cnorm = np.sqrt((cc * cc).sum(axis=0))
        bad = cnorm < CONSTANT_SD_TOL
        if bad.any():
            _reseed_constant_centers(xs, xc, xnorm, labels, centers, cc, cnorm, bad)
        r = (xc.T @ cc) / np.outer(xnorm, cnorm)  # (m, k_cur)
        new_labels = np.argmax(np.abs(r), axis=1)  # ties -> lowest index
        chosen = r[np.arange(m), new_labels]
        objective = float(np.sum(1.0 - np.abs(chosen)))
        new_signs = np.where(chosen < 0, -1, 1).astype(np.int64)
        if np.array_equal(new_labels, labels) and np.array_equal(new_signs, signs):
            converged = True
            break
        labels = _compact_labels(new_labels)
        signs = new_signs
    if not converged:
        warnings.warn(
            f"modified_kmeans did not converge in {max_iter} iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    return SignedClustering(
        membership=labels,
        signs=signs,
        centers=centers,
        iterations=iterations,
        converged=converged,
        objective=objective,
    )


def cluster_genes(
    xs: np.ndarray, k: int, seed: int, n_init: int = 10, max_iter: int = 100
) -> SignedClustering:
    """Best of ``n_init`` restarts of the sign-tracking K-Means.

    Each restart seeds standard K-Means with a distinct sub-seed; the run
    with the smallest total 1 - |correlation| to its centers wins.
    """
    if n_init < 1:
        raise ValueError("need at least one restart")
    best = None
    for t in range(n_init):
        init = kmeans_init(xs, k, derive_seed(seed, 13, t))
        res = modified_kmeans(xs, k, init, max_iter=max_iter)
        if best is None or res.objective < best.objective - 1e-12:
            best = res
        if k == xs.shape[1]:
            break
    return best


def _reseed_constant_centers(xs, xc, xnorm, labels, centers, cc, cnorm, bad):
    """Replace centers whose signed average cancelled to a constant vector."""
    warnings.warn(
        "constant cluster center re-seeded from worst-fitting gene",
        RuntimeWarning,
        stacklevel=3,
    )
    good = np.flatnonzero(~bad)
    if good.size:
        r_good = (xc.T @ cc[:, good]) / np.outer(xnorm, cnorm[good])
        # Genes stranded in a cancelled cluster have no usable center and are
        # the first re-seeding candidates, then the worst-fitting of the rest.
        own = np.full(labels.shape, -np.inf)
        for pos, kk in enumerate(good):
            members = labels == kk
            own[members] = np.abs(r_good[members, pos])
        order = np.argsort(own, kind="stable")
    else:
        order = np.arange(labels.size)
    for idx, kk in zip(order, np.flatnonzero(bad)):
        centers[:, kk] = xs[:, idx]
        cc[:, kk] = xc[:, idx]
        cnorm[kk] = xnorm[idx]


def iterative_split(
    std: StandardizedMatrix,
    k: int = 10,
    max_size: int = 1000,
    seed: int = 0,
) -> PartitionSet:
    """Split the retained genes until every subset has fewer than ``max_size``.

    Repeatedly runs the sign-tracking K-Means (seeded by standard K-Means) on
    the currently largest subset; per-gene signs compose multiplicatively
    across splitting levels.  When no split is needed the genes still get a
    single-cluster sign pass: downstream dissimilarities are 1 - correlation
    of the *signed* columns, so anticorrelated duplicates (x2 = -x1) could
    never group without it.
    """
    m_total = std.values.shape[1]
    signs = np.ones(m_total, dtype=np.int64)
    if 0 < m_total < max_size:
        clustering = modified_kmeans(std.values, 1, np.zeros(m_total, dtype=np.int64))
        return PartitionSet(subsets=(np.arange(m_total),),
                            signs=clustering.signs.astype(np.int64),
                            max_size=max_size)
    done: list[np.ndarray] = []
    pending: list[np.ndarray] = []
    if m_total:
        pending.append(np.arange(m_total))
    split_idx = 0
    while pending:
        pending.sort(key=lambda idx: (-idx.size, idx[0] if idx.size else 0))
        subset = pending.pop(0)
        if subset.size < max_size:
            done.append(subset)
            continue
        sub_seed = derive_seed(seed, 7, split_idx)
        split_idx += 1
        kk = min(k, subset.size)
        xs = std.values[:, subset]
        clustering = cluster_genes(xs, kk, sub_seed)
        if clustering.n_clusters <= 1:
            warnings.warn(
                f"oversized subset of {subset.size} genes could not be split; "
                "members are (near-)perfectly correlated",
                RuntimeWarning,
                stacklevel=2,
            )
            signs[subset] *= clustering.signs
            done.append(subset)
            continue
        signs[subset] *= clustering.signs
        for kk_i in range(clustering.n_clusters):
            members = subset[clustering.membership == kk_i]
            if members.size:
                pending.append(members)
    done.sort(key=lambda idx: int(idx[0]))
    return PartitionSet(subsets=tuple(done), signs=signs, max_size=max_size)
