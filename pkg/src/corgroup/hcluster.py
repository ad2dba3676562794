"""Average-linkage clustering under 1 - correlation, cuts and representatives.

Within each pre-grouped subset the genes are sign-adjusted, so dissimilarity
1 - correlation stays in [0, 2] with no negative correlation by construction.
Group representatives are signed averages of standardized genes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import (
    ExpressionMatrix,
    MissingGenesError,
    StandardizedMatrix,
    correlation_matrix,
)
from .precluster import PartitionSet


@dataclass(frozen=True)
class Dendrogram:
    """Binary merge tree over a gene subset.

    Node ids follow the scipy convention: leaves are 0..m-1 (positions into
    ``leaves``), the merge created at step t has id m+t.  ``merges`` rows are
    (left node, right node, height); height is the average pairwise leaf
    dissimilarity between the two merged clusters.
    """

    leaves: np.ndarray  # gene indices (positions in the retained columns)
    merges: np.ndarray  # (m-1, 3) float; node ids stored as floats

    @property
    def n_leaves(self) -> int:
        return self.leaves.size

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2] if self.merges.size else np.empty(0)


def build_dendrogram(xs_signed: np.ndarray, leaves: np.ndarray) -> Dendrogram:
    """Agglomerate sign-adjusted standardized gene columns by average linkage.

    At each step the globally minimal pair of clusters is merged; ties break
    on the lexicographically smallest pair of active rows.
    """
    leaves = np.asarray(leaves)
    m = leaves.size
    if xs_signed.shape[1] != m:
        raise ValueError("column count does not match leaf count")
    if m == 1:
        return Dendrogram(leaves=leaves, merges=np.empty((0, 3)))
    d = 1.0 - correlation_matrix(xs_signed)
    np.fill_diagonal(d, np.inf)
    sizes = np.ones(m)
    node_of_row = np.arange(m)
    merges = np.empty((m - 1, 3))
    for step in range(m - 1):
        flat = int(np.argmin(d))
        i, j = divmod(flat, m)
        if i > j:  # symmetric matrix: first occurrence has i < j
            i, j = j, i
        h = d[i, j]
        merges[step] = (node_of_row[i], node_of_row[j], h)
        si, sj = sizes[i], sizes[j]
        new_row = (si * d[i, :] + sj * d[j, :]) / (si + sj)
        d[i, :] = new_row
        d[:, i] = new_row
        d[i, i] = np.inf
        d[j, :] = np.inf
        d[:, j] = np.inf
        sizes[i] = si + sj
        node_of_row[i] = m + step
    return Dendrogram(leaves=leaves, merges=merges)


def cut_dendrogram(d: Dendrogram, c: float) -> list[np.ndarray]:
    """Groups = maximal subtrees whose internal merge heights are all <= c.

    A merge survives iff its height <= c and both children survived.  Returns
    gene-index groups ordered by smallest member.
    """
    if c < 0:
        raise ValueError("threshold must be non-negative")
    m = d.n_leaves
    n_nodes = m + d.merges.shape[0]
    kept = np.zeros(n_nodes, dtype=bool)
    kept[:m] = True
    children = {}
    for t in range(d.merges.shape[0]):
        left, right, h = d.merges[t]
        node = m + t
        children[node] = (int(left), int(right))
        kept[node] = h <= c and kept[int(left)] and kept[int(right)]
    is_root = kept.copy()
    for node, (left, right) in children.items():
        if kept[node]:
            is_root[left] = False
            is_root[right] = False
    groups = []
    for node in np.flatnonzero(is_root):
        stack = [int(node)]
        members = []
        while stack:
            cur = stack.pop()
            if cur < m:
                members.append(cur)
            else:
                stack.extend(children[cur])
        groups.append(d.leaves[np.sort(np.array(members))])
    groups.sort(key=lambda g: int(g[0]))
    return groups


@dataclass(frozen=True)
class GroupingRule:
    """Final gene -> (group, sign) map with frozen standardization parameters.

    Index space is the rule's own gene list (the retained, non-constant genes
    of the training matrix); ``groups`` holds index arrays into ``gene_ids``.
    """

    threshold: float
    gene_ids: tuple[str, ...]
    signs: np.ndarray  # (r,) +-1 per rule gene
    means: np.ndarray  # (r,) training means, original units
    sds: np.ndarray  # (r,) training sds, original units
    groups: tuple[np.ndarray, ...]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_ids(self) -> list[str]:
        return [f"g{i:05d}" for i in range(len(self.groups))]

    def gene_sign(self, gene_id: str) -> int:
        return int(self.signs[self.gene_ids.index(gene_id)])


def make_rule(
    partition: PartitionSet,
    dendrograms: list[Dendrogram],
    c: float,
    std: StandardizedMatrix,
) -> GroupingRule:
    """Cut every subset dendrogram at ``c`` and assemble the grouping rule."""
    if len(dendrograms) != len(partition.subsets):
        raise ValueError("need exactly one dendrogram per subset")
    groups: list[np.ndarray] = []
    for dend in dendrograms:
        groups.extend(cut_dendrogram(dend, c))
    groups.sort(key=lambda g: int(g[0]))
    retained = np.array(std.retained)
    return GroupingRule(
        threshold=float(c),
        gene_ids=std.retained_gene_ids,
        signs=partition.signs.copy(),
        means=std.gene_means[retained].copy(),
        sds=std.gene_sds[retained].copy(),
        groups=tuple(np.asarray(g) for g in groups),
    )


def _signed_group_mean(cols_std: np.ndarray, signs: np.ndarray) -> np.ndarray:
    # Welford running mean: exact (not just close) when the signed columns
    # coincide bit for bit, e.g. duplicate genes x1 = -x2, where sum/k would
    # round (3v)/3 away from v.
    m = cols_std[:, 0] * signs[0]
    for i in range(1, cols_std.shape[1]):
        m = m + (cols_std[:, i] * signs[i] - m) / (i + 1)
    return m


def representatives(rule: GroupingRule, x: ExpressionMatrix) -> np.ndarray:
    """n x G matrix of signed-average group representatives.

    ``x`` is standardized with the rule's stored training parameters, never
    refit, so representatives are comparable across datasets.
    """
    col_of = {g: i for i, g in enumerate(x.gene_ids)}
    missing = [g for g in rule.gene_ids if g not in col_of]
    if missing:
        raise MissingGenesError(missing)
    cols = np.array([col_of[g] for g in rule.gene_ids])
    n = x.n_cells
    z = np.empty((n, len(rule.groups)))
    for gi, group in enumerate(rule.groups):
        sub = (x.values[:, cols[group]] - rule.means[group]) / rule.sds[group]
        z[:, gi] = _signed_group_mean(sub, rule.signs[group])
    return z


def representatives_std(rule: GroupingRule, std: StandardizedMatrix) -> np.ndarray:
    """Same as :func:`representatives` but from an already standardized matrix.

    Bit-identical to the raw-matrix path when ``std`` carries the same
    training parameters.
    """
    z = np.empty((std.values.shape[0], len(rule.groups)))
    for gi, group in enumerate(rule.groups):
        z[:, gi] = _signed_group_mean(std.values[:, group], rule.signs[group])
    return z


def rule_to_dict(rule: GroupingRule) -> dict:
    return {
        "threshold": rule.threshold,
        "groups": [
            {
                "id": gid,
                "genes": [
                    {"gene_id": rule.gene_ids[j], "sign": int(rule.signs[j])}
                    for j in group
                ],
            }
            for gid, group in zip(rule.group_ids(), rule.groups)
        ],
        "standardization": {
            rule.gene_ids[j]: {"mean": float(rule.means[j]), "sd": float(rule.sds[j])}
            for j in range(len(rule.gene_ids))
        },
    }


def rule_from_dict(payload: dict) -> GroupingRule:
    gene_ids: list[str] = []
    signs: list[int] = []
    groups: list[np.ndarray] = []
    for group in payload["groups"]:
        idx = []
        for entry in group["genes"]:
            idx.append(len(gene_ids))
            gene_ids.append(entry["gene_id"])
            signs.append(int(entry["sign"]))
        groups.append(np.array(idx))
    std = payload["standardization"]
    means = np.array([std[g]["mean"] for g in gene_ids])
    sds = np.array([std[g]["sd"] for g in gene_ids])
    return GroupingRule(
        threshold=float(payload["threshold"]),
        gene_ids=tuple(gene_ids),
        signs=np.array(signs, dtype=np.int64),
        means=means,
        sds=sds,
        groups=tuple(groups),
    )
