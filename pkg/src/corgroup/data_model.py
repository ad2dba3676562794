"""Expression matrix ingestion, standardization and correlation primitives."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Genes with original-unit sd below this are treated as constant.
CONSTANT_SD_TOL = 1e-12


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    """Structurally valid input that violates a data invariant."""


class ConstantInputError(ValueError):
    """Correlation requested for a constant vector."""


class MissingGenesError(ValueError):
    """A grouping rule references genes absent from the supplied matrix."""

    def __init__(self, gene_ids):
        self.gene_ids = list(gene_ids)
        super().__init__(f"genes missing from matrix: {', '.join(self.gene_ids)}")


@dataclass(frozen=True)
class ExpressionMatrix:
    """Dense cells x genes expression matrix with identifiers."""

    values: np.ndarray  # (n_cells, n_genes)
    gene_ids: tuple[str, ...]
    cell_ids: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "gene_ids", tuple(self.gene_ids))
        object.__setattr__(self, "cell_ids", tuple(self.cell_ids))
        if values.ndim != 2:
            raise ValidationError("expression values must be a 2-D matrix")
        n, p = values.shape
        if n < 2:
            raise ValidationError(f"need at least 2 cells, got {n}")
        if p < 1:
            raise ValidationError("need at least 1 gene")
        if len(self.gene_ids) != p:
            raise ValidationError("gene_ids length does not match column count")
        if len(self.cell_ids) != n:
            raise ValidationError("cell_ids length does not match row count")
        if len(set(self.gene_ids)) != p:
            raise ValidationError("duplicate gene identifiers")
        if len(set(self.cell_ids)) != n:
            raise ValidationError("duplicate cell identifiers")
        if not np.isfinite(values).all():
            raise ValidationError("expression matrix contains non-finite entries")

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class StandardizedMatrix:
    """Per-gene z-scored matrix; zero-variance genes are dropped, not imputed.

    ``values`` holds only the retained (non-constant) genes, in the column
    order given by ``retained``.  ``gene_means``/``gene_sds`` cover all genes
    in original units.
    """

    values: np.ndarray  # (n_cells, n_retained)
    gene_means: np.ndarray  # (n_genes,)
    gene_sds: np.ndarray  # (n_genes,)
    constant_genes: frozenset[int]
    retained: tuple[int, ...]
    gene_ids: tuple[str, ...]

    @property
    def retained_gene_ids(self) -> tuple[str, ...]:
        return tuple(self.gene_ids[j] for j in self.retained)


def _delimiter_for(path: Path) -> str:
    return "\t" if path.suffix.lower() in {".tsv", ".txt", ".tab"} else ","


def load_matrix(path, orientation: str = "genes-in-rows") -> ExpressionMatrix:
    """Load a delimited expression table.

    The file must have one header row and one identifier column.  With
    ``genes-in-rows`` (the default) rows are genes and the header lists cell
    identifiers; ``genes-in-columns`` is the transpose.  The returned matrix
    is always oriented cells x genes.
    """
    if orientation not in {"genes-in-rows", "genes-in-columns"}:
        raise ValueError(f"unknown orientation: {orientation!r}")
    path = Path(path)
    row_ids: list[str] = []
    rows: list[list[float]] = []
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle, delimiter=_delimiter_for(path))
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", line=1) from None
        if len(header) < 2:
            raise ParseError("header must contain at least one data column", line=1)
        col_ids = [c.strip() for c in header[1:]]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, found {len(row)}", line=lineno
                )
            row_ids.append(row[0].strip())
            try:
                parsed = [float(v) for v in row[1:]]
            except ValueError:
                bad = next(v for v in row[1:] if not _is_float(v))
                raise ParseError(f"non-numeric value {bad!r}", line=lineno) from None
            if not all(np.isfinite(parsed)):
                raise ParseError("non-finite value", line=lineno)
            rows.append(parsed)
    if not rows:
        raise ParseError("no data rows", line=2)
    for ids, what in ((row_ids, "row"), (col_ids, "column")):
        seen = set()
        for ident in ids:
            if ident in seen:
                raise ValidationError(f"duplicate {what} identifier: {ident!r}")
            seen.add(ident)
    values = np.asarray(rows, dtype=np.float64)
    if orientation == "genes-in-rows":
        return ExpressionMatrix(values.T, gene_ids=row_ids, cell_ids=col_ids)
    return ExpressionMatrix(values, gene_ids=col_ids, cell_ids=row_ids)


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def write_matrix(x: ExpressionMatrix, path, orientation: str = "genes-in-rows") -> None:
    """Write a matrix in the format accepted by :func:`load_matrix`."""
    if orientation not in {"genes-in-rows", "genes-in-columns"}:
        raise ValueError(f"unknown orientation: {orientation!r}")
    path = Path(path)
    delim = _delimiter_for(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, delimiter=delim)
        if orientation == "genes-in-rows":
            writer.writerow(["gene_id", *x.cell_ids])
            for j, gene in enumerate(x.gene_ids):
                writer.writerow([gene, *(repr(float(v)) for v in x.values[:, j])])
        else:
            writer.writerow(["cell_id", *x.gene_ids])
            for i, cell in enumerate(x.cell_ids):
                writer.writerow([cell, *(repr(float(v)) for v in x.values[i, :])])


def standardize(x: ExpressionMatrix) -> StandardizedMatrix:
    """Z-score each gene (sample sd, denominator n-1); flag constant genes."""
    values = x.values
    means = values.mean(axis=0)
    sds = values.std(axis=0, ddof=1)
    constant = sds < CONSTANT_SD_TOL
    retained = tuple(int(j) for j in np.flatnonzero(~constant))
    # C order so downstream matrix products take the same BLAS path as the
    # (C ordered) representative matrices; keeps degenerate groupings
    # bit-identical to the ungrouped model.
    std_values = np.ascontiguousarray(
        (values[:, list(retained)] - means[list(retained)]) / sds[list(retained)]
    )
    return StandardizedMatrix(
        values=std_values,
        gene_means=means,
        gene_sds=sds,
        constant_genes=frozenset(int(j) for j in np.flatnonzero(constant)),
        retained=retained,
        gene_ids=x.gene_ids,
    )


def pearson(a, b) -> float:
    """Pearson correlation of two vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-D vectors of equal length")
    if a.size < 2:
        raise ValueError("need at least two observations")
    ac = a - a.mean()
    bc = b - b.mean()
    na = np.sqrt(ac @ ac)
    nb = np.sqrt(bc @ bc)
    if na < CONSTANT_SD_TOL or nb < CONSTANT_SD_TOL:
        raise ConstantInputError("correlation undefined for constant input")
    r = float((ac @ bc) / (na * nb))
    return min(1.0, max(-1.0, r))


def correlation_matrix(columns: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlations of matrix columns, clamped to [-1, 1].

    Columns must be non-constant.
    """
    xc = columns - columns.mean(axis=0, keepdims=True)
    norms = np.sqrt((xc * xc).sum(axis=0))
    if np.any(norms < CONSTANT_SD_TOL):
        raise ConstantInputError("correlation undefined for constant column")
    r = (xc.T @ xc) / np.outer(norms, norms)
    return np.clip(r, -1.0, 1.0)
