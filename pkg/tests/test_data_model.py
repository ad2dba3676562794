"""Ingestion, validation, standardization and correlation primitives."""

import numpy as np
import pytest

from corgroup.data_model import (
    CONSTANT_SD_TOL,
    ConstantInputError,
    ExpressionMatrix,
    ParseError,
    ValidationError,
    correlation_matrix,
    load_matrix,
    pearson,
    standardize,
    write_matrix,
)


def _small_matrix():
    values = np.array(
        [
            [1.0, 2.0, 3.0],
            [4.0, 5.0, 6.0],
            [7.0, 8.0, 10.0],
            [2.0, 1.0, 0.0],
        ]
    )
    return ExpressionMatrix(values, gene_ids=("g1", "g2", "g3"),
                            cell_ids=("c1", "c2", "c3", "c4"))


class TestExpressionMatrix:
    def test_shape_accessors(self):
        x = _small_matrix()
        assert (x.n_cells, x.n_genes) == (4, 3)  # [TRIVIAL]

    def test_rejects_one_cell(self):
        with pytest.raises(ValidationError, match="at least 2 cells"):
            ExpressionMatrix(np.ones((1, 2)), gene_ids=("a", "b"), cell_ids=("c",))

    def test_rejects_duplicate_gene_ids(self):
        with pytest.raises(ValidationError, match="duplicate gene"):
            ExpressionMatrix(np.ones((2, 2)), gene_ids=("a", "a"),
                             cell_ids=("c1", "c2"))

    def test_rejects_mismatched_ids(self):
        with pytest.raises(ValidationError):
            ExpressionMatrix(np.ones((2, 2)), gene_ids=("a",), cell_ids=("c1", "c2"))

    def test_rejects_non_finite(self):
        values = np.array([[1.0, np.nan], [2.0, 3.0]])
        with pytest.raises(ValidationError, match="non-finite"):
            ExpressionMatrix(values, gene_ids=("a", "b"), cell_ids=("c1", "c2"))


class TestLoadMatrix:
    def test_genes_in_rows_roundtrip(self, tmp_path):
        x = _small_matrix()
        path = tmp_path / "m.csv"
        write_matrix(x, path)
        back = load_matrix(path)
        assert back.gene_ids == x.gene_ids
        assert back.cell_ids == x.cell_ids
        np.testing.assert_array_equal(back.values, x.values)

    def test_genes_in_columns_roundtrip(self, tmp_path):
        x = _small_matrix()
        path = tmp_path / "m.csv"
        write_matrix(x, path, orientation="genes-in-columns")
        back = load_matrix(path, orientation="genes-in-columns")
        assert back.gene_ids == x.gene_ids
        np.testing.assert_array_equal(back.values, x.values)

    def test_tsv_delimiter(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("gene_id\tc1\tc2\nga\t1.0\t2.0\ngb\t3.0\t4.0\n")
        x = load_matrix(path)
        np.testing.assert_array_equal(x.values, [[1.0, 3.0], [2.0, 4.0]])

    def test_empty_file(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("")
        with pytest.raises(ParseError, match="line 1"):
            load_matrix(path)

    def test_ragged_row_reports_line(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("gene_id,c1,c2\nga,1.0,2.0\ngb,3.0\n")
        with pytest.raises(ParseError, match="line 3") as err:
            load_matrix(path)
        assert err.value.line == 3

    def test_non_numeric_reports_line(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("gene_id,c1,c2\nga,1.0,oops\n")
        with pytest.raises(ParseError, match="line 2.*oops"):
            load_matrix(path)

    def test_duplicate_row_id(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("gene_id,c1,c2\nga,1.0,2.0\nga,3.0,4.0\n")
        with pytest.raises(ValidationError, match="duplicate row"):
            load_matrix(path)

    def test_unknown_orientation(self, tmp_path):
        path = tmp_path / "m.csv"
        write_matrix(_small_matrix(), path)
        with pytest.raises(ValueError, match="orientation"):
            load_matrix(path, orientation="sideways")

    def test_roundtrip_is_lossless_for_floats(self, tmp_path):
        rng = np.random.default_rng(5)
        values = rng.standard_normal((3, 4))
        x = ExpressionMatrix(values, gene_ids=tuple("abcd"),
                             cell_ids=("c1", "c2", "c3"))
        path = tmp_path / "m.csv"
        write_matrix(x, path)
        back = load_matrix(path)
        # repr round-trips float64 exactly
        np.testing.assert_array_equal(back.values, values)


class TestStandardize:
    def test_zero_mean_unit_sd(self):
        rng = np.random.default_rng(0)
        x = ExpressionMatrix(rng.standard_normal((50, 4)) * 3 + 1,
                             gene_ids=tuple("abcd"),
                             cell_ids=tuple(f"c{i}" for i in range(50)))
        std = standardize(x)
        np.testing.assert_allclose(std.values.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(std.values.std(axis=0, ddof=1), 1.0, rtol=1e-12)

    def test_uses_sample_sd(self):
        # [DERIVED] column (1, 2, 3): mean 2, sample sd 1 -> z = (-1, 0, 1)
        x = ExpressionMatrix(np.array([[1.0], [2.0], [3.0]]),
                             gene_ids=("a",), cell_ids=("c1", "c2", "c3"))
        std = standardize(x)
        np.testing.assert_allclose(std.values[:, 0], [-1.0, 0.0, 1.0], atol=1e-15)

    def test_constant_gene_dropped(self):
        values = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        x = ExpressionMatrix(values, gene_ids=("a", "b"),
                             cell_ids=("c1", "c2", "c3"))
        std = standardize(x)
        assert std.constant_genes == frozenset({1})
        assert std.retained == (0,)
        assert std.retained_gene_ids == ("a",)
        assert std.values.shape == (3, 1)
        # Full-length parameter vectors survive for serialization.
        assert std.gene_means.shape == (2,)


class TestPearson:
    def test_matches_numpy_corrcoef(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((2, 40))
        expected = np.corrcoef(a, b)[0, 1]  # [DERIVED] independent oracle
        assert pearson(a, b) == pytest.approx(expected, abs=1e-14)

    def test_perfect_negative(self):
        a = np.array([1.0, 2.0, 4.0])
        r = pearson(a, -a)
        assert r == pytest.approx(-1.0, abs=1e-15)
        assert r >= -1.0

    def test_clamped_to_unit_interval(self):
        a = np.array([1.0, 2.0, 4.0, 8.0])
        assert pearson(a, a) == 1.0

    def test_constant_input_raises(self):
        with pytest.raises(ConstantInputError):
            pearson(np.ones(5), np.arange(5.0))

    def test_correlation_matrix_matches_pairwise(self):
        rng = np.random.default_rng(2)
        cols = rng.standard_normal((30, 5))
        r = correlation_matrix(cols)
        for i in range(5):
            for j in range(5):
                assert r[i, j] == pytest.approx(
                    pearson(cols[:, i], cols[:, j]), abs=1e-12
                )

    def test_constant_sd_tolerance_is_tight(self):
        assert CONSTANT_SD_TOL == 1e-12  # [TRIVIAL] documented constant
