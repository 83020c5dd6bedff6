import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tencompl.errors import ConfigError, NormalizationDegenerateError, ParseError, SchemaError
from tencompl.ingest import (
    NormParams,
    RowMeta,
    apply_normalization,
    denormalize,
    holdout_split,
    normalize,
    parse_matrix,
    preprocess,
    remove_outliers,
)
from tencompl.tensor import SparseTensor3, to_tensor

META = "row_id,platform,tissue,gene\nA,RU1,LI,g1\nB,RU1,KI,g1\n"


def _gene_tensor(values):
    n = len(values)
    return SparseTensor3((1, 1, n), np.column_stack([np.zeros(n, int), np.zeros(n, int), np.arange(n)]), values)


def test_parse_counts_missing_cells():
    matrix, meta, imap = parse_matrix(io.StringIO("row,t1,t2\nA,1.0,NA\nB,2.5,-0.5\n"), io.StringIO(META))
    assert matrix.nnz == 3
    assert imap.dims == (2, 1, 2)
    assert meta.treatments == ["t1", "t2"]
    t = to_tensor(matrix, imap).sorted()
    assert t.coords.tolist() == [[0, 0, 0], [1, 0, 0], [1, 0, 1]]


def test_parse_tab_delimited_and_header_without_corner():
    table = "t1\tt2\tt3\nA\t1\t\t3\nB\t4\t5\t6\n"
    meta = "A\tRU1\tLI\tg1\nB\tRU1\tLI\tg2\n"
    matrix, _, imap = parse_matrix(io.StringIO(table), io.StringIO(meta))
    assert matrix.nnz == 5 and imap.dims == (1, 2, 3)


def test_index_map_from_metadata_labels():
    meta = "row_id,platform,tissue,gene\n" + "".join(
        f"{t}{g},RU1,{t},{g}\n" for t in ("LI", "KI") for g in ("a", "b", "c")
    )
    table = "row,x\n" + "".join(f"{t}{g},1\n" for t in ("LI", "KI") for g in ("a", "b", "c"))
    _, meta_out, imap = parse_matrix(io.StringIO(table), io.StringIO(meta))
    assert (imap.tissue_count, imap.gene_count) == (2, 3)
    assert meta_out.tissue_labels == ["LI", "KI"]
    assert RowMeta.from_dict(meta_out.to_dict()) == meta_out


def test_parse_errors():
    with pytest.raises(ParseError, match="line 3"):
        parse_matrix(io.StringIO("row,t1\nA,1\nB,abc\n"), io.StringIO(META))
    with pytest.raises(SchemaError):
        parse_matrix(io.StringIO("row,t1\nA,1\n"), io.StringIO(META))


def test_platform_collision_requires_tissue_platform_key():
    meta = "row_id,platform,tissue,gene\nA,RU1,LI,g1\nB,RG2,LI,g1\n"
    table = "row,t1\nA,1\nB,2\n"
    with pytest.raises(SchemaError, match="tissue-platform"):
        parse_matrix(io.StringIO(table), io.StringIO(meta))
    _, meta_out, imap = parse_matrix(io.StringIO(table), io.StringIO(meta), tissue_key="tissue-platform")
    assert imap.tissue_count == 2 and len(meta_out.tissue_labels) == 2


def test_paper_exact_stride_leaves_padding():
    _, _, imap = parse_matrix(io.StringIO("row,t1\nA,1\nB,2\n"), io.StringIO(META), stride_mode="paper-exact")
    assert imap.row_stride == 8 * imap.gene_count


def test_outlier_threshold_on_five_point_gene():
    # the 100 has population z = 2 = sqrt(n - 1), the largest any 5-point sample allows
    t = _gene_tensor([0.0, 0.0, 0.0, 0.0, 100.0])
    z = abs(100.0 - 20.0) / np.std(t.values)
    assert z == pytest.approx(2.0)
    assert remove_outliers(t, 1.5).values.tolist() == [0.0] * 4
    assert remove_outliers(t, 3.0) == t
    assert remove_outliers(t, math.inf) == t


def test_outliers_leave_constant_and_small_genes():
    assert remove_outliers(_gene_tensor([2.0] * 6), 0.1) == _gene_tensor([2.0] * 6)
    assert remove_outliers(_gene_tensor([0.0, 50.0]), 0.1) == _gene_tensor([0.0, 50.0])
    with pytest.raises(ConfigError):
        remove_outliers(_gene_tensor([1.0]), 0.0)


def test_outliers_match_brute_force(rng):
    coords = np.column_stack([rng.integers(0, 3, 400), rng.integers(0, 7, 400), rng.integers(0, 50, 400)])
    _, first = np.unique(np.ravel_multi_index(coords.T, (3, 7, 50)), return_index=True)
    coords = coords[np.sort(first)]
    vals = rng.standard_t(2, size=coords.shape[0])
    t = SparseTensor3((3, 7, 50), coords, vals)
    keep = []
    for n in range(t.nnz):
        g = vals[coords[:, 1] == coords[n, 1]]
        keep.append(g.size < 3 or abs(vals[n] - g.mean()) <= 2.5 * g.std())
    assert remove_outliers(t, 2.5) == t.take(np.array(keep))


def test_normalization_examples():
    t = _gene_tensor([0.0, 10.0])
    n, p = normalize(t, "minmax")
    assert n.values.tolist() == [0.0, 1.0] and (p.min, p.max) == (0.0, 10.0)
    assert denormalize(n.values, p).tolist() == [0.0, 10.0]
    s, p = normalize(_gene_tensor([1.0, 3.0]), "standard")
    assert s.values.tolist() == [-1.0, 1.0] and (p.mean, p.std) == (2.0, 1.0)
    assert denormalize(s.values, p).tolist() == [1.0, 3.0]
    ident, p = normalize(t, "none")
    assert ident == t and p.method == "none"
    assert denormalize([0.5, -1.0], NormParams("standard", 4.0, 1.0)).tolist() == [4.5, 3.0]
    with pytest.raises(NormalizationDegenerateError):
        normalize(_gene_tensor([3.0, 3.0]), "standard")
    with pytest.raises(NormalizationDegenerateError):
        normalize(_gene_tensor([3.0]), "minmax")


def test_norm_params_file_round_trip(tmp_path):
    p = NormParams("standard", 0.1 + 0.2, 1 / 3)
    p.dump(tmp_path / "n.json")
    assert NormParams.load(tmp_path / "n.json") == p


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=30).filter(lambda v: max(v) - min(v) > 1e-6),
    st.sampled_from(["minmax", "standard"]),
)
def test_normalize_round_trip(values, method):
    t = _gene_tensor(values)
    n, p = normalize(t, method)
    np.testing.assert_allclose(denormalize(n.values, p), t.values, rtol=1e-12, atol=1e-9)


def test_holdout_split_counts_and_determinism():
    t = _gene_tensor(np.arange(10.0))
    s = holdout_split(t, 0.2, seed=3)
    assert (s.validation.nnz, s.train.nnz) == (2, 8)
    again = holdout_split(t, 0.2, seed=3)
    assert again.train == s.train and again.validation == s.validation
    assert sorted(s.train.values.tolist() + s.validation.values.tolist()) == list(np.arange(10.0))
    for bad in (0.0, 1.0, 1.5, -0.1):
        with pytest.raises(ConfigError) as info:
            holdout_split(t, bad)
        assert info.value.flag == "--fraction"


def test_preprocess_uses_training_statistics_only():
    t = _gene_tensor(np.arange(20.0))
    split, params = preprocess(t, fraction=0.25, seed=1, z_threshold=math.inf)
    train_raw = denormalize(split.train.values, params)
    assert params.mean == pytest.approx(train_raw.mean())
    assert params.std == pytest.approx(train_raw.std())
    _, full_stats = preprocess(t, fraction=0.25, seed=1, z_threshold=math.inf, paper_order=True)
    assert full_stats.mean == pytest.approx(9.5)
    val = apply_normalization(holdout_split(t, 0.25, 1).validation, params)
    assert val == split.validation
