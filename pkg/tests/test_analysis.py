import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.cluster.hierarchy import linkage as scipy_linkage
from scipy.spatial.distance import squareform

from tencompl.analysis import (
    SimilarityMatrix,
    categorize,
    cluster_tissues,
    iter_reconstruction,
    reconstruct,
    tissue_deviation_report,
    tissue_similarity,
    write_dendrogram,
    write_deviation,
    write_histogram,
    write_similarity,
)
from tencompl.errors import DataError, SinkError
from tencompl.ingest import NormParams
from tencompl.model import FactorModel, init_model, predict
from tencompl.tensor import SparseTensor3, TensorIndexMap


def _tissue_model(R):
    R = np.asarray(R, dtype=float)
    k = R.shape[1]
    return FactorModel((R.shape[0], 2, 2), k, "plain", {"R": R, "U": np.ones((2, k)), "I": np.ones((2, k))})


def test_similarity_examples():
    sim = tissue_similarity(_tissue_model([[1, 0], [0, 1], [1, 1]]), ["a", "b", "c"])
    assert sim.values[0, 0] == 1.0
    assert sim.values[0, 1] == 0.0
    assert sim.values[0, 2] == pytest.approx(1 / math.sqrt(2))
    assert sim.labels == ["a", "b", "c"]


def test_zero_rows_are_flagged_not_fabricated():
    sim = tissue_similarity(_tissue_model([[1, 0], [0, 0], [1, 1]]))
    assert sim.zero_rows == [1]
    assert np.all(np.isnan(sim.values[1])) and np.all(np.isnan(sim.values[:, 1]))
    with pytest.raises(DataError):
        cluster_tissues(sim)


def _sim(values):
    values = np.asarray(values, dtype=float)
    return SimilarityMatrix(values, [str(j) for j in range(values.shape[0])])


def test_cluster_examples():
    two = cluster_tissues(_sim([[1, 0.25], [0.25, 1]]))
    assert two.merges == [(0, 1, 0.75, 2)]
    three = cluster_tissues(_sim([[1, 0.9, 0.1], [0.9, 1, 0.1], [0.1, 0.1, 1]]))
    assert three.merges[0][:2] == (0, 1)
    assert three.merges[1][2] == pytest.approx(0.9)
    same = cluster_tissues(tissue_similarity(_tissue_model([[1, 2]] * 4)))
    assert all(h == 0.0 for _, _, h, _ in same.merges)
    with pytest.raises(DataError):
        cluster_tissues(_sim([[1.0]]))


def test_ties_break_on_smallest_member_index():
    # all pairs equally similar: the cluster holding label 0 keeps absorbing
    tree = cluster_tissues(_sim(np.full((4, 4), 0.5) + 0.5 * np.eye(4)))
    assert [m[:2] for m in tree.merges] == [(0, 1), (4, 2), (5, 3)]
    assert tree.order == [0, 1, 2, 3]


def _membership(merges, n):
    members = {j: frozenset([j]) for j in range(n)}
    out = []
    for step, row in enumerate(merges):
        a, b = int(row[0]), int(row[1])
        members[n + step] = members[a] | members[b]
        out.append((members[n + step], round(float(row[2]), 9)))
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(1, 6), st.integers(0, 10_000), st.sampled_from(["average", "single", "complete"]))
def test_clustering_matches_scipy(n, k, seed, method):
    X = np.random.default_rng(seed).normal(size=(n, k))
    sim = tissue_similarity(_tissue_model(X))
    tree = cluster_tissues(sim, method)
    D = np.maximum(1.0 - sim.values, 0.0)
    np.fill_diagonal(D, 0.0)
    Z = scipy_linkage(squareform(D, checks=False), method=method)
    heights = [h for _, _, h, _ in tree.merges]
    np.testing.assert_allclose(heights, Z[:, 2], rtol=1e-9, atol=1e-12)
    if len(set(np.round(heights, 9))) == len(heights):
        assert _membership(tree.merges, n) == _membership(Z, n)
    assert sorted(tree.order) == list(range(n))


def test_reconstruction_cell_count_and_raw_values():
    model = init_model((2, 2, 2), 2, "plain", seed=0)
    imap = TensorIndexMap.create(2, 2, 2)
    buf = io.StringIO()
    assert reconstruct(model, imap, sink=buf) == 2 * imap.row_stride * 2
    lines = buf.getvalue().splitlines()
    assert lines[0] == "row\tcol\tvalue"
    cells = {(int(r), int(c)): float(v) for r, c, v in (line.split("\t") for line in lines[1:])}
    for (row, col), v in cells.items():
        assert v == predict(model, [[row // 2, row % 2, col]])[0]


def test_reconstruction_denormalizes_and_passes_through():
    model = init_model((3, 4, 5), 3, "attention", seed=1)
    model.offset = 0.25
    imap = TensorIndexMap.create(3, 4, 5, "paper-exact")
    norm = NormParams("standard", 2.0, 3.0)
    obs = SparseTensor3((3, 4, 5), [[0, 1, 2], [2, 3, 4]], [0.1 + 0.2, -7.5])
    seen = {}
    for rows, cols, vals in iter_reconstruction(model, imap, norm, observed=obs, stripe=2):
        for r, c, v in zip(rows, cols, vals):
            seen[(int(r), int(c))] = v
    assert len(seen) == 3 * 4 * 5
    assert seen[(imap.row_stride * 0 + 1, 2)] == 0.1 + 0.2
    assert seen[(imap.row_stride * 2 + 3, 4)] == -7.5
    expected = (predict(model, [[1, 2, 3]])[0] - 0.25) * 3.0 + 2.0
    assert seen[(imap.row_stride * 1 + 2, 3)] == pytest.approx(expected, rel=1e-14)


def test_reconstruction_is_thread_and_stripe_invariant():
    model = init_model((3, 5, 17), 4, "attention", seed=2)
    imap = TensorIndexMap.create(3, 5, 17)
    outs = []
    for threads, stripe in [(1, None), (1, 3), (4, 3), (2, 1)]:
        buf = io.StringIO()
        reconstruct(model, imap, sink=buf, threads=threads, stripe=stripe)
        outs.append(sorted(buf.getvalue().splitlines()))
    assert all(o == outs[0] for o in outs)
    a, b = io.StringIO(), io.StringIO()
    reconstruct(model, imap, sink=a, threads=1, stripe=3)
    reconstruct(model, imap, sink=b, threads=4, stripe=3)
    assert a.getvalue() == b.getvalue()


def test_sink_failure_is_reported():
    class Broken:
        def write(self, text):
            raise OSError("disk full")

    model = init_model((2, 2, 2), 1, "plain")
    with pytest.raises(SinkError):
        reconstruct(model, TensorIndexMap.create(2, 2, 2), sink=Broken())


def test_categorize_examples():
    assert categorize(np.zeros(10)).shares == (0.0, 0.0, 1.0, 0.0, 0.0)
    assert categorize([-3, -1, 0, 1, 3]).counts == (1, 1, 1, 1, 1)


def test_deviation_report_examples():
    model = FactorModel((2, 1, 2), 1, "plain", {"R": np.ones((2, 1)), "U": np.ones((1, 1)), "I": np.zeros((2, 1))})
    ref = SparseTensor3((2, 1, 2), [[0, 0, 0], [0, 0, 1]], [1.0, -3.0])
    report = tissue_deviation_report(model, ref, ["LI", "KI"])
    assert report[0].mean_diff == 2.0 and report[0].n == 2
    assert report[1].mean_diff is None and report[1].n == 0
    assert tissue_deviation_report(model, ref, signed=True)[0].mean_diff == 1.0
    perfect = tissue_deviation_report(model, ref.with_values([0.0, 0.0]))
    assert perfect[0].mean_diff == 0.0


def test_report_writers(tmp_path):
    sim = tissue_similarity(_tissue_model([[1, 0], [0, 0], [1, 1]]))
    write_similarity(sim, tmp_path / "s.tsv")
    assert "NA" in (tmp_path / "s.tsv").read_text()
    write_histogram(categorize([0.0, 1.0]), tmp_path / "h.tsv")
    assert (tmp_path / "h.tsv").read_text().splitlines()[3] == "0\t0.5\t1"
    tree = cluster_tissues(_sim([[1, 0.9, 0.1], [0.9, 1, 0.1], [0.1, 0.1, 1]]))
    write_dendrogram(tree, tmp_path / "d.tsv")
    assert (tmp_path / "d.tsv").read_text().splitlines()[-1] == "order\t0\t1\t2"
    model = _tissue_model([[1.0], [2.0]])
    write_deviation(tissue_deviation_report(model, SparseTensor3((2, 2, 2), [[0, 0, 0]], [0.5])), tmp_path / "v.tsv")
    assert (tmp_path / "v.tsv").read_text().splitlines()[1:] == ["0\t0.5\t1", "1\tNA\t0"]
