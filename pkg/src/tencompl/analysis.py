"""Reconstruction, category histograms, tissue similarity and clustering."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, SinkError
from .ingest import IDENTITY, NormParams, denormalize
from .losses import CATEGORIES, category_counts
from .model import FactorModel, predict, softmax
from .tensor import SparseTensor3, TensorIndexMap, format_value

__all__ = [
    "CategoryHistogram",
    "SimilarityMatrix",
    "Dendrogram",
    "TissueDeviation",
    "predict_stripe",
    "iter_reconstruction",
    "reconstruct",
    "categorize",
    "tissue_similarity",
    "cluster_tissues",
    "tissue_deviation_report",
    "write_histogram",
    "write_similarity",
    "write_dendrogram",
    "write_deviation",
]

_STRIPE_BUDGET = 1 << 21


def predict_stripe(model: FactorModel, cols) -> np.ndarray:
    """Dense predictions (model units) for every (r, u) and the given columns.

    Returns an array of shape ``(R, U, len(cols))``.
    """
    p = model.params
    cols = np.asarray(cols, dtype=np.int64)
    Ic = p["I"][cols]
    if model.has_attention:
        logits = (
            p["Ra"][:, None, None, :] * p["Ua"][None, :, None, :] * p["Ia"][cols][None, None, :, :]
        )
        att = softmax(logits, axis=-1)
        prod = p["R"][:, None, None, :] * p["U"][None, :, None, :] * Ic[None, None, :, :]
        out = np.sum(prod * att, axis=-1)
    else:
        out = np.einsum("rd,ud,id->rui", p["R"], p["U"], Ic)
    if model.use_bias:
        out = out + p["bias_u"][None, :, None] + p["bias_i"][cols][None, None, :] + p["bias_global"][0]
    return out


def _stripe_width(model):
    R, U, _ = model.dims
    per_col = R * U * (model.rank if model.has_attention else 1)
    return max(1, _STRIPE_BUDGET // max(per_col, 1))


def iter_reconstruction(
    model: FactorModel,
    index_map: TensorIndexMap,
    norm: NormParams = IDENTITY,
    *,
    offset: float | None = None,
    observed: SparseTensor3 | None = None,
    threads: int = 1,
    stripe: int | None = None,
):
    """Yield ``(rows, cols, values)`` blocks covering every mapped 2D cell.

    Values are in original data units: the non-negative offset is removed and
    the normalization undone.  When ``observed`` is given its cells are
    passed through unchanged.  Blocks come in column-stripe order; within a
    stripe cells are ordered by column, then row.
    """
    if tuple(model.dims) != index_map.dims:
        raise ConfigError(f"model dims {model.dims} do not match index map dims {index_map.dims}")
    offset = model.offset if offset is None else offset
    R, U, I = model.dims
    width = stripe or _stripe_width(model)
    stripes = [np.arange(s, min(s + width, I)) for s in range(0, I, width)]
    if observed is not None and tuple(observed.dims) != tuple(model.dims):
        raise ConfigError(f"observed dims {observed.dims} differ from model dims {model.dims}")
    rows2d = (np.arange(R)[:, None] * index_map.row_stride + np.arange(U)[None, :]).ravel()

    def block(cols):
        vals = predict_stripe(model, cols) - offset
        vals = denormalize(vals, norm)  # (R, U, c)
        vals = np.ascontiguousarray(np.moveaxis(vals, 2, 0)).reshape(len(cols), R * U)
        if observed is not None and observed.nnz:
            # stripes are contiguous column ranges
            hit = (observed.i >= cols[0]) & (observed.i <= cols[-1])
            vals[observed.i[hit] - cols[0], observed.r[hit] * U + observed.u[hit]] = observed.values[hit]
        rr = np.tile(rows2d, len(cols))
        cc = np.repeat(cols, R * U)
        return rr, cc, vals.ravel()

    if threads > 1 and len(stripes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            # map() yields in submission order, so output order is thread-independent
            for out in ex.map(block, stripes):
                yield out
    else:
        for cols in stripes:
            yield block(cols)


def reconstruct(model, index_map, norm=IDENTITY, sink=None, **kwargs) -> int:
    """Stream the completed 2D matrix to ``sink`` as ``row<TAB>col<TAB>value`` lines.

    Returns the number of cells written.
    """
    n = 0
    try:
        sink.write("row\tcol\tvalue\n")
        for rows, cols, vals in iter_reconstruction(model, index_map, norm, **kwargs):
            sink.write(
                "".join(f"{r}\t{c}\t{v!r}\n" for r, c, v in zip(rows.tolist(), cols.tolist(), vals.tolist()))
            )
            n += rows.shape[0]
    except OSError as exc:
        raise SinkError(f"failed writing reconstruction: {exc}") from exc
    return n


@dataclass(frozen=True)
class CategoryHistogram:
    counts: tuple
    shares: tuple
    categories: tuple = CATEGORIES

    @property
    def n(self):
        return int(sum(self.counts))

    def l1_distance(self, other: "CategoryHistogram") -> float:
        return float(sum(abs(a - b) for a, b in zip(self.shares, other.shares)))


def categorize(values, thresholds=(0.585, 2.0)) -> CategoryHistogram:
    counts = category_counts(values, thresholds)
    total = counts.sum()
    shares = counts / total if total else np.zeros(5)
    return CategoryHistogram(tuple(int(c) for c in counts), tuple(float(s) for s in shares))


@dataclass
class SimilarityMatrix:
    """Cosine similarities between tissue factor rows.

    Rows of ``values`` belonging to zero factor vectors are NaN and listed in
    ``zero_rows``.
    """

    values: np.ndarray
    labels: list
    zero_rows: list = field(default_factory=list)


def tissue_similarity(model: FactorModel, labels=None) -> SimilarityMatrix:
    X = np.asarray(model.R, dtype=np.float64)
    R = X.shape[0]
    labels = list(labels) if labels is not None else [str(r) for r in range(R)]
    if len(labels) != R:
        raise ConfigError(f"{len(labels)} labels for {R} tissues")
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0
    Xn = np.divide(X, norms[:, None], out=np.zeros_like(X), where=~zero[:, None])
    S = Xn @ Xn.T
    S = 0.5 * (S + S.T)
    np.clip(S, -1.0, 1.0, out=S)
    # parallel rows would otherwise land an ulp short of 1
    S[np.all(Xn[:, None, :] == Xn[None, :, :], axis=2)] = 1.0
    np.fill_diagonal(S, 1.0)
    S[zero, :] = np.nan
    S[:, zero] = np.nan
    return SimilarityMatrix(S, labels, np.flatnonzero(zero).tolist())


@dataclass
class Dendrogram:
    """Agglomerative merge tree.

    ``merges`` rows are ``(left_id, right_id, height, size)`` with the same
    id convention as SciPy linkage matrices: leaves ``0..R-1``, merge ``m``
    creates cluster ``R + m``.
    """

    merges: list
    order: list
    labels: list
    linkage: str = "average"


def cluster_tissues(sim: SimilarityMatrix, linkage: str = "average") -> Dendrogram:
    """Agglomerative clustering on distance ``1 - similarity``.

    Ties in distance are broken by the smallest member label index of the
    two clusters, compared lexicographically.
    """
    if linkage not in ("average", "single", "complete"):
        raise ConfigError(f"unknown linkage {linkage!r}", flag="--linkage")
    S = np.asarray(sim.values, dtype=np.float64)
    n = S.shape[0]
    if n < 2:
        raise DataError("clustering needs at least 2 tissues")
    if np.isnan(S).any():
        raise DataError(f"similarity undefined for tissues {sim.zero_rows}")
    D = np.maximum(1.0 - S, 0.0)
    members = {j: [j] for j in range(n)}
    dist = {(a, b): float(D[a, b]) for a in range(n) for b in range(a + 1, n)}
    children = {}
    merges = []
    for node in range(n, 2 * n - 1):
        ids = sorted(members)
        best = None
        for x, a in enumerate(ids):
            for b in ids[x + 1:]:
                lo, hi = sorted((members[a][0], members[b][0]))
                key = (dist[(a, b)], lo, hi)
                if best is None or key < best[0]:
                    best = (key, a, b)
        (height, _, _), a, b = best
        if members[b][0] < members[a][0]:
            a, b = b, a
        size_a, size_b = len(members[a]), len(members[b])
        for c in members:
            if c in (a, b):
                continue
            da = dist.pop((min(a, c), max(a, c)))
            db = dist.pop((min(b, c), max(b, c)))
            if linkage == "single":
                d = min(da, db)
            elif linkage == "complete":
                d = max(da, db)
            else:
                d = (size_a * da + size_b * db) / (size_a + size_b)
            dist[(c, node)] = d
        del dist[(min(a, b), max(a, b))]
        # members lists stay sorted so [0] is the smallest label index
        members[node] = sorted(members.pop(a) + members.pop(b))
        children[node] = (a, b)
        merges.append((a, b, height, size_a + size_b))

    def leaves(node):
        if node < n:
            return [node]
        left, right = children[node]
        return leaves(left) + leaves(right)

    return Dendrogram(merges, leaves(2 * n - 2), list(sim.labels), linkage)


@dataclass(frozen=True)
class TissueDeviation:
    tissue: int
    label: str
    mean_diff: float | None  # None marks a tissue without observations
    n: int


def tissue_deviation_report(model: FactorModel, reference: SparseTensor3, labels=None, signed: bool = False):
    """Mean (absolute, unless ``signed``) prediction error per tissue."""
    if tuple(reference.dims) != tuple(model.dims):
        raise ConfigError(f"reference dims {reference.dims} differ from model dims {model.dims}")
    R = model.dims[0]
    labels = list(labels) if labels is not None else [str(r) for r in range(R)]
    diff = predict(model, reference.coords, data_units=True) - reference.values
    if not signed:
        diff = np.abs(diff)
    counts = np.bincount(reference.r, minlength=R)
    sums = np.bincount(reference.r, weights=diff, minlength=R)
    return [
        TissueDeviation(r, labels[r], float(sums[r] / counts[r]) if counts[r] else None, int(counts[r]))
        for r in range(R)
    ]


def _open(dest):
    if hasattr(dest, "write"):
        return dest, False
    return open(dest, "w", newline="\n"), True


def _emit(dest, lines):
    fh, close = _open(dest)
    try:
        fh.write("".join(line + "\n" for line in lines))
    finally:
        if close:
            fh.close()


def write_histogram(hist: CategoryHistogram, dest) -> None:
    lines = ["category\tshare\tcount"]
    lines += [f"{c}\t{format_value(s)}\t{n}" for c, s, n in zip(hist.categories, hist.shares, hist.counts)]
    _emit(dest, lines)


def write_similarity(sim: SimilarityMatrix, dest) -> None:
    lines = ["\t".join(["tissue"] + sim.labels)]
    for label, row in zip(sim.labels, sim.values):
        lines.append("\t".join([label] + ["NA" if math.isnan(v) else format_value(v) for v in row]))
    _emit(dest, lines)


def write_dendrogram(tree: Dendrogram, dest) -> None:
    lines = ["left\tright\theight\tsize"]
    lines += [f"{a}\t{b}\t{format_value(h)}\t{s}" for a, b, h, s in tree.merges]
    lines.append("order\t" + "\t".join(tree.labels[j] for j in tree.order))
    _emit(dest, lines)


def write_deviation(report, dest) -> None:
    lines = ["tissue\tmean_abs_diff\tn"]
    lines += [f"{d.label}\t{'NA' if d.mean_diff is None else format_value(d.mean_diff)}\t{d.n}" for d in report]
    _emit(dest, lines)
