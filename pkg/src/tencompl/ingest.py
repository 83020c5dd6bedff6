"""Parsing, outlier removal, normalization and holdout splitting."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .errors import ConfigError, NormalizationDegenerateError, ParseError, SchemaError
from .tensor import SparseMatrix, SparseTensor3, TensorIndexMap, map_row

__all__ = [
    "RowMeta",
    "NormParams",
    "HoldoutSplit",
    "parse_matrix",
    "remove_outliers",
    "normalize",
    "apply_normalization",
    "denormalize",
    "holdout_split",
    "preprocess",
    "DEFAULT_Z_THRESHOLD",
    "DEFAULT_HOLDOUT_FRACTION",
]

DEFAULT_Z_THRESHOLD = 4.0
DEFAULT_HOLDOUT_FRACTION = 0.1
MISSING = ("", "NA")
META_COLUMNS = ("row_id", "platform", "tissue", "gene")


@dataclass
class RowMeta:
    """Per-row labels of the 2D matrix, in metadata file order.

    ``positions[j]`` is the canonical 2D row (``r * stride + u``) of record j.
    """

    row_ids: list
    platforms: list
    tissues: list
    genes: list
    tissue_labels: list
    gene_labels: list
    treatments: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    tissue_key: str = "tissue"

    def to_dict(self):
        return {
            "tissue_key": self.tissue_key,
            "tissue_labels": self.tissue_labels,
            "gene_labels": self.gene_labels,
            "treatments": self.treatments,
            "rows": [
                [rid, p, t, g, pos]
                for rid, p, t, g, pos in zip(
                    self.row_ids, self.platforms, self.tissues, self.genes, self.positions
                )
            ],
        }

    @classmethod
    def from_dict(cls, d):
        rows = d["rows"]
        return cls(
            row_ids=[r[0] for r in rows],
            platforms=[r[1] for r in rows],
            tissues=[r[2] for r in rows],
            genes=[r[3] for r in rows],
            tissue_labels=list(d["tissue_labels"]),
            gene_labels=list(d["gene_labels"]),
            treatments=list(d["treatments"]),
            positions=[int(r[4]) for r in rows],
            tissue_key=d.get("tissue_key", "tissue"),
        )


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _read_rows(stream: Iterable[str]):
    lines = iter(stream)
    try:
        header = next(lines)
    except StopIteration:
        return None, iter(())
    delim = _detect_delimiter(header)

    def chain():
        yield header
        yield from lines

    return delim, csv.reader(chain(), delimiter=delim)


def _parse_metadata(meta_stream, tissue_key):
    delim, reader = _read_rows(meta_stream)
    if delim is None:
        raise SchemaError("metadata file is empty")
    records = []
    for lineno, fields in enumerate(reader, start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        fields = [f.strip() for f in fields]
        if lineno == 1 and fields[0].lower() == "row_id":
            if [f.lower() for f in fields[:4]] != list(META_COLUMNS):
                raise SchemaError(f"metadata header must be {', '.join(META_COLUMNS)}")
            continue
        if len(fields) != 4:
            raise ParseError(f"expected 4 metadata fields, got {len(fields)}", line=lineno)
        records.append(tuple(fields))

    tissue_ids: dict = {}
    gene_ids: dict = {}
    by_row: dict = {}
    seen_triples = set()
    for lineno, (rid, platform, tissue, gene) in enumerate(records, start=1):
        if rid in by_row:
            raise SchemaError(f"duplicate metadata row_id {rid!r}")
        triple = (tissue, gene, platform)
        if triple in seen_triples:
            raise SchemaError(f"duplicate (tissue, gene, platform) triple {triple}")
        seen_triples.add(triple)
        tkey = tissue if tissue_key == "tissue" else f"{tissue}:{platform}"
        tissue_ids.setdefault(tkey, len(tissue_ids))
        gene_ids.setdefault(gene, len(gene_ids))
        by_row[rid] = (platform, tissue, gene, tissue_ids[tkey], gene_ids[gene])
    return records, by_row, list(tissue_ids), list(gene_ids)


def parse_matrix(
    table_stream: Iterable[str],
    metadata_stream: Iterable[str],
    *,
    stride_mode: str = "block",
    tissue_key: str = "tissue",
):
    """Read the 2D expression matrix and its row metadata.

    Parameters
    ----------
    table_stream : iterable of str
        Header of treatment identifiers, then one line per row: row id
        followed by values (empty or ``NA`` for missing).
    metadata_stream : iterable of str
        ``row_id, platform, tissue, gene`` records.
    stride_mode : {'block', 'paper-exact'}
    tissue_key : {'tissue', 'tissue-platform'}
        Whether the tissue mode enumerates tissues or tissue-platform pairs.

    Returns
    -------
    matrix : SparseMatrix
        Observed cells at their canonical 2D rows.
    meta : RowMeta
    index_map : TensorIndexMap
    """
    if tissue_key not in ("tissue", "tissue-platform"):
        raise ConfigError(f"unknown tissue key {tissue_key!r}", flag="--tissue-key")
    records, by_row, tissue_labels, gene_labels = _parse_metadata(metadata_stream, tissue_key)

    delim, reader = _read_rows(table_stream)
    if delim is None:
        raise SchemaError("matrix file is empty")
    header = [h.strip() for h in next(reader)]
    treatments = None
    rows, cols, vals = [], [], []
    seen_ids = []
    seen_positions = {}
    index_map = None
    for lineno, fields in enumerate(reader, start=2):
        if not fields or all(not f.strip() for f in fields):
            continue
        if treatments is None:
            # a header with one more field than values carries a corner label
            if len(header) == len(fields):
                treatments = header[1:]
            elif len(header) == len(fields) - 1:
                treatments = header
            else:
                raise ParseError(
                    f"row has {len(fields) - 1} values but header has {len(header)} fields",
                    line=lineno,
                )
            if not treatments:
                raise SchemaError("matrix has no treatment columns")
            index_map = TensorIndexMap.create(
                len(tissue_labels) or 1, len(gene_labels) or 1, len(treatments), stride_mode
            )
        if len(fields) != len(treatments) + 1:
            raise ParseError(
                f"expected {len(treatments) + 1} fields, got {len(fields)}", line=lineno
            )
        rid = fields[0].strip()
        if rid not in by_row:
            raise SchemaError(f"line {lineno}: row {rid!r} has no metadata record")
        _, _, _, r, u = by_row[rid]
        pos = map_row(index_map, r, u)
        if pos in seen_positions:
            raise SchemaError(
                f"line {lineno}: row {rid!r} maps to the same (tissue, gene) as row "
                f"{seen_positions[pos]!r}; use tissue key 'tissue-platform'"
            )
        seen_positions[pos] = rid
        seen_ids.append(rid)
        for j, cell in enumerate(fields[1:]):
            cell = cell.strip()
            if cell in MISSING:
                continue
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", line=lineno) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite cell {cell!r}", line=lineno)
            rows.append(pos)
            cols.append(j)
            vals.append(v)

    if treatments is None:
        raise SchemaError("matrix file has no data rows")
    if len(seen_ids) != len(records):
        raise SchemaError(
            f"metadata has {len(records)} rows but matrix has {len(seen_ids)}"
        )
    meta = RowMeta(
        row_ids=[r[0] for r in records],
        platforms=[r[1] for r in records],
        tissues=[r[2] for r in records],
        genes=[r[3] for r in records],
        tissue_labels=tissue_labels,
        gene_labels=gene_labels,
        treatments=treatments,
        positions=[map_row(index_map, by_row[r[0]][3], by_row[r[0]][4]) for r in records],
        tissue_key=tissue_key,
    )
    matrix = SparseMatrix((index_map.n_rows, len(treatments)), rows, cols, vals)
    return matrix, meta, index_map


def remove_outliers(tensor: SparseTensor3, z_threshold: float = DEFAULT_Z_THRESHOLD) -> SparseTensor3:
    """Drop entries whose per-gene z-score exceeds ``z_threshold``.

    Statistics are the population mean and standard deviation of each gene's
    observed values across all tissues and treatments.  Genes with fewer than
    three observations, or zero spread, are left untouched.
    """
    if not z_threshold > 0:
        raise ConfigError("z_threshold must be positive", flag="--z-threshold")
    if tensor.nnz == 0 or math.isinf(z_threshold):
        return tensor
    U = tensor.dims[1]
    u, v = tensor.u, tensor.values
    counts = np.bincount(u, minlength=U)
    sums = np.bincount(u, weights=v, minlength=U)
    mean = np.divide(sums, counts, out=np.zeros(U), where=counts > 0)
    dev = v - mean[u]
    var = np.bincount(u, weights=dev * dev, minlength=U)
    std = np.sqrt(np.divide(var, counts, out=np.zeros(U), where=counts > 0))
    eligible = counts[u] >= 3
    drop = eligible & (np.abs(dev) > z_threshold * std[u])
    if not drop.any():
        return tensor
    return tensor.take(~drop)


@dataclass(frozen=True)
class NormParams:
    """Parameters of an affine normalization ``x -> (x - shift) / scale``."""

    method: str
    shift: float = 0.0
    scale: float = 1.0

    @property
    def min(self):
        return self.shift if self.method == "minmax" else None

    @property
    def max(self):
        return self.shift + self.scale if self.method == "minmax" else None

    @property
    def mean(self):
        return self.shift if self.method == "standard" else None

    @property
    def std(self):
        return self.scale if self.method == "standard" else None

    def to_dict(self):
        return {"method": self.method, "shift": self.shift, "scale": self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(d["method"], float(d["shift"]), float(d["scale"]))

    def dump(self, path):
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


IDENTITY = NormParams("none")


def _fit_params(values: np.ndarray, method: str) -> NormParams:
    if method == "none":
        return IDENTITY
    if method == "minmax":
        if values.size < 2:
            raise NormalizationDegenerateError("minmax needs at least 2 values")
        lo, hi = float(values.min()), float(values.max())
        if not hi > lo:
            raise NormalizationDegenerateError("minmax needs at least 2 distinct values")
        return NormParams("minmax", lo, hi - lo)
    if method == "standard":
        if values.size < 2:
            raise NormalizationDegenerateError("standard scaling needs at least 2 entries")
        mean = math.fsum(values) / values.size
        std = math.sqrt(math.fsum((values - mean) ** 2) / values.size)
        if not std > 0:
            raise NormalizationDegenerateError("standard deviation is zero")
        return NormParams("standard", mean, std)
    raise ConfigError(f"unknown normalization method {method!r}", flag="--normalize")


def apply_normalization(tensor: SparseTensor3, params: NormParams) -> SparseTensor3:
    if params.method == "none":
        return tensor
    return tensor.with_values((tensor.values - params.shift) / params.scale)


def normalize(tensor: SparseTensor3, method: str = "standard"):
    """Fit global normalization statistics and apply them.

    Returns
    -------
    (SparseTensor3, NormParams)
    """
    params = _fit_params(tensor.values, method)
    return apply_normalization(tensor, params), params


def denormalize(values, params: NormParams):
    values = np.asarray(values, dtype=np.float64)
    if params.method == "none":
        return values
    return values * params.scale + params.shift


@dataclass(frozen=True)
class HoldoutSplit:
    train: SparseTensor3
    validation: SparseTensor3
    seed: int
    fraction: float


def holdout_split(tensor: SparseTensor3, fraction: float = DEFAULT_HOLDOUT_FRACTION, seed: int = 0) -> HoldoutSplit:
    """Withhold ``round(fraction * N)`` uniformly chosen entries for validation."""
    if not (0 < fraction < 1):
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}", flag="--fraction")
    n = tensor.nnz
    if n < 2:
        raise ConfigError("holdout split needs at least 2 entries")
    n_val = int(math.floor(fraction * n + 0.5))
    perm = np.random.default_rng(seed).permutation(n)
    is_val = np.zeros(n, dtype=bool)
    is_val[perm[:n_val]] = True
    return HoldoutSplit(tensor.take(~is_val), tensor.take(is_val), seed, fraction)


def preprocess(
    tensor: SparseTensor3,
    *,
    z_threshold: float = DEFAULT_Z_THRESHOLD,
    fraction: float = DEFAULT_HOLDOUT_FRACTION,
    method: str = "standard",
    seed: int = 0,
    paper_order: bool = False,
):
    """Outlier removal, holdout split and normalization.

    By default normalization statistics come from the training portion only.
    ``paper_order`` normalizes the full tensor before splitting instead.

    Returns
    -------
    (HoldoutSplit, NormParams)
    """
    cleaned = remove_outliers(tensor, z_threshold)
    if paper_order:
        normed, params = normalize(cleaned, method)
        return holdout_split(normed, fraction, seed), params
    split = holdout_split(cleaned, fraction, seed)
    train, params = normalize(split.train, method)
    val = apply_normalization(split.validation, params)
    return HoldoutSplit(train, val, seed, fraction), params
