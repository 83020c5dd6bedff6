"""Synthetic ground truth for recovery checks.

``gen_lowrank`` draws a noiseless or noisy CP tensor; ``gen_skewed`` bends
a low-rank backbone into the heavily zero-centred category distribution
typical of toxicogenomic log fold changes.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .losses import CATEGORIES
from .model import FactorModel, predict
from .tensor import SparseTensor3, write_tensor

__all__ = [
    "CATEGORY_SHARES",
    "TISSUE_SHARES",
    "SynthSpec",
    "GroundTruth",
    "SynthResult",
    "gen_lowrank",
    "gen_skewed",
    "recovery_error",
    "write_synth",
]

log = logging.getLogger(__name__)

# measured shares of categories -2, -1, 0, +1, +2 (they sum to 99.976 %)
CATEGORY_SHARES = (0.0003, 0.0409, 0.9194, 0.0388, 0.00036)

# observed gene-expression measurements per tissue, millions
TISSUE_SHARES = {
    "LI": 34.5,
    "KI": 19.0,
    "HE": 11.8,
    "BM": 2.7,
    "BR": 0.55,
    "IN": 0.17,
    "SP": 1.5,
    "SM": 1.5,
}

SKEW_EXTREME = 4.0


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple = (30, 40, 50)
    rank: int = 3
    density: float = 0.2
    noise: float = 0.0
    mode: str = "gaussian"  # or "table2-skewed"
    seed: int = 0
    sampling: str = "uniform"  # or "stratified"
    thresholds: tuple = (0.585, 2.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive sizes, got {self.dims}", flag="--dims")
        if not (0 < self.density <= 1):
            raise ConfigError(f"density must be in (0, 1], got {self.density}", flag="--density")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1", flag="--rank")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0", flag="--noise")
        if self.mode not in ("gaussian", "table2-skewed"):
            raise ConfigError(f"unknown mode {self.mode!r}", flag="--mode")
        if self.sampling not in ("uniform", "stratified"):
            raise ConfigError(f"unknown sampling {self.sampling!r}", flag="--sampling")

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["thresholds"] = list(self.thresholds)
        return d


class GroundTruth:
    """Exact CP values at any coordinate."""

    def __init__(self, factors):
        self.factors = tuple(np.asarray(f, dtype=np.float64) for f in factors)
        self.dims = tuple(f.shape[0] for f in self.factors)

    def __call__(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        A, B, C = self.factors
        return np.sum(A[coords[:, 0]] * B[coords[:, 1]] * C[coords[:, 2]], axis=1)

    def dense(self) -> np.ndarray:
        return np.einsum("rd,ud,id->rui", *self.factors)

    def as_model(self) -> FactorModel:
        A, B, C = self.factors
        return FactorModel(self.dims, A.shape[1], "plain", {"R": A.copy(), "U": B.copy(), "I": C.copy()})


@dataclass
class SynthResult:
    tensor: SparseTensor3
    truth: GroundTruth
    warnings: list = field(default_factory=list)


def _tissue_weights(R):
    w = np.array(list(TISSUE_SHARES.values()))
    return np.resize(w, R)


def _sample_coords(spec: SynthSpec, rng) -> np.ndarray:
    R, U, I = spec.dims
    total = R * U * I
    n_obs = max(1, int(math.floor(spec.density * total + 0.5)))
    if spec.sampling == "uniform":
        lin = np.sort(rng.choice(total, size=n_obs, replace=False))
    else:
        w = _tissue_weights(R)
        want = np.minimum(np.floor(n_obs * w / w.sum() + 0.5).astype(np.int64), U * I)
        parts = []
        for r in range(R):
            if want[r]:
                parts.append(r * U * I + np.sort(rng.choice(U * I, size=int(want[r]), replace=False)))
        lin = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return np.column_stack(np.unravel_index(lin, spec.dims)).astype(np.int64)


def _coverage_warnings(coords, dims):
    out = []
    for mode, n in enumerate(dims):
        missing = n - np.unique(coords[:, mode]).size
        if missing:
            out.append(f"mode {mode}: {missing} of {n} indices have no observations")
    for msg in out:
        log.warning(msg)
    return out


def gen_lowrank(spec: SynthSpec) -> SynthResult:
    """CP tensor with i.i.d. standard normal factors, sampled at ``density``."""
    rng = np.random.default_rng(spec.seed)
    factors = [rng.standard_normal((n, spec.rank)) for n in spec.dims]
    truth = GroundTruth(factors)
    coords = _sample_coords(spec, rng)
    values = truth(coords)
    if spec.noise:
        values = values + spec.noise * rng.standard_normal(values.shape[0])
    return SynthResult(SparseTensor3(spec.dims, coords, values), truth, _coverage_warnings(coords, spec.dims))


def _category_counts(n, shares=CATEGORY_SHARES):
    shares = np.asarray(shares) / np.sum(shares)
    counts = np.floor(shares * n + 0.5).astype(np.int64)
    counts[2] += n - counts.sum()
    return counts


def gen_skewed(spec: SynthSpec) -> SynthResult:
    """Low-rank backbone bent into the reference category distribution.

    Observed entries are ranked by a CP backbone value; the lowest ranks
    become category -2, the next -1 and so on, with exact counts from the
    renormalized shares.  Inside each category the value is an affine
    function of the backbone, spanning that category's interval.
    """
    if spec.mode != "table2-skewed":
        raise ConfigError("gen_skewed needs mode 'table2-skewed'", flag="--mode")
    low = gen_lowrank(SynthSpec(spec.dims, spec.rank, spec.density, spec.noise, "gaussian", spec.seed, spec.sampling))
    tensor, warnings = low.tensor, list(low.warnings)
    z = tensor.values
    n = z.shape[0]
    counts = _category_counts(n)
    if np.any(counts == 0):
        msg = f"N={n} too small: some categories receive no entries ({counts.tolist()})"
        log.warning(msg)
        warnings.append(msg)
    t1, t2 = spec.thresholds
    e = max(SKEW_EXTREME, 2 * t2)
    bounds = {-2: (-e, -t2), -1: (-t2, -t1), 0: (-t1, t1), 1: (t1, t2), 2: (t2, e)}
    order = np.argsort(z, kind="stable")
    values = np.empty(n)
    start = 0
    for cat, cnt in zip(CATEGORIES, counts):
        idx = order[start:start + cnt]
        start += cnt
        if cnt == 0:
            continue
        lo, hi = bounds[cat]
        zc = z[idx]
        span = zc[-1] - zc[0]
        frac = (zc - zc[0]) / span if span > 0 else np.full(cnt, 0.5)
        values[idx] = lo + (hi - lo) * (0.01 + 0.98 * frac)
    return SynthResult(tensor.with_values(values), low.truth, warnings)


def recovery_error(model: FactorModel, truth, coords=None) -> float:
    """``||prediction - truth|| / ||truth||`` over ``coords`` (all cells if None)."""
    if tuple(model.dims) != tuple(truth.dims):
        raise ConfigError(f"model dims {model.dims} differ from truth dims {truth.dims}")
    if coords is None:
        coords = np.indices(model.dims).reshape(3, -1).T
    true_vals = truth(coords)
    denom = float(np.linalg.norm(true_vals))
    if denom == 0:
        raise ValueError("truth has zero norm on the requested coordinates")
    return float(np.linalg.norm(predict(model, coords, data_units=True) - true_vals)) / denom


def write_synth(result: SynthResult, spec: SynthSpec, path) -> None:
    """Tensor file plus a ``.json`` sidecar recording the generating spec."""
    write_tensor(result.tensor, path)
    with open(str(path) + ".json", "w", newline="\n") as fh:
        json.dump({"spec": spec.to_dict(), "nnz": result.tensor.nnz, "warnings": result.warnings}, fh, indent=2, sort_keys=True)
        fh.write("\n")
