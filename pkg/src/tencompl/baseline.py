"""Masked CP alternating least squares over observed entries only.

Each half-step fixes two factor matrices and, for every index ``j`` of the
free mode, solves the ridge-regularised normal equations

    (sum_n z_n z_n^T + eps * I) x_j = sum_n y_n z_n

over the observed entries ``n`` whose free-mode index is ``j``, where
``z_n`` is the elementwise product of the two fixed factor rows.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyTensorError
from .model import FactorModel, predict
from .tensor import SparseTensor3

__all__ = ["AlsConfig", "AlsHistory", "cp_als", "fit"]

log = logging.getLogger(__name__)

RIDGE_FALLBACK = 1e-8
_CHUNK = 1 << 16


@dataclass(frozen=True)
class AlsConfig:
    rank: int = 3
    max_iter: int = 200
    tol: float = 1e-10
    ridge: float = 1e-9
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1", flag="--rank")
        if not self.tol > 0:
            raise ConfigError("tol must be > 0", flag="--tol")
        if self.ridge < 0:
            raise ConfigError("ridge must be >= 0", flag="--ridge")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1", flag="--max-iter")


@dataclass
class AlsHistory:
    fits: list = field(default_factory=list)
    half_step_sse: list = field(default_factory=list)
    zero_rows: dict = field(default_factory=dict)
    ridge_fallback_rows: dict = field(default_factory=dict)
    iterations: int = 0
    converged: bool = False


class _ModeIndex:
    """Entries sorted by one mode's index, with segment boundaries."""

    def __init__(self, idx, n_rows):
        self.order = np.argsort(idx, kind="stable")
        self.sorted_idx = idx[self.order]
        self.counts = np.bincount(idx, minlength=n_rows)


def _normal_equations(mi, n_rows, Z, y, k):
    G = np.zeros((n_rows, k, k))
    h = np.zeros((n_rows, k))
    Zs, ys, s = Z[mi.order], y[mi.order], mi.sorted_idx
    for start in range(0, s.shape[0], _CHUNK):
        sc = s[start:start + _CHUNK]
        zc = Zs[start:start + _CHUNK]
        uniq, first = np.unique(sc, return_index=True)
        G[uniq] += np.add.reduceat(zc[:, :, None] * zc[:, None, :], first, axis=0)
        h[uniq] += np.add.reduceat(zc * ys[start:start + _CHUNK, None], first, axis=0)
    return G, h


def _solve_rows(G, h, rows, ridge):
    k = G.shape[1]
    eye = np.eye(k)
    out = np.zeros((rows.shape[0], k))
    fallback = []
    try:
        out[:] = np.linalg.solve(G[rows] + ridge * eye, h[rows][:, :, None])[:, :, 0]
        if np.all(np.isfinite(out)):
            return out, fallback
    except np.linalg.LinAlgError:
        pass
    for n, j in enumerate(rows):
        try:
            x = np.linalg.solve(G[j] + ridge * eye, h[j])
            if not np.all(np.isfinite(x)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            eps = max(ridge, RIDGE_FALLBACK)
            try:
                x = np.linalg.solve(G[j] + eps * eye, h[j])
            except np.linalg.LinAlgError:
                x = np.linalg.lstsq(G[j] + eps * eye, h[j], rcond=None)[0]
            fallback.append(int(j))
        out[n] = x
    return out, fallback


def _update_mode(A, G, h, counts, ridge, threads):
    rows = np.flatnonzero(counts)
    if threads > 1 and rows.shape[0] > 1:
        parts = np.array_split(rows, threads)
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(lambda p: _solve_rows(G, h, p, ridge), parts))
        solved = np.concatenate([r[0] for r in results])
        fallback = [j for r in results for j in r[1]]
    else:
        solved, fallback = _solve_rows(G, h, rows, ridge)
    A[:] = 0.0
    A[rows] = solved
    return fallback


def _sse(factors, coords, y):
    A, B, C = factors
    res = y - np.sum(A[coords[:, 0]] * B[coords[:, 1]] * C[coords[:, 2]], axis=1)
    return float(np.dot(res, res))


def cp_als(tensor: SparseTensor3, config: AlsConfig = AlsConfig(), callback=None):
    """Fit a rank-``config.rank`` CP model to the observed entries.

    Returns
    -------
    (FactorModel, AlsHistory)
        A plain-variant model and per-iteration fit values.  Free-mode
        indices without observations get zero rows and are listed in
        ``history.zero_rows``.

    ``callback(iteration, model, sse)`` is invoked after every full sweep
    with a model view of the current factors.
    """
    if tensor.nnz == 0:
        raise EmptyTensorError("cannot fit an empty tensor")
    k = config.rank
    if k > min(tensor.dims):
        log.warning("rank %d exceeds the smallest mode size %d", k, min(tensor.dims))
    rng = np.random.default_rng(config.seed)
    factors = [rng.uniform(-1.0, 1.0, size=(n, k)) for n in tensor.dims]
    coords, y = tensor.coords, tensor.values
    y_norm = math.sqrt(float(np.dot(y, y)))
    index = [_ModeIndex(coords[:, m], n) for m, n in enumerate(tensor.dims)]
    history = AlsHistory()
    for m, mi in enumerate(index):
        zero = np.flatnonzero(mi.counts == 0)
        if zero.size:
            history.zero_rows[m] = zero.tolist()
            log.warning("mode %d: %d indices have no observations; rows set to zero", m, zero.size)

    prev_fit = None
    for it in range(1, config.max_iter + 1):
        for m in range(3):
            a, b = [x for x in range(3) if x != m]
            Z = factors[a][coords[:, a]] * factors[b][coords[:, b]]
            G, h = _normal_equations(index[m], tensor.dims[m], Z, y, k)
            fb = _update_mode(factors[m], G, h, index[m].counts, config.ridge, config.threads)
            if fb:
                history.ridge_fallback_rows.setdefault(m, []).extend(fb)
            history.half_step_sse.append(_sse(factors, coords, y))
        sse = history.half_step_sse[-1]
        cur_fit = 1.0 - math.sqrt(sse) / y_norm if y_norm else 1.0
        history.fits.append(cur_fit)
        history.iterations = it
        if callback is not None:
            callback(it, _as_model(tensor.dims, k, factors, config.seed), sse)
        if prev_fit is not None and abs(cur_fit - prev_fit) <= config.tol * max(abs(prev_fit), 1e-300):
            history.converged = True
            break
        if sse == 0.0:
            history.converged = True
            break
        prev_fit = cur_fit
    return _as_model(tensor.dims, k, factors, config.seed), history


def _as_model(dims, k, factors, seed):
    params = {"R": factors[0].copy(), "U": factors[1].copy(), "I": factors[2].copy()}
    return FactorModel(dims, k, "plain", params, seed=seed, meta={"solver": "als"})


def fit(tensor: SparseTensor3, model: FactorModel) -> float:
    """``1 - ||residual|| / ||observed values||`` over observed entries."""
    if tuple(model.dims) != tuple(tensor.dims):
        raise ConfigError(f"model dims {model.dims} differ from tensor dims {tensor.dims}")
    y = tensor.values
    norm = float(np.linalg.norm(y))
    if norm == 0:
        raise ValueError("observed values are all zero")
    return 1.0 - float(np.linalg.norm(y - predict(model, tensor.coords, data_units=True))) / norm
