"""Multilinear factor models: plain CP, attention-weighted and non-negative.

For an entry ``(r, u, i)`` the plain predictor is
``sum_d R[r, d] * U[u, d] * I[i, d]``.  The attention predictor reweights
each component by ``softmax_d(Ra[r, d] * Ua[u, d] * Ia[i, d])`` and adds
gene, treatment and global biases.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CoordinateRangeError, EmptyTensorError, NumericError
from .losses import loss_residual_gradient
from .tensor import SparseTensor3, read_tensor, write_tensor

__all__ = [
    "VARIANTS",
    "FactorModel",
    "GradientSet",
    "init_model",
    "default_scale",
    "forward",
    "predict",
    "predict_plain",
    "predict_attention",
    "attention_weights",
    "softmax",
    "gradients",
    "project_nonnegative",
    "shift_nonnegative",
    "save_model",
    "load_model",
]

VARIANTS = ("plain", "attention", "nonneg-plain", "nonneg-attention")
FACTOR_KEYS = ("R", "U", "I")
ATTENTION_KEYS = ("Ra", "Ua", "Ia")
BIAS_KEYS = ("bias_u", "bias_i", "bias_global")


@dataclass
class FactorModel:
    """Factor matrices, optional attention matrices and biases.

    ``params`` maps ``R``, ``U``, ``I`` (and ``Ra``, ``Ua``, ``Ia`` for
    attention variants, ``bias_u``, ``bias_i``, ``bias_global`` when biases
    are enabled) to float64 arrays.  ``bias_global`` has shape ``(1,)`` so
    that optimizers can update it in place.

    ``offset`` is the constant added to the data before training a
    non-negative variant; predictions in data units subtract it.
    """

    dims: tuple
    rank: int
    variant: str
    params: dict
    use_bias: bool = False
    seed: int = 0
    offset: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def has_attention(self) -> bool:
        return self.variant.endswith("attention")

    @property
    def nonneg(self) -> bool:
        return self.variant.startswith("nonneg")

    @property
    def R(self):
        return self.params["R"]

    @property
    def U(self):
        return self.params["U"]

    @property
    def I(self):  # noqa: E743
        return self.params["I"]

    def factor_keys(self):
        return FACTOR_KEYS + (ATTENTION_KEYS if self.has_attention else ())

    def bias_keys(self):
        return BIAS_KEYS if self.use_bias else ()

    def copy(self) -> "FactorModel":
        return FactorModel(
            self.dims,
            self.rank,
            self.variant,
            {k: v.copy() for k, v in self.params.items()},
            self.use_bias,
            self.seed,
            self.offset,
            dict(self.meta),
        )

    def check_finite(self):
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite value in parameter {k}")


class GradientSet(dict):
    """Gradients keyed like :attr:`FactorModel.params`."""

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.values()))


def default_scale(k: int) -> float:
    """Uniform half-width giving initial predictions a standard deviation of 0.1.

    A sum of ``k`` triple products of ``U(-s, s)`` draws has variance
    ``k * s**6 / 27``.
    """
    return (0.1 * math.sqrt(27.0 / k)) ** (1.0 / 3.0)


def init_model(
    dims,
    k: int,
    variant: str = "plain",
    seed: int = 0,
    scale: float | None = None,
    use_bias: bool | None = None,
) -> FactorModel:
    """Random initial model.

    Factors are i.i.d. uniform on ``[-scale, scale]`` (``[0, scale]`` for the
    non-negative variants); biases start at zero.  Biases are on by default
    only for the attention variants.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}", flag="--variant")
    dims = tuple(int(d) for d in dims)
    if k < 1:
        raise ConfigError("rank must be at least 1", flag="--rank")
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"dims must be three positive sizes, got {dims}")
    if scale is None:
        scale = default_scale(k)
    if not scale > 0:
        raise ConfigError("init scale must be positive", flag="--init-scale")
    if use_bias is None:
        use_bias = variant.endswith("attention")
    rng = np.random.default_rng(seed)
    lo = 0.0 if variant.startswith("nonneg") else -scale
    keys = FACTOR_KEYS + (ATTENTION_KEYS if variant.endswith("attention") else ())
    params = {}
    for key, n in zip(keys, dims + dims):
        params[key] = rng.uniform(lo, scale, size=(n, k))
    if use_bias:
        params["bias_u"] = np.zeros(dims[1])
        params["bias_i"] = np.zeros(dims[2])
        params["bias_global"] = np.zeros(1)
    return FactorModel(dims, int(k), variant, params, bool(use_bias), int(seed))


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_coords(model, coords):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.size and (np.any(coords < 0) or np.any(coords >= np.array(model.dims))):
        bad = coords[np.any((coords < 0) | (coords >= np.array(model.dims)), axis=1)][0]
        raise CoordinateRangeError(f"coordinate {tuple(bad.tolist())} outside dims {model.dims}")
    return coords


def forward(model: FactorModel, coords):
    """Predictions plus the intermediates the backward pass needs.

    Returns
    -------
    yhat : ndarray, shape (N,)
    cache : dict
    """
    p = model.params
    r, u, i = coords[:, 0], coords[:, 1], coords[:, 2]
    Rr, Uu, Ii = p["R"][r], p["U"][u], p["I"][i]
    prod = Rr * Uu * Ii
    cache = {"r": r, "u": u, "i": i, "Rr": Rr, "Uu": Uu, "Ii": Ii, "prod": prod}
    if model.has_attention:
        Ra, Ua, Ia = p["Ra"][r], p["Ua"][u], p["Ia"][i]
        att = softmax(Ra * Ua * Ia, axis=1)
        core = np.sum(prod * att, axis=1)
        cache.update(Ra=Ra, Ua=Ua, Ia=Ia, att=att, core=core)
    else:
        core = np.sum(prod, axis=1)
    yhat = core
    if model.use_bias:
        yhat = core + p["bias_u"][u] + p["bias_i"][i] + p["bias_global"][0]
    return yhat, cache


def predict(model: FactorModel, coords, *, data_units: bool = False) -> np.ndarray:
    """Vectorized prediction; ``data_units`` subtracts the non-negative offset."""
    coords = _check_coords(model, coords)
    yhat, _ = forward(model, coords)
    if data_units and model.offset:
        yhat = yhat - model.offset
    return yhat


def predict_plain(model: FactorModel, r: int, u: int, i: int) -> float:
    """Triple-product sum over the latent components (no attention, no bias)."""
    coords = _check_coords(model, [(r, u, i)])
    p = model.params
    return float(np.sum(p["R"][coords[0, 0]] * p["U"][coords[0, 1]] * p["I"][coords[0, 2]]))


def attention_weights(model: FactorModel, r: int, u: int, i: int) -> np.ndarray:
    if not model.has_attention:
        raise ConfigError(f"variant {model.variant!r} has no attention")
    coords = _check_coords(model, [(r, u, i)])
    p = model.params
    logits = p["Ra"][coords[0, 0]] * p["Ua"][coords[0, 1]] * p["Ia"][coords[0, 2]]
    return softmax(logits)


def predict_attention(model: FactorModel, r: int, u: int, i: int) -> float:
    if not model.has_attention:
        raise ConfigError(f"variant {model.variant!r} has no attention")
    return float(predict(model, [(r, u, i)])[0])


def _scatter(n_rows, index, values, coords=None):
    if coords is not None:
        bad = ~np.all(np.isfinite(values), axis=1)
        if bad.any():
            raise NumericError("non-finite gradient contribution", coordinate=coords[np.argmax(bad)])
    out = np.zeros((n_rows,) + values.shape[1:])
    np.add.at(out, index, values)
    return out


def gradients(model: FactorModel, coords, y, w=None, lam: float = 0.0):
    """Analytic gradient of the weighted loss over one batch.

    The loss is ``mean(w * (y - yhat)**2) - lam * Var(yhat)``; with
    ``w = None`` and ``lam = 0`` it is plain MSE.  Weight decay is not part of
    the loss; the optimizer adds it.

    Returns
    -------
    (GradientSet, float)
    """
    coords = _check_coords(model, coords)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if coords.shape[0] == 0:
        raise EmptyTensorError("empty batch")
    if y.shape[0] != coords.shape[0]:
        raise ValueError("coords and targets differ in length")
    if w is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be positive and finite")
    yhat, c = forward(model, coords)
    bad = ~np.isfinite(yhat)
    if bad.any():
        raise NumericError("non-finite prediction", coordinate=coords[np.argmax(bad)])
    loss, g = loss_residual_gradient(y, yhat, w, lam)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss", coordinate=coords[0])

    R, U, I = model.dims
    grads = GradientSet()
    if model.has_attention:
        att = c["att"]
        gp = g[:, None] * att
        gl = gp * (c["prod"] - c["core"][:, None])
        grads["Ra"] = _scatter(R, c["r"], gl * c["Ua"] * c["Ia"], coords)
        grads["Ua"] = _scatter(U, c["u"], gl * c["Ra"] * c["Ia"], coords)
        grads["Ia"] = _scatter(I, c["i"], gl * c["Ra"] * c["Ua"], coords)
    else:
        gp = np.repeat(g[:, None], model.rank, axis=1)
    grads["R"] = _scatter(R, c["r"], gp * c["Uu"] * c["Ii"], coords)
    grads["U"] = _scatter(U, c["u"], gp * c["Rr"] * c["Ii"], coords)
    grads["I"] = _scatter(I, c["i"], gp * c["Rr"] * c["Uu"], coords)
    if model.use_bias:
        grads["bias_u"] = np.bincount(c["u"], weights=g, minlength=U)
        grads["bias_i"] = np.bincount(c["i"], weights=g, minlength=I)
        grads["bias_global"] = np.array([g.sum()])
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite accumulated gradient for {k}")
    return grads, loss


def project_nonnegative(model: FactorModel) -> FactorModel:
    """Clamp every factor entry at zero in place; biases are untouched."""
    if not model.nonneg:
        raise ConfigError(f"variant {model.variant!r} is not non-negative")
    for key in model.factor_keys():
        np.maximum(model.params[key], 0.0, out=model.params[key])
    return model


def shift_nonnegative(tensor: SparseTensor3):
    """Add ``-min`` to every value so the smallest becomes exactly zero.

    Returns
    -------
    (SparseTensor3, float)
        Shifted tensor and the offset that was added.
    """
    if tensor.nnz == 0:
        raise EmptyTensorError("cannot shift an empty tensor")
    offset = 0.0 - float(tensor.values.min())
    return tensor.with_values(tensor.values + offset), offset


def _matrix_tensor(a: np.ndarray) -> SparseTensor3:
    a = np.atleast_2d(a.reshape(a.shape[0], -1))
    rows, cols = np.indices(a.shape)
    coords = np.column_stack([rows.ravel(), cols.ravel(), np.zeros(a.size, dtype=np.int64)])
    return SparseTensor3((a.shape[0], a.shape[1], 1), coords, a.ravel())


def _tensor_matrix(t: SparseTensor3) -> np.ndarray:
    out = np.zeros(t.dims[:2])
    out[t.r, t.u] = t.values
    return out


def save_model(model: FactorModel, directory, extra: dict | None = None) -> None:
    """Write ``manifest.json`` plus one tensor file per parameter array."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "dims": list(model.dims),
        "rank": model.rank,
        "variant": model.variant,
        "use_bias": model.use_bias,
        "seed": model.seed,
        "offset": model.offset,
        "params": sorted(model.params),
        **model.meta,
        **(extra or {}),
    }
    for key, arr in model.params.items():
        write_tensor(_matrix_tensor(arr.reshape(arr.shape[0], -1)), os.path.join(directory, f"{key}.tns"))
    with open(os.path.join(directory, "manifest.json"), "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(directory) -> FactorModel:
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    params = {}
    for key in manifest["params"]:
        arr = _tensor_matrix(read_tensor(os.path.join(directory, f"{key}.tns")))
        params[key] = arr[:, 0].copy() if key in BIAS_KEYS else arr
    reserved = {"dims", "rank", "variant", "use_bias", "seed", "offset", "params"}
    return FactorModel(
        tuple(manifest["dims"]),
        int(manifest["rank"]),
        manifest["variant"],
        params,
        bool(manifest["use_bias"]),
        int(manifest["seed"]),
        float(manifest["offset"]),
        {k: v for k, v in manifest.items() if k not in reserved},
    )
