import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tencompl.errors import ConfigError, NumericError
from tencompl.model import (
    FactorModel,
    attention_weights,
    default_scale,
    forward,
    gradients,
    init_model,
    load_model,
    predict,
    predict_attention,
    predict_plain,
    project_nonnegative,
    shift_nonnegative,
    softmax,
)
from tencompl.tensor import SparseTensor3


def _model(variant, R, U, I, bias=None):
    params = {"R": np.atleast_2d(R).astype(float), "U": np.atleast_2d(U).astype(float), "I": np.atleast_2d(I).astype(float)}
    dims = tuple(params[k].shape[0] for k in ("R", "U", "I"))
    k = params["R"].shape[1]
    if variant == "attention":
        for key in ("Ra", "Ua", "Ia"):
            params[key] = np.zeros_like(params[key[0]])
    if bias is not None:
        params["bias_u"] = np.full(dims[1], bias[0], dtype=float)
        params["bias_i"] = np.full(dims[2], bias[1], dtype=float)
        params["bias_global"] = np.array([bias[2]], dtype=float)
    return FactorModel(dims, k, variant, params, use_bias=bias is not None)


def test_plain_examples():
    assert predict_plain(_model("plain", [[0.0]], [[0.0]], [[0.0]]), 0, 0, 0) == 0.0
    assert predict_plain(_model("plain", [[2.0]], [[3.0]], [[0.5]]), 0, 0, 0) == 3.0
    assert predict_plain(_model("plain", [[1.0, 1.0]], [[1.0, -1.0]], [[1.0, 1.0]]), 0, 0, 0) == 0.0


def test_attention_examples():
    m = _model("attention", [[4.0, 0.0]], [[1.0, 1.0]], [[1.0, 1.0]], bias=(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(attention_weights(m, 0, 0, 0), [0.5, 0.5])
    assert predict_attention(m, 0, 0, 0) == 2.0
    m.params["Ra"][0] = [0.0, math.log(3.0)]
    m.params["Ua"][0] = [1.0, 1.0]
    m.params["Ia"][0] = [1.0, 1.0]
    np.testing.assert_allclose(attention_weights(m, 0, 0, 0), [0.25, 0.75], rtol=1e-15)
    biased = _model("attention", [[0.0]], [[0.0]], [[0.0]], bias=(1.0, 2.0, 3.0))
    assert predict_attention(biased, 0, 0, 0) == 6.0
    single = _model("attention", [[2.0]], [[-1.5]], [[0.5]], bias=(0.1, 0.2, 0.3))
    assert predict_attention(single, 0, 0, 0) == pytest.approx(-1.5 + 0.6, abs=1e-15)


def test_softmax_is_stable_for_huge_logits():
    w = softmax(np.array([[1000.0, 1000.0, -1000.0], [-800.0, -801.0, -1e300]]))
    assert np.all(np.isfinite(w))
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    np.testing.assert_allclose(w[0], [0.5, 0.5, 0.0])


def test_init_model():
    a = init_model((3, 4, 5), 7, "attention", seed=2)
    b = init_model((3, 4, 5), 7, "attention", seed=2)
    for key in a.params:
        np.testing.assert_array_equal(a.params[key], b.params[key])
    assert a.use_bias and not init_model((3, 4, 5), 7, "plain").use_bias
    nonneg = init_model((3, 4, 5), 7, "nonneg-attention", seed=1)
    assert min(nonneg.params[k].min() for k in nonneg.factor_keys()) >= 0.0
    default = init_model((2, 3, 4), 300)
    assert default.R.shape == (2, 300) and default.U.shape == (3, 300) and default.I.shape == (4, 300)
    for bad in [dict(dims=(3, 4, 5), k=0), dict(dims=(0, 4, 5), k=2)]:
        with pytest.raises(ConfigError):
            init_model(bad["dims"], bad["k"])
    with pytest.raises(ConfigError):
        init_model((2, 2, 2), 2, "lasso")


def test_default_scale_gives_prediction_std_near_one_tenth():
    model = init_model((30, 40, 50), 5, "plain", seed=0)
    coords = np.indices(model.dims).reshape(3, -1).T
    assert np.std(predict(model, coords)) == pytest.approx(0.1, rel=0.1)
    assert default_scale(27) == pytest.approx(0.1 ** (1 / 3))


def test_zero_gradient_at_exact_fit():
    model = init_model((3, 4, 5), 3, "attention", seed=4)
    coords = np.indices(model.dims).reshape(3, -1).T
    y = predict(model, coords)
    grads, loss = gradients(model, coords, y)
    assert loss == 0.0
    assert grads.norm() == 0.0


def test_single_entry_gradient_by_hand():
    model = _model("plain", [[2.0]], [[3.0]], [[0.5]])
    coords = np.array([[0, 0, 0]])
    grads, loss = gradients(model, coords, np.array([1.0]))
    # yhat = 3, y = 1: dL/dr = 2 (yhat - y) u i
    assert loss == 4.0
    assert grads["R"][0, 0] == 2 * 2.0 * 3.0 * 0.5
    assert grads["U"][0, 0] == 2 * 2.0 * 2.0 * 0.5
    assert grads["I"][0, 0] == 2 * 2.0 * 2.0 * 3.0


def test_non_finite_gradient_names_coordinate():
    model = init_model((2, 2, 2), 2, "plain", seed=0)
    model.params["U"][1, 0] = np.inf
    with pytest.raises(NumericError) as info:
        gradients(model, np.array([[0, 0, 0], [1, 1, 1]]), np.array([0.0, 0.0]))
    assert info.value.coordinate == (1, 1, 1)


def test_projection_and_shift_examples():
    m = init_model((2, 2, 2), 2, "nonneg-plain", seed=0)
    before = {k: v.copy() for k, v in m.params.items()}
    project_nonnegative(m)
    for k in before:
        np.testing.assert_array_equal(m.params[k], before[k])
    m.params["R"][0, 0] = -0.3
    project_nonnegative(m)
    assert m.params["R"][0, 0] == 0.0
    with pytest.raises(ConfigError):
        project_nonnegative(init_model((2, 2, 2), 2, "plain"))

    t = SparseTensor3((1, 1, 3), [[0, 0, 0], [0, 0, 1], [0, 0, 2]], [-2.5, 0.0, 1.0])
    shifted, offset = shift_nonnegative(t)
    assert offset == 2.5 and shifted.values.min() == 0.0
    same, offset = shift_nonnegative(t.with_values([0.0, 1.0, 2.0]))
    assert offset == 0.0 and same.values.tolist() == [0.0, 1.0, 2.0]
    one, offset = shift_nonnegative(SparseTensor3((1, 1, 1), [[0, 0, 0]], [-1.0]))
    assert one.values.tolist() == [0.0] and offset == 1.0


def test_data_units_subtract_offset():
    m = _model("plain", [[1.0]], [[1.0]], [[2.0]])
    m.offset = 0.5
    assert predict(m, [[0, 0, 0]]).tolist() == [2.0]
    assert predict(m, [[0, 0, 0]], data_units=True).tolist() == [1.5]


@pytest.mark.parametrize("variant", ["plain", "attention", "nonneg-plain", "nonneg-attention"])
def test_checkpoint_round_trip_is_exact(tmp_path, variant):
    from tencompl.model import save_model

    m = init_model((3, 4, 5), 4, variant, seed=7, use_bias=True)
    for key in m.bias_keys():
        m.params[key][:] = np.random.default_rng(1).normal(size=m.params[key].shape)
    m.offset = 1 / 3
    save_model(m, tmp_path / "ck", {"note": "x"})
    back = load_model(tmp_path / "ck")
    assert (back.dims, back.rank, back.variant, back.use_bias, back.offset) == (m.dims, m.rank, m.variant, True, m.offset)
    for key in m.params:
        np.testing.assert_array_equal(back.params[key], m.params[key])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.sampled_from(["plain", "attention"]), st.integers(0, 1000))
def test_vectorized_prediction_matches_scalar(k, variant, seed):
    m = init_model((3, 4, 5), k, variant, seed=seed, scale=1.0)
    coords = np.indices(m.dims).reshape(3, -1).T[::7]
    batched = predict(m, coords)
    scalar = [(predict_attention if m.has_attention else predict_plain)(m, *c) for c in coords]
    np.testing.assert_allclose(batched, scalar, rtol=1e-13, atol=1e-15)
    yhat, _ = forward(m, coords)
    np.testing.assert_array_equal(yhat, batched)
