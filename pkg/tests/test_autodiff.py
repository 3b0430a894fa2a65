"""Forward values, analytic gradients vs finite differences, accumulation."""

import math

import numpy as np
import pytest

from quadsurv import autodiff as ad
from quadsurv.errors import ContractError, NumericDomainError, ShapeError


def fd_grad(fn, arr, step=1e-6):
    """Central finite differences of a scalar-valued fn over a flat array."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return g


def assert_grads_close(analytic, numeric, tol=1e-5):
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    assert np.max(np.abs(analytic - numeric) / scale) < tol


# --- affine ------------------------------------------------------------------

def test_affine_identity():
    w = ad.parameter(np.eye(2))
    b = ad.parameter(np.zeros(2))
    h = ad.tensor([[1.0, 2.0]])
    out = ad.affine(w, b, h)
    np.testing.assert_array_equal(out.values, [[1.0, 2.0]])


def test_affine_hand_sum():
    w = ad.parameter([[1.0, 1.0]])
    b = ad.parameter([3.0])
    h = ad.tensor([[2.0, 5.0]])
    assert ad.affine(w, b, h).values.tolist() == [[10.0]]


def test_affine_shape_error_names_shapes():
    w = ad.parameter(np.zeros((2, 3)))
    b = ad.parameter(np.zeros(2))
    h = ad.tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError) as exc:
        ad.affine(w, b, h)
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_affine_gradient_matches_fd():
    rng = np.random.default_rng(1)
    w = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=3))
    h = ad.parameter(rng.normal(size=(5, 4)))

    def loss_value():
        return float(ad.reduce_sum(
            ad.elementwise("tanh", ad.affine(w, b, h))).values)

    ad.zero_grad([w, b, h])
    ad.backward(ad.reduce_sum(ad.elementwise("tanh", ad.affine(w, b, h))))
    for p in (w, b, h):
        assert_grads_close(p.grad, fd_grad(loss_value, p.values))


# --- elementwise -------------------------------------------------------------

def test_elementwise_values():
    x = ad.tensor([[0.0]])
    assert ad.elementwise("tanh", x).values[0, 0] == 0.0
    assert abs(ad.elementwise("softplus", x).values[0, 0] - math.log(2.0)) < 1e-15
    assert ad.elementwise("relu", ad.tensor([[-2.0]])).values[0, 0] == 0.0
    assert abs(ad.elementwise("sigmoid", x).values[0, 0] - 0.5) < 1e-15
    assert abs(ad.elementwise("gelu", ad.tensor([[1.0]])).values[0, 0]
               - 0.5 * (1 + math.erf(1 / math.sqrt(2)))) < 1e-15


def test_exp_backward_is_exp():
    x = ad.parameter([1.0])
    y = ad.reduce_sum(ad.elementwise("exp", x))
    ad.backward(y)
    assert abs(x.grad[0] - math.e) < 1e-12


@pytest.mark.parametrize("kind", ad.ELEMENTWISE_KINDS)
def test_elementwise_gradients_match_fd(kind):
    rng = np.random.default_rng(7)
    x = ad.parameter(rng.uniform(-1.5, 1.5, size=(4, 3)))

    def loss_value():
        return float(ad.reduce_sum(ad.elementwise(kind, x)).values)

    ad.zero_grad([x])
    ad.backward(ad.reduce_sum(ad.elementwise(kind, x)))
    assert_grads_close(x.grad, fd_grad(loss_value, x.values))


def test_exp_overflow_raises():
    x = ad.tensor([[1000.0]])
    with pytest.raises(NumericDomainError) as exc:
        ad.elementwise("exp", x)
    assert exc.value.positions == [0]


def test_unknown_kind_rejected():
    with pytest.raises(ContractError):
        ad.elementwise("swish", ad.tensor([[0.0]]))


# --- structural ops -----------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = ad.parameter([1.0, 2.0, 3.0])
    ad.backward(ad.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_sum_exp():
    x = ad.parameter([0.0, 1.0])
    ad.backward(ad.reduce_sum(ad.elementwise("exp", x)))
    np.testing.assert_allclose(x.grad, [1.0, math.e], atol=1e-12)


def test_backward_requires_scalar():
    x = ad.parameter([[1.0, 2.0]])
    with pytest.raises(ContractError):
        ad.backward(x)


def test_double_use_accumulates_exactly():
    # y = f(x) + g(x) must give f'(x) + g'(x)
    x = ad.parameter([0.3])
    y = ad.add(ad.elementwise("exp", x), ad.elementwise("tanh", x))
    ad.backward(ad.reduce_sum(y))
    expected = math.exp(0.3) + (1 - math.tanh(0.3) ** 2)
    assert abs(x.grad[0] - expected) < 1e-14


def test_tile_rows_backward_sums_over_copies():
    x = ad.parameter([[1.0, 2.0], [3.0, 4.0]])
    tiled = ad.tile_rows(x, 3)
    assert tiled.values.shape == (6, 2)
    np.testing.assert_array_equal(tiled.values[0], tiled.values[2])
    ad.backward(ad.reduce_sum(tiled))
    np.testing.assert_array_equal(x.grad, [[3.0, 3.0], [3.0, 3.0]])


def test_slice_and_concat_roundtrip_gradients():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    left = ad.slice_cols(x, 0, 1)
    right = ad.slice_cols(x, 1, 3)
    rebuilt = ad.concat_cols([left, right])
    np.testing.assert_array_equal(rebuilt.values, x.values)
    ad.backward(ad.mean(rebuilt))
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0))


def test_mul_const_and_scale():
    x = ad.parameter([[2.0, 3.0]])
    y = ad.scale(ad.mul(x, np.array([[10.0, 100.0]])), 0.5)
    np.testing.assert_array_equal(y.values, [[10.0, 150.0]])
    ad.backward(ad.reduce_sum(y))
    np.testing.assert_array_equal(x.grad, [[5.0, 50.0]])


def test_mul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.mul(ad.tensor(np.zeros((2, 2))), ad.tensor(np.zeros((2, 3))))


def test_reduce_sum_axes():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(ad.reduce_sum(x, axis=1).values, [3.0, 12.0])
    np.testing.assert_array_equal(ad.reduce_sum(x, axis=0).values, [3.0, 5.0, 7.0])
    ad.backward(ad.reduce_sum(ad.reduce_sum(x, axis=1)))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_toposort_visits_each_node_once():
    x = ad.parameter([1.0])
    a = ad.elementwise("tanh", x)
    b = ad.add(a, a)          # diamond: a used twice
    loss = ad.reduce_sum(b)
    order = ad.toposort(loss)
    ids = [id(n) for n in order]
    assert len(ids) == len(set(ids))
    assert ids.index(id(a)) < ids.index(id(b))
    ad.backward(loss)
    expected = 2 * (1 - math.tanh(1.0) ** 2)
    assert abs(x.grad[0] - expected) < 1e-14


# --- batch norm and dropout -----------------------------------------------------

def test_batch_norm_train_normalizes():
    rng = np.random.default_rng(3)
    x = ad.tensor(rng.normal(5.0, 3.0, size=(64, 4)))
    gamma = ad.parameter(np.ones(4))
    beta = ad.parameter(np.zeros(4))
    st = ad.BatchNormState(4)
    out = ad.batch_norm(x, gamma, beta, st, training=True)
    np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.values.std(axis=0), 1.0, atol=1e-3)
    assert not np.allclose(st.running_mean, 0.0)


def test_batch_norm_gradients_match_fd():
    rng = np.random.default_rng(4)
    x = ad.parameter(rng.normal(size=(6, 3)))
    gamma = ad.parameter(rng.uniform(0.5, 1.5, size=3))
    beta = ad.parameter(rng.normal(size=3))

    def run():
        st = ad.BatchNormState(3)
        return ad.reduce_sum(
            ad.elementwise("tanh", ad.batch_norm(x, gamma, beta, st, True)))

    ad.zero_grad([x, gamma, beta])
    ad.backward(run())
    for p in (x, gamma, beta):
        assert_grads_close(p.grad, fd_grad(lambda: float(run().values), p.values))


def test_batch_norm_eval_uses_running_stats():
    x = ad.tensor(np.array([[10.0, 10.0]]))
    gamma = ad.parameter(np.ones(2))
    beta = ad.parameter(np.zeros(2))
    st = ad.BatchNormState(2)
    st.running_mean = np.array([10.0, 10.0])
    st.running_var = np.array([4.0, 4.0])
    out = ad.batch_norm(x, gamma, beta, st, training=False)
    np.testing.assert_allclose(out.values, 0.0, atol=1e-6)


def test_dropout_identity_at_eval():
    x = ad.tensor(np.ones((4, 4)))
    out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
    assert out is x


def test_dropout_scales_surviving_units():
    rng = np.random.default_rng(0)
    x = ad.tensor(np.ones((1000, 1)))
    out = ad.dropout(x, 0.25, rng, training=True)
    vals = np.unique(out.values)
    assert set(np.round(vals, 12)) <= {0.0, np.round(1 / 0.75, 12)}
    assert abs(out.values.mean() - 1.0) < 0.05


# --- determinism and serialization --------------------------------------------------

def test_forward_backward_bit_deterministic():
    def run():
        rng = np.random.default_rng(11)
        w = ad.parameter(rng.normal(size=(4, 3)))
        b = ad.parameter(rng.normal(size=4))
        h = ad.tensor(rng.normal(size=(8, 3)))
        loss = ad.mean(ad.elementwise("gelu", ad.affine(w, b, h)))
        ad.backward(loss)
        return loss.values.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(g1, g2)


def test_payload_roundtrip_exact():
    rng = np.random.default_rng(5)
    params = {"layer.W": ad.parameter(rng.normal(size=(3, 2))),
              "layer.b": ad.parameter(rng.normal(size=3))}
    payload = ad.params_to_payload(params)
    back = ad.payload_to_arrays(payload)
    for name in params:
        assert np.array_equal(back[name], params[name].values)
    assert payload["layer.W"]["shape"] == [3, 2]
    assert isinstance(payload["layer.W"]["data"], str)
