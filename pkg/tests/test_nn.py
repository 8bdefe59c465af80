import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cloth import nn
from cloth.errors import ContractError, DimensionError, ParameterError, TrainingError
from cloth.numerics import SeededStream


def _net(widths=(3, 5, 4), act="tanh", head="linear", keep=1.0, seed=0):
    spec = nn.MlpSpec(widths, act, head, keep)
    return spec, nn.init_params(spec, SeededStream(seed, ("test",)))


@pytest.mark.parametrize("act", nn.ACTIVATIONS)
@pytest.mark.parametrize("head", nn.HEADS)
def test_backward_matches_finite_differences(act, head, gen):
    spec, params = _net((3, 6, 5, 4), act, head)
    x = gen.normal(size=(7, 3))
    w = gen.normal(size=(7, 4))

    def loss(p):
        out, cache = nn.forward(p, spec, x)
        g, _ = nn.backward(p, spec, cache, w)
        return float(np.sum(out * w)), g

    assert nn.grad_check(loss, params) < 1e-6


def test_input_gradient(gen):
    spec, params = _net()
    x = gen.normal(size=(4, 3))
    w = gen.normal(size=(4, 4))
    _, cache = nn.forward(params, spec, x)
    _, gx = nn.backward(params, spec, cache, w)
    h = 1e-6
    for i, j in [(0, 0), (2, 1), (3, 2)]:
        xp, xm = x.copy(), x.copy()
        xp[i, j] += h
        xm[i, j] -= h
        num = (np.sum(nn.forward(params, spec, xp)[0] * w) - np.sum(nn.forward(params, spec, xm)[0] * w)) / (2 * h)
        assert gx[i, j] == pytest.approx(num, rel=1e-6, abs=1e-8)


def test_train_mode_dropout_is_inverted_and_seeded(gen):
    spec, params = _net((3, 200, 2), "relu", "linear", keep=0.5)
    x = gen.normal(size=(2, 3))
    a, _ = nn.forward(params, spec, x, "train", SeededStream(1))
    b, _ = nn.forward(params, spec, x, "train", SeededStream(1))
    np.testing.assert_array_equal(a, b)
    e1, _ = nn.forward(params, spec, x)
    e2, _ = nn.forward(params, spec, x)
    np.testing.assert_array_equal(e1, e2)
    with pytest.raises(ContractError):
        nn.forward(params, spec, x, "train")


def test_dropout_backward_uses_same_mask(gen):
    spec, params = _net((3, 8, 2), "tanh", "linear", keep=0.7)
    x = gen.normal(size=(5, 3))
    w = gen.normal(size=(5, 2))

    def loss(p):
        out, cache = nn.forward(p, spec, x, "train", SeededStream(9))
        return float(np.sum(out * w)), nn.backward(p, spec, cache, w)[0]

    assert nn.grad_check(loss, params) < 1e-6


def test_shape_errors():
    spec, params = _net()
    with pytest.raises(DimensionError):
        nn.forward(params, spec, np.zeros((2, 4)))
    with pytest.raises(ParameterError):
        nn.MlpSpec((3,))
    with pytest.raises(ParameterError):
        nn.MlpSpec((3, 2), "sigmoid")
    with pytest.raises(ParameterError):
        nn.MlpSpec((3, 2), dropout_keep=0.0)
    _, cache = nn.forward(params, spec, np.zeros((2, 3)))
    with pytest.raises(ContractError):
        nn.backward(params, spec, cache, np.zeros((3, 4)))


def test_adam_first_step_moves_by_lr():
    spec, params = _net()
    before = params.flat()
    grads = params.zeros_like()
    grads.set_flat(np.linspace(-1, 1, params.size) + 0.01)
    adam = nn.AdamState.for_params(params)
    shadow = nn.PolyakShadow.of(params, 0.5)
    nn.adam_polyak_step(params, grads, adam, shadow, 1e-3)
    step = before - params.flat()
    np.testing.assert_allclose(np.abs(step), 1e-3, rtol=1e-4)
    np.testing.assert_allclose(shadow.params.flat(), 0.5 * before + 0.5 * params.flat())


def test_adam_rejects_non_finite_gradient_without_update():
    spec, params = _net()
    before = params.flat()
    grads = params.zeros_like()
    grads.weights[0][0, 0] = np.nan
    adam = nn.AdamState.for_params(params)
    with pytest.raises(TrainingError):
        nn.adam_polyak_step(params, grads, adam, nn.PolyakShadow.of(params), 1e-3)
    np.testing.assert_array_equal(before, params.flat())
    assert adam.step == 0


def test_polyak_rho_range():
    _, params = _net()
    with pytest.raises(ParameterError):
        nn.PolyakShadow.of(params, 1.0)


@given(st.integers(0, 2**31))
def test_params_serialisation_round_trip_is_exact(seed):
    _, params = _net(seed=seed)
    back = nn.params_from_dict(nn.params_to_dict(params))
    np.testing.assert_array_equal(back.flat(), params.flat())


def test_adam_serialisation_round_trip():
    _, params = _net()
    adam = nn.AdamState.for_params(params)
    adam.m[0][...] = 0.1234567890123
    adam.step = 4
    back = nn.adam_from_dict(nn.adam_to_dict(adam))
    assert back.step == 4
    np.testing.assert_array_equal(back.m[0], adam.m[0])
