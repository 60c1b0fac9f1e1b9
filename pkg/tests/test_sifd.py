import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from sifd_helpers import rho_value
from sifdal import ops
from sifdal.errors import ConfigurationError, ContractError, DataError
from sifdal.gradcheck import check_gradients
from sifdal.sifd import (disentangling_loss_raw, init_sifd, scale_related_loss,
                         sifd_forward)
from sifdal.tape import Tape


def make_tape(rng, channels=16, k=3, batch=4, hw=8):
    params = init_sifd(rng, channels // 2, k)
    params["x"] = rng.normal(size=(batch, channels, hw, hw))
    return Tape(params)


def test_shapes(rng):
    t = make_tape(rng, 16, 5, batch=2)
    out = sifd_forward(t, t.param("x"))
    assert out.head_input.shape == (2, 8, 8, 8)
    assert out.rel_logits.shape == (2, 5)
    assert out.rel_proj.shape == out.inv_proj.shape == (2, 1)


def test_single_map_input(rng):
    params = init_sifd(rng, 8, 5)
    t = Tape(params)
    out = sifd_forward(t, t.const(rng.normal(size=(16, 8, 8))))
    assert out.head_input.shape == (8, 8, 8)
    assert out.rel_logits.shape == (1, 5)


def test_zero_rel_gives_zero_logits(rng):
    x = rng.normal(size=(3, 16, 4, 4))
    x[:, :8] = 0.0
    t = Tape(init_sifd(rng, 8, 4))
    out = sifd_forward(t, t.const(x))
    np.testing.assert_array_equal(out.rel_logits.value, 0.0)
    np.testing.assert_array_equal(out.rel_proj.value, 0.0)


def test_head_input_ignores_rel_channels(rng):
    x = rng.normal(size=(2, 16, 4, 4))
    y = x.copy()
    y[:, :8] = rng.normal(size=(2, 8, 4, 4)) * 100
    params = init_sifd(rng, 8, 3)
    t1, t2 = Tape(params), Tape(params)
    h1 = sifd_forward(t1, t1.const(x)).head_input.value
    h2 = sifd_forward(t2, t2.const(y)).head_input.value
    assert h1.tobytes() == h2.tobytes()


def test_odd_channels_rejected(rng):
    t = Tape(init_sifd(rng, 4, 3))
    with pytest.raises(ConfigurationError):
        sifd_forward(t, t.const(np.zeros((2, 9, 4, 4))))


def test_scale_related_loss_values():
    t = Tape()
    logits = np.full((1, 5), -20.0)
    logits[0, 2] = 20.0
    assert scale_related_loss(t.const(logits), [2]).value < 1e-6
    assert abs(scale_related_loss(t.const(np.zeros((3, 5))), [0, 4, 1]).value - math.log(5)) < 1e-12

    hand = np.array([[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]])
    levels = [1, 0]
    expect = 0.0
    for row, lv in zip(hand, levels):
        expect += -(row[lv] - math.log(sum(math.exp(v) for v in row)))
    expect /= 2
    assert abs(scale_related_loss(t.const(hand), levels).value - expect) < 1e-12


def test_scale_related_loss_rejects_bad_level():
    t = Tape()
    with pytest.raises(DataError):
        scale_related_loss(t.const(np.zeros((2, 3))), [0, 3])


def test_pearson_examples():
    assert abs(rho_value([1, 2, 3], [6, 4, 2]) + 1.0) < 1e-9
    assert abs(rho_value([5, 5, 5, 5], [1, 2, 3, 4])) < 1e-3


def test_pearson_independent_samples():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=10_000), rng.uniform(size=10_000)
    assert abs(rho_value(a, b)) < 0.05


def test_disentangling_loss_examples(rng):
    t = Tape()
    a = rng.normal(size=(32, 1))
    assert abs(disentangling_loss_raw(t.const(a), t.const(a)).value - 1.0) < 1e-9
    assert abs(disentangling_loss_raw(t.const(a), t.const(-3 * a + 7)).value - 1.0) < 1e-9
    with pytest.raises(ContractError):
        disentangling_loss_raw(t.const(a[:1]), t.const(a[:1]))


def test_disentangling_loss_independent_projections():
    rng = np.random.default_rng(5)
    params = init_sifd(rng, 8, 3)
    feats = rng.normal(size=(256, 16, 2, 2))
    t = Tape(params)
    out = sifd_forward(t, t.const(feats))
    assert disentangling_loss_raw(out.rel_proj, out.inv_proj).value < 0.05


def test_multi_dim_projection_averages_rho_squared(rng):
    t = Tape()
    a = rng.normal(size=(20, 2))
    b = np.stack([a[:, 0], rng.normal(size=20)], axis=1)
    r2 = rho_value(a[:, 1], b[:, 1]) ** 2
    val = disentangling_loss_raw(t.const(a), t.const(b)).value
    assert abs(val - (1.0 + r2) / 2) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1),
       st.floats(0.1, 10.0), st.booleans(), st.floats(-50, 50))
def test_pearson_properties(n, seed, alpha_mag, negative, beta):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=n), r.normal(size=n)
    alpha = -alpha_mag if negative else alpha_mag
    # outside this regime the eps guard itself moves rho by more than 1e-9
    assume(min(1.0, alpha ** 2) * np.var(a) * np.var(b) >= 1e-6)
    rho = rho_value(a, b)
    assert -1.0 <= rho <= 1.0
    assert abs(rho_value(b, a) - rho) < 1e-9
    assert abs(rho_value(alpha * a + beta, b) - np.sign(alpha) * rho) < 1e-9


def test_sifd_gradients(rng):
    params = init_sifd(rng, 4, 3)
    params["x"] = rng.normal(size=(5, 8, 3, 3))
    levels = [0, 2, 1, 1, 0]

    def f(t):
        out = sifd_forward(t, t.param("x"))
        return scale_related_loss(out.rel_logits, levels) + disentangling_loss_raw(out.rel_proj, out.inv_proj)

    rep = check_gradients(f, params)
    assert rep.passed, rep


def test_conv_mode_gradients(rng):
    params = init_sifd(rng, 4, 3)
    params["det.disent.rel.w"] = rng.normal(size=(4, 8))
    params["det.disent.inv.w"] = rng.normal(size=(4, 8))
    params["x"] = rng.normal(size=(4, 8, 3, 3))

    def f(t):
        out = sifd_forward(t, t.param("x"), mode="conv")
        return disentangling_loss_raw(out.rel_proj, out.inv_proj) + ops.sum(out.head_input) * 0.1

    rep = check_gradients(f, params)
    assert rep.passed, rep
