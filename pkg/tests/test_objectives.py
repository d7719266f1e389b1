import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from groupface import numerics as nx
from groupface.numerics import Tensor
from groupface.objectives import (
    LossConfig,
    combined_loss,
    margin_softmax_loss,
    self_grouping_loss,
    target_margin,
)


def plain_ce(cos, labels, s):
    z = s * cos
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def test_config_defaults_and_validation():
    assert LossConfig().margin == 0.5 and LossConfig().scale == 64 and LossConfig().lam == 0.1
    assert LossConfig(margin_mode="cosface").margin == 0.35
    with pytest.raises(ValueError):
        LossConfig(margin_mode="arcface", margin=math.pi / 2)
    with pytest.raises(ValueError):
        LossConfig(margin_mode="cosface", margin=1.0)
    with pytest.raises(ValueError):
        LossConfig(scale=0)
    with pytest.raises(ValueError):
        LossConfig(lam=-0.1)
    with pytest.raises(ValueError):
        LossConfig(margin_mode="sphereface")


@pytest.mark.parametrize("mode", ["arcface", "cosface", "plain"])
def test_zero_margin_is_plain_softmax(mode, rng):
    cos = np.clip(rng.normal(scale=0.4, size=(6, 5)), -1, 1)
    y = rng.integers(0, 5, size=6)
    got = margin_softmax_loss(Tensor(cos), y, LossConfig(margin_mode=mode, margin=0.0, scale=10.0)).item()
    assert abs(got - plain_ce(cos, y, 10.0)) < 1e-12


def test_arcface_hand_example():
    cos = Tensor([[math.cos(math.pi / 3), 0.0]])
    loss = margin_softmax_loss(cos, [0], LossConfig(margin=math.pi / 6, scale=1.0)).item()
    assert abs(loss - math.log(2)) < 1e-12


def test_separated_scores_near_zero_loss():
    cos = Tensor([[1.0, -1.0, -1.0]])
    assert margin_softmax_loss(cos, [0], LossConfig(margin=0.0, scale=64.0)).item() < 1e-40


def test_cosface_target():
    out = target_margin(Tensor([[0.2, 0.9]]), [1], "cosface", 0.35).data
    np.testing.assert_allclose(out, [[0.2, 0.55]], rtol=1e-15)


def test_margin_loss_validation():
    with pytest.raises(ValueError):
        margin_softmax_loss(Tensor([[1.2, 0.0]]), [0], LossConfig())
    with pytest.raises(ValueError):
        margin_softmax_loss(Tensor([[0.2, 0.0]]), [2], LossConfig())


def test_arcface_target_continuous_and_increasing():
    c = np.linspace(-1, 1, 20001)
    out = target_margin(Tensor(c[:, None]), np.zeros(c.size, dtype=int), "arcface", 0.5).data[:, 0]
    assert (np.diff(out) > 0).all()
    switch = math.cos(math.pi - 0.5)
    near = target_margin(Tensor([[switch - 1e-12], [switch + 1e-12]]), [0, 0], "arcface", 0.5).data[:, 0]
    np.testing.assert_allclose(near, -1.0, atol=1e-9)


@given(
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.integers(0, 2**31 - 1),
)
def test_arcface_margin_monotone(m1, m2, seed):
    lo, hi = sorted((m1, m2))
    rng = np.random.default_rng(seed)
    cos = rng.uniform(-0.95, 0.95, size=(5, 6))
    y = rng.integers(0, 6, size=5)
    a = margin_softmax_loss(Tensor(cos), y, LossConfig(margin=lo, scale=8.0)).item()
    b = margin_softmax_loss(Tensor(cos), y, LossConfig(margin=hi, scale=8.0)).item()
    assert b >= a - 1e-12


@pytest.mark.parametrize("mode", ["arcface", "cosface", "plain"])
def test_margin_loss_gradient(mode, rng):
    # includes targets on both sides of the arcface switch at cos(pi - m)
    cos = Tensor(np.array([[0.3, -0.2, 0.1], [-0.95, 0.4, 0.0], [0.7, 0.6, -0.5], [-0.2, 0.1, 0.05]]),
                 requires_grad=True)
    y = np.array([0, 0, 1, 2])
    f = lambda: margin_softmax_loss(cos, y, LossConfig(margin_mode=mode, scale=4.0))  # noqa: E731
    res = nx.gradient_check_detailed(f, [cos])
    assert res.skipped_at_kinks == 0
    assert res.max_relative_error < 1e-6


def test_self_grouping_examples():
    assert abs(self_grouping_loss(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() - math.log(4)) < 1e-12
    assert abs(self_grouping_loss(Tensor([[0.0, 0.0]]), [0]).item() - math.log(2)) < 1e-15
    sharp = Tensor(np.array([[50.0, 0.0], [0.0, 50.0]]))
    assert self_grouping_loss(sharp, [0, 1]).item() < 1e-20
    with pytest.raises(ValueError):
        self_grouping_loss(Tensor(np.zeros((2, 2))), [0, 2])


@given(st.integers(0, 2**31 - 1))
def test_self_grouping_nonnegative(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 9))
    logits = rng.normal(scale=5, size=(7, k))
    assert self_grouping_loss(Tensor(logits), rng.integers(0, k, size=7)).item() >= 0


def test_combined_loss_examples():
    assert abs(combined_loss(1.0, 0.5, 0.1) - 1.05) < 1e-15
    assert combined_loss(1.0, 0.5, 0.0) == 1.0
    assert combined_loss(1.0, 0.0, 0.1) == 1.0
    l1, l2 = Tensor(np.array(2.0)), Tensor(np.array(3.0))
    assert abs(combined_loss(l1, l2, 0.1).item() - 2.3) < 1e-15
