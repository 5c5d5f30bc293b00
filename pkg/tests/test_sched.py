import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mvsds import sched as sch

# sqrt of the running product of (1 - beta), evaluated at 40 digits with mpmath
LINEAR_ALPHA = {0: 0.9999499987499375, 500: 0.27892052338439332, 999: 0.0063528180875700221}
LINEAR_SIGMA_500 = 0.96031418902095584
COSINE_ALPHA = {0: 0.99997935767453631, 500: 0.70163036739354617, 999: 4.9282521313691659e-5}


class ScalarSched:
    """Stand-in schedule with alpha=0.8, sigma=0.6 at t=0 for hand-checked values."""

    num_steps = 2
    alpha = np.array([0.8, 0.6])
    sigma = np.array([0.6, 0.8])

    def coeffs(self, t):
        return (1.0, 0.0) if t == -1 else (float(self.alpha[t]), float(self.sigma[t]))


@pytest.mark.parametrize("family", ["linear_beta", "cosine"])
def test_normalization(family):
    s = sch.build_schedule(1000, family)
    assert np.abs(s.alpha ** 2 + s.sigma ** 2 - 1).max() < 1e-6
    assert np.all(np.diff(s.alpha) < 0) and np.all(np.diff(s.sigma) > 0)
    assert np.all(s.alpha > 0) and np.all(s.alpha <= 1) and np.all(s.sigma >= 0) and np.all(s.sigma < 1)


def test_linear_matches_cumulative_product_oracle(linear_sched):
    for t, a in LINEAR_ALPHA.items():
        assert linear_sched.alpha[t] == pytest.approx(a, rel=1e-12)
    assert linear_sched.sigma[500] == pytest.approx(LINEAR_SIGMA_500, rel=1e-12)
    assert linear_sched.derivation.startswith("linear_beta")


def test_cosine_matches_oracle(cosine_sched):
    for t, a in COSINE_ALPHA.items():
        assert cosine_sched.alpha[t] == pytest.approx(a, rel=1e-9)


def test_two_step_cosine_is_decreasing():
    s = sch.build_schedule(2, "cosine")
    assert s.alpha[0] > s.alpha[1]


def test_build_errors():
    with pytest.raises(ValueError):
        sch.build_schedule(1)
    with pytest.raises(ValueError):
        sch.build_schedule(10, "quadratic")


def test_deterministic():
    a, b = sch.build_schedule(1000), sch.build_schedule(1000)
    assert np.array_equal(a.alpha, b.alpha) and a.derivation == b.derivation


def test_scalar_examples():
    s = ScalarSched()
    assert sch.add_noise(np.array(1.0), np.array(0.2), 0, s) == pytest.approx(0.92)
    assert sch.estimate_x0(np.array(0.92), np.array(0.5), 0, s) == pytest.approx(0.775)
    assert sch.add_noise(np.array(0.0), np.array(0.7), 0, s) == pytest.approx(0.6 * 0.7)
    assert sch.estimate_x0(np.array(0.42), np.array(0.0), 0, s) == pytest.approx(0.42 / 0.8)


def test_clean_endpoint(linear_sched):
    x, e = np.random.default_rng(0).standard_normal((2, 5))
    assert np.array_equal(sch.add_noise(x, e, -1, linear_sched), x)


def test_shape_and_domain_errors(linear_sched):
    with pytest.raises(ValueError):
        sch.add_noise(np.zeros(3), np.zeros(4), 10, linear_sched)
    with pytest.raises(ValueError):
        sch.add_noise(np.zeros(3), np.zeros(3), 1000, linear_sched)

    class Dead(ScalarSched):
        alpha = np.array([0.0, 0.0])
        sigma = np.array([1.0, 1.0])

    with pytest.raises(FloatingPointError):
        sch.estimate_x0(np.zeros(3), np.zeros(3), 0, Dead())


@settings(max_examples=50, deadline=None)
@given(t=st.integers(0, 999), seed=st.integers(0, 2**32 - 1))
def test_roundtrip(linear_sched, t, seed):
    x, e = np.random.default_rng(seed).standard_normal((2, 32))
    assert np.abs(sch.estimate_x0(sch.add_noise(x, e, t, linear_sched), e, t, linear_sched) - x).max() < 1e-5


def test_ddim_examples(linear_sched):
    rng = np.random.default_rng(1)
    x, e = rng.standard_normal((2, 16))
    xt = sch.add_noise(x, e, 600, linear_sched)
    assert np.allclose(sch.ddim_step(xt, e, 600, 200, linear_sched), sch.add_noise(x, e, 200, linear_sched))
    e_wrong = rng.standard_normal(16)
    assert np.allclose(sch.ddim_step(xt, e_wrong, 600, -1, linear_sched),
                       sch.estimate_x0(xt, e_wrong, 600, linear_sched))
    with pytest.raises(ValueError):
        sch.ddim_step(xt, e, 200, 600, linear_sched)
    with pytest.raises(ValueError):
        sch.ddim_step(xt, e, 200, 200, linear_sched)


@settings(max_examples=30, deadline=None)
@given(pair=st.tuples(st.integers(0, 999), st.integers(-1, 998)).filter(lambda p: p[1] < p[0]),
       seed=st.integers(0, 2**32 - 1))
def test_ddim_closed_form(linear_sched, pair, seed):
    t_from, t_to = pair
    xt, eps = np.random.default_rng(seed).standard_normal((2, 8))
    a1, s1 = (1.0, 0.0) if t_from == -1 else (linear_sched.alpha[t_from], linear_sched.sigma[t_from])
    a2, s2 = (1.0, 0.0) if t_to == -1 else (linear_sched.alpha[t_to], linear_sched.sigma[t_to])
    expected = a2 * (xt - s1 * eps) / a1 + s2 * eps
    assert np.allclose(sch.ddim_step(xt, eps, t_from, t_to, linear_sched), expected, rtol=1e-10, atol=1e-10)


def test_ddim_bit_determinism(linear_sched):
    g = torch.Generator().manual_seed(0)
    xt, eps = torch.randn(2, 4, 3, 8, 8, generator=g)
    assert torch.equal(sch.ddim_step(xt, eps, 500, 250, linear_sched), sch.ddim_step(xt, eps, 500, 250, linear_sched))


def test_ddim_timesteps():
    assert sch.ddim_timesteps(1000, 1) == [999, -1]
    ts = sch.ddim_timesteps(1000, 50)
    assert ts[0] == 999 and ts[-1] == -1 and len(ts) == 51
    assert all(a > b for a, b in zip(ts, ts[1:]))


def test_anneal_examples():
    win = sch.AnnealWindow(anneal_steps=8000)
    assert sch.anneal_bounds(0, win, 1000) == (980, 980)
    assert sch.anneal_bounds(8000, win, 1000) == (20, 500)
    assert sch.anneal_bounds(50_000, win, 1000) == (20, 500)
    assert sch.anneal_bounds(4000, win, 1000) == (500, 740)


@settings(max_examples=40, deadline=None)
@given(a=st.integers(0, 12_000), b=st.integers(0, 12_000))
def test_anneal_monotone(a, b):
    win = sch.AnnealWindow(anneal_steps=8000)
    lo, hi = sorted((a, b))
    (mn1, mx1), (mn2, mx2) = sch.anneal_bounds(lo, win, 1000), sch.anneal_bounds(hi, win, 1000)
    assert mn2 <= mn1 and mx2 <= mx1
    assert mn1 <= mx1 and mn2 <= mx2
    assert 0 < mn2 and mx1 < 1000
