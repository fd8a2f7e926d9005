from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_diff, lam_quadrature
from samplerlab.schedules import (
    Exponent,
    GeometricPath,
    ModePath,
    NoiseSchedule,
    VESchedule,
    gaussian_geometric_closed_form,
    geometric_path,
    make_path,
    mode_path,
    vp_schedule,
)
from samplerlab.targets import DTYPE, GaussianSpec, make_gauss, make_gmm, make_gmm3, make_gmm40


def test_constant_beta_lambda():
    s = vp_schedule(beta_min=1.0, beta_max=1.0)
    assert s.lam(1.0) == pytest.approx(1 - math.exp(-2), abs=1e-14)
    assert s.lam(0.0) == 0.0


@pytest.mark.parametrize("bmin,bmax,T", [(0.03, 3.0, 1.0), (0.1, 20.0, 2.0), (0.5, 0.5, 0.7)])
def test_lambda_matches_quadrature(bmin, bmax, T):
    s = vp_schedule(T, bmin, bmax)
    for t in np.linspace(0, T, 11):
        assert abs(s.lam(t) - lam_quadrature(s.beta, t)) < 1e-8


def test_lambda_monotone_on_grid():
    s = vp_schedule(beta_min=0.03, beta_max=3.0, v=30.0)
    lam = s.lam(torch.linspace(0, 1, 1000, dtype=DTYPE))
    assert (lam.diff() >= 0).all() and lam[0] == 0 and (lam < 1).all()


def test_sigma_uses_flipped_time():
    s = vp_schedule(beta_min=0.03, beta_max=3.0, v=30.0)
    assert s.sigma(0.0) == pytest.approx(30 * math.sqrt(3.0))
    assert s.sigma(1.0) == pytest.approx(30 * math.sqrt(0.03))
    assert s.prior == 900.0


def test_schedule_validation():
    with pytest.raises(ValueError):
        vp_schedule(beta_min=0.0)
    with pytest.raises(ValueError):
        vp_schedule(beta_min=2.0, beta_max=1.0)
    with pytest.raises(ValueError):
        VESchedule(0.0)


def test_ve_schedule():
    s = VESchedule(2.0)
    assert s.prior == 4.0
    assert s.sigma(0.0) == pytest.approx(math.sqrt(2.0))
    assert s.cond_var(0.5) == pytest.approx(1.5**2)


def _prior():
    return GaussianSpec.isotropic(2, 2.0)


def test_geometric_endpoints():
    target = make_gmm3()
    path = geometric_path(_prior(), target)
    x = torch.randn(8, 2, dtype=DTYPE) * 4
    assert torch.equal(path.log_pi(x, 0.0), _prior().log_prob(x))
    assert torch.equal(path.log_pi(x, 1.0), target.log_unnorm(x))


@pytest.mark.parametrize("kind", ["geometric", "mode"])
@pytest.mark.parametrize("exp_kind", ["linear", "cosine"])
def test_path_derivatives_match_finite_differences(kind, exp_kind):
    path = make_path(kind, _prior(), make_gmm3(), Exponent(1.0, exp_kind))
    gen = torch.Generator().manual_seed(2)
    for _ in range(10):
        x = torch.randn(1, 2, generator=gen, dtype=DTYPE) * 4
        t = float(torch.rand(1, generator=gen) * 0.9 + 0.05)
        g = path.grad_log_pi(x, t)[0].numpy()
        fd = central_diff(lambda z: path.log_pi(torch.tensor(z[None], dtype=DTYPE), t).item(), x[0].numpy())
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1.0)
        h = 1e-6
        dt_fd = (path.log_pi(x, t + h) - path.log_pi(x, t - h)).item() / (2 * h)
        assert abs(path.dt_log_pi(x, t).item() - dt_fd) <= 1e-5 * max(abs(dt_fd), 1.0)


def test_mode_path_endpoints_exact():
    target = make_gmm40()
    prior = _prior()
    path = mode_path(prior, target)
    m0, v0 = path.components(0.0)
    m1, v1 = path.components(1.0)
    assert torch.equal(m0, prior.mean.expand_as(m0)) and torch.equal(v0, prior.variance.expand_as(v0))
    assert torch.equal(m1, target.means) and torch.equal(v1, target.variances)
    x = torch.randn(16, 2, dtype=DTYPE) * 10
    torch.testing.assert_close(path.log_pi(x, 0.0), prior.log_prob(x), rtol=1e-12, atol=1e-12)
    torch.testing.assert_close(path.log_pi(x, 1.0), target.log_unnorm(x), rtol=1e-12, atol=1e-12)


def test_mode_path_needs_gmm():
    from samplerlab.targets import TargetDensity

    t = TargetDensity(2, lambda x: -(x**2).sum(-1), lambda x: -2 * x)
    with pytest.raises(TypeError):
        ModePath(_prior(), t)


def test_mode_path_sampler_moments():
    target = make_gmm([[4.0, 0.0]], [1.0], [1.0])
    path = mode_path(_prior(), target)
    x = path.sample(0.5, 50_000, torch.Generator().manual_seed(0))
    # mean 0.5 * 4, variance 0.5 * 2 + 0.5 * 1
    assert abs(x[:, 0].mean().item() - 2.0) < 3 * math.sqrt(1.5 / 50_000)
    assert abs(x[:, 1].var().item() - 1.5) < 0.05


def test_geometric_gaussian_closed_form():
    prior = _prior()
    target = make_gauss(2, variance=0.5, mean=3.0)
    path = GeometricPath(prior, target)
    x = torch.randn(10, 2, dtype=DTYPE)
    for beta in (0.0, 0.3, 1.0):
        mean, var = gaussian_geometric_closed_form(prior, target.means[0], target.variances[0], beta)
        expected = -(x - mean) / var
        torch.testing.assert_close(path.grad_log_pi(x, beta), expected, rtol=1e-10, atol=1e-12)


def test_exponent_kinds():
    e = Exponent(2.0, "cosine")
    assert e(0.0) == pytest.approx(0.0) and e(2.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        Exponent(1.0, "cubic")
    with pytest.raises(ValueError):
        make_path("learned", _prior(), make_gmm3())


@given(st.floats(0.001, 5.0), st.floats(0.0, 10.0), st.floats(0.2, 3.0))
def test_property_lambda_in_unit_interval_and_monotone(bmin, extra, T):
    s = NoiseSchedule(T, bmin, bmin + extra)
    ts = np.linspace(0, T, 50)
    lam = np.array([s.lam(t) for t in ts])
    # lambda reaches 1.0 only through float64 rounding once the integral is large
    assert lam[0] == 0 and (np.diff(lam) >= -1e-15).all() and (lam <= 1).all()


@given(st.floats(0.0, 1.0), st.sampled_from(["linear", "cosine"]))
def test_property_exponent_bounded(t, kind):
    v = Exponent(1.0, kind)(t)
    assert -1e-12 <= v <= 1 + 1e-12
