import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from gaussperc._validation import DomainError
from gaussperc.kernels import (cauchy_mixture, hankel_tauberian_factor, kernel_from_config,
                               log_kernel_root, make_cauchy, make_log_kernel, make_riesz,
                               radial_self_convolution_2d, reconstruct_from_mixture,
                               slowly_varying_part, tauberian_constants)


def test_cauchy_values(cauchy1):
    assert cauchy1(0.0) == 1.0
    assert cauchy1(math.sqrt(3)) == pytest.approx(0.5, abs=1e-15)
    assert cauchy1.k0 == 1.0 and cauchy1.samplable


@pytest.mark.parametrize("alpha", [0.0, 2.0, -1.0, 3.0])
def test_cauchy_rejects_alpha(alpha):
    with pytest.raises(DomainError):
        make_cauchy(alpha, 2)


def test_cauchy_mixture_weight_alpha1():
    v = cauchy_mixture(1.0).v
    s = np.array([0.1, 1.0, 3.0])
    np.testing.assert_allclose(v(s), s ** -0.5 * np.exp(-s) / math.sqrt(math.pi), rtol=1e-14)
    assert np.all(v(np.linspace(0, 20, 50)) >= 0)


def test_riesz_values():
    k = make_riesz(0.5, 2)
    assert k(4.0) == pytest.approx(0.5)
    assert k(1.0) == 1.0
    assert not k.samplable
    with pytest.raises(DomainError):
        k(0.0)
    np.testing.assert_allclose(slowly_varying_part(k, [0.3, 2.0, 77.0]), 1.0, rtol=1e-14)
    with pytest.raises(DomainError):
        slowly_varying_part(k, 0.0)


def test_slowly_varying_cauchy(cauchy1):
    # r (1 + r^2)^(-1/2) = 1 - 1/(2 r^2) + ...
    assert float(slowly_varying_part(cauchy1, 1e3)) == pytest.approx(0.9999995, abs=1e-6)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
@pytest.mark.parametrize("r", [0.0, 0.5, 1.0, 2.0, 10.0])
def test_mixture_reconstruction(alpha, r):
    k = make_cauchy(alpha, 2)
    assert abs(reconstruct_from_mixture(k.mixture(), r) - float(k(r))) <= 1e-8


def test_mixture_examples():
    assert reconstruct_from_mixture(cauchy_mixture(1.0), math.sqrt(3)) == pytest.approx(0.5, abs=1e-10)
    assert reconstruct_from_mixture(cauchy_mixture(0.5), 2.0) == pytest.approx(5 ** -0.25, abs=1e-10)
    assert 5 ** -0.25 == pytest.approx(0.6687, abs=1e-4)


def test_time_scale_weight_matches_definition():
    m = cauchy_mixture(0.5)
    t = np.array([0.1, 1.0, 4.0])
    expect = 0.5 / math.pi * t ** -5 * m.v(1 / (4 * t * t))
    np.testing.assert_allclose(m.w(t), expect, rtol=1e-14)


def test_regular_variation():
    for alpha in (0.5, 1.0, 1.5):
        k = make_cauchy(alpha, 2)
        for a in (2.0, 5.0):
            assert float(k(a * 1e4) / k(1e4)) == pytest.approx(a ** -alpha, rel=0.01)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
def test_positive_definite_gram(alpha, rng):
    k = make_cauchy(alpha, 2)
    pts = rng.uniform(-10, 10, size=(50, 2))
    G = k(np.linalg.norm(pts[:, None] - pts[None], axis=-1))
    assert np.linalg.eigvalsh(G).min() >= -1e-8 * np.trace(G)


def _c_prime_mp(d, a):
    d, a = mpmath.mpf(d), mpmath.mpf(a)
    return (mpmath.pi ** (-d / 4) * mpmath.sqrt(mpmath.gamma((d - a) / 2) / mpmath.gamma(a / 2))
            * mpmath.gamma((d + a) / 4) / mpmath.gamma((d - a) / 4))


def test_tauberian_log_case():
    c1, c2 = tauberian_constants(2, 0.0, 1.0)
    assert c2 == pytest.approx(2 * math.pi, abs=1e-12)
    assert c1 == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-12)


def test_tauberian_alpha1():
    _, c2 = tauberian_constants(2, 1.0)
    assert c2 == pytest.approx(2 * math.pi, rel=1e-13)


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("alpha", [0.25, 0.5, 1.0, 1.5])
def test_tauberian_identity(dim, alpha):
    c1, c2 = tauberian_constants(dim, alpha)
    other = math.sqrt(c2) / ((2 * math.pi) ** (dim / 2)
                             * hankel_tauberian_factor(1 + alpha / 2, dim / 2 - 1))
    assert abs(c1 - other) <= 1e-12
    assert c1 == pytest.approx(float(_c_prime_mp(dim, alpha)), rel=1e-13)


@pytest.mark.parametrize("alpha", [0.5, 1.0, 1.5])
def test_tauberian_spectral_limit(alpha):
    # 2-D Fourier transform of the Cauchy kernel via the Hankel integral
    # int_0^inf J0(l r) r (1 + r^2)^(-mu-1) dr = l^mu K_mu(l) / (2^mu Gamma(mu + 1)),
    # mu = alpha/2 - 1; its small-frequency behaviour is c'' l^(alpha - 2)
    mu = alpha / 2 - 1
    lam = 1e-6
    rho = 2 * math.pi * lam ** mu * special.kv(mu, lam) / (2 ** mu * special.gamma(mu + 1))
    _, c2 = tauberian_constants(2, alpha)
    assert rho * lam ** (2 - alpha) == pytest.approx(c2, rel=1e-3)


def test_hankel_formula_sanity():
    # the closed form above at l = 1, alpha = 1.5 against an Abel-damped quadrature
    mu = -0.25
    closed = special.kv(mu, 1.0) / (2 ** mu * special.gamma(mu + 1))
    vals = []
    for eps in (1e-2, 5e-3):
        f = lambda r: special.j0(r) * r * (1 + r * r) ** (-mu - 1) * math.exp(-eps * r)
        edges = np.arange(0, 40 / eps, math.pi)
        vals.append(sum(integrate.quad(f, x0, x1)[0] for x0, x1 in zip(edges[:-1], edges[1:])))
    # linear extrapolation eps -> 0
    assert 2 * vals[1] - vals[0] == pytest.approx(closed, rel=1e-2)


def test_tauberian_errors():
    with pytest.raises(DomainError):
        tauberian_constants(2, 2.0)
    with pytest.raises(DomainError):
        tauberian_constants(2, 0.0, gamma=0.0)


def test_log_kernel(log_kernel):
    k = log_kernel
    assert k.family == "log" and k.gamma == 1.0
    assert float(k(1e4)) * math.log(1e4) == pytest.approx(1.0, abs=0.2)
    assert 0.8 <= float(k(1e3)) * math.log(1e3) <= 1.2
    r = np.linspace(0, 50, 400)
    assert np.all(np.diff(k(r)) <= 1e-12)
    q = log_kernel_root(k)
    x = np.linspace(0, 100, 2001)
    assert np.all(np.diff(q(x)) <= 1e-15)


def test_log_kernel_conv_matches_table(log_kernel):
    # independent check of one tabulated value by nested quadrature in polar coordinates
    q = log_kernel_root(log_kernel)
    r = 3.0

    def inner(rho):
        g = lambda th: float(q(math.sqrt(rho * rho + r * r - 2 * rho * r * math.cos(th))))
        return 2 * integrate.quad(g, 0, math.pi, limit=200)[0]

    head = integrate.quad(lambda p: p * float(q(p)) * inner(p), 0, 60, limit=400,
                          points=[2.0, r, r + 2])[0]
    # beyond 60 the radial q is slowly varying on the scale r: q(|x - y|) ~ q(|y|)
    tail = integrate.quad(lambda p: 2 * math.pi * p * float(q(p)) ** 2, 60, q.support_radius,
                          limit=400)[0]
    # and beyond the support q = c x^-1 (log x)^-1 integrates in closed form
    c = log_kernel.metadata["q_normalization"]
    tail += 2 * math.pi * c * c / math.log(q.support_radius)
    assert head + tail == pytest.approx(float(log_kernel(r)), rel=0.02)


def test_log_kernel_rejects_gamma():
    with pytest.raises(DomainError):
        make_log_kernel(-1.0)


def test_radial_convolution_against_gaussian():
    # Gaussian q = exp(-x^2): q*q(r) = pi/2 exp(-r^2/2)
    q = lambda x: np.exp(-np.asarray(x) ** 2)
    for r in (0.0, 0.7, 2.0):
        val = radial_self_convolution_2d(q, r, tail_gamma=50.0, join_radius=2.0)
        assert val == pytest.approx(math.pi / 2 * math.exp(-r * r / 2), rel=1e-6, abs=1e-9)


def test_kernel_from_config():
    assert kernel_from_config({"family": "cauchy", "alpha": "0.5"}).alpha == 0.5
    assert kernel_from_config({"family": "riesz", "alpha": "0.3", "dim": "3"}).dim == 3
    with pytest.raises(DomainError):
        kernel_from_config({"family": "matern"})


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0.05, 1.95), r=st.floats(0.0, 1e3))
def test_cauchy_monotone_and_bounded(alpha, r):
    k = make_cauchy(alpha, 2)
    v = float(k(r))
    assert 0 < v <= 1
    assert float(k(r + 1.0)) <= v
