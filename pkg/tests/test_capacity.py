import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from gaussperc._validation import DomainError
from gaussperc.capacity import (CapacitySolver, DiscreteMeasure, ball, box, c_alpha, capacity,
                                capacity_asymptote, condensed_segment, dual_potential, energy,
                                extrapolate_limit, gram_matrix, minimize_energy, points,
                                projection_compare, riesz_equilibrium_density, segment,
                                union_of_balls)
from gaussperc.kernels import make_cauchy, make_riesz


def _c_alpha_mp(a):
    a = mpmath.mpf(a)
    b = (1 + a) / 2
    return mpmath.beta(b, b) * mpmath.cos(mpmath.pi * a / 2) / mpmath.pi


def test_c_alpha_values():
    assert c_alpha(0.0) == 1.0
    assert c_alpha(0.5) == pytest.approx(float(_c_alpha_mp(0.5)), abs=1e-12)
    assert c_alpha(0.5) == pytest.approx(0.38138, abs=1e-5)
    grid = np.linspace(0, 0.999, 20)
    vals = [c_alpha(a) for a in grid]
    assert np.all(np.diff(vals) < 0) and all(0 < v <= 1 for v in vals)
    with pytest.raises(DomainError):
        c_alpha(1.0)


def test_riesz_density():
    b = 0.75
    assert float(riesz_equilibrium_density(0.5, 0.5)) == pytest.approx(
        0.25 ** -0.25 / float(mpmath.beta(b, b)), rel=1e-12)
    assert float(riesz_equilibrium_density(0.5, 0.5)) == pytest.approx(0.8346, abs=1e-4)
    x = np.linspace(0.01, 0.99, 33)
    np.testing.assert_allclose(riesz_equilibrium_density(0.3, x), riesz_equilibrium_density(0.3, 1 - x))
    np.testing.assert_allclose(riesz_equilibrium_density(0.9999, x), 1.0, atol=2e-3)
    assert np.isinf(riesz_equilibrium_density(0.5, 0.0))
    # integrates to one
    from scipy import integrate
    assert integrate.quad(lambda t: float(riesz_equilibrium_density(0.5, t)), 0, 1)[0] == \
        pytest.approx(1.0, rel=1e-6)


def test_segment_gram_exact_interval_averages():
    # brute-force double Gauss-Legendre average over two separated cells
    k = make_riesz(0.5, 2)
    dom = segment(1.0, n=4)
    G = gram_matrix(dom, k)
    x, w = np.polynomial.legendre.leggauss(40)
    a = 0.125 + 0.125 * x
    b = 0.625 + 0.125 * x
    brute = (w[:, None] * w[None, :] * np.abs(a[:, None] - b[None, :]) ** -0.5).sum() / 4
    assert G[0, 2] == pytest.approx(brute, rel=1e-9)
    # diagonal: mean of |x-y|^-a over a cell of length h is 2 h^-a / ((1-a)(2-a))
    assert G[1, 1] == pytest.approx(2 * 0.25 ** -0.5 / (0.5 * 1.5), rel=1e-12)


def test_uniform_energy_riesz_limit():
    k = make_riesz(0.5, 2)
    dom = segment(1.0, n=64)
    assert energy(DiscreteMeasure.uniform(dom), k) == pytest.approx(8 / 3, rel=1e-12)


def test_single_cell_energy_cauchy():
    k = make_cauchy(1.0, 2)
    dom = segment(0.25, n=1)
    assert energy(DiscreteMeasure.uniform(dom), k) == 1.0


def test_two_cell_energy():
    k = make_cauchy(1.0, 2)
    dom = points([[0.0, 0.0], [10.0, 0.0]])
    e = energy(DiscreteMeasure(np.array([0.5, 0.5]), dom), k)
    assert e == pytest.approx(0.5 + 0.5 / math.sqrt(101), rel=1e-14)
    assert e == pytest.approx(0.5497, abs=1e-4)


def test_points_riesz_singular():
    with pytest.raises(DomainError):
        gram_matrix(points([[0, 0], [1, 0]]), make_riesz(0.5))


def test_measure_validation():
    dom = segment(1.0, n=4)
    with pytest.raises(DomainError):
        DiscreteMeasure(np.array([0.5, 0.5, 0.5, -0.5]), dom)
    with pytest.raises(DomainError):
        DiscreteMeasure(np.array([0.5, 0.5, 0.5, 0.5]), dom)


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.7])
def test_riesz_segment_capacity(alpha):
    res = capacity(segment(1.0, n=512), make_riesz(alpha, 2))
    assert res.converged and 0 <= res.duality_gap <= 1e-6
    assert res.capacity == pytest.approx(c_alpha(alpha), rel=0.02)
    assert res.capacity == pytest.approx(1 / energy(res.measure, make_riesz(alpha, 2)), rel=1e-12)
    w = res.measure.weights
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    assert res.capacity <= res.upper_bound * (1 + 1e-12)
    assert res.upper_bound <= res.capacity * (1 + 2e-6)


def test_refinement_is_cauchy_sequence():
    k = make_riesz(0.5, 2)
    c = [capacity(segment(1.0, n=n), k).capacity for n in (64, 128, 256)]
    assert abs(c[2] - c[1]) < abs(c[1] - c[0])
    assert extrapolate_limit(c) == pytest.approx(c_alpha(0.5), rel=1e-5)


def test_extrapolate_limit_geometric():
    seq = [3 + 2 * 0.5 ** k for k in range(3)]
    assert extrapolate_limit(seq) == pytest.approx(3.0, rel=1e-14)
    assert extrapolate_limit([1.0, 1.0, 1.0]) == 1.0
    with pytest.raises(DomainError):
        extrapolate_limit([1.0, 2.0])


def test_singleton_ball_capacity():
    res = capacity(ball(0.05, cell_size=0.05), make_cauchy(1.0))
    # five cells within 0.05 of each other: energy close to K(0) = 1
    assert res.capacity == pytest.approx(1.0, rel=5e-3)
    with pytest.raises(DomainError):
        capacity(segment(0.25, n=1), make_cauchy(1.0))


def test_dual_potential(cauchy05):
    res = capacity(segment(8.0), cauchy05)
    h = dual_potential(res, cauchy05)
    supp = res.measure.weights > 1e-6
    assert np.all(np.abs(h[supp] - 1) <= 10 * 1e-6)
    assert h.min() >= 1 - 10 * 1e-6
    far = dual_potential(res, cauchy05, [[1e6, 0.0]])
    assert far[0] == pytest.approx(res.capacity * float(cauchy05(1e6 - 4)), rel=1e-3)
    # |h|_H^2 = Cap^2 E(mu) = Cap
    w = res.measure.weights
    G = gram_matrix(res.measure.domain, cauchy05)
    assert res.capacity ** 2 * float(w @ G @ w) == pytest.approx(res.capacity, rel=1e-12)


def test_dual_potential_riesz_on_axis():
    k = make_riesz(0.5, 2)
    res = capacity(segment(1.0, n=128), k)
    centres = res.measure.domain.centers
    pot = dual_potential(res, k, centres[::8])
    # point-to-cell averages are exact on the line; close to 1 at the centre of cells
    assert np.all(np.abs(pot - 1) < 0.05)


def test_solver_estimator_api(cauchy05):
    dom = segment(4.0)
    est = CapacitySolver(cauchy05, tol=1e-8).fit(dom)
    assert est.capacity_ == pytest.approx(capacity(dom, cauchy05, 1e-8).capacity, rel=1e-12)
    assert est.get_params()["tol"] == 1e-8
    assert est.predict().shape == (dom.n,)


def test_minimize_energy_against_qp():
    # small instance checked against a brute-force KKT solve over all supports
    rng = np.random.default_rng(3)
    A = rng.normal(size=(6, 6))
    G = A @ A.T + 0.5 * np.eye(6)
    w, it, gap, ok = minimize_energy(G, 1e-12)
    best = np.inf
    import itertools
    for r in range(1, 7):
        for S in itertools.combinations(range(6), r):
            S = list(S)
            x = np.linalg.solve(G[np.ix_(S, S)], np.ones(r))
            if np.all(x > 0):
                best = min(best, 1 / x.sum())
    assert float(w @ G @ w) == pytest.approx(best, rel=1e-9)


def test_condensed_segment_layout():
    dom = condensed_segment(1, 2, 10, cell_size=0.5)
    assert dom.params["segments"] == 4
    starts = np.unique(np.floor(dom.centers[:, 0] / 2) * 2)
    np.testing.assert_array_equal(starts, [2, 4, 6, 8])
    with pytest.raises(DomainError):
        condensed_segment(3, 2, 10)
    with pytest.raises(DomainError):
        condensed_segment(1, 20, 10)


def test_condensed_capacity_below_segment(cauchy05):
    full = capacity(segment(16.0), cauchy05).capacity
    cond = capacity(condensed_segment(2, 2, 16), cauchy05).capacity
    assert cond <= full * (1 + 1e-9)


def test_monotone_in_domain(cauchy05):
    small = capacity(segment(4.0), cauchy05).capacity
    big = capacity(segment(8.0), cauchy05).capacity
    assert small <= big * (1 + 1e-9)
    sq = capacity(box((2.0, 2.0), cell_size=0.25), cauchy05).capacity
    sq2 = capacity(box((4.0, 4.0), cell_size=0.25), cauchy05).capacity
    assert sq <= sq2 * (1 + 1e-9)


def test_capacity_asymptote():
    k = make_cauchy(0.5, 2)
    assert capacity_asymptote(k, 100) == pytest.approx(c_alpha(0.5) * (1 + 1e4) ** 0.25, rel=1e-12)
    assert capacity_asymptote(k, 100) == pytest.approx(3.814, abs=1e-3)
    k1 = make_cauchy(1.0, 2)
    assert capacity_asymptote(k1, 100) == pytest.approx(100 / (2 * math.asinh(100)), rel=1e-9)
    k15 = make_cauchy(1.5, 2)
    I = math.sqrt(math.pi) * math.gamma(0.25) / (2 * math.gamma(0.75))
    assert capacity_asymptote(k15, 50) == pytest.approx(50 / (2 * I), rel=1e-8)
    assert capacity_asymptote(k15, 100) == pytest.approx(2 * capacity_asymptote(k15, 50), rel=1e-12)


def test_projection_single_ball(cauchy05):
    cb, cp, ratio = projection_compare(1.0, [[0.0, 0.0]], 4.0, cauchy05)
    assert abs(cb - cp) <= 1e-9 * cb and ratio == pytest.approx(1.0, abs=1e-9)


def test_projection_spacing_violation(cauchy05):
    with pytest.raises(DomainError):
        projection_compare(1.0, [[0, 0], [3, 0]], 4.0, cauchy05)
    with pytest.raises(DomainError):
        projection_compare(3.0, [[0, 0], [8, 0]], 4.0, cauchy05)


def test_projection_perturbed(cauchy05):
    rng = np.random.default_rng(0)
    centres = np.array([[8.0 * i, 0.0] for i in range(5)])
    centres[:, 1] += rng.uniform(-3, 3, size=5)
    res = projection_compare(1.0, centres, 8.0, cauchy05, cell_size=0.5)
    assert res.ratio >= 0.9


@settings(max_examples=15, deadline=None)
@given(alpha=st.floats(0.1, 0.9), n=st.integers(2, 40), R=st.floats(0.5, 20))
def test_simplex_feasibility_and_certificate(alpha, n, R):
    k = make_cauchy(alpha, 2)
    res = capacity(segment(R, n=n), k, tol=1e-8)
    w = res.measure.weights
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    assert res.duality_gap >= 0
    if res.converged:
        assert res.duality_gap <= 1e-8
        assert res.capacity <= res.upper_bound * (1 + 1e-12)
