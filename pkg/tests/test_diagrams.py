import numpy as np
import pytest

from models.diagrams import PSI, XI, Line, Monomial, Poly
from models.errors import UnsupportedContraction
from models.lattice import LatticeSpec, MassFracParams
from services.diagrams import (
    apply_symbol,
    contraction,
    derivative,
    evaluate,
    expectation,
    line_of,
)
from services.flow_engine import force_series
from services.scale_ops import build_G_small, build_Gdot


@pytest.fixture
def lat() -> LatticeSpec:
    return LatticeSpec.build(d=1, eps=0.25, M=16, T=1.0, Nt=16)


@pytest.fixture
def ops(lat) -> dict[str, np.ndarray]:
    p = MassFracParams(s=0.8, m2=1.0)
    return {"G": build_G_small(0.6, p, lat).symbol, "Gdot": build_Gdot(0.6, p, lat).symbol}


def test_poly_arithmetic():
    p = Poly.of(PSI, 2.0) + Poly.of(XI)
    assert (p - p).is_zero()
    sq = p * p
    assert sq.terms[Monomial(n_psi=2)] == 4.0
    assert sq.terms[Monomial(n_psi=1, n_xi=1)] == 4.0
    assert sq.degrees() == {0, 1, 2}
    assert (p * 0.0).is_zero()


def test_evaluate_local_and_line(lat, ops, rng):
    psi = rng.standard_normal(lat.spacetime_shape)
    xi = rng.standard_normal(lat.spacetime_shape)
    poly = Poly.of(Monomial(n_psi=3), -2.0) + Poly.of(Monomial(n_psi=1, lines=(Line("G", XI),)))
    expected = -2.0 * psi**3 + psi * apply_symbol(ops["G"], xi)
    assert np.allclose(evaluate(poly, psi, xi, ops), expected)


def test_deterministic_mode_drops_noise(lat, ops, rng):
    psi = rng.standard_normal(lat.spacetime_shape)
    poly = Poly.of(XI) + Poly.of(PSI, 3.0) + Poly.of(line_of("G"))
    assert np.allclose(evaluate(poly, psi, None, ops), 3.0 * psi)


def test_euler_identity(lat, ops, rng):
    psi = rng.standard_normal(lat.spacetime_shape)
    xi = rng.standard_normal(lat.spacetime_shape)
    poly = force_series(0.7, 0.4, {1: 0.2, 2: -0.1}, 2)[2]
    lhs = evaluate(derivative(poly, Poly.of(PSI)), psi, xi, ops)
    rhs = sum(k * evaluate(poly.project(k), psi, xi, ops) for k in poly.degrees())
    assert np.allclose(lhs, rhs)


def test_derivative_against_difference(lat, ops, rng):
    psi = 0.5 * rng.standard_normal(lat.spacetime_shape)
    xi = rng.standard_normal(lat.spacetime_shape)
    poly = force_series(1.0, 0.3, {1: 0.2}, 1)[1]
    exact = evaluate(derivative(poly, Poly.of(XI)), psi, xi, ops)
    tau = 1e-5
    plus = evaluate(poly, psi + tau * xi, xi, ops)
    minus = evaluate(poly, psi - tau * xi, xi, ops)
    numeric = (plus - minus) / (2 * tau)
    assert np.max(np.abs(exact - numeric)) < 1e-6 * max(1.0, np.max(np.abs(exact)))


class TestExpectation:
    def test_bare_square(self, lat, ops):
        out = expectation(Poly.of(Monomial(n_xi=2), 2.0), ops, lat)
        assert out.terms == {Monomial(): pytest.approx(2.0 / (lat.dt * lat.cell))}

    def test_line_pair(self, lat, ops):
        mono = Monomial(n_psi=1, lines=(Line("G", XI), Line("G", XI)))
        out = expectation(Poly.of(mono, -3.0), ops, lat)
        expected = -3.0 * contraction(ops["G"], ops["G"], lat)
        assert out.terms[PSI] == pytest.approx(expected)

    def test_line_pair_monte_carlo(self, lat, ops):
        rng = np.random.default_rng(7)
        mono = Monomial(lines=(Line("G", XI), Line("G", XI)))
        exact = expectation(Poly.of(mono), ops, lat).terms[Monomial()]
        scale = 1.0 / np.sqrt(lat.dt * lat.cell)
        zero = np.zeros(lat.spacetime_shape)
        samples = [
            float(np.mean(
                evaluate(Poly.of(mono), zero, scale * rng.standard_normal(zero.shape), ops)
            ))
            for _ in range(300)
        ]
        assert np.mean(samples) == pytest.approx(exact, rel=0.05)

    def test_odd_noise_vanishes(self, lat, ops):
        poly = Poly.of(XI) + Poly.of(Monomial(n_psi=2, lines=(Line("G", XI),)))
        assert expectation(poly, ops, lat).is_zero()

    def test_deterministic_terms_kept(self, lat, ops):
        poly = Poly.of(PSI, 1.5) + Poly.of(line_of("G", PSI))
        assert expectation(poly, ops, lat).terms == poly.terms

    def test_nested_noise_rejected(self, lat, ops):
        nested = Monomial(n_xi=1, lines=(Line("G", Monomial(n_psi=1, lines=(Line("G", XI),))),))
        with pytest.raises(UnsupportedContraction):
            expectation(Poly.of(nested), ops, lat)

    def test_four_legs_rejected(self, lat, ops):
        with pytest.raises(UnsupportedContraction):
            expectation(Poly.of(Monomial(n_xi=4)), ops, lat)
