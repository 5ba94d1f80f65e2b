import numpy as np
import pytest

from conftest import random_spacetime
from models.diagrams import Monomial, Poly
from models.errors import BoxOverflowError
from models.flow import GradeIndex
from models.lattice import Field, LatticeSpec, MassFracParams
from services.diagrams import apply_symbol, evaluate
from services.flow_engine import (
    H_sigma,
    boundary_force,
    coercive_eta,
    coercive_split_Q,
    directional_derivative,
    effective_force_eval,
    evaluate_remainder,
    flow_B,
    force_series,
    kernels_at,
    ops_at,
    order_poly,
    solve_kernel_flow,
    truncation_pairs,
)
from services.localisation import box_overflow, kernel_from_symbol
from services.params import resolve_params
from services.scale_ops import build_G_small, build_Gdot, build_J, linear_symbol

LAM, R_BAR = 0.8, 0.3
COUNTERTERMS = {1: 0.0, 2: 0.15}


@pytest.fixture
def lat() -> LatticeSpec:
    return LatticeSpec.build(d=1, eps=0.25, M=16, T=1.0, Nt=32)


@pytest.fixture
def mass() -> MassFracParams:
    return MassFracParams(s=0.8, m2=1.0)


@pytest.fixture
def traj(lat, mass):
    return solve_kernel_flow(None, LAM, COUNTERTERMS, lat, mass, r_bar=R_BAR, ell_bar=2)


def smooth_spacetime(lat: LatticeSpec, rng: np.random.Generator, modes: int = 3) -> np.ndarray:
    t = lat.times[:, None]
    x = lat.eps * np.arange(lat.M)[None, :]
    out = np.zeros(lat.spacetime_shape)
    for _ in range(2 * modes):
        a, b = rng.integers(0, modes + 1, size=2)
        phase = 2 * np.pi * (a * t / (2 * lat.T) + b * x / lat.period) + rng.uniform(0, 2 * np.pi)
        out += 0.4 * rng.standard_normal() * np.cos(phase)
    return out


class TestBoundary:
    def test_only_noise_without_coupling(self):
        kernels = boundary_force(0.0, 0.0)
        assert list(kernels) == [(0, 0)]
        assert kernels[(0, 0)].noise_tag

    def test_constant_input(self, lat, rng):
        c = 0.7
        xi = rng.standard_normal(lat.spacetime_shape)
        psi = np.full(lat.spacetime_shape, c)
        total = sum(evaluate(k.poly, psi, xi, {}) for k in boundary_force(LAM, R_BAR).values())
        assert np.allclose(total, -LAM * c**3 + R_BAR * c + xi)

    def test_degree_bound(self):
        orders = force_series(LAM, R_BAR, COUNTERTERMS, 2)
        for ell, poly in enumerate(orders):
            assert max(poly.degrees()) <= 2 * ell + 3


def test_first_order_closed_form(lat, mass, rng):
    psi = rng.standard_normal(lat.spacetime_shape)
    xi = rng.standard_normal(lat.spacetime_shape)
    g = build_G_small(0.6, mass, lat).symbol
    x1 = apply_symbol(g, xi + R_BAR * psi - LAM * psi**3)
    expected = 0.1 * psi + R_BAR * x1 - 3 * LAM * psi**2 * x1
    f1 = force_series(LAM, R_BAR, {1: 0.1}, 1)[1]
    assert np.allclose(evaluate(f1, psi, xi, {"G": g}), expected)


class TestEffectiveForce:
    def test_scale_one_is_bare_force(self, traj, lat, rng):
        psi = rng.standard_normal(lat.spacetime_shape)
        xi = rng.standard_normal(lat.spacetime_shape)
        r_eps = R_BAR + sum(COUNTERTERMS.values())
        out = effective_force_eval(traj, 1.0, psi, xi)
        assert np.allclose(out, -LAM * psi**3 + r_eps * psi + xi, atol=1e-12)

    def test_zero_input_deterministic(self, traj, lat):
        out = effective_force_eval(traj, 0.6, np.zeros(lat.spacetime_shape))
        assert np.all(out == 0)

    def test_zero_input_keeps_noise_at_scale_one(self, traj, lat, rng):
        xi = rng.standard_normal(lat.spacetime_shape)
        assert np.allclose(effective_force_eval(traj, 1.0, np.zeros(lat.spacetime_shape), xi), xi)

    def test_field_wrapper(self, traj, lat, rng):
        f = random_spacetime(lat, rng)
        out = effective_force_eval(traj, 0.7, f)
        assert isinstance(out, Field)
        assert np.allclose(out.values[0], effective_force_eval(traj, 0.7, f.values[0]))

    def test_linear_case_constant_in_sigma(self, lat, mass, rng):
        flat = solve_kernel_flow(None, 0.0, {1: 0.2}, lat, mass, ell_bar=1)
        psi = rng.standard_normal(lat.spacetime_shape)
        xi = rng.standard_normal(lat.spacetime_shape)
        ops_lo, ops_hi = ops_at(flat, 0.55), ops_at(flat, 0.9)
        for ell in range(2):
            poly = order_poly(flat.components, ell)
            assert np.allclose(evaluate(poly, psi, xi, ops_lo), evaluate(poly, psi, xi, ops_hi))


class TestFlowB:
    def test_quartic_pair(self, lat, mass, rng):
        psi = rng.standard_normal(lat.spacetime_shape)
        gdot = build_Gdot(0.7, mass, lat).symbol
        kernels = boundary_force(LAM, R_BAR)
        out = flow_B(GradeIndex(ell=1, k=5), kernels[(0, 3)], kernels[(0, 3)], 0.7)
        expected = -3 * LAM**2 * psi**2 * apply_symbol(gdot, psi**3)
        assert np.allclose(evaluate(out.poly, psi, None, {"Gdot": gdot}), expected)

    def test_constraint_mismatch_is_zero(self):
        kernels = boundary_force(LAM, R_BAR)
        assert flow_B(GradeIndex(ell=1, k=4), kernels[(0, 3)], kernels[(0, 3)]).poly.is_zero()
        assert flow_B(GradeIndex(ell=2, k=5), kernels[(0, 3)], kernels[(0, 3)]).poly.is_zero()

    def test_zero_factor(self):
        kernels = boundary_force(LAM, 0.0)
        empty = kernels[(0, 3)].model_copy(update={"poly": Poly()})
        assert flow_B(GradeIndex(ell=1, k=5), kernels[(0, 3)], empty).poly.is_zero()

    def test_flow_equation_by_difference(self, traj, lat, mass, rng):
        """d/dsigma F^[ell] = sum of B over ell_b + ell_c + 1 = ell, by central differences."""
        sigma = 0.7
        psi = 0.6 * rng.standard_normal(lat.spacetime_shape)
        xi = rng.standard_normal(lat.spacetime_shape)
        kernels = kernels_at(traj, sigma)
        ops = ops_at(traj, sigma)

        def at(s: float, ell: int) -> np.ndarray:
            return evaluate(order_poly(traj.components, ell), psi, xi, ops_at(traj, s))

        for ell in (1, 2):
            flow = np.zeros(lat.spacetime_shape)
            for (eb, kb), b in kernels.items():
                for (ec, kc), c in kernels.items():
                    if eb + ec + 1 == ell:
                        target = GradeIndex(ell=ell, k=kb + kc - 1)
                        flow = flow + evaluate(flow_B(target, b, c, sigma).poly, psi, xi, ops)

            def err(h: float) -> float:
                diff = (at(sigma + h, ell) - at(sigma - h, ell)) / (2 * h)
                return float(np.max(np.abs(diff - flow)))

            e1, e2 = err(2e-4), err(1e-4)
            assert e2 < 1e-3 * max(1.0, float(np.max(np.abs(flow))))
            assert e1 / e2 == pytest.approx(4.0, rel=0.3)


class TestH:
    def test_pairs(self):
        assert truncation_pairs(1) == [(0, 1), (1, 0), (1, 1)]
        assert (0, 0) not in truncation_pairs(2)

    def test_vanishes_without_interaction(self, lat, mass, rng):
        flat = solve_kernel_flow(None, 0.0, {}, lat, mass, ell_bar=1)
        psi = rng.standard_normal(lat.spacetime_shape)
        assert np.all(H_sigma(flat, psi, 0.7) == 0)

    def test_matches_two_term_definition(self, traj, lat, rng):
        sigma, h = 0.7, 1e-4
        psi = 0.6 * rng.standard_normal(lat.spacetime_shape)
        xi = rng.standard_normal(lat.spacetime_shape)
        psi_s = apply_symbol(ops_at(traj, sigma)["J"], psi)
        total = sum((order_poly(traj.components, e) for e in range(3)), Poly())

        def force(s: float) -> np.ndarray:
            return evaluate(total, psi_s, xi, ops_at(traj, s))

        ops = ops_at(traj, sigma)
        defined = (force(sigma + h) - force(sigma - h)) / (2 * h) + directional_derivative(
            total, psi_s, apply_symbol(ops["Gdot"], force(sigma)), xi, ops
        )
        measured = H_sigma(traj, psi, sigma, xi)
        assert np.max(np.abs(measured - defined)) < 1e-3 * max(1.0, float(np.max(np.abs(measured))))

    def test_thread_count_does_not_change_result(self, traj, lat, rng, monkeypatch):
        psi = rng.standard_normal(lat.spacetime_shape)
        xi = rng.standard_normal(lat.spacetime_shape)
        serial = H_sigma(traj, psi, 0.65, xi)
        monkeypatch.setenv("FRACPHI4_THREADS", "3")
        assert np.array_equal(H_sigma(traj, psi, 0.65, xi), serial)


class TestCoerciveSplit:
    def test_reassembly(self, traj, lat, rng):
        psi = rng.standard_normal(lat.spacetime_shape)
        xi = rng.standard_normal(lat.spacetime_shape)
        parts = coercive_split_Q(traj, psi, 0.7, LAM, xi)
        scale = float(np.max(np.abs(parts["Q"])))
        assert parts["residual"] < 1e-10 * max(1.0, scale)
        parts_sum = parts["higher"] + parts["linear"] + parts["noise"] + parts["cubic_defect"]
        assert np.allclose(parts_sum, parts["Q"])

    def test_trivial_force(self, lat, mass, rng):
        bare = solve_kernel_flow(None, 0.0, {}, lat, mass, ell_bar=0)
        parts = coercive_split_Q(bare, rng.standard_normal(lat.spacetime_shape), 0.7, 0.0)
        assert np.all(parts["Q"] == 0)

    def test_cube_of_smoothed_field_is_below_cutoff(self, mass, rng):
        lat = LatticeSpec.build(d=1, eps=1 / 8, M=64, T=1.0, Nt=64, continuum_symbol=True)
        sigma = 0.9
        eta = coercive_eta(sigma)
        assert eta == pytest.approx(0.6)
        f = rng.standard_normal(lat.spacetime_shape)
        inner = build_J(eta, 0, lat, mass).apply(build_J(sigma, 0, lat, mass).apply(f))
        cube = inner**3
        leak = cube - build_J(sigma, 0, lat, mass).apply(cube)
        assert np.max(np.abs(leak)) < 1e-10 * np.max(np.abs(cube))


def test_midpoint_integrator_converges(lat, mass):
    errors = []
    for per_octave in (8, 16):
        mid = solve_kernel_flow(
            None, LAM, {}, lat, mass, integrator="midpoint", ell_bar=1, per_octave=per_octave
        )
        exact = np.array([build_G_small(float(s), mass, lat).symbol for s in mid.sigmas])
        assert np.all(mid.g_small[-1] == exact[-1])
        errors.append(float(np.max(np.abs(mid.g_small - exact))))
        scale = float(np.max(np.abs(exact)))
    assert errors[1] < 5e-2 * scale
    assert errors[0] / errors[1] > 2.5


def test_box_overflow_monitors_small_scale_propagator(traj, lat, mass):
    measured = [
        box_overflow(kernel_from_symbol(build_G_small(float(s), mass, lat).symbol, lat))
        for s in traj.sigmas
    ]
    assert traj.box_overflow == pytest.approx(max(measured))
    assert traj.box_overflow > 0
    solve_kernel_flow(None, LAM, COUNTERTERMS, lat, mass, ell_bar=1, box_tolerance=1.0)
    with pytest.raises(BoxOverflowError, match="G_small"):
        solve_kernel_flow(
            None, LAM, COUNTERTERMS, lat, mass, ell_bar=1, box_tolerance=traj.box_overflow / 2
        )


def test_params_supply_truncation(lat, mass):
    params = resolve_params(0.8, 1, ell_bar=1)
    t = solve_kernel_flow(params, LAM, {}, lat, mass)
    assert t.ell_bar == 1
    assert max(k for _, k in t.components) <= params.k_bar


class TestRemainder:
    def test_linear_free_case(self, lat, mass, rng):
        free = solve_kernel_flow(None, 0.0, {}, lat, mass, ell_bar=1)
        phi = smooth_spacetime(lat, rng)
        xi = np.fft.ifftn(np.fft.fftn(phi) * linear_symbol(mass, lat)).real
        family = evaluate_remainder(phi, free, [0.5, 0.75], xi)
        for mu in family.mus:
            assert np.all(family.remainders[mu] == 0)
            assert family.residuals[mu] < 1e-12

    def test_residual_refines_with_scale_step(self, lat, mass, rng):
        t = solve_kernel_flow(None, 1.0, {}, lat, mass, ell_bar=1)
        phi = smooth_spacetime(lat, rng)
        # noise chosen so that phi solves the equation exactly on the periodic window
        l_phi = np.fft.ifftn(np.fft.fftn(phi) * linear_symbol(mass, lat)).real
        xi = l_phi - (-phi**3)
        coarse = evaluate_remainder(phi, t, [0.5, 0.75], xi, per_octave=8)
        fine = evaluate_remainder(phi, t, [0.5, 0.75], xi, per_octave=16)
        assert fine.steps > coarse.steps
        assert fine.residuals[0.5] < coarse.residuals[0.5] / 2.5
        assert fine.residuals[0.5] < 0.1
