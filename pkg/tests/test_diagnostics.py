import numpy as np
import pytest
from scipy.stats import special_ortho_group

from models.errors import DomainError, InsufficientSamples
from models.lattice import Field, LatticeSpec, MassFracParams
from models.simulation import NoiseSpec, SampleStream, SimConfig
from models.weights import WeightSpec
from services.diagnostics import (
    besov_seminorm,
    coercive_bound_check,
    coercive_norm_check,
    estimate_cumulants,
    first_order_kappa4,
    gff_covariance,
    jensen_tilt_experiment,
    on_symmetry_check,
    rotate_components,
)
from services.spde_sim import run_stationary


@pytest.fixture
def lat() -> LatticeSpec:
    return LatticeSpec.build(d=1, eps=0.5, M=16, T=1.0, Nt=16)


@pytest.fixture
def mass() -> MassFracParams:
    return MassFracParams(s=0.8, m2=1.0)


def config(lat, mass, **kwargs) -> SimConfig:
    base = {"lattice": lat, "mass": mass, "lam": 0.0, "dt": 0.1, "burn_in": 100}
    return SimConfig(**{**base, **kwargs})


def gaussian_stream(lat, rng, n_samples, n=1) -> SampleStream:
    """Samples z + roll(z), so kappa_2 is 2 at separation 0 and 1 at separation 1."""
    z = rng.standard_normal((n_samples, n, lat.M))
    return SampleStream(lattice=lat, values=z + np.roll(z, 1, axis=-1), seed=0)


def smooth_spacetime(lat, rng, amplitude=1.0, n=1) -> Field:
    t = lat.times
    x = lat.eps * np.arange(lat.M)
    values = np.zeros(lat.shape_for("spacetime", n))
    for a in range(n):
        for _ in range(4):
            m, w = rng.integers(1, 4), rng.uniform(0.5, 2.0)
            space = np.cos(2 * np.pi * m * x / lat.period + rng.uniform(0, 6))
            values[a] += rng.standard_normal() * np.cos(w * t + rng.uniform(0, 6))[:, None] * space
    return Field(lattice=lat, values=amplitude * values, kind="spacetime")


def window_weight(lat) -> np.ndarray:
    """Vanishes at both ends of the window, smooth and positive inside."""
    t = lat.times
    x = lat.eps * np.arange(lat.M)
    time_part = np.sin(np.pi * (t + lat.T) / (2 * lat.T)) ** 2
    space_part = (1.0 + 0.5 * np.cos(2 * np.pi * x / lat.period)) / 1.5
    return time_part[:, None] * space_part[None, :]


class TestCumulants:
    def test_gaussian_pattern(self, lat, rng):
        stream = gaussian_stream(lat, rng, 2000)
        k2 = estimate_cumulants(stream, 2, [0, 1, 3])
        assert k2.values[0] == pytest.approx(2.0, abs=4 * k2.errors[0])
        assert k2.values[1] == pytest.approx(1.0, abs=4 * k2.errors[1])
        assert abs(k2.values[2]) < 4 * k2.errors[2]
        k4 = estimate_cumulants(stream, 4, [0, 1])
        assert all(abs(v) < 4 * e for v, e in zip(k4.values, k4.errors))

    def test_first_cumulant_of_centred_data(self, lat, rng):
        stream = gaussian_stream(lat, rng, 500)
        k1 = estimate_cumulants(stream, 1, [0])
        assert abs(k1.values[0]) < 4 * k1.errors[0]

    def test_errors_shrink_with_samples(self, lat, rng):
        small = estimate_cumulants(gaussian_stream(lat, rng, 400), 2, [0])
        large = estimate_cumulants(gaussian_stream(lat, rng, 1600), 2, [0])
        assert 1.3 < small.errors[0] / large.errors[0] < 3.0

    def test_insufficient_samples(self, lat, rng):
        with pytest.raises(InsufficientSamples):
            estimate_cumulants(gaussian_stream(lat, rng, 50), 2, [0])

    def test_components_must_fit(self, lat, rng):
        with pytest.raises(DomainError):
            estimate_cumulants(gaussian_stream(lat, rng, 200), 2, [0], components=(0, 1))

    def test_free_field_matches_covariance(self, lat, mass):
        cfg = config(lat, mass, n_samples=400, sample_stride=50)
        stream = run_stationary(cfg, NoiseSpec(seed=77))
        k2 = estimate_cumulants(stream, 2, [0, 1, 2])
        oracle = gff_covariance(mass, lat)
        for r, v, e in zip(k2.separations, k2.values, k2.errors):
            assert abs(v - oracle[r]) < 4 * e

    def test_covariance_diagonal_is_site_variance(self, lat, mass):
        c = gff_covariance(mass, lat)
        xi = 2 * np.pi * np.fft.fftfreq(lat.M, lat.eps)
        rate = mass.m2 + (np.abs(np.sin(lat.eps * xi)) / lat.eps) ** (2 * mass.s)
        assert c[0] == pytest.approx(np.sum(1 / (2 * rate)) / (lat.cell * lat.M))

    def test_first_order_oracle_sign_and_scaling(self, lat, mass):
        a = first_order_kappa4(0.1, mass, lat)
        assert a < 0
        assert first_order_kappa4(0.2, mass, lat) == pytest.approx(2 * a)

    @pytest.mark.slow
    def test_weak_coupling_fourth_cumulant(self, mass):
        lat = LatticeSpec.build(d=1, eps=0.5, M=64, T=1.0, Nt=16)
        cfg = config(lat, mass, lam=0.1, dt=0.05, burn_in=2000, n_samples=10000, sample_stride=40)
        stream = run_stationary(cfg, NoiseSpec(seed=99))
        k4 = estimate_cumulants(stream, 4, [0])
        oracle = first_order_kappa4(0.1, mass, lat)
        assert k4.values[0] < 0
        assert abs(k4.values[0] - oracle) < 0.25 * abs(oracle) + 3 * k4.errors[0]


class TestBesov:
    def test_zero_field(self, lat):
        assert besov_seminorm(Field.zeros(lat), 0.5).value == 0.0

    def test_single_band(self):
        # continuum symbol with q = 1 at mode 4: only block i = 1 is active
        lat = LatticeSpec.build(d=1, eps=np.pi / 8, M=64, continuum_symbol=True)
        x = lat.eps * np.arange(lat.M)
        amplitude, gamma = 1.7, 0.6
        phi = Field(lattice=lat, values=amplitude * np.cos(2 * np.pi * 4 * x / lat.period)[None])
        report = besov_seminorm(phi, gamma, rho=np.full(lat.M, 0.5))
        assert report.value == pytest.approx(2**-gamma * amplitude * 0.5, rel=1e-10)
        assert report.params["level"] == 1.0

    def test_spacetime_takes_sup_over_time(self, lat, rng):
        phi = smooth_spacetime(lat, rng)
        per_slice = max(
            besov_seminorm(Field(lattice=lat, values=phi.values[:, n]), 0.3).value
            for n in range(lat.Nt)
        )
        assert besov_seminorm(phi, 0.3).value == pytest.approx(per_slice)


class TestCoercive:
    @pytest.fixture
    def fine(self) -> LatticeSpec:
        return LatticeSpec.build(d=1, eps=0.25, M=64, T=1.0, Nt=64)

    def test_zero_field_passes(self, fine, mass):
        result = coercive_bound_check(Field.zeros(fine, kind="spacetime"), 1.0, mass)
        assert result.left == 0.0 and result.passed

    @pytest.mark.parametrize("seed", range(5))
    def test_manufactured_solutions(self, fine, mass, seed):
        rng = np.random.default_rng(seed)
        phi = smooth_spacetime(fine, rng, amplitude=3.0)
        result = coercive_bound_check(phi, 1.0, mass, rho=window_weight(fine), margin=10.0)
        assert result.passed
        assert result.left > 0

    def test_vector_field(self, fine, mass, rng):
        phi = smooth_spacetime(fine, rng, amplitude=2.0, n=2)
        assert coercive_bound_check(phi, 1.0, mass, rho=window_weight(fine)).passed

    def test_constant_stable_over_coupling(self, fine, mass, rng):
        phi = smooth_spacetime(fine, rng, amplitude=3.0)
        constants = [
            coercive_bound_check(phi, lam, mass, rho=window_weight(fine)).constant
            for lam in (0.5, 1.0, 2.0)
        ]
        assert max(constants) / min(constants) <= 3.0

    def test_s_one_is_flagged(self, fine, rng):
        phi = smooth_spacetime(fine, rng)
        s_one = MassFracParams(s=1.0, m2=1.0)
        result = coercive_bound_check(phi, 1.0, s_one, rho=window_weight(fine))
        assert "gradient surrogate" in result.note

    def test_rejects_slices_and_bad_weights(self, fine, mass):
        with pytest.raises(DomainError):
            coercive_bound_check(Field.zeros(fine), 1.0, mass)
        with pytest.raises(DomainError):
            coercive_bound_check(
                Field.zeros(fine, kind="spacetime"), 1.0, mass,
                rho_tilde=np.zeros(fine.spacetime_shape),
            )

    def test_scale_norm_form(self, lat, mass, rng):
        spec = WeightSpec(a=2.0, v=0.2, kappa0=0.01, flat_b=1.5, s=0.8)
        phi = smooth_spacetime(lat, rng)
        result = coercive_norm_check(phi, 1.0, mass, spec, mubar=0.5, gamma=0.3)
        assert result.passed and result.left > 0


class TestJensen:
    def test_zero_theta_row(self, lat, mass):
        cfg = config(lat, mass, n_samples=50, sample_stride=5)
        (row,) = jensen_tilt_experiment(cfg, NoiseSpec(seed=1), [0.0])
        assert row["log_Z"] == pytest.approx(0.0, abs=1e-12)
        assert row["rhs_tilted"] == 0.0 and row["rhs_reweighted"] == 0.0
        assert row["passed"] and row["ess_fraction"] == pytest.approx(1.0)

    def test_small_theta_gaussian_slack(self, lat, mass):
        cfg = config(lat, mass, n_samples=200, sample_stride=10)
        theta = 1e-3
        (row,) = jensen_tilt_experiment(cfg, NoiseSpec(seed=2), [theta])
        norm4 = run_stationary(cfg, NoiseSpec(seed=2)).observables["tilt_norm4"]
        slack = row["rhs_reweighted"] - row["log_Z"]
        assert slack >= 0
        assert slack == pytest.approx(0.5 * theta**2 * np.var(norm4), rel=0.05)
        assert row["ess_ok"]

    def test_theta_above_guard(self, lat, mass):
        cfg = config(lat, mass, theta_star=0.5, n_samples=20)
        with pytest.raises(DomainError):
            jensen_tilt_experiment(cfg, NoiseSpec(seed=3), [1.0])

    @pytest.mark.slow
    def test_interacting_inequality(self, mass):
        lat = LatticeSpec.build(d=1, eps=0.5, M=16, T=1.0, Nt=16)
        cfg = config(lat, mass, lam=1.0, dt=0.05, burn_in=1000, n_samples=2000, sample_stride=20)
        rows = jensen_tilt_experiment(cfg, NoiseSpec(seed=4), [0.05, 0.1, 0.2])
        assert all(row["passed"] for row in rows)


class TestSymmetry:
    @pytest.fixture
    def stream(self, lat, mass) -> SampleStream:
        cfg = config(lat, mass, n=2, n_samples=400, sample_stride=50)
        return run_stationary(cfg, NoiseSpec(seed=21, components=2))

    def test_free_components(self, stream):
        result = on_symmetry_check(stream)
        assert result.passed
        assert "k01" in result.note and "diag" in result.note

    def test_rotation_preserves_square_norm(self, stream, rng):
        rotation = special_ortho_group.rvs(2, random_state=rng)
        rotated = rotate_components(stream, rotation)
        assert np.allclose(np.sum(rotated.values**2, axis=1), np.sum(stream.values**2, axis=1))

    def test_needs_two_components(self, lat, rng):
        with pytest.raises(DomainError):
            on_symmetry_check(gaussian_stream(lat, rng, 200))

    @pytest.mark.slow
    def test_interacting_components(self, lat, mass):
        cfg = config(lat, mass, lam=1.0, n=2, dt=0.05, n_samples=2000, sample_stride=40)
        stream = run_stationary(cfg, NoiseSpec(seed=22, components=2))
        assert on_symmetry_check(stream).passed
