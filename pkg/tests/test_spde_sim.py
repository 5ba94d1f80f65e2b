import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from conftest import smooth_slice
from models.errors import BlowUpError
from models.lattice import Field, LatticeSpec, MassFracParams
from models.simulation import NoiseSpec, SampleStream, SimConfig
from services.flow_engine import solve_kernel_flow
from services.lattice_spectral import heat_semigroup
from services.spde_sim import (
    calibrate_theta_star,
    closed_form_drift,
    drift_from_trajectory,
    embed_continuum,
    energy,
    linear_rate,
    metropolis_site_samples,
    restrict,
    run_stationary,
    sample_noise_increment,
    step_exponential_euler,
    tilt_norm4,
    tilted_drift,
)


@pytest.fixture
def lat() -> LatticeSpec:
    return LatticeSpec.build(d=1, eps=0.5, M=16, T=1.0, Nt=16)


@pytest.fixture
def mass() -> MassFracParams:
    return MassFracParams(s=0.8, m2=1.0)


def config(lat, mass, **kwargs) -> SimConfig:
    base = {"lattice": lat, "mass": mass, "lam": 0.0, "dt": 0.1, "burn_in": 100}
    return SimConfig(**{**base, **kwargs})


class TestNoise:
    def test_moments(self):
        lat = LatticeSpec.build(d=1, eps=0.5, M=64, T=1.0, Nt=16)
        noise = NoiseSpec(seed=7)
        draws = np.stack([sample_noise_increment(noise, lat, k).values[0] for k in range(200)])
        var = lat.dt / lat.cell
        n = draws.size
        assert abs(draws.mean()) < 4 * np.sqrt(var / n)
        assert draws.var() == pytest.approx(var, rel=5 * np.sqrt(2 / n))
        corr = np.corrcoef(draws[:, :-1].ravel(), draws[:, 1:].ravel())[0, 1]
        assert abs(corr) < 4 / np.sqrt(draws[:, 1:].size)

    def test_reproducible_and_independent_streams(self, lat):
        a = sample_noise_increment(NoiseSpec(seed=3, stream_id=0), lat, step=5).values
        b = sample_noise_increment(NoiseSpec(seed=3, stream_id=0), lat, step=5).values
        c = sample_noise_increment(NoiseSpec(seed=3, stream_id=1), lat, step=5).values
        d = sample_noise_increment(NoiseSpec(seed=3, stream_id=0), lat, step=6).values
        assert np.array_equal(a, b)
        assert not np.allclose(a, c)
        assert not np.allclose(a, d)

    def test_components(self, lat):
        field = sample_noise_increment(NoiseSpec(seed=1, components=3), lat)
        assert field.values.shape == (3, lat.M)


class TestStep:
    def test_linear_noise_free_step_is_the_semigroup(self, lat, mass, rng):
        cfg = config(lat, mass, noise=False)
        phi = smooth_slice(lat, rng)
        out = step_exponential_euler(phi, cfg)
        assert np.allclose(out.values, heat_semigroup(phi, cfg.step, mass).values, atol=1e-12)

    def test_energy_decreases(self, lat, mass, rng):
        cfg = config(lat, mass, lam=1.0, r_eps=0.5, dt=0.01, noise=False)
        phi = smooth_slice(lat, rng)
        values = [energy(phi, cfg)]
        for step in range(100):
            phi = step_exponential_euler(phi, cfg, step=step)
            values.append(energy(phi, cfg))
        assert all(b <= a + 1e-12 * abs(a) for a, b in zip(values, values[1:]))
        assert values[-1] < values[0]

    def test_blow_up_guard(self, lat, mass, rng):
        cfg = config(lat, mass, noise=False, blowup_cap=1e-3)
        with pytest.raises(BlowUpError):
            step_exponential_euler(smooth_slice(lat, rng), cfg)

    def test_flow_drift_matches_closed_form(self, lat, mass, rng):
        traj = solve_kernel_flow(None, 0.8, {1: 0.1}, lat, mass, r_bar=0.3, ell_bar=1)
        values = smooth_slice(lat, rng).values
        expected = closed_form_drift(config(lat, mass, lam=0.8, r_eps=0.4))(values)
        assert np.allclose(drift_from_trajectory(traj)(values), expected, atol=1e-12)


class TestStationary:
    def test_ou_oracle_per_mode(self, lat, mass):
        n_samples = 400
        cfg = config(lat, mass, n_samples=n_samples, sample_stride=50)
        stream = run_stationary(cfg, NoiseSpec(seed=2024))
        power = np.mean(np.abs(np.fft.fft(stream.values[:, 0], axis=-1)) ** 2, axis=0)
        oracle = lat.M / (lat.cell * 2 * linear_rate(mass, lat))
        real_mode = np.zeros(lat.M, dtype=bool)
        real_mode[[0, lat.M // 2]] = True
        stderr = np.where(real_mode, np.sqrt(2.0 / n_samples), np.sqrt(1.0 / n_samples))
        ratio = power / oracle
        assert np.all(np.abs(ratio - 1) < 5 * stderr)
        assert abs(ratio.mean() - 1) < 4 * np.sqrt(2.0 / (n_samples * lat.M))

    def test_equal_seeds_give_identical_streams(self, lat, mass):
        cfg = config(lat, mass, lam=1.0, burn_in=20, n_samples=10, sample_stride=3)
        a = run_stationary(cfg, NoiseSpec(seed=11))
        b = run_stationary(cfg, NoiseSpec(seed=11))
        c = run_stationary(cfg, NoiseSpec(seed=12))
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.observables["phi2"], b.observables["phi2"])
        assert not np.array_equal(a.values, c.values)

    def test_stream_shape_and_observables(self, lat, mass):
        cfg = config(lat, mass, lam=1.0, n=2, burn_in=10, n_samples=7, sample_stride=2)
        stream = run_stationary(cfg, NoiseSpec(seed=5, components=2))
        assert stream.values.shape == (7, 2, lat.M)
        assert stream.n == 2 and len(stream.fields) == 7
        assert set(stream.observables) == {"phi2", "tilt_norm4"}
        expected = np.mean(np.sum(stream.values**2, axis=1), axis=-1)
        assert np.allclose(stream.observables["phi2"], expected)

    def test_stream_rejects_short_observables(self, lat):
        with pytest.raises(ValidationError):
            SampleStream(
                lattice=lat,
                values=np.zeros((3, 1, lat.M)),
                observables={"phi2": np.zeros(2)},
                seed=0,
            )

    def test_metropolis_pins_the_noise_convention(self, mass):
        lat = LatticeSpec.build(d=1, eps=0.5, M=8, T=1.0, Nt=8)
        cfg = config(lat, mass)
        samples = metropolis_site_samples(cfg, NoiseSpec(seed=9), n_samples=3000)
        oracle = float(np.sum(1.0 / (2 * linear_rate(mass, lat)))) / (lat.cell * lat.M)
        assert np.var(samples) == pytest.approx(oracle, rel=0.2)

    @pytest.mark.slow
    def test_langevin_site_law_matches_metropolis(self, mass):
        lat = LatticeSpec.build(d=1, eps=0.5, M=8, T=1.0, Nt=8)
        cfg = config(lat, mass, lam=1.0, dt=0.01, burn_in=1000, n_samples=2000, sample_stride=300)
        langevin = run_stationary(cfg, NoiseSpec(seed=31)).values[:, 0, 0]
        gibbs = metropolis_site_samples(cfg, NoiseSpec(seed=32), n_samples=2000, sweeps_between=10)
        assert stats.ks_2samp(langevin, gibbs).pvalue > 0.01


class TestTilt:
    def test_zero_theta(self, lat, rng):
        phi = smooth_slice(lat, rng)
        assert np.all(tilted_drift(phi, 0.0).values == 0)

    def test_gradient_of_the_quartic_norm(self, lat, rng):
        theta, A, B = 0.3, 2.0, 2.0
        phi = smooth_slice(lat, rng)
        direction = rng.standard_normal(phi.values.shape)
        h = 1e-5
        plus = tilt_norm4(phi.values + h * direction, lat, A, B)
        minus = tilt_norm4(phi.values - h * direction, lat, A, B)
        directional = 0.5 * theta * (plus - minus) / (2 * h)
        pairing = lat.cell * float(np.sum(tilted_drift(phi, theta, A=A, B=B).values * direction))
        assert pairing == pytest.approx(directional, rel=1e-6)

    def test_cubic_homogeneity(self, lat, rng):
        phi = smooth_slice(lat, rng)
        base = tilted_drift(phi, 0.2).values
        scaled = tilted_drift(phi.with_values(1.7 * phi.values), 0.2).values
        assert np.allclose(scaled, 1.7**3 * base)

    def test_theta_guard(self, lat, mass):
        with pytest.raises(ValidationError):
            config(lat, mass, theta_tilt=0.5, theta_star=0.1)
        cfg = config(lat, mass, lam=1.0)
        assert calibrate_theta_star(cfg, NoiseSpec(seed=4), [0.0, 1e-3, 1e8]) == 1e-3


class TestEmbedding:
    def test_constant_field(self, lat):
        phi = Field(lattice=lat, values=np.full((1, lat.M), 2.5))
        fine = embed_continuum(phi, factor=4)
        assert fine.lattice.M == 4 * lat.M and fine.lattice.eps == lat.eps / 4
        assert np.allclose(fine.values, 2.5)

    def test_band_limited_restriction(self, lat, rng):
        x = lat.eps * np.arange(lat.M)
        values = sum(
            rng.standard_normal() * np.cos(2 * np.pi * m * x / lat.period + rng.uniform(0, 6))
            for m in range(1, lat.M // 4)
        )
        phi = Field(lattice=lat, values=values[None])
        assert np.max(np.abs(restrict(embed_continuum(phi, 2), 2) - phi.values)) < 1e-10

    def test_two_dimensional_embedding(self, rng):
        lat = LatticeSpec.build(d=2, eps=0.5, M=8, T=1.0, Nt=8)
        phi = smooth_slice(lat, rng, modes=1)
        fine = embed_continuum(phi, 2)
        assert fine.values.shape == (1, 16, 16)
        assert np.allclose(restrict(fine, 2), phi.values, atol=1e-10)
