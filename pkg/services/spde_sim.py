"""Langevin sampler for the lattice model and its tilted and O(n) variants.

Each step integrates the linear part A = m^2 + (-Delta)^s exactly per
spatial mode and freezes the drift -lam |phi|^2 phi + r phi (+ tilt) over
the step. The noise has variance dt/eps^d per site and step, so the
stationary law is proportional to exp(-2 E(phi)) with E the discrete energy
returned by ``energy``.
"""

import logging
from collections.abc import Callable

import numpy as np

from models.diagrams import Poly
from models.errors import BlowUpError, DomainError
from models.flow import KernelTrajectory
from models.lattice import Field, LatticeSpec, MassFracParams
from models.simulation import NoiseSpec, SampleStream, SimConfig
from services.diagrams import evaluate
from services.lattice_spectral import (
    apply_spatial_symbol,
    frac_symbol,
    q_grid,
    spatial_axes,
    spatial_frequencies,
    torus_distance,
)
from services.scale_ops import bump

logger = logging.getLogger(__name__)

AUTOCORR_WARN = 0.1
PILOT_STEPS = 100

Drift = Callable[[np.ndarray], np.ndarray]


# --- noise --------------------------------------------------------------------------------


def _generator(noise: NoiseSpec, step: int) -> np.random.Generator:
    seq = np.random.SeedSequence(noise.seed, spawn_key=(noise.stream_id, step))
    return np.random.Generator(np.random.Philox(seq))


def _standard_normal(noise: NoiseSpec, step: int, shape: tuple[int, ...]) -> np.ndarray:
    return _generator(noise, step).standard_normal(shape)


def sample_noise_increment(
    noise: NoiseSpec, lat: LatticeSpec, step: int = 0, dt: float | None = None
) -> Field:
    """Independent centred Gaussians per site and component with variance dt/eps^d.

    The draw depends only on (seed, stream_id, step).
    """
    dt = lat.dt if dt is None else dt
    shape = lat.shape_for("slice", noise.components)
    return Field(lattice=lat, values=np.sqrt(dt / lat.cell) * _standard_normal(noise, step, shape))


# --- energy and drift ---------------------------------------------------------------------


def linear_rate(mass: MassFracParams, lat: LatticeSpec) -> np.ndarray:
    """Symbol of A = m^2 + (-Delta_eps)^s over the spatial dual lattice."""
    return mass.m2 + frac_symbol(mass, lat)


def _square_norm(values: np.ndarray) -> np.ndarray:
    """|phi|^2 summed over components, shape (1, *space)."""
    return np.sum(values**2, axis=0, keepdims=True)


def tilt_weight(lat: LatticeSpec, B: float) -> np.ndarray:
    """h(x) = (1 + |x|)^{-B} with the torus distance."""
    return (1.0 + torus_distance(lat)) ** -B


def tilt_smoother(lat: LatticeSpec, A: float) -> np.ndarray:
    """Symbol of Q = (1 + (-Delta_eps)^{1/2})^{-A}."""
    return (1.0 + q_grid(lat)) ** -A


def tilt_norm4(
    phi: Field | np.ndarray, lat: LatticeSpec, A: float, B: float, h: np.ndarray | None = None
) -> float:
    """||h Q phi||_{L^2}^4, the squared L^2 norm summed over components."""
    values = phi.values if isinstance(phi, Field) else phi
    h = tilt_weight(lat, B) if h is None else h
    smoothed = apply_spatial_symbol(values, tilt_smoother(lat, A), lat.d)
    return (lat.cell * float(np.sum((h * smoothed) ** 2))) ** 2


def tilted_drift(
    phi: Field, theta: float, h: np.ndarray | None = None, A: float = 2.0, B: float = 2.0
) -> Field:
    """Extra drift 2 theta ||h Q phi||^2 Q h^2 Q phi of the tilted measure.

    With the noise normalisation used here the stationary density picks up
    exp(theta ||h Q phi||^4) exactly when this drift is added.

    Args:
        phi: Time slice
        theta: Tilt strength
        h: Spatial weight; defaults to (1 + |x|)^{-B}
        A: Smoothing exponent of Q
        B: Decay exponent of the default weight

    Returns:
        Field of the same shape; zero when theta = 0
    """
    if theta < 0:
        raise DomainError(f"theta = {theta} must be >= 0")
    if theta == 0:
        return phi.with_values(np.zeros_like(phi.values))
    lat = phi.lattice
    h = tilt_weight(lat, B) if h is None else h
    q = tilt_smoother(lat, A)
    smoothed = apply_spatial_symbol(phi.values, q, lat.d)
    norm2 = lat.cell * float(np.sum((h * smoothed) ** 2))
    return phi.with_values(2 * theta * norm2 * apply_spatial_symbol(h**2 * smoothed, q, lat.d))


def energy(phi: Field, cfg: SimConfig) -> float:
    """eps^d sum [1/2 phi A phi + lam/4 |phi|^4 - r/2 |phi|^2]."""
    lat = phi.lattice
    a_phi = apply_spatial_symbol(phi.values, linear_rate(cfg.mass, lat), lat.d)
    sq = _square_norm(phi.values)
    density = 0.5 * np.sum(phi.values * a_phi, axis=0) + 0.25 * cfg.lam * sq[0] ** 2
    density = density - 0.5 * cfg.r_eps * sq[0]
    return lat.cell * float(np.sum(density))


def gibbs_action(phi: Field, cfg: SimConfig) -> float:
    """S(phi) = 2 E(phi); the Langevin dynamics is reversible for exp(-S)."""
    return 2.0 * energy(phi, cfg)


def closed_form_drift(cfg: SimConfig) -> Drift:
    def drift(values: np.ndarray) -> np.ndarray:
        return -cfg.lam * _square_norm(values) * values + cfg.r_eps * values

    return drift


def drift_from_trajectory(traj: KernelTrajectory) -> Drift:
    """Local deterministic part of the force at sigma = 1 with the trajectory's counterterms.

    Only scalar fields; the flow is solved for one component.
    """
    total = Poly()
    for poly in traj.components.values():
        total = total + poly
    # G_{1,1} = 0, so only monomials without lines survive
    local = Poly({m: c for m, c in total.terms.items() if not m.lines and not m.noise_count})

    def drift(values: np.ndarray) -> np.ndarray:
        if values.shape[0] != 1:
            raise DomainError("flow drift is defined for scalar fields")
        return evaluate(local, values, None, {})

    return drift


def _full_drift(
    values: np.ndarray, cfg: SimConfig, base: Drift, h: np.ndarray | None
) -> np.ndarray:
    out = base(values)
    if cfg.theta_tilt > 0:
        phi = Field(lattice=cfg.lattice, values=values)
        out = out + tilted_drift(phi, cfg.theta_tilt, h, cfg.tilt_A, cfg.tilt_B).values
    return out


# --- integration --------------------------------------------------------------------------


def step_exponential_euler(
    state: Field,
    cfg: SimConfig,
    noise: NoiseSpec | None = None,
    step: int = 0,
    force: Drift | None = None,
) -> Field:
    """One exponential Euler step with exact Ornstein-Uhlenbeck noise per mode.

    phi <- e^{-dt A} phi + A^{-1}(1 - e^{-dt A}) drift + W, where W has per-mode
    variance (1 - e^{-2 dt A}) / (2 A eps^d). Exact in law for lam = 0.

    Args:
        state: Current slice with cfg.n components
        cfg: Run configuration; cfg.noise = False drops W
        noise: Noise stream; required when cfg.noise is set
        step: Global step counter selecting the draw
        force: Deterministic drift; defaults to -lam |phi|^2 phi + r_eps phi

    Returns:
        Next slice

    Raises:
        BlowUpError: sup norm above cfg.blowup_cap or non-finite values
    """
    lat = state.lattice
    values = state.values
    if values.shape[0] != cfg.n:
        raise DomainError(f"state has {values.shape[0]} components, config has {cfg.n}")
    h = cfg.step
    rate = linear_rate(cfg.mass, lat)
    axes = spatial_axes(values.ndim, lat.d)
    base = closed_form_drift(cfg) if force is None else force
    nonlinear = _full_drift(values, cfg, base, None)

    decay = np.exp(-h * rate)
    gain = -np.expm1(-h * rate) / rate
    out_hat = decay * np.fft.fftn(values, axes=axes) + gain * np.fft.fftn(nonlinear, axes=axes)
    if cfg.noise:
        if noise is None:
            raise DomainError("a noise stream is required when noise is on")
        if noise.components != cfg.n:
            raise DomainError(f"noise has {noise.components} components, config has {cfg.n}")
        ou = np.sqrt(-np.expm1(-2 * h * rate) / (2 * rate * lat.cell))
        out_hat = out_hat + ou * np.fft.fftn(_standard_normal(noise, step, values.shape), axes=axes)
    out = np.fft.ifftn(out_hat, axes=axes).real

    peak = float(np.max(np.abs(out))) if np.all(np.isfinite(out)) else float("inf")
    if peak > cfg.blowup_cap:
        raise BlowUpError(f"|phi|_inf = {peak:.3e} exceeds cap {cfg.blowup_cap:.1e} at step {step}")
    return state.with_values(out)


def lag_autocorrelation(series: np.ndarray, lag: int = 1) -> float:
    x = np.asarray(series, dtype=float) - np.mean(series)
    denom = float(np.dot(x, x))
    if lag >= x.size or denom == 0.0:
        return 0.0
    return float(np.dot(x[:-lag], x[lag:])) / denom


def run_stationary(
    cfg: SimConfig,
    noise: NoiseSpec,
    initial: Field | None = None,
    force: Drift | None = None,
) -> SampleStream:
    """Burn in, then record every ``sample_stride``-th slice.

    Observables per sample: ``phi2`` (site mean of |phi|^2) and ``tilt_norm4``
    (||h Q phi||^4). Warns when the lag-one autocorrelation of ``phi2`` at the
    stride exceeds 0.1.

    Raises:
        BlowUpError: the chain left the blow-up cap
    """
    lat = cfg.lattice
    state = initial if initial is not None else Field.zeros(lat, n=cfg.n)
    h_weight = tilt_weight(lat, cfg.tilt_B)
    step = 0
    for _ in range(cfg.burn_in):
        state = step_exponential_euler(state, cfg, noise, step, force)
        step += 1
    logger.info("burn-in finished after %d steps (stream %d)", cfg.burn_in, noise.stream_id)

    samples = np.empty((cfg.n_samples, *state.values.shape))
    phi2 = np.empty(cfg.n_samples)
    norm4 = np.empty(cfg.n_samples)
    for i in range(cfg.n_samples):
        for _ in range(cfg.sample_stride):
            state = step_exponential_euler(state, cfg, noise, step, force)
            step += 1
        samples[i] = state.values
        phi2[i] = float(np.mean(_square_norm(state.values)))
        norm4[i] = tilt_norm4(state.values, lat, cfg.tilt_A, cfg.tilt_B, h_weight)

    rho = lag_autocorrelation(phi2)
    if rho > AUTOCORR_WARN:
        logger.warning(
            "lag-one autocorrelation of |phi|^2 is %.3f at stride %d; increase sample_stride",
            rho, cfg.sample_stride,
        )
    logger.info("recorded %d samples over %d steps", cfg.n_samples, step)
    return SampleStream(
        lattice=lat,
        values=samples,
        observables={"phi2": phi2, "tilt_norm4": norm4},
        seed=noise.seed,
        stream_id=noise.stream_id,
        normalization=noise.normalization,
    )


def calibrate_theta_star(
    cfg: SimConfig, noise: NoiseSpec, thetas: list[float], steps: int = PILOT_STEPS
) -> float:
    """Largest theta of the ascending list whose pilot run stays below the blow-up cap."""
    best = 0.0
    for theta in sorted(thetas):
        pilot = cfg.model_copy(update={"theta_tilt": theta, "theta_star": float("inf")})
        state = Field.zeros(cfg.lattice, n=cfg.n)
        try:
            for step in range(steps):
                state = step_exponential_euler(state, pilot, noise, step)
        except BlowUpError:
            logger.info("theta %.4g hit the blow-up cap in the pilot run", theta)
            break
        best = theta
    return best


# --- continuum embedding ------------------------------------------------------------------


def default_embedding_bump(u: np.ndarray) -> np.ndarray:
    """1 up to half the Nyquist radius, 0 from the Nyquist radius on."""
    return bump(2.0 * np.asarray(u))


def embed_continuum(
    phi: Field, factor: int = 2, theta_bump: Callable[[np.ndarray], np.ndarray] | None = None
) -> Field:
    """Low-pass spectral interpolation onto the lattice with spacing eps/factor.

    Coefficients are multiplied by theta(|k| eps / pi) and placed at the same
    physical frequencies of the finer lattice. The restriction of the result
    to the coarse sites reproduces every field band-limited to the plateau of
    theta.
    """
    if factor < 1 or factor & (factor - 1):
        raise DomainError(f"refinement factor {factor} must be a power of two")
    theta_bump = default_embedding_bump if theta_bump is None else theta_bump
    lat = phi.lattice
    fine = LatticeSpec.build(
        d=lat.d, eps=lat.eps / factor, M=lat.M * factor, T=lat.T, Nt=lat.Nt,
        continuum_symbol=lat.continuum_symbol,
    )
    axes = spatial_axes(phi.values.ndim, lat.d)
    mesh = np.meshgrid(*spatial_frequencies(lat), indexing="ij")
    radius = np.sqrt(sum(k**2 for k in mesh)) * lat.eps / np.pi
    coeffs = np.fft.fftn(phi.values, axes=axes) * theta_bump(radius)

    index = np.fft.fftfreq(lat.M, 1.0 / lat.M).round().astype(int) % fine.M
    fine_hat = np.zeros((phi.n, *fine.space_shape), dtype=complex)
    fine_hat[(slice(None), *np.ix_(*[index] * lat.d))] = coeffs * factor**lat.d
    values = np.fft.ifftn(fine_hat, axes=axes).real
    return Field(lattice=fine, values=values)


def restrict(phi: Field, factor: int) -> np.ndarray:
    """Values of a refined field on the coarse sites."""
    return phi.values[(slice(None), *[slice(None, None, factor)] * phi.lattice.d)]


# --- Gibbs sampling -----------------------------------------------------------------------


def metropolis_site_samples(
    cfg: SimConfig,
    noise: NoiseSpec,
    n_samples: int,
    sweeps_between: int = 5,
    burn_in_sweeps: int = 500,
    step_size: float = 1.0,
    site: tuple[int, ...] | None = None,
) -> np.ndarray:
    """Single-site Metropolis chain for exp(-S), recording component 0 at ``site``.

    Meant for tiny lattices; the action difference of one update is computed
    from the dense row of A.
    """
    lat = cfg.lattice
    size = int(np.prod(lat.space_shape))
    a_row = np.fft.ifftn(linear_rate(cfg.mass, lat)).real.reshape(-1)
    diag = a_row[0]
    gen = np.random.Generator(
        np.random.Philox(np.random.SeedSequence(noise.seed, spawn_key=(noise.stream_id,)))
    )
    phi = np.zeros((cfg.n, size))
    a_phi = np.zeros((cfg.n, size))
    weight = 2.0 * lat.cell
    target = 0 if site is None else int(np.ravel_multi_index(site, lat.space_shape))
    offsets = np.arange(size)
    coords = np.array(np.unravel_index(offsets, lat.space_shape))

    def column(x: int) -> np.ndarray:
        # A(y, x) = a(y - x) on the torus
        shifted = (coords - np.array(np.unravel_index(x, lat.space_shape))[:, None]) % lat.M
        return a_row[np.ravel_multi_index(tuple(shifted), lat.space_shape)]

    columns = [column(x) for x in range(size)]
    out = np.empty(n_samples)
    accepted = 0
    proposals = 0
    total_sweeps = burn_in_sweeps + n_samples * sweeps_between
    for sweep in range(total_sweeps):
        for x in range(size):
            for a in range(cfg.n):
                delta = step_size * gen.standard_normal()
                old = phi[:, x]
                sq_old = float(np.sum(old**2))
                sq_new = sq_old + 2 * delta * old[a] + delta**2
                d_quad = delta * a_phi[a, x] + 0.5 * delta**2 * diag
                d_local = 0.25 * cfg.lam * (sq_new**2 - sq_old**2)
                d_local -= 0.5 * cfg.r_eps * (sq_new - sq_old)
                d_action = weight * (d_quad + d_local)
                proposals += 1
                if d_action <= 0 or gen.random() < np.exp(-d_action):
                    phi[a, x] += delta
                    a_phi[a] += delta * columns[x]
                    accepted += 1
        done = sweep + 1 - burn_in_sweeps
        if done > 0 and done % sweeps_between == 0:
            out[done // sweeps_between - 1] = phi[0, target]
    logger.info("metropolis acceptance %.3f over %d proposals", accepted / proposals, proposals)
    return out
