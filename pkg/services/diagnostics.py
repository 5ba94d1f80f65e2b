"""Estimators and numeric checks on simulated and manufactured fields.

Cumulants are pooled over lattice sites (the law is translation invariant)
and carry delete-one-block jackknife errors over the sample axis.
"""

import logging

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from models.errors import DomainError, InsufficientSamples
from models.lattice import Field, LatticeSpec, MassFracParams
from models.report import CumulantEstimate, VerifierResult
from models.simulation import NoiseSpec, SampleStream, SimConfig
from models.weights import NormReport, WeightSpec
from services.diagrams import apply_symbol
from services.lattice_spectral import (
    apply_spatial_symbol,
    carre_du_champ,
    frac_symbol,
)
from services.scale_ops import build_J, linear_symbol, lp_block, lp_levels, sigma_grid
from services.spde_sim import linear_rate, run_stationary
from services.weights_norms import sharp_norm, triple_norm_field

logger = logging.getLogger(__name__)

MIN_SAMPLES = 100
JACKKNIFE_BLOCKS = 20
ESS_FLOOR = 0.1
Z_BAND = 3.0


# --- cumulants ----------------------------------------------------------------------------


def _centred_cumulant(variables: list[np.ndarray]) -> float:
    """Joint cumulant of up to four pooled variables from centred product moments."""
    x = [v - v.mean() for v in variables]

    def m(*idx: int) -> float:
        prod = x[idx[0]]
        for i in idx[1:]:
            prod = prod * x[i]
        return float(prod.mean())

    match len(x):
        case 1:
            return float(variables[0].mean())
        case 2:
            return m(0, 1)
        case 3:
            return m(0, 1, 2)
        case 4:
            return m(0, 1, 2, 3) - m(0, 1) * m(2, 3) - m(0, 2) * m(1, 3) - m(0, 3) * m(1, 2)
    raise DomainError(f"cumulant order {len(x)} not supported")


def _pattern(
    values: np.ndarray, components: tuple[int, ...], separation: int, axis: int
) -> list[np.ndarray]:
    """First half of the legs at the origin, second half shifted by ``separation`` sites."""
    split = (len(components) + 1) // 2
    out = []
    for leg, c in enumerate(components):
        v = values[:, c]
        if leg >= split and separation:
            v = np.roll(v, -separation, axis=axis + 1)
        out.append(v)
    return out


def _estimate(values: np.ndarray, components: tuple[int, ...], separation: int, axis: int) -> float:
    legs = _pattern(values, components, separation, axis)
    if len(set(components)) == 1 and (separation == 0 or len(components) == 1):
        return float(stats.kstat(legs[0].ravel(), n=len(components)))
    return _centred_cumulant(legs)


def jackknife(values: np.ndarray, estimator, blocks: int = JACKKNIFE_BLOCKS) -> tuple[float, float]:
    """Full-sample estimate and delete-one-block standard error over axis 0."""
    full = estimator(values)
    edges = np.linspace(0, values.shape[0], blocks + 1).astype(int)
    keep = np.ones(values.shape[0], dtype=bool)
    loo = np.empty(blocks)
    for b in range(blocks):
        keep[:] = True
        keep[edges[b]:edges[b + 1]] = False
        loo[b] = estimator(values[keep])
    err = float(np.sqrt((blocks - 1) / blocks * np.sum((loo - loo.mean()) ** 2)))
    return full, err


def estimate_cumulants(
    stream: SampleStream,
    order: int,
    separations: list[int],
    components: tuple[int, ...] | None = None,
    axis: int = 0,
) -> CumulantEstimate:
    """Connected moments kappa_order at the given site separations along ``axis``.

    Args:
        stream: Stationary samples
        order: 1 to 4
        separations: Lattice separations of the second half of the legs
        components: Component index per leg; defaults to all zero
        axis: Spatial axis of the separation

    Returns:
        CumulantEstimate with jackknife errors

    Raises:
        InsufficientSamples: fewer than 100 samples
    """
    if not 1 <= order <= 4:
        raise DomainError(f"order {order} must be between 1 and 4")
    if stream.n_samples < MIN_SAMPLES:
        raise InsufficientSamples(f"{stream.n_samples} samples, need at least {MIN_SAMPLES}")
    components = (0,) * order if components is None else tuple(components)
    if len(components) != order or max(components) >= stream.n:
        raise DomainError(f"components {components} do not fit order {order} and n = {stream.n}")
    values, errors = [], []
    for r in separations:
        v, e = jackknife(stream.values, lambda x, r=r: _estimate(x, components, r, axis))
        values.append(v)
        errors.append(e)
    return CumulantEstimate(
        order=order,
        components=components,
        separations=list(separations),
        values=values,
        errors=errors,
        n_samples=stream.n_samples,
    )


def gff_covariance(mass: MassFracParams, lat: LatticeSpec) -> np.ndarray:
    """Stationary two-point function of the linear dynamics, C(y) over the torus."""
    return np.fft.ifftn(1.0 / (2 * linear_rate(mass, lat))).real / lat.cell


def first_order_kappa4(lam: float, mass: MassFracParams, lat: LatticeSpec) -> float:
    """Leading-order fourth cumulant at coinciding points, -12 lam eps^d sum_y C(y)^4.

    The factor 12 is 4! times the quartic coefficient lam/2 of the action 2E.
    """
    c = gff_covariance(mass, lat)
    return -12.0 * lam * lat.cell * float(np.sum(c**4))


# --- Besov seminorm -----------------------------------------------------------------------


def besov_seminorm(phi: Field, gamma: float, rho: np.ndarray | None = None) -> NormReport:
    """sup_i 2^{-i gamma} ||rho Delta_i phi||_inf over the spatial LP blocks.

    Space-time input is handled slice by slice, so the sup also runs over time.
    """
    lat = phi.lattice
    weight = 1.0 if rho is None else rho
    best, level = 0.0, None
    for i in lp_levels(lat):
        block = lp_block(i, lat).apply(phi.values)
        value = 2.0 ** (-i * gamma) * float(np.max(np.abs(weight * block)))
        if value > best:
            best, level = value, i
    return NormReport(
        kind="besov",
        value=best,
        params={"gamma": gamma, "level": float(level if level is not None else -1)},
    )


# --- coercive estimate --------------------------------------------------------------------


def _time_derivative(values: np.ndarray, dt: float) -> np.ndarray:
    """Central difference along the time axis of (n, Nt, *space) values; interior slices only."""
    return (values[:, 2:] - values[:, :-2]) / (2 * dt)


def _interior(values: np.ndarray) -> np.ndarray:
    return values[:, 1:-1]


def _sup(values: np.ndarray) -> float:
    """Sup over sites of the Euclidean norm over components (axis 0)."""
    return float(np.max(np.sqrt(np.sum(values**2, axis=0)), initial=0.0))


def _gradient_surrogate(values: np.ndarray, lat: LatticeSpec) -> np.ndarray:
    """|grad f| with spacing 2 eps, matching the sublattice of the s = 1 symbol."""
    grads = [
        (np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2 * lat.eps)
        for ax in range(values.ndim - lat.d, values.ndim)
    ]
    return np.sqrt(sum(g**2 for g in grads))


def _carre(values: np.ndarray, lat: LatticeSpec, mass: MassFracParams) -> np.ndarray:
    """Componentwise D, combined as (sum_a D(v^a)^2)^(1/2); shape (1, Nt, *space)."""
    if mass.s == 1.0:
        per = _gradient_surrogate(values, lat)
    else:
        per = carre_du_champ(Field(lattice=lat, values=values, kind="spacetime"), mass).values
    return np.sqrt(np.sum(per**2, axis=0, keepdims=True))


def equation_residual(phi: Field, lam: float, mass: MassFracParams) -> np.ndarray:
    """f = d_t phi + (-Delta)^s phi + m^2 phi + lam |phi|^2 phi on interior time slices."""
    lat = phi.lattice
    values = phi.values
    lap = apply_spatial_symbol(values, frac_symbol(mass, lat), lat.d)
    sq = np.sum(values**2, axis=0, keepdims=True)
    rest = lap + mass.m2 * values + lam * sq * values
    return _time_derivative(values, lat.dt) + _interior(rest)


def coercive_bound_check(
    phi: Field,
    lam: float,
    mass: MassFracParams,
    rho: np.ndarray | None = None,
    rho_tilde: np.ndarray | None = None,
    f: np.ndarray | None = None,
    margin: float = 10.0,
) -> VerifierResult:
    """Check ||rho u|| <= margin (lam^{-1/2} A^{1/2} + lam^{-1/3} (||rho^3 f|| + B)^{1/3}).

    A = 1/4 ||(-Delta)^s rho^2|| + 1/2 ||rho d_t rho||,
    B = 1/2 ||rho u|| ||rho d_t rho|| + ||rho^2 u (-Delta)^s rho||
        + ||rho_tilde u|| ||rho^2 D(rho_tilde^{-1}) D(rho)||
        + ||rho^2 rho_tilde^{-1} D(rho) D(rho_tilde u)||,
    with D the carre du champ. Norms are sups over interior time slices.

    Args:
        phi: Space-time field u with n components
        lam: Coupling, > 0
        mass: Fractional order and mass; s = 1 replaces D by |grad|
        rho: Weight over (Nt, *space); defaults to one
        rho_tilde: Positive second weight; defaults to rho when rho > 0, else one
        f: Right-hand side on interior slices; computed from phi when omitted
        margin: Constant allowed in front of the bound

    Returns:
        VerifierResult with left = ||rho u||
    """
    if phi.kind != "spacetime":
        raise DomainError("the coercive check needs a space-time field")
    if lam <= 0:
        raise DomainError(f"lam = {lam} must be > 0")
    lat = phi.lattice
    shape = lat.spacetime_shape
    rho = np.ones(shape) if rho is None else np.broadcast_to(rho, shape)
    if rho_tilde is None:
        rho_tilde = rho if np.all(rho > 0) else np.ones(shape)
    rho_tilde = np.broadcast_to(rho_tilde, shape)
    if np.any(rho_tilde <= 0):
        raise DomainError("rho_tilde must be strictly positive")
    f = equation_residual(phi, lam, mass) if f is None else f
    u = phi.values
    r, rt = rho[None], rho_tilde[None]
    symbol = frac_symbol(mass, lat)

    lap_rho2 = apply_spatial_symbol(r**2, symbol, lat.d)
    lap_rho = apply_spatial_symbol(r, symbol, lat.d)
    rho_dt_rho = _interior(r) * _time_derivative(r, lat.dt)
    d_rho = _carre(r, lat, mass)
    d_inv = _carre(1.0 / rt, lat, mass)
    d_rt_u = _carre(rt * u, lat, mass)

    rho_u = _sup(_interior(r * u))
    a_const = 0.25 * _sup(_interior(lap_rho2)) + 0.5 * _sup(rho_dt_rho)
    b_const = (
        0.5 * rho_u * _sup(rho_dt_rho)
        + _sup(_interior(r**2 * u * lap_rho))
        + _sup(_interior(rt * u)) * _sup(_interior(r**2 * d_inv * d_rho))
        + _sup(_interior(r**2 / rt * d_rho * d_rt_u))
    )
    forcing = _sup(_interior(r) ** 3 * f)
    right = lam**-0.5 * np.sqrt(a_const) + lam ** (-1 / 3) * (forcing + b_const) ** (1 / 3)
    note = "A=%.6g B=%.6g" % (a_const, b_const)
    if mass.s == 1.0:
        note += "; s = 1: D replaced by the gradient surrogate"
    return VerifierResult(
        identifier="coercive_weighted", left=rho_u, right=float(right), margin=margin, note=note
    )


def coercive_norm_check(
    phi: Field,
    lam: float,
    mass: MassFracParams,
    spec: WeightSpec,
    mubar: float,
    gamma: float,
    margin: float = 10.0,
    per_octave: int = 4,
) -> VerifierResult:
    """Scale-norm form of the coercive bound.

    |||phi|||_mubar <= margin (lam^{-1/2} [[mubar]]^gamma + lam^{-1/3} ||f||_#^{1/3}),
    where f_sigma = L phi_sigma + lam phi_sigma^3 and phi_sigma = J_sigma phi,
    L applied spectrally on the periodic window. Scalar fields only.
    """
    if phi.kind != "spacetime" or phi.n != 1:
        raise DomainError("the scale-norm coercive check needs a scalar space-time field")
    lat = phi.lattice
    values = phi.values[0]
    l_symbol = linear_symbol(mass, lat)
    family = {}
    for sigma in sigma_grid(lat, mass.s, per_octave):
        if sigma < mubar - 1e-12:
            continue
        phi_s = apply_symbol(build_J(float(sigma), 0, lat, mass).symbol, values)
        family[float(sigma)] = apply_symbol(l_symbol, phi_s) + lam * phi_s**3
    left = triple_norm_field(values, mubar, gamma, spec, lat, mass, per_octave=per_octave).value
    sharp = sharp_norm(family, mubar, gamma, spec, lat).value
    right = lam**-0.5 * (1.0 - mubar) ** gamma + lam ** (-1 / 3) * sharp ** (1 / 3)
    return VerifierResult(
        identifier="coercive_scale_norm", left=left, right=float(right), margin=margin,
        note=f"mubar={mubar:.6g}",
    )


# --- tilted measure -----------------------------------------------------------------------


def _mean_err(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(x.size))


def jensen_tilt_experiment(
    cfg: SimConfig, noise: NoiseSpec, theta_grid: list[float]
) -> list[dict[str, float | bool]]:
    """Compare log Z_theta = log E_0[exp(theta N)] with theta E_theta[N], N = ||h Q phi||^4.

    log Z_theta is estimated by reweighting one untilted run; E_theta[N] both
    by self-normalised reweighting and by a separate tilted run. Convexity of
    log Z gives log Z_theta <= theta E_theta[N]; a row passes when this holds
    within three combined standard errors.
    """
    for theta in theta_grid:
        if not 0 <= theta < cfg.theta_star:
            raise DomainError(f"theta = {theta} must lie in [0, theta_star = {cfg.theta_star})")
    base = run_stationary(cfg.model_copy(update={"theta_tilt": 0.0}), noise)
    norm4 = base.observables["tilt_norm4"]
    n = norm4.size
    rows = []
    for k, theta in enumerate(theta_grid):
        log_w = theta * norm4
        log_z = float(logsumexp(log_w) - np.log(n))
        w = np.exp(log_w - log_w.max())
        w /= w.sum()
        ess = float(1.0 / np.sum(w**2)) / n
        # delta method for log of a mean
        z_ratio = np.exp(log_w - logsumexp(log_w) + np.log(n))
        log_z_err = float(np.std(z_ratio, ddof=1) / np.sqrt(n))
        rhs_reweighted = theta * float(np.sum(w * norm4))

        if theta == 0:
            rhs_tilted, rhs_err = 0.0, 0.0
        else:
            tilted_noise = noise.model_copy(update={"stream_id": noise.stream_id + 1 + k})
            tilted = run_stationary(cfg.model_copy(update={"theta_tilt": theta}), tilted_noise)
            mean, err = _mean_err(tilted.observables["tilt_norm4"])
            rhs_tilted, rhs_err = theta * mean, theta * err
        band = Z_BAND * float(np.hypot(log_z_err, rhs_err))
        if ess < ESS_FLOOR:
            logger.warning("reweighting ESS %.3f below %.2f at theta %.4g", ess, ESS_FLOOR, theta)
        rows.append({
            "theta": float(theta),
            "log_Z": log_z,
            "log_Z_err": log_z_err,
            "rhs_tilted": rhs_tilted,
            "rhs_tilted_err": rhs_err,
            "rhs_reweighted": rhs_reweighted,
            "ess_fraction": ess,
            "ess_ok": ess >= ESS_FLOOR,
            "passed": log_z <= rhs_tilted + band,
        })
    logger.info("jensen experiment finished over %d theta values", len(theta_grid))
    return rows


# --- O(n) symmetry ------------------------------------------------------------------------


def rotate_components(stream: SampleStream, rotation: np.ndarray) -> SampleStream:
    """Apply an orthogonal n x n matrix to the component axis of every sample."""
    if rotation.shape != (stream.n, stream.n):
        raise DomainError(f"rotation of shape {rotation.shape} does not act on n = {stream.n}")
    values = np.einsum("ab,sb...->sa...", rotation, stream.values)
    return stream.model_copy(update={"values": values})


def on_symmetry_check(
    stream: SampleStream, separations: list[int] | None = None, band: float = Z_BAND
) -> VerifierResult:
    """Off-diagonal cumulants vanish and diagonal two-point functions agree.

    Tests kappa_2^{01}, kappa_4^{0001}, kappa_4^{0111} against zero and
    kappa_2^{00} against kappa_2^{11}; left is the largest z-score.
    """
    if stream.n < 2:
        raise DomainError("the O(n) check needs at least two components")
    separations = [0] if separations is None else separations
    z: dict[str, float] = {}
    for comps in ((0, 1), (0, 0, 0, 1), (0, 1, 1, 1)):
        est = estimate_cumulants(stream, len(comps), separations, comps)
        z["k" + "".join(map(str, comps))] = max(est.z_scores())
    k00 = estimate_cumulants(stream, 2, separations, (0, 0))
    k11 = estimate_cumulants(stream, 2, separations, (1, 1))
    diag = [
        abs(a - b) / np.hypot(ea, eb) if ea + eb > 0 else 0.0
        for a, b, ea, eb in zip(k00.values, k11.values, k00.errors, k11.errors)
    ]
    z["diag"] = float(max(diag))
    worst = max(z, key=z.get)
    return VerifierResult(
        identifier="on_symmetry",
        left=z[worst],
        right=1.0,
        margin=band,
        note=", ".join(f"{k}={v:.3g}" for k, v in sorted(z.items())),
    )
