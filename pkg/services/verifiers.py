"""Identity and measured-bound checks for the scale operators and weights.

Exact identities pass when the symbol residual is below a round-off floor.
Measured bounds record a constant per parameter value; the check is that
the constant drifts by at most STABILITY_FACTOR over the sweep.
"""

import logging

import numpy as np

from models.lattice import Field, LatticeSpec, MassFracParams
from models.report import VerifierResult
from models.weights import ParabolicPoint, WeightSpec
from services.diagnostics import besov_seminorm
from services.diagrams import apply_symbol
from services.scale_ops import (
    build_G,
    build_Gdot,
    build_J,
    build_K,
    build_L,
    kernel_realize,
    lp_block,
    lp_levels,
    mu_point,
)
from services.spde_sim import tilt_norm4, tilt_weight, tilted_drift
from services.weights_norms import (
    displacement_lengths,
    rho_mu,
    sharp_norm,
    tree_weight,
    triple_norm_field,
    zeta_grid,
    zeta_mu,
)

logger = logging.getLogger(__name__)

EXACT_TOL = 1e-12
STABILITY_FACTOR = 3.0
DEFAULT_SIGMAS = (0.5, 0.75, 0.9)


def default_lattice() -> LatticeSpec:
    return LatticeSpec.build(d=1, eps=0.125, M=32, T=1.0, Nt=64)


def default_weight_spec(s: float) -> WeightSpec:
    return WeightSpec(a=2.0, v=0.2, kappa0=0.01, flat_b=1.5 * s, s=s)


def constants_stability(constants: list[float]) -> float:
    """max / min of a measured constant over a sweep (inf when some constant vanishes)."""
    lo, hi = min(constants), max(constants)
    if lo <= 0:
        return float("inf")
    return hi / lo


def _exact(identifier: str, residual: float, tol: float = EXACT_TOL) -> VerifierResult:
    return VerifierResult(identifier=identifier, left=residual, right=tol)


def _stable(identifier: str, constants: dict[str, float]) -> VerifierResult:
    return VerifierResult(
        identifier=identifier,
        left=constants_stability(list(constants.values())),
        right=1.0,
        margin=STABILITY_FACTOR,
        note=", ".join(f"{k}: {v:.4g}" for k, v in constants.items()),
    )


# --- exact symbol identities --------------------------------------------------------------


def j_composition_residuals(
    lat: LatticeSpec, mass: MassFracParams, sigmas=DEFAULT_SIGMAS, ells=(1, 2, 3)
) -> tuple[float, float]:
    """Max residuals of J~_{s,l} J_s = J_s and J~_{s,l+1} J~_{s,l} = J~_{s,l}."""
    absorb = nest = 0.0
    for sigma in sigmas:
        j0 = build_J(sigma, 0, lat, mass).symbol
        for ell in ells:
            jl = build_J(sigma, ell, lat, mass).symbol
            jl1 = build_J(sigma, ell + 1, lat, mass).symbol
            absorb = max(absorb, float(np.max(np.abs(jl * j0 - j0))))
            nest = max(nest, float(np.max(np.abs(jl1 * jl - jl))))
    return absorb, nest


def dyadic_absorption_residual(lat: LatticeSpec, mass: MassFracParams, levels: int = 3) -> float:
    """Max of |J_sigma J_{mu_{i+1}} - J_sigma| over sigma < mu_i."""
    worst = 0.0
    for i in range(levels):
        j_next = build_J(mu_point(i + 1), 0, lat, mass).symbol
        for sigma in (0.5, 0.5 * (0.5 + mu_point(i)), mu_point(i) - 1e-3):
            j_sigma = build_J(sigma, 0, lat, mass).symbol
            worst = max(worst, float(np.max(np.abs(j_sigma * j_next - j_sigma))))
    return worst


def lp_residuals(lat: LatticeSpec) -> tuple[float, float]:
    """Partition-of-unity residual and max overlap of non-adjacent blocks."""
    levels = lp_levels(lat)
    symbols = {i: lp_block(i, lat).symbol for i in levels}
    partition = float(np.max(np.abs(sum(symbols.values()) - 1.0)))
    overlap = max(
        (
            float(np.max(np.abs(symbols[i] * symbols[j])))
            for i in levels
            for j in levels
            if j > i + 1
        ),
        default=0.0,
    )
    return partition, overlap


# --- measured kernel bounds ---------------------------------------------------------------


def gdot_decay_constants(
    lat: LatticeSpec, mass: MassFracParams, sigmas=DEFAULT_SIGMAS, alpha: float | None = None
) -> dict[str, float]:
    """sup |Gdot_sigma(z)| [[sigma]]^{d+1} (1 + |z|_s/[[sigma]])^{d+alpha} per sigma.

    alpha defaults to s.
    """
    alpha = mass.s if alpha is None else alpha
    lengths = displacement_lengths(lat, mass.s)
    out = {}
    for sigma in sigmas:
        bracket = 1.0 - sigma
        kernel = kernel_realize(build_Gdot(sigma, mass, lat))
        weight = bracket ** (lat.d + 1) * (1.0 + lengths / bracket) ** (lat.d + alpha)
        out[f"sigma={sigma:g}"] = float(np.max(np.abs(kernel) * weight))
    return out


def lp_green_constants(
    lat: LatticeSpec,
    mass: MassFracParams,
    spec: WeightSpec,
    alpha: float | None = None,
    max_level: int = 5,
) -> dict[str, float]:
    """||zeta_{mu_i}^{-alpha} Delta_i G||_{L^1} / [[mu_i]]^{2s} per LP level i >= 0."""
    alpha = mass.s if alpha is None else alpha
    lengths = displacement_lengths(lat, mass.s)
    g = build_G(mass, lat).symbol
    out = {}
    for i in [i for i in lp_levels(lat) if 0 <= i <= max_level]:
        mu = mu_point(i)
        symbol = lp_block(i, lat).symbol[None] * g
        kernel = np.fft.ifftn(symbol).real / (lat.cell * lat.dt)
        weight = zeta_mu(lengths, mu, spec) ** -alpha
        mass_l1 = float(np.sum(np.abs(kernel) * weight)) * lat.cell * lat.dt
        out[f"i={i}"] = mass_l1 / (1.0 - mu) ** (2 * mass.s)
    return out


def j_contraction_constants(
    lat: LatticeSpec, mass: MassFracParams, sigmas=DEFAULT_SIGMAS
) -> dict[str, float]:
    """L^1 mass of the J_sigma kernel, which bounds its norm on every L^p."""
    return {
        f"sigma={sigma:g}": float(np.sum(np.abs(kernel_realize(build_J(sigma, 0, lat, mass)))))
        * lat.cell * lat.dt
        for sigma in sigmas
    }


def smoothing_ratio_constants(
    lat: LatticeSpec,
    mass: MassFracParams,
    spec: WeightSpec,
    rng: np.random.Generator,
    alpha: float = 1.0,
    pairs=((0.5, 0.75), (0.5, 0.9), (0.75, 0.9)),
    draws: int = 8,
) -> dict[str, float]:
    """Worst ||zeta_mu^alpha K_mu f|| / ||zeta_mu^alpha K_sigma f|| over random f, mu <= sigma."""
    out = {}
    for mu, sigma in pairs:
        weight = zeta_grid(lat, mu, spec) ** alpha
        k_mu = build_K(mu, mass, lat).symbol
        k_sigma = build_K(sigma, mass, lat).symbol
        worst = 0.0
        for _ in range(draws):
            f = rng.standard_normal(lat.spacetime_shape)
            top = float(np.max(np.abs(weight * apply_symbol(k_mu, f))))
            bottom = float(np.max(np.abs(weight * apply_symbol(k_sigma, f))))
            worst = max(worst, top / bottom)
        out[f"mu={mu:g},sigma={sigma:g}"] = worst
    return out


# --- sampled weight inequalities ----------------------------------------------------------


def _point(rng: np.random.Generator, d: int, scale: float) -> ParabolicPoint:
    return ParabolicPoint(t=scale * rng.standard_normal(), x=tuple(scale * rng.standard_normal(d)))


def weight_bound_checks(
    spec: WeightSpec, rng: np.random.Generator, draws: int = 2000, d: int = 2
) -> list[VerifierResult]:
    """Sampled weight inequalities with their sharp constants.

    - zeta_mu(z) <= sqrt(2) zeta_mu(z') / zeta_mu(z - z')
    - rho_mu(z) <= 2^{v/2} rho_mu(z') / rho_mu(z - z')
    - 1 / zeta_mu <= sqrt(2) on the annulus |z| <= 2^{a(i+1)} for mu >= mu_i
    - w_mu factorises over a split tree up to 4
    - (1 - h_mu) w_mu / w_sigma <= 2 ([[sigma]]/[[mu]])^b and (1 - v_mu) ... <= 2^b (...)
    """
    worst = {"zeta": 0.0, "rho": 0.0, "partition": 0.0, "tree": 0.0, "h": 0.0, "v": 0.0}
    for _ in range(draws):
        z, z1 = _point(rng, d, 5.0), _point(rng, d, 5.0)
        mu = float(rng.uniform(0.0, 0.99))
        diff = z.minus(z1)
        worst["zeta"] = max(
            worst["zeta"], zeta_mu(z, mu, spec) / zeta_mu(z1, mu, spec) * zeta_mu(diff, mu, spec)
        )
        worst["rho"] = max(
            worst["rho"], rho_mu(z, mu, spec) / rho_mu(z1, mu, spec) * rho_mu(diff, mu, spec)
        )

        m = int(rng.integers(2, 6))
        n = int(rng.integers(0, m))
        x, ys = _point(rng, d, 5.0), [_point(rng, d, 5.0) for _ in range(m)]
        y, w = _point(rng, d, 5.0), _point(rng, d, 5.0)
        mu = float(rng.uniform(0.5, 0.99))
        lhs = tree_weight([x, *ys], mu, spec, omega=1.0)
        rhs = (
            tree_weight([x, *ys[:n], y], mu, spec, omega=1.0)
            * tree_weight([y, w], mu, spec, omega=1.0)
            * tree_weight([w, *ys[n:]], mu, spec, omega=1.0)
        )
        worst["tree"] = max(worst["tree"], lhs / rhs)

        z, z1 = _point(rng, d, 0.5), _point(rng, d, 0.5)
        sigma, mu = sorted(rng.uniform(0.5, 0.99, 2))
        factor = ((1 - sigma) / (1 - mu)) ** spec.flat_b
        ratio = tree_weight([z, z1], mu, spec) / tree_weight([z, z1], sigma, spec)
        worst["h"] = max(worst["h"], (1 - tree_weight([z, z1], mu, spec, "h")) * ratio / factor)
        worst["v"] = max(worst["v"], (1 - tree_weight([z, z1], mu, spec, "v")) * ratio / factor)

    for i in range(6):
        radius = 2.0 ** (spec.a * (i + 1))
        lengths = radius * rng.uniform(0.0, 1.0, 500)
        for mu in (mu_point(i), 0.5 * (mu_point(i) + 1.0)):
            inverse = float(np.max(1.0 / zeta_mu(lengths, mu, spec)))
            worst["partition"] = max(worst["partition"], inverse)

    bounds = {
        "zeta": np.sqrt(2.0),
        "rho": 2.0 ** (spec.v / 2),
        "partition": np.sqrt(2.0),
        "tree": 4.0,
        "h": 2.0,
        "v": 2.0**spec.flat_b,
    }
    return [
        VerifierResult(identifier=f"weight_{key}", left=worst[key], right=bounds[key] + EXACT_TOL)
        for key in bounds
    ]


# --- field-level checks -------------------------------------------------------------------


def tilt_drift_bound(
    lat: LatticeSpec,
    rng: np.random.Generator,
    theta: float = 0.5,
    A: float = 2.0,
    B: float = 2.0,
    draws: int = 10,
) -> VerifierResult:
    """||tilted drift||_2 <= 2 theta ||h||_inf ||h Q phi||_2^3, since |Q| <= 1 on every mode."""
    h = tilt_weight(lat, B)
    worst = 0.0
    for _ in range(draws):
        phi = Field(lattice=lat, values=rng.standard_normal(lat.shape_for("slice")))
        drift = tilted_drift(phi, theta, h, A, B).values
        left = np.sqrt(lat.cell * float(np.sum(drift**2)))
        right = 2 * theta * float(np.max(h)) * tilt_norm4(phi, lat, A, B, h) ** 0.75
        worst = max(worst, left / right)
    return VerifierResult(identifier="tilt_drift_cubic", left=worst, right=1.0 + EXACT_TOL)


def schauder_chain_check(
    phi: Field,
    mass: MassFracParams,
    spec: WeightSpec,
    mubar: float,
    gamma: float,
    margin: float = 10.0,
    sigmas=DEFAULT_SIGMAS,
) -> VerifierResult:
    """Besov seminorm against [[mubar]]^{-gamma} (|||phi||| + ||K L phi||_#) for a scalar field."""
    lat = phi.lattice
    values = phi.values[0]
    family = {
        float(s): apply_symbol(build_K(s, mass, lat).symbol * build_L(s, mass, lat).symbol, values)
        for s in sigmas
        if s >= mubar
    }
    left = besov_seminorm(phi, gamma).value
    field_norm = triple_norm_field(values, mubar, gamma, spec, lat, mass).value
    forcing = sharp_norm(family, mubar, gamma, spec, lat).value
    right = (1.0 - mubar) ** -gamma * (field_norm + forcing)
    return VerifierResult(
        identifier="schauder_chain", left=left, right=right, margin=margin, note=f"mubar={mubar:g}"
    )


# --- suite --------------------------------------------------------------------------------


def operator_identity_suite(
    lat: LatticeSpec | None = None,
    mass: MassFracParams | None = None,
    spec: WeightSpec | None = None,
    seed: int = 0,
) -> list[VerifierResult]:
    """Every operator identity and measured bound, one result each, in a fixed order."""
    lat = default_lattice() if lat is None else lat
    mass = MassFracParams(s=0.8, m2=1.0) if mass is None else mass
    spec = default_weight_spec(mass.s) if spec is None else spec
    rng = np.random.default_rng(seed)

    absorb, nest = j_composition_residuals(lat, mass)
    partition, overlap = lp_residuals(lat)
    k_inverse = max(
        float(np.max(np.abs(build_L(s, mass, lat).symbol * build_K(s, mass, lat).symbol - 1)))
        for s in DEFAULT_SIGMAS
    )
    results = [
        _exact("J_tilde_absorbs_J", absorb),
        _exact("J_tilde_nesting", nest),
        _exact("dyadic_absorption", dyadic_absorption_residual(lat, mass)),
        _exact("L_K_inverse", k_inverse),
        _exact("lp_partition", partition),
        _exact("lp_disjoint", overlap),
        _stable("Gdot_decay", gdot_decay_constants(lat, mass)),
        _stable("lp_green_l1", lp_green_constants(lat, mass, spec)),
        _stable("smoothing_ratio", smoothing_ratio_constants(lat, mass, spec, rng)),
    ]
    contraction = j_contraction_constants(lat, mass)
    results.append(VerifierResult(
        identifier="J_contraction",
        left=max(contraction.values()),
        right=1.5,
        note=", ".join(f"{k}: {v:.4g}" for k, v in contraction.items()),
    ))
    results.extend(weight_bound_checks(spec, rng))
    results.append(tilt_drift_bound(lat, rng))
    failed = [r.identifier for r in results if not r.passed]
    logger.info("operator suite: %d checks, %d failed %s", len(results), len(failed), failed or "")
    return results
