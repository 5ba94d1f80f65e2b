"""Parameter resolver and grade bookkeeping for the truncated flow."""

import logging
import math
from itertools import combinations_with_replacement

from models.errors import ParameterError
from models.flow import FlowParams, GradeClass, GradeIndex, MultiIndex, Relevance

logger = logging.getLogger(__name__)

TOL = 1e-12


def _relevance(h: float) -> Relevance:
    if h < -TOL:
        return "relevant"
    if h <= TOL:
        return "marginal"
    return "irrelevant"


def scaling_table(s: float, d: int, delta: float, kappa: float) -> dict[str, float]:
    """Rows of the scaling table, each written as a quantity that must be >= 0 (or > 0 for K)."""
    beta = s - delta / 2 - kappa / 2
    theta = 3 * beta
    rho = 2 * theta
    alpha = 3 * beta + kappa
    return {
        "A": theta + beta - delta - d,
        "B": -rho + theta + beta - delta + 2 * s,
        "Xi": -(-rho + 2 * theta),
        "Phi3": -(-rho + theta + 3 * beta),
        "K": alpha - rho / 2 + theta - (d + 2 * s) / 2 - kappa,
        "Fbar": alpha - rho + theta - kappa,
        "Bflow": 2 * s - alpha + beta - delta,
    }


def table_fix(
    s: float,
    d: int,
    beta: float,
    gamma: float,
    zeta: float,
    delta: float,
    alpha: float,
    kappa: float,
    kappa0: float,
    kappa_bar: float,
    a: int,
    v: float,
    ell_bar: int,
    k_bar: int,
) -> dict[str, float]:
    """Post-processing table [A]-[F], rows as slack >= 0."""
    return {
        "A": 3 * (gamma - beta) + delta - a * kappa0 * (1 + ell_bar) - kappa - zeta,
        "B": min(2 * gamma, 3 * gamma - (d + 2 * s) / 2 - 2 * kappa - a * kappa0) - zeta,
        "C": delta * ell_bar - alpha - a * kappa0 * (1 + 2 * ell_bar) - zeta,
        "D": kappa_bar - k_bar * v - (1 + ell_bar) * kappa0,
        "E": min(gamma, 2 * s - gamma) - zeta,
        "F": zeta - 4 * (s + gamma) * kappa_bar / (1 - kappa_bar),
    }


def resolve_params(
    s: float, d: int, kappa: float | None = None, ell_bar: int = 2
) -> FlowParams:
    """Resolve the full exponent vector for (s, d).

    Args:
        s: Fractional order in (0, 1]
        d: Spatial dimension
        kappa: Regularity loss; defaults to delta_star / 64
        ell_bar: Working truncation order of the flow

    Returns:
        FlowParams satisfying both constraint tables

    Raises:
        ParameterError: naming the first violated row
    """
    delta_star = (4 * s - d) / 3
    if delta_star <= TOL:
        raise ParameterError(
            "subcritical", f"delta_star = (4s - d)/3 = {delta_star:.6g} must be > 0"
        )
    if ell_bar < 0:
        raise ParameterError("ell_bar", "truncation order must be >= 0")
    delta = delta_star / 2
    kappa = delta_star / 64 if kappa is None else kappa
    if kappa < 0:
        raise ParameterError("B", f"kappa = {kappa} must be >= 0")

    rows = scaling_table(s, d, delta, kappa)
    for row, value in rows.items():
        if value < -TOL or (row == "K" and value <= TOL):
            raise ParameterError(
                row, f"scaling row {row} = {value:.6g} violated (kappa too large?)"
            )

    beta = s - delta / 2 - kappa / 2
    theta, rho, alpha = 3 * beta, 6 * beta, 3 * beta + kappa
    zeta = delta_star / 16
    gamma = beta - zeta
    kappa_bar = zeta / (4 * (s + beta) + zeta)

    ell_bar_post = math.ceil((alpha + 3 * delta_star / 16) / (delta_star / 4) - 1e-9)
    k_bar_post = 2 * ell_bar_post + 3
    a = math.ceil(2 * max(1.0, 2 * k_bar_post * gamma / kappa_bar))
    v = gamma / a

    bounds = {
        "D": kappa_bar / (2 * (1 + ell_bar_post)),
        "A": (delta_star / 4 - kappa) / (a * (1 + ell_bar_post)),
        "B": (delta_star / 2 - 3.5 * kappa) / a,
        "C": delta_star / (8 * a),
    }
    for row, bound in bounds.items():
        if bound <= 0:
            raise ParameterError(row, f"no admissible kappa0 (bound {bound:.6g}); reduce kappa")
    kappa0 = 0.5 * min(bounds.values())
    if kappa > 2 * s - 11 * delta_star / 16:
        raise ParameterError("B", "kappa exceeds 2s - 11 delta_star / 16")
    if zeta > beta / 2 or beta > 2 * s:
        raise ParameterError("E", "zeta <= beta/2 <= s fails")

    fix = table_fix(
        s, d, beta, gamma, zeta, delta, alpha, kappa, kappa0, kappa_bar, a, v,
        ell_bar_post, k_bar_post,
    )
    for row, value in fix.items():
        if value < -TOL:
            raise ParameterError(row, f"post-processing row {row} = {value:.6g} violated")

    ell_hat = math.floor(2 * beta / delta + 1e-9)
    params = FlowParams(
        s=s,
        d=d,
        delta_star=delta_star,
        delta=delta,
        kappa=kappa,
        beta=beta,
        theta=theta,
        rho_hom=rho,
        alpha=alpha,
        zeta_exp=zeta,
        gamma=gamma,
        kappa0=kappa0,
        flat_b=2 * s - delta / 2,
        kappa_bar=kappa_bar,
        a=a,
        v=v,
        ell_bar=ell_bar,
        k_bar=2 * ell_bar + 3,
        ell_hat=ell_hat,
        ell_bar_post=ell_bar_post,
        k_bar_post=k_bar_post,
        scaling_table=rows,
        table_fix=fix,
    )
    logger.debug("resolved parameters for s=%s d=%s: %s", s, d, params)
    return params


def grade_enumerate(params: FlowParams) -> list[GradeClass]:
    """All force grades (ell <= ell_bar, k <= k_bar) with homogeneity and class."""
    out = []
    for ell in range(params.ell_bar + 1):
        for k in range(params.k_bar + 1):
            grade = GradeIndex(ell=ell, k=k)
            h = grade.homogeneity(params)
            out.append(GradeClass(grade=grade, homogeneity=h, relevance=_relevance(h)))
    return out


def max_degree(ell: int) -> int:
    """Largest polynomial degree generated at order ell: k_max(ell) = 2 ell + 3."""
    return 2 * ell + 3


def cumulant_relevance(index: MultiIndex, params: FlowParams) -> Relevance:
    return _relevance(index.homogeneity(params))


def relevant_cumulants(params: FlowParams, n_max: int = 3) -> list[tuple[MultiIndex, Relevance]]:
    """Relevant or marginal, parity-nonzero cumulant indices with n <= n_max and L <= 2 ell_bar."""
    grades = [g.grade for g in grade_enumerate(params)]
    found = []
    for n in range(1, n_max + 1):
        for combo in combinations_with_replacement(grades, n):
            index = MultiIndex(grades=tuple(combo))
            if index.L > 2 * params.ell_bar or index.parity_zero:
                continue
            rel = cumulant_relevance(index, params)
            if rel != "irrelevant":
                found.append((index, rel))
    return found
