"""Truncated perturbative flow of the effective force.

The force at scale sigma is kept as a family of symbolic polynomials
F^[ell],(k) in which every line named "G" is the small-scale propagator
G_{sigma,1}. The family is the hbar-expansion, to order ell_bar, of the
fixed point F_sigma(psi) = F_1(psi + G_{sigma,1} F_sigma(psi)), so it solves
d/dsigma F = sum B exactly at every order it keeps; what the truncation
drops is H_sigma.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Literal

import numpy as np

from models.diagrams import PSI, XI, Monomial, Poly
from models.errors import DomainError
from models.flow import FlowParams, ForceKernel, GradeIndex, KernelTrajectory, RemainderFamily
from models.lattice import Field, LatticeSpec, MassFracParams
from services.diagrams import OpSymbols, apply_symbol, derivative, evaluate
from services.localisation import box_overflow, check_box_overflow, kernel_from_symbol
from services.scale_ops import (
    build_G_small,
    build_Gdot,
    build_J,
    linear_symbol,
    sigma_grid,
)

logger = logging.getLogger(__name__)

Integrator = Literal["exact", "midpoint"]
COMPLEX_STEP = 1e-30


def _threads() -> int:
    return max(1, int(os.getenv("FRACPHI4_THREADS", "1")))


def _ordered_map(fn, items: list) -> list:
    """Map preserving input order, so reductions over the result are thread-count independent."""
    if _threads() == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        return list(pool.map(fn, items))


# --- boundary data and the graded closed form ---------------------------------------------


def boundary_force(
    lam: float, r_bar: float, lat: LatticeSpec | None = None
) -> dict[tuple[int, int], ForceKernel]:
    """Nonzero components of F_1 = -lam psi^3 + r_bar psi + xi; all ell > 0 components vanish."""
    if lam < 0:
        raise DomainError(f"lambda = {lam} must be >= 0")
    kernels = {
        (0, 0): ForceKernel(
            grade=GradeIndex(ell=0, k=0), poly=Poly.of(XI), local=True, noise_tag=True
        ),
        (0, 1): ForceKernel(grade=GradeIndex(ell=0, k=1), poly=Poly.of(PSI, r_bar), local=True),
        (0, 3): ForceKernel(
            grade=GradeIndex(ell=0, k=3), poly=Poly.of(Monomial(n_psi=3), -lam), local=True
        ),
    }
    return {key: kernel for key, kernel in kernels.items() if not kernel.poly.is_zero()}


def force_series(
    lam: float, r_bar: float, counterterms: dict[int, float], ell_bar: int
) -> list[Poly]:
    """F^[ell] for ell = 0..ell_bar.

    With X_m = G F^[m-1] and phi = psi + sum_m X_m the order-ell part is
    r_ell psi + sum_{j=1..ell} r_{ell-j} X_j - lam [phi^3]_ell, where r_0 = r_bar
    and r_ell (ell >= 1) are the counterterms; F^[0] also carries the noise.
    """
    rates = {0: r_bar, **{ell: counterterms.get(ell, 0.0) for ell in range(1, ell_bar + 1)}}
    phi: list[Poly] = [Poly.of(PSI)]
    orders: list[Poly] = []
    for ell in range(ell_bar + 1):
        force = Poly.of(XI) if ell == 0 else Poly()
        for j in range(ell + 1):
            force = force + phi[j] * rates[ell - j]
        cube = Poly()
        for i in range(ell + 1):
            for j in range(ell + 1 - i):
                cube = cube + phi[i] * phi[j] * phi[ell - i - j]
        force = force - cube * lam
        orders.append(force)
        phi.append(force.line("G"))
    return orders


def split_by_degree(orders: list[Poly]) -> dict[tuple[int, int], Poly]:
    out = {}
    for ell, poly in enumerate(orders):
        for k in sorted(poly.degrees()):
            out[(ell, k)] = poly.project(k)
    return out


def order_poly(components: dict[tuple[int, int], Poly], ell: int) -> Poly:
    total = Poly()
    for (e, _), poly in sorted(components.items()):
        if e == ell:
            total = total + poly
    return total


def flow_B(
    target: GradeIndex, b: ForceKernel, c: ForceKernel, sigma: float | None = None
) -> ForceKernel:
    """B^a_{b,c} = -D F^b [Gdot F^c].

    Zero unless k_a + 1 = k_b + k_c and ell_a - 1 = ell_b + ell_c.
    """
    zero = ForceKernel(grade=target, poly=Poly(), sigma=b.sigma if sigma is None else sigma)
    if target.k + 1 != b.grade.k + c.grade.k or target.ell - 1 != b.grade.ell + c.grade.ell:
        return zero
    if b.poly.is_zero() or c.poly.is_zero():
        return zero
    poly = -derivative(b.poly, c.poly.line("Gdot"))
    return zero.model_copy(update={"poly": poly.project(target.k)})


def truncation_pairs(ell_bar: int) -> list[tuple[int, int]]:
    """Order pairs (ell_b, ell_c) whose B lands above ell_bar; these make up H_sigma."""
    return [
        (eb, ec)
        for eb in range(ell_bar + 1)
        for ec in range(ell_bar + 1)
        if eb + ec + 1 > ell_bar
    ]


# --- trajectories ---------------------------------------------------------------------------


def solve_kernel_flow(
    params: FlowParams | None,
    lam: float,
    counterterms: dict[int, float],
    lat: LatticeSpec,
    mass: MassFracParams,
    r_bar: float = 0.0,
    sigmas: np.ndarray | None = None,
    integrator: Integrator = "exact",
    ell_bar: int | None = None,
    per_octave: int = 8,
    box_tolerance: float | None = None,
) -> KernelTrajectory:
    """Solve the force flow backwards from sigma = 1 over a scale grid.

    The graded components are sigma-independent polynomials in the lines G
    and Gdot; solving the flow amounts to producing G_{sigma,1} at each
    checkpoint. ``exact`` uses (1 - J_sigma) L^{-1}; ``midpoint`` marches
    dG_{sigma,1}/dsigma = -Gdot_sigma down the grid with the midpoint rule.

    Args:
        params: Resolved parameters; supplies ell_bar unless given explicitly
        lam: Quartic coupling
        counterterms: r_ell for ell >= 1
        lat: Lattice
        mass: Fractional order and mass
        r_bar: Bare linear coefficient
        sigmas: Ascending checkpoints in [1/2, 1); defaults to the geometric grid
        integrator: "exact" or "midpoint"
        ell_bar: Truncation order override
        per_octave: Grid density when ``sigmas`` is not given
        box_tolerance: Largest admissible window-edge mass fraction of G_{sigma,1}
            over the checkpoints; None only records it

    Returns:
        KernelTrajectory

    Raises:
        DomainError: bad grid or integrator
        BoxOverflowError: G_{sigma,1} leaks past the window edge beyond ``box_tolerance``
    """
    if ell_bar is None:
        ell_bar = params.ell_bar if params is not None else 1
    if sigmas is None:
        grid = sigma_grid(lat, mass.s, per_octave)
    else:
        grid = np.asarray(sigmas, dtype=float)
    if grid[0] < 0.5 or np.any(np.diff(grid) <= 0):
        raise DomainError("sigma grid must be ascending and start at or above 1/2")
    components = split_by_degree(force_series(lam, r_bar, counterterms, ell_bar))

    g_small = None
    if integrator == "midpoint":
        g_small = np.zeros((grid.size, *lat.spacetime_shape), dtype=complex)
        g_small[-1] = build_G_small(float(grid[-1]), mass, lat).symbol
        for n in range(grid.size - 2, -1, -1):
            mid = 0.5 * (grid[n] + grid[n + 1])
            step = grid[n + 1] - grid[n]
            g_small[n] = g_small[n + 1] + step * build_Gdot(mid, mass, lat).symbol
    elif integrator != "exact":
        raise DomainError(f"unknown integrator {integrator!r}")

    worst, worst_at, worst_value = None, 0.0, -1.0
    for n, sigma in enumerate(grid):
        symbol = build_G_small(float(sigma), mass, lat).symbol if g_small is None else g_small[n]
        kernel = kernel_from_symbol(symbol, lat)
        value = box_overflow(kernel)
        if value > worst_value:
            worst, worst_at, worst_value = kernel, float(sigma), value
    overflow = check_box_overflow(worst, f"G_small(sigma={worst_at:.6g})", box_tolerance)

    logger.info(
        "kernel flow solved: ell_bar=%d, %d components, %d checkpoints (%s)",
        ell_bar, len(components), grid.size, integrator,
    )
    return KernelTrajectory(
        lattice=lat,
        mass=mass,
        lam=lam,
        r_bar=r_bar,
        counterterms=dict(counterterms),
        ell_bar=ell_bar,
        components=components,
        sigmas=grid,
        g_small=g_small,
        integrator=integrator,
        box_overflow=overflow,
    )


def ops_at(traj: KernelTrajectory, sigma: float) -> OpSymbols:
    """Symbols of J_sigma, G_{sigma,1} and Gdot_sigma for evaluating the trajectory."""
    lat, mass = traj.lattice, traj.mass
    if sigma >= 1.0:
        zero = np.zeros(lat.spacetime_shape, dtype=complex)
        return {"J": np.ones(lat.spacetime_shape), "G": zero, "Gdot": zero}
    g = None
    if traj.g_small is not None:
        idx = int(np.argmin(np.abs(traj.sigmas - sigma)))
        if abs(traj.sigmas[idx] - sigma) <= 1e-12:
            g = traj.g_small[idx]
    if g is None:
        g = build_G_small(sigma, mass, lat).symbol
    return {
        "J": build_J(sigma, 0, lat, mass).symbol,
        "G": g,
        "Gdot": build_Gdot(sigma, mass, lat).symbol,
    }


def kernels_at(traj: KernelTrajectory, sigma: float) -> dict[tuple[int, int], ForceKernel]:
    return {
        key: ForceKernel(
            grade=GradeIndex(ell=key[0], k=key[1]),
            poly=poly,
            sigma=sigma,
            local=all(not m.lines for m in poly.terms),
            noise_tag=key == (0, 0),
        )
        for key, poly in traj.components.items()
    }


def _order_values(
    traj: KernelTrajectory, psi: np.ndarray, xi: np.ndarray | None, ops: OpSymbols
) -> list[np.ndarray]:
    return [
        evaluate(order_poly(traj.components, ell), psi, xi, ops)
        for ell in range(traj.ell_bar + 1)
    ]


def _values(psi: Field | np.ndarray) -> np.ndarray:
    if isinstance(psi, Field):
        if psi.kind != "spacetime":
            raise DomainError("the force acts on space-time fields")
        return psi.values[0]
    return np.asarray(psi)


def force_values(
    traj: KernelTrajectory, sigma: float, psi_sigma: np.ndarray, xi: np.ndarray | None = None
) -> np.ndarray:
    """F_sigma evaluated on an already smoothed input."""
    ops = ops_at(traj, sigma)
    return sum(_order_values(traj, psi_sigma, xi, ops))


def effective_force_eval(
    traj: KernelTrajectory, sigma: float, psi: Field | np.ndarray, xi: np.ndarray | None = None
) -> Field | np.ndarray:
    """F_sigma(J_sigma psi); deterministic part only when ``xi`` is None."""
    values = _values(psi)
    ops = ops_at(traj, sigma)
    out = force_values(traj, sigma, apply_symbol(ops["J"], values), xi)
    if isinstance(psi, Field):
        return psi.with_values(out[None])
    return out


def directional_derivative(
    poly: Poly, psi: np.ndarray, direction: np.ndarray, xi: np.ndarray | None, ops: OpSymbols
) -> np.ndarray:
    """D poly(psi)[direction] by complex step; exact to rounding for real polynomials."""
    shifted = psi + 1j * COMPLEX_STEP * direction
    return evaluate(poly, shifted, xi, ops).imag / COMPLEX_STEP


def _h_values(
    traj: KernelTrajectory, psi_sigma: np.ndarray, xi: np.ndarray | None, ops: OpSymbols
) -> np.ndarray:
    orders = [order_poly(traj.components, ell) for ell in range(traj.ell_bar + 1)]
    values = [evaluate(p, psi_sigma, xi, ops) for p in orders]
    pairs = truncation_pairs(traj.ell_bar)

    def term(eb: int) -> np.ndarray:
        tail = sum((values[ec] for b, ec in pairs if b == eb), np.zeros_like(psi_sigma))
        direction = apply_symbol(ops["Gdot"], tail)
        return directional_derivative(orders[eb], psi_sigma, direction, xi, ops)

    contributions = _ordered_map(term, sorted({eb for eb, _ in pairs}))
    return sum(contributions, np.zeros_like(psi_sigma))


def H_sigma(
    traj: KernelTrajectory, psi: Field | np.ndarray, sigma: float, xi: np.ndarray | None = None
) -> Field | np.ndarray:
    """Truncation defect d/dsigma F + DF Gdot F at J_sigma psi.

    Equal to minus the B contributions whose order exceeds ell_bar, i.e.
    sum over ell_b + ell_c >= ell_bar of D F^[ell_b] [Gdot F^[ell_c]].
    """
    values = _values(psi)
    ops = ops_at(traj, sigma)
    out = _h_values(traj, apply_symbol(ops["J"], values), xi, ops)
    if isinstance(psi, Field):
        return psi.with_values(out[None])
    return out


def coercive_eta(sigma: float) -> float:
    """Scale eta with (1 - J_sigma)(J_eta f)^3 = 0 for every f."""
    return sigma / (6.0 - 5.0 * sigma)


def coercive_split_Q(
    traj: KernelTrajectory,
    psi: Field | np.ndarray,
    sigma: float,
    lam: float,
    xi: np.ndarray | None = None,
) -> dict[str, np.ndarray | float]:
    """Split J_sigma F_sigma(psi_sigma) = -lam psi_sigma^3 + Q_sigma(psi).

    Q is the sum of J F^[>0](psi_sigma), J r_bar psi_sigma, J xi and
    (1 - J) lam psi_sigma^3. Returns the four parts, Q, and the sup of the
    re-assembly residual.
    """
    values = _values(psi)
    ops = ops_at(traj, sigma)
    j = ops["J"]
    psi_s = apply_symbol(j, values)
    higher = sum(
        (
            evaluate(order_poly(traj.components, ell), psi_s, xi, ops)
            for ell in range(1, traj.ell_bar + 1)
        ),
        np.zeros_like(psi_s),
    )
    cube = lam * psi_s**3
    parts = {
        "higher": apply_symbol(j, higher),
        "linear": apply_symbol(j, traj.r_bar * psi_s),
        "noise": apply_symbol(j, xi) if xi is not None else np.zeros_like(psi_s),
        "cubic_defect": cube - apply_symbol(j, cube),
    }
    q = parts["higher"] + parts["linear"] + parts["noise"] + parts["cubic_defect"]
    lhs = apply_symbol(j, force_values(traj, sigma, psi_s, xi))
    parts["Q"] = q
    parts["residual"] = float(np.max(np.abs(lhs - (-cube + q)), initial=0.0))
    return parts


# --- remainder ------------------------------------------------------------------------------


def evaluate_remainder(
    phi: Field | np.ndarray,
    traj: KernelTrajectory,
    mu_grid: list[float],
    xi: np.ndarray | None = None,
    per_octave: int = 8,
) -> RemainderFamily:
    """R_mu = int_mu^1 [H_sigma(phi_sigma) + DF_sigma(phi_sigma) Gdot_sigma R_sigma] dsigma.

    Marched backwards with the explicit midpoint rule from the saturation
    scale, where R vanishes, over the geometric grid refined to contain every
    mu. The reported residual at mu is
    sup|L phi_mu - J_mu (F_mu(phi_mu) + R_mu)| / sup|L phi_mu|, with L applied
    spectrally on the periodic window.
    """
    values = _values(phi)
    lat, mass = traj.lattice, traj.mass
    mus = sorted(float(m) for m in mu_grid)
    if mus and (mus[0] < 0.5 or mus[-1] >= 1.0):
        raise DomainError("mu values must lie in [1/2, 1)")
    grid = np.union1d(sigma_grid(lat, mass.s, per_octave), mus)
    total = Poly()
    for ell in range(traj.ell_bar + 1):
        total = total + order_poly(traj.components, ell)

    def rate(sigma: float, remainder: np.ndarray) -> np.ndarray:
        ops = ops_at(traj, sigma)
        phi_s = apply_symbol(ops["J"], values)
        h = _h_values(traj, phi_s, xi, ops)
        drift = directional_derivative(total, phi_s, apply_symbol(ops["Gdot"], remainder), xi, ops)
        return -(h + drift)

    remainder = np.zeros_like(values)
    saved: dict[float, np.ndarray] = {float(grid[-1]): remainder.copy()}
    for n in range(grid.size - 1, 0, -1):
        hi, lo = float(grid[n]), float(grid[n - 1])
        step = lo - hi
        k1 = rate(hi, remainder)
        k2 = rate(hi + 0.5 * step, remainder + 0.5 * step * k1)
        remainder = remainder + step * k2
        if any(abs(lo - m) <= 1e-12 for m in mus):
            saved[lo] = remainder.copy()

    l_phi = np.fft.ifftn(np.fft.fftn(values) * linear_symbol(mass, lat)).real
    residuals = {}
    remainders = {}
    for mu in mus:
        key = min(saved, key=lambda s: abs(s - mu))
        ops = ops_at(traj, mu)
        phi_mu = apply_symbol(ops["J"], values)
        lhs = apply_symbol(ops["J"], l_phi)
        rhs = apply_symbol(ops["J"], force_values(traj, mu, phi_mu, xi) + saved[key])
        scale = max(float(np.max(np.abs(lhs))), 1e-300)
        residuals[mu] = float(np.max(np.abs(lhs - rhs))) / scale
        remainders[mu] = saved[key]
    logger.info("remainder evaluated at %d scales over %d steps", len(mus), grid.size - 1)
    return RemainderFamily(mus=mus, remainders=remainders, residuals=residuals, steps=grid.size - 1)
