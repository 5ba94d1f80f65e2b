"""Flow of the averaged force and the counterterms it fixes.

Blocks are translation-invariant, so every cumulant kept here is a Fourier
symbol on the space-time dual lattice:

- the means m_ell of F^[ell],(1), acting on psi as multipliers;
- the line kappa_2(F^[1],(2), xi), whose psi^2 legs are local;
- the fixed seeds: the noise covariance (symbol 1) and the mean -lam of F^[0],(3);
- parity-zero blocks, carried so their vanishing is checked along the flow.
"""

import logging

import numpy as np

from models.errors import DomainError, QuadratureToleranceError, UnsupportedContraction
from models.flow import CumulantKernel, CumulantTrajectory, FlowParams, GradeIndex, MultiIndex
from models.lattice import LatticeSpec, MassFracParams
from services.diagrams import spacetime_volume
from services.lattice_spectral import q_grid, temporal_frequencies
from services.localisation import check_box_overflow, kernel_from_symbol, localize_L
from services.scale_ops import build_Gdot, j_profile, sigma_grid

logger = logging.getLogger(__name__)


def mean_index(ell: int, k: int = 1) -> MultiIndex:
    return MultiIndex(grades=(GradeIndex(ell=ell, k=k),))


LINE = MultiIndex(grades=(GradeIndex(ell=1, k=2), GradeIndex(ell=0, k=0)))
COVARIANCE = MultiIndex(grades=(GradeIndex(ell=0, k=0), GradeIndex(ell=0, k=0)))


def zero_momentum(symbol: np.ndarray) -> float:
    return float(np.real(symbol.flat[0]))


def vertex_pairings(components: int) -> int:
    """Ways one contraction of -lam |psi|^2 psi_a leaves a term linear in psi_a: n + 2."""
    if components < 1:
        raise DomainError(f"components = {components} must be >= 1")
    return components + 2


def _zero(target: MultiIndex, lat: LatticeSpec, sigma: float) -> CumulantKernel:
    return CumulantKernel(
        index=target, symbol=np.zeros(lat.spacetime_shape, dtype=complex), sigma=sigma
    )


def cumulant_A(
    target: MultiIndex, src: CumulantKernel, gdot: np.ndarray, lat: LatticeSpec, sigma: float = 0.5
) -> CumulantKernel:
    """Close the second output of a two-point block onto its first argument through Gdot.

    Requires n(target) = n(src) - 1, L(target) = L(src) + 1, K(target) = K(src) - 1;
    otherwise, and for parity-zero blocks, the contribution is zero. The first
    argument's psi legs are local, so the result is a constant symbol.
    """
    a, b = target, src.index
    if (a.n, a.L, a.K) != (b.n - 1, b.L + 1, b.K - 1) or a.parity_zero or b.parity_zero:
        return _zero(target, lat, sigma)
    if b.n != 2:
        raise UnsupportedContraction(f"contraction of a {b.n}-point block")
    legs = b.grades[0].k
    value = -legs * float(np.sum((gdot * np.conj(src.symbol)).real)) / spacetime_volume(lat)
    return CumulantKernel(
        index=target, symbol=np.full(lat.spacetime_shape, value, dtype=complex), sigma=sigma
    )


def cumulant_B(
    target: MultiIndex,
    b: CumulantKernel,
    c: CumulantKernel,
    gdot: np.ndarray,
    lat: LatticeSpec,
    sigma: float = 0.5,
) -> CumulantKernel:
    """Join a mean block b to the output of c through Gdot.

    Requires n(target) = n(b) + n(c) - 1, L(target) = L(b) + L(c) + 1,
    K(target) = K(b) + K(c) - 1. The symbol is -k_b * b * Gdot * c, k_b being
    the number of psi legs of b that the derivative can hit.
    """
    ib, ic = b.index, c.index
    shape_ok = (target.n, target.L, target.K) == (ib.n + ic.n - 1, ib.L + ic.L + 1, ib.K + ic.K - 1)
    if not shape_ok or target.parity_zero or ib.parity_zero or ic.parity_zero:
        return _zero(target, lat, sigma)
    if ib.n != 1:
        raise UnsupportedContraction(f"joining through a {ib.n}-point block")
    legs = ib.grades[0].k
    return CumulantKernel(index=target, symbol=-legs * b.symbol * gdot * c.symbol, sigma=sigma)


def tadpole_oracle(
    lam: float, lat: LatticeSpec, mass: MassFracParams, components: int = 1
) -> float:
    """(n + 2) lam sum_p |(1 - J_{1/2}(p)) / (i omega + m^2 + q^{2s})|^2 / volume.

    The one-loop contraction that fixes r_2, computed directly from the
    symbols without going through the flow.
    """
    omega = temporal_frequencies(lat)
    q = q_grid(lat)
    tau = np.abs(omega) ** (1.0 / (2.0 * mass.s))
    cut = j_profile(tau, 0.5).reshape((-1,) + (1,) * lat.d) * j_profile(q, 0.5)[None]
    lin = 1j * omega.reshape((-1,) + (1,) * lat.d) + (mass.m2 + q ** (2 * mass.s))[None]
    total = float(np.sum(np.abs((1.0 - cut) / lin) ** 2))
    return vertex_pairings(components) * lam * total / spacetime_volume(lat)


class _State:
    """Flowing blocks: means per order, the line, and parity-zero blocks per label."""

    def __init__(self, means: list[np.ndarray], line: np.ndarray, parity: dict[str, np.ndarray]):
        self.means = means
        self.line = line
        self.parity = parity

    def axpy(self, h: float, rate: "_State") -> "_State":
        return _State(
            [m + h * r for m, r in zip(self.means, rate.means)],
            self.line + h * rate.line,
            {key: v + h * rate.parity[key] for key, v in self.parity.items()},
        )


def _parity_labels(ell_bar: int) -> dict[str, MultiIndex]:
    labels = {}
    for ell in range(ell_bar + 1):
        labels[f"mean[{ell}],(0)"] = mean_index(ell, 0)
        labels[f"mean[{ell}],(2)"] = mean_index(ell, 2)
    return labels


def _rates(
    sigma: float,
    state: _State,
    lam: float,
    ell_bar: int,
    lat: LatticeSpec,
    mass: MassFracParams,
    components: int = 1,
) -> _State:
    gdot = build_Gdot(sigma, mass, lat).symbol
    shape = lat.spacetime_shape
    means = [
        CumulantKernel(index=mean_index(ell), symbol=m, sigma=sigma)
        for ell, m in enumerate(state.means)
    ]
    line = CumulantKernel(index=LINE, symbol=state.line, sigma=sigma)
    quartic = CumulantKernel(
        index=mean_index(0, 3), symbol=np.full(shape, -lam, dtype=complex), sigma=sigma
    )
    covariance = CumulantKernel(index=COVARIANCE, symbol=np.ones(shape, dtype=complex), sigma=sigma)

    mean_rates = [np.zeros(shape, dtype=complex)]
    for ell in range(1, ell_bar + 1):
        target = mean_index(ell)
        rate = np.zeros(shape, dtype=complex)
        for lb in range(ell):
            pair = cumulant_B(target, means[lb], means[ell - 1 - lb], gdot, lat, sigma)
            rate = rate + pair.symbol
        rate = rate + cumulant_A(target, line, gdot, lat, sigma).symbol
        mean_rates.append(rate)
    # cumulant_B counts the 3 legs of the scalar vertex
    line_rate = cumulant_B(LINE, quartic, covariance, gdot, lat, sigma).symbol
    line_rate = line_rate * (vertex_pairings(components) / 3.0)

    labels = _parity_labels(ell_bar)
    parity_rates = {}
    for key, index in labels.items():
        ell, k = index.grades[0].ell, index.grades[0].k
        rate = np.zeros(shape, dtype=complex)
        for lb in range(ell):
            lc = ell - 1 - lb
            src = CumulantKernel(
                index=mean_index(lc, k), symbol=state.parity[f"mean[{lc}],({k})"], sigma=sigma
            )
            rate = rate + cumulant_B(index, means[lb], src, gdot, lat, sigma).symbol
        parity_rates[key] = rate
    return _State(mean_rates, line_rate, parity_rates)


def _march(
    grid: np.ndarray,
    lam: float,
    r_bar: float,
    counterterms: dict[int, float],
    ell_bar: int,
    lat: LatticeSpec,
    mass: MassFracParams,
    components: int = 1,
) -> tuple[_State, np.ndarray, dict[str, float]]:
    """Backward explicit midpoint from the top of the grid (where J = 1) down to sigma = 1/2.

    Returns the state at 1/2, zero-momentum means per grid point, and the largest
    entry seen in each parity-zero block.
    """
    shape = lat.spacetime_shape
    means = [np.full(shape, r_bar, dtype=complex)]
    means += [
        np.full(shape, counterterms.get(ell, 0.0), dtype=complex) for ell in range(1, ell_bar + 1)
    ]
    state = _State(
        means,
        np.zeros(shape, dtype=complex),
        {key: np.zeros(shape, dtype=complex) for key in _parity_labels(ell_bar)},
    )
    local = np.zeros((ell_bar + 1, grid.size))
    local[:, -1] = [zero_momentum(m) for m in state.means]
    parity_max = dict.fromkeys(state.parity, 0.0)
    for n in range(grid.size - 1, 0, -1):
        hi, lo = float(grid[n]), float(grid[n - 1])
        h = lo - hi
        k1 = _rates(hi, state, lam, ell_bar, lat, mass, components)
        k2 = _rates(hi + 0.5 * h, state.axpy(0.5 * h, k1), lam, ell_bar, lat, mass, components)
        state = state.axpy(h, k2)
        local[:, n - 1] = [zero_momentum(m) for m in state.means]
        for key, v in state.parity.items():
            parity_max[key] = max(parity_max[key], float(np.max(np.abs(v), initial=0.0)))
    return state, local, parity_max


def solve_cumulant_flow(
    params: FlowParams | None,
    lam: float,
    lat: LatticeSpec,
    mass: MassFracParams,
    r_bar: float = 0.0,
    per_octave: int = 8,
    ell_bar: int | None = None,
    tolerance: float | None = None,
    components: int = 1,
    box_tolerance: float | None = None,
) -> CumulantTrajectory:
    """Solve the averaged-force flow and fix the counterterms order by order.

    The order-ell counterterm is minus the local mass of the kernel of m_ell at
    sigma = 1/2 computed with r_ell = 0, so that with it the local part of m_ell
    vanishes there. First moments of the mean kernels vanish by reflection
    symmetry. Orders are fixed in sequence because m_ell feeds every higher
    order. For n components the quartic vertex contracts (n + 2) ways, which
    rescales the line and with it every counterterm it feeds.

    Args:
        params: Resolved parameters; supplies ell_bar unless given explicitly
        lam: Quartic coupling
        lat: Lattice
        mass: Fractional order and mass
        r_bar: Bare linear coefficient
        per_octave: Scale grid points per octave of [[sigma]]
        ell_bar: Truncation order override
        tolerance: If set, re-solve on the halved grid and raise when counterterms
            differ by more than this relative amount
        components: Number n of field components
        box_tolerance: Largest admissible window-edge mass fraction of the
            mean and line kernels at sigma = 1/2; None only records it

    Returns:
        CumulantTrajectory with counterterms r_1..r_ell_bar

    Raises:
        QuadratureToleranceError: step-halving estimate above ``tolerance``
        BoxOverflowError: a kernel leaks past the window edge beyond ``box_tolerance``
    """
    if lam < 0:
        raise DomainError(f"lambda = {lam} must be >= 0")
    if components < 1:
        raise DomainError(f"components = {components} must be >= 1")
    if ell_bar is None:
        ell_bar = params.ell_bar if params is not None else 1
    grid = sigma_grid(lat, mass.s, per_octave)
    counterterms: dict[int, float] = {}
    for ell in range(1, ell_bar + 1):
        state, _, _ = _march(grid, lam, r_bar, counterterms, ell_bar, lat, mass, components)
        kernel = kernel_from_symbol(state.means[ell], lat)
        counterterms[ell] = -localize_L(kernel, check_box=False).mass
        logger.debug("order %d counterterm %.12g", ell, counterterms[ell])
    state, local, parity_max = _march(
        grid, lam, r_bar, counterterms, ell_bar, lat, mass, components
    )

    if tolerance is not None:
        finer = solve_cumulant_flow(
            params, lam, lat, mass, r_bar, 2 * per_octave, ell_bar, components=components
        )
        for ell, value in counterterms.items():
            ref = finer.counterterms[ell]
            gap = abs(value - ref) / max(abs(ref), 1e-300)
            if gap > tolerance and abs(value - ref) > 1e-14:
                raise QuadratureToleranceError(
                    f"counterterm r_{ell}: step-halving change {gap:.3e} exceeds {tolerance:g}"
                )

    overflow = {
        f"mean[{ell}]": check_box_overflow(
            kernel_from_symbol(m, lat), f"mean[{ell}]", box_tolerance
        )
        for ell, m in enumerate(state.means)
    }
    overflow["line"] = check_box_overflow(
        kernel_from_symbol(state.line, lat), "line", box_tolerance
    )
    logger.info(
        "cumulant flow solved: ell_bar=%d, %d steps, counterterms %s",
        ell_bar, grid.size - 1, {k: round(v, 10) for k, v in counterterms.items()},
    )
    return CumulantTrajectory(
        lattice=lat,
        mass=mass,
        lam=lam,
        r_bar=r_bar,
        ell_bar=ell_bar,
        sigmas=grid,
        counterterms=counterterms,
        local_means={ell: local[ell] for ell in range(ell_bar + 1)},
        mean_symbols={ell: m for ell, m in enumerate(state.means)},
        line_symbol=state.line,
        parity_zero_blocks=parity_max,
        per_octave=per_octave,
        components=components,
        box_overflow=overflow,
    )
