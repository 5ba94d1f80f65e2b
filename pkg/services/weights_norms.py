"""Parabolic geometry, weights, and the weighted norms of fields, forces and cumulants.

Grid conventions: a space-time point of the window has time coordinate in
[-T, T) and spatial coordinates reduced to [-eps M/2, eps M/2). Kernels are
stored by displacement h = z1 - z (see services.localisation), so the
parabolic length of every displacement is precomputed once per lattice.
"""

import logging

import networkx as nx
import numpy as np

from models.diagrams import Poly
from models.errors import DomainError, KernelCapExceeded
from models.flow import CumulantKernel, FlowParams, ForceKernel, KernelTrajectory
from models.lattice import Field, LatticeSpec, MassFracParams
from models.weights import NormReport, ParabolicPoint, WeightKind, WeightSpec
from services.diagrams import apply_symbol, evaluate
from services.flow_engine import kernels_at, ops_at
from services.localisation import kernel_from_symbol, signed_offsets
from services.scale_ops import build_J, build_K, bump, kernel_cap, sigma_grid

logger = logging.getLogger(__name__)

MAX_STEINER_POINTS = 8


# --- geometry -----------------------------------------------------------------------------


def parabolic_norm(z: ParabolicPoint, s: float, period: float | None = None) -> float:
    """|z|_s = (|t|^{1/s} + |x|^2)^{1/2}; with ``period`` x is first reduced to the torus cell."""
    x = np.asarray(z.x, dtype=float)
    if period is not None:
        x = (x + period / 2) % period - period / 2
    return float(np.sqrt(abs(z.t) ** (1.0 / s) + np.sum(x**2)))


def parabolic_lengths(t: np.ndarray, x: list[np.ndarray], s: float) -> np.ndarray:
    """Vectorised |(t, x)|_s over broadcastable coordinate arrays."""
    return np.sqrt(np.abs(t) ** (1.0 / s) + sum(c**2 for c in x))


def _mesh(lat: LatticeSpec, t: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    x = lat.eps * signed_offsets(lat.M).astype(float)
    grids = np.meshgrid(t, *[x] * lat.d, indexing="ij")
    return grids[0], grids[1:]


def displacement_lengths(lat: LatticeSpec, s: float) -> np.ndarray:
    """|h|_s for every displacement h in FFT order, shape (Nt, *space)."""
    t, x = _mesh(lat, lat.dt * signed_offsets(lat.Nt).astype(float))
    return parabolic_lengths(t, x, s)


def point_lengths(lat: LatticeSpec, s: float) -> np.ndarray:
    """|z|_s for every point of the window, time running over [-T, T)."""
    t, x = _mesh(lat, lat.times)
    return parabolic_lengths(t, x, s)


# --- weights ------------------------------------------------------------------------------


def japanese(length: np.ndarray | float) -> np.ndarray | float:
    return np.sqrt(1.0 + np.square(length))


def zeta_mu(z: ParabolicPoint | np.ndarray, mu: float, spec: WeightSpec) -> float | np.ndarray:
    """zeta_mu(z) = <[[mu]]^a . z>_s^{-1}; arrays are taken as precomputed |z|_s."""
    if not 0.0 <= mu < 1.0:
        raise DomainError(f"mu = {mu} must lie in [0, 1)")
    length = parabolic_norm(z, spec.s) if isinstance(z, ParabolicPoint) else z
    return 1.0 / japanese((1.0 - mu) ** spec.a * length)


def rho_mu(z: ParabolicPoint | np.ndarray, mu: float, spec: WeightSpec) -> float | np.ndarray:
    return zeta_mu(z, mu, spec) ** spec.v


def zeta_grid(lat: LatticeSpec, mu: float, spec: WeightSpec) -> np.ndarray:
    return zeta_mu(point_lengths(lat, spec.s), mu, spec)


def polynomial_weight(length: np.ndarray | float, spec: WeightSpec) -> np.ndarray | float:
    """o(z) = <z>_s^{-kappa0}."""
    return japanese(length) ** -spec.kappa0


def steiner_proxy(points: list[ParabolicPoint], s: float) -> float:
    """Length of the minimum spanning tree under the parabolic distance.

    Exact Steiner diameter for one or two points and within a factor two of it
    otherwise.

    Raises:
        DomainError: empty set or more than MAX_STEINER_POINTS points
    """
    if not points:
        raise DomainError("Steiner diameter of an empty set")
    if len(points) > MAX_STEINER_POINTS:
        raise DomainError(f"at most {MAX_STEINER_POINTS} points, got {len(points)}")
    if len(points) == 1:
        return 0.0
    graph = nx.Graph()
    for i, p in enumerate(points):
        for j in range(i + 1, len(points)):
            graph.add_edge(i, j, weight=parabolic_norm(p.minus(points[j]), s))
    tree = nx.minimum_spanning_tree(graph)
    return float(sum(w for _, _, w in tree.edges(data="weight")))


def tree_weight(
    points: list[ParabolicPoint],
    mu: float,
    spec: WeightSpec,
    kind: WeightKind = "w",
    omega: float | None = None,
    ell: int = 0,
) -> float:
    """Tree and pair weights at scale mu.

    - ``w``: (1 + St/[[mu]])^omega, omega defaulting to flat_b
    - ``w_tilde``: the same with omega = flat_b - ell kappa0
    - ``h``: (1 + |z - z'|_s^2/[[mu]]^2)^{-1} for two points
    - ``v``: smooth plateau, 1 for St <= [[mu]] and 0 for St >= 2[[mu]]
    - ``o``: <z>_s^{-kappa0} for one point
    """
    bracket = 1.0 - mu
    if kind == "o":
        return float(polynomial_weight(parabolic_norm(points[0], spec.s), spec))
    if kind == "h":
        if len(points) != 2:
            raise DomainError("h_mu is a two-point weight")
        dist = parabolic_norm(points[0].minus(points[1]), spec.s)
        return 1.0 / (1.0 + (dist / bracket) ** 2)
    st = steiner_proxy(points, spec.s)
    if kind == "v":
        return float(bump(st / bracket))
    if kind == "w_tilde":
        omega = spec.flat_b - ell * spec.kappa0
    elif omega is None:
        omega = spec.flat_b
    return (1.0 + st / bracket) ** omega


def edge_weight(lat: LatticeSpec, mu: float, omega: float, s: float) -> np.ndarray:
    """(1 + |h|_s/[[mu]])^omega on the displacement grid."""
    return (1.0 + displacement_lengths(lat, s) / (1.0 - mu)) ** omega


# --- field norms --------------------------------------------------------------------------


def _spacetime_values(phi: Field | np.ndarray) -> np.ndarray:
    if isinstance(phi, Field):
        if phi.kind != "spacetime":
            raise DomainError("triple norms act on space-time fields")
        return phi.values[0]
    return np.asarray(phi)


def _scales_above(lat: LatticeSpec, s: float, mubar: float, per_octave: int) -> np.ndarray:
    grid = sigma_grid(lat, s, per_octave)
    scales = grid[grid >= mubar - 1e-12]
    if scales.size == 0:
        raise DomainError(f"no scale grid point above mubar = {mubar}")
    return scales


def triple_norm_field(
    phi: Field | np.ndarray,
    mubar: float,
    gamma: float,
    spec: WeightSpec,
    lat: LatticeSpec,
    mass: MassFracParams,
    power: float = 1.0 / 3.0,
    per_octave: int = 8,
) -> NormReport:
    """sup over grid sigma >= mubar of [[sigma]]^gamma ||zeta_sigma^power J_sigma phi||_inf."""
    values = _spacetime_values(phi)
    best, at = 0.0, None
    for sigma in _scales_above(lat, mass.s, mubar, per_octave):
        phi_s = apply_symbol(build_J(float(sigma), 0, lat, mass).symbol, values)
        weight = zeta_grid(lat, float(sigma), spec) ** power
        value = (1.0 - sigma) ** gamma * float(np.max(np.abs(weight * phi_s)))
        if value > best:
            best, at = value, float(sigma)
    return NormReport(
        kind="triple", value=best, sigma=at, mu=mubar, params={"gamma": gamma, "power": power}
    )


def sharp_norm(
    family: dict[float, np.ndarray],
    mubar: float,
    gamma: float,
    spec: WeightSpec,
    lat: LatticeSpec,
    power: float = 1.0,
) -> NormReport:
    """sup over sigma >= mubar of [[sigma]]^{3 gamma} ||zeta_sigma^power f_sigma||_inf."""
    scales = [s for s in family if s >= mubar - 1e-12]
    if not scales:
        raise DomainError(f"family has no scale above mubar = {mubar}")
    best, at = 0.0, None
    for sigma in sorted(scales):
        weight = zeta_grid(lat, sigma, spec) ** power
        value = (1.0 - sigma) ** (3 * gamma) * float(np.max(np.abs(weight * family[sigma])))
        if value > best:
            best, at = value, sigma
    return NormReport(
        kind="sharp", value=best, sigma=at, mu=mubar, params={"gamma": gamma, "power": power}
    )


# --- kernel norms -------------------------------------------------------------------------


def _measure(lat: LatticeSpec) -> float:
    return lat.dt * lat.cell


def _weighted_mass(kernel: np.ndarray, weight: np.ndarray, lat: LatticeSpec) -> float:
    return float(np.sum(np.abs(kernel) * weight)) * _measure(lat)


def _positive_symbol(symbol: np.ndarray, weight: np.ndarray, lat: LatticeSpec) -> np.ndarray:
    """Symbol of the kernel |V| weight, V being the kernel of ``symbol``."""
    V = kernel_from_symbol(symbol, lat).values
    return np.conj(np.fft.fftn(np.abs(V) * weight)) * _measure(lat)


def _output_weight(lat: LatticeSpec, ell: int, spec: WeightSpec) -> np.ndarray:
    return polynomial_weight(point_lengths(lat, spec.s), spec) ** (ell + 1)


def kernel_norm(
    kernel: ForceKernel,
    mu: float,
    spec: WeightSpec,
    traj: KernelTrajectory,
    xi: np.ndarray | None = None,
) -> NormReport:
    """||o^{ell+1} (K~_mu F) w~_mu|| with sup over the output and L1 over the inputs.

    K~_mu smooths the output with K_mu and every input with K_mu^2. Degrees 0
    and 1 are computed exactly. Higher degrees use the edge-factorised
    majorant: every propagator, smoothing kernel and leg carries its own pair
    weight, whose product dominates the tree weight.

    Args:
        kernel: Component at scale ``kernel.sigma``
        mu: Scale of the smoothing and weights
        spec: Weight parameters
        traj: Trajectory supplying the lattice, the mass and the line symbols
        xi: Noise realisation; None keeps the deterministic part

    Returns:
        NormReport of kind ``kernel`` or ``kernel_majorant``
    """
    lat, mass = traj.lattice, traj.mass
    ell, k = kernel.grade.ell, kernel.grade.k
    ops = {name: sym for name, sym in ops_at(traj, kernel.sigma).items() if name != "J"}
    k_sym = build_K(mu, mass, lat).symbol
    omega = spec.flat_b - ell * spec.kappa0
    params = {"ell": float(ell), "k": float(k), "omega": omega}
    if kernel.poly.is_zero():
        return NormReport(kind="kernel", value=0.0, sigma=kernel.sigma, mu=mu, params=params)

    if k == 0:
        field = apply_symbol(k_sym, evaluate(kernel.poly, np.zeros(lat.spacetime_shape), xi, ops))
        value = float(np.max(_output_weight(lat, ell, spec) * np.abs(field)))
        return NormReport(kind="kernel", value=value, sigma=kernel.sigma, mu=mu, params=params)

    weight = edge_weight(lat, mu, omega, spec.s)
    if k == 1:
        value = _linear_kernel_norm(kernel, k_sym, weight, ops, lat, ell, spec, xi)
        return NormReport(kind="kernel", value=value, sigma=kernel.sigma, mu=mu, params=params)
    value = _majorant(kernel, k_sym, weight, ops, lat, ell, spec, xi)
    return NormReport(kind="kernel_majorant", value=value, sigma=kernel.sigma, mu=mu, params=params)


def _smoothed_column(
    kernel: ForceKernel, k_sym: np.ndarray, ops: dict, impulse: np.ndarray, xi: np.ndarray | None
) -> np.ndarray:
    response = evaluate(kernel.poly, apply_symbol(k_sym**2, impulse), xi, ops)
    return apply_symbol(k_sym, response)


def _linear_kernel_norm(
    kernel: ForceKernel,
    k_sym: np.ndarray,
    weight: np.ndarray,
    ops: dict,
    lat: LatticeSpec,
    ell: int,
    spec: WeightSpec,
    xi: np.ndarray | None,
) -> float:
    shape = lat.spacetime_shape
    impulse = np.zeros(shape)
    if xi is None:
        # translation invariant: one input site gives every row
        impulse.flat[0] = 1.0 / _measure(lat)
        column = _smoothed_column(kernel, k_sym, ops, impulse, None)
        return _weighted_mass(column, weight, lat)

    size = int(np.prod(shape))
    if size * size > kernel_cap():
        raise KernelCapExceeded(f"{size * size} kernel entries exceeds cap {kernel_cap()}")
    rows = np.zeros(shape)
    for flat in range(size):
        impulse.flat[flat] = 1.0 / _measure(lat)
        column = _smoothed_column(kernel, k_sym, ops, impulse, xi)
        impulse.flat[flat] = 0.0
        site = np.unravel_index(flat, shape)
        # weight at z is that of the displacement z1 - z
        axes = tuple(range(len(shape)))
        shifted = np.roll(np.flip(weight, axis=axes), shift=[i + 1 for i in site], axis=axes)
        rows += np.abs(column) * shifted * _measure(lat)
    return float(np.max(_output_weight(lat, ell, spec) * rows))


def _majorant(
    kernel: ForceKernel,
    k_sym: np.ndarray,
    weight: np.ndarray,
    ops: dict,
    lat: LatticeSpec,
    ell: int,
    spec: WeightSpec,
    xi: np.ndarray | None,
) -> float:
    pos_ops = {name: _positive_symbol(sym, weight, lat) for name, sym in ops.items()}
    out_mass = _weighted_mass(kernel_from_symbol(k_sym, lat).values, weight, lat)
    in_mass = _weighted_mass(kernel_from_symbol(k_sym**2, lat).values, weight, lat)
    ones = np.ones(lat.spacetime_shape)
    noise = None if xi is None else np.abs(xi)
    total = np.zeros(lat.spacetime_shape)
    for mono, coef in kernel.poly.terms.items():
        if noise is None and mono.noise_count:
            continue
        piece = evaluate(Poly.of(mono), ones, noise, pos_ops)
        total = total + abs(coef) * np.abs(piece) * in_mass**mono.degree
    return float(np.max(_output_weight(lat, ell, spec) * total)) * out_mass


def cumulant_norm(
    block: CumulantKernel, mu: float, spec: WeightSpec, lat: LatticeSpec, mass: MassFracParams
) -> NormReport:
    """||(K_mu^a F^a) w_mu^a||: sup over the first output, total variation over the rest.

    Covers the blocks the cumulant flow carries: single-output blocks with one
    input (exact), local single-output blocks with several legs (leg-factorised
    majorant), and two-output blocks whose first argument has local legs.

    Raises:
        DomainError: any other multi-index
    """
    index = block.index
    measure = _measure(lat)
    k_sym = build_K(mu, mass, lat).symbol
    weight = edge_weight(lat, mu, spec.flat_b, spec.s)
    params = {"n": float(index.n), "K": float(index.K)}

    def leg_factor(legs: int) -> float:
        if legs == 0:
            return 1.0
        return _weighted_mass(kernel_from_symbol(k_sym, lat).values, weight, lat) ** legs

    first = index.grades[0]
    if index.n == 1 and first.k == 1:
        value = _weighted_mass(kernel_from_symbol(block.symbol * k_sym, lat).values, weight, lat)
    elif index.n == 1:
        constant = block.symbol.flat[0]
        if not np.allclose(block.symbol, constant):
            raise DomainError(f"non-local single-output block with {first.k} legs")
        value = abs(constant) * leg_factor(first.k)
    elif index.n == 2 and index.grades[1].k == 0:
        tv = float(np.sum(np.abs(kernel_from_symbol(block.symbol, lat).values))) * measure
        value = tv * leg_factor(first.k)
    else:
        raise DomainError(f"no norm for multi-index n={index.n}, K={index.K}")
    return NormReport(kind="cumulant", value=value, sigma=block.sigma, mu=mu, params=params)


# --- family norms -------------------------------------------------------------------------


def family_norm(entries: list[tuple[float, float, float, int]]) -> NormReport:
    """sup over entries (exponent, sigma, norm, n) of ([[sigma]]^exponent * norm)^{1/n}."""
    best = 0.0
    at = None
    for exponent, sigma, value, n in entries:
        scaled = ((1.0 - sigma) ** exponent * value) ** (1.0 / n)
        if scaled > best:
            best, at = scaled, sigma
    return NormReport(kind="family", value=best, sigma=at)


def kernel_family_norm(
    traj: KernelTrajectory,
    params: FlowParams,
    spec: WeightSpec,
    sigmas: list[float] | None = None,
    xi: np.ndarray | None = None,
) -> NormReport:
    """Force family norm: [[sigma]]^{-[a]} ||F_sigma^a||_sigma, with the noise component
    weighted by [[sigma]]^{d/2 + s + 2 kappa} instead."""
    noise_exponent = params.d / 2 + params.s + 2 * params.kappa
    entries = []
    for sigma in sigmas if sigmas is not None else [float(s) for s in traj.sigmas]:
        for key, kernel in kernels_at(traj, sigma).items():
            norm = kernel_norm(kernel, sigma, spec, traj, xi).value
            exponent = noise_exponent if key == (0, 0) else -kernel.grade.homogeneity(params)
            entries.append((exponent, sigma, norm, 1))
    report = family_norm(entries)
    logger.info("force family norm %.6g over %d entries", report.value, len(entries))
    return report


def cumulant_family_norm(
    blocks: list[CumulantKernel],
    params: FlowParams,
    spec: WeightSpec,
    lat: LatticeSpec,
    mass: MassFracParams,
) -> NormReport:
    entries = [
        (
            -b.index.homogeneity(params),
            b.sigma,
            cumulant_norm(b, b.sigma, spec, lat, mass).value,
            b.index.n,
        )
        for b in blocks
    ]
    return family_norm(entries)
