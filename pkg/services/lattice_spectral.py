"""Lattice geometry and FFT-backed spectral calculus.

All multipliers are built from ``symbol_q`` so the lattice symbol has one
source of truth. Spatial axes are always the trailing ``d`` axes of a value
array; for space-time fields the time axis sits right before them.
"""

import logging
from typing import Literal

import numpy as np
from scipy.integrate import simpson
from scipy.special import gamma as gamma_fn

from models.errors import DomainError
from models.lattice import Field, LatticeSpec, MassFracParams, SpectralField

logger = logging.getLogger(__name__)

ConvexPhi = Literal["square", "abs", "relu"]

HEAT_QUAD_NODES = 4001
HEAT_SERIES_TERMS = 12
HEAT_TAIL_LOG = 27.7  # e^{-27.7} < 1e-12


def spatial_axes(f_ndim: int, d: int) -> tuple[int, ...]:
    return tuple(range(f_ndim - d, f_ndim))


def fft_axes(field_kind: str, f_ndim: int, d: int) -> tuple[int, ...]:
    """Axes transformed by forward/inverse: space, plus time for space-time fields."""
    n_axes = d + (1 if field_kind == "spacetime" else 0)
    return tuple(range(f_ndim - n_axes, f_ndim))


def spatial_frequencies(lat: LatticeSpec) -> list[np.ndarray]:
    """Per-axis dual frequencies in FFT order, inside (-pi/eps, pi/eps]."""
    k = 2 * np.pi * np.fft.fftfreq(lat.M, d=lat.eps)
    return [k] * lat.d


def temporal_frequencies(lat: LatticeSpec) -> np.ndarray:
    return 2 * np.pi * np.fft.fftfreq(lat.Nt, d=lat.dt)


def symbol_q(xi, eps: float, continuum: bool = False) -> np.ndarray:
    """Lattice symbol of the square root of the negative discrete Laplacian.

    Args:
        xi: Frequency vectors with the spatial components on the last axis, or a
            scalar / 1-D array of frequencies for d = 1
        eps: Lattice spacing; eps = 0 returns the continuum symbol |xi|
        continuum: Force the continuum symbol regardless of eps

    Returns:
        q(xi) = (sum_i (sin(eps xi_i)/eps)^2)^(1/2); a float for scalar input
    """
    xi = np.asarray(xi, dtype=float)
    scalar = xi.ndim == 0
    if xi.ndim <= 1:
        xi = np.atleast_1d(xi)[:, None]
    if eps == 0 or continuum:
        q = np.sqrt(np.sum(xi**2, axis=-1))
    else:
        q = np.sqrt(np.sum((np.sin(eps * xi) / eps) ** 2, axis=-1))
    return float(q[0]) if scalar else q


def q_grid(lat: LatticeSpec) -> np.ndarray:
    """Symbol q over the spatial dual lattice, shape (M,)*d."""
    mesh = np.meshgrid(*spatial_frequencies(lat), indexing="ij")
    xi = np.stack(mesh, axis=-1)
    return symbol_q(xi, lat.eps, continuum=lat.continuum_symbol).reshape(lat.space_shape)


def frac_symbol(p: MassFracParams, lat: LatticeSpec) -> np.ndarray:
    """q^{2s} over the spatial dual lattice."""
    return q_grid(lat) ** (2 * p.s)


def forward(f: Field) -> SpectralField:
    axes = fft_axes(f.kind, f.values.ndim, f.lattice.d)
    return SpectralField(lattice=f.lattice, coeffs=np.fft.fftn(f.values, axes=axes), kind=f.kind)


def inverse(sf: SpectralField) -> Field:
    axes = fft_axes(sf.kind, sf.coeffs.ndim, sf.lattice.d)
    values = np.fft.ifftn(sf.coeffs, axes=axes).real
    return Field(lattice=sf.lattice, values=values, kind=sf.kind)


def apply_spatial_symbol(values: np.ndarray, symbol: np.ndarray, d: int) -> np.ndarray:
    """Multiply the spatial Fourier transform of ``values`` by a real even symbol."""
    axes = spatial_axes(values.ndim, d)
    return np.fft.ifftn(np.fft.fftn(values, axes=axes) * symbol, axes=axes).real


def apply_spacetime_symbol(values: np.ndarray, symbol: np.ndarray, d: int) -> np.ndarray:
    """Multiply the space-time Fourier transform by ``symbol`` of shape (Nt, *space)."""
    axes = tuple(range(values.ndim - d - 1, values.ndim))
    return np.fft.ifftn(np.fft.fftn(values, axes=axes) * symbol, axes=axes).real


def apply_frac_laplacian(f: Field, p: MassFracParams) -> Field:
    """Apply (-Delta_eps)^s as the spectral multiplier q^{2s}."""
    return f.with_values(apply_spatial_symbol(f.values, frac_symbol(p, f.lattice), f.lattice.d))


def heat_semigroup(f: Field, t: float, p: MassFracParams) -> Field:
    """Apply exp(-t(m^2 + (-Delta)^s))."""
    if t < 0:
        raise DomainError(f"heat semigroup needs t >= 0, got {t}")
    symbol = np.exp(-t * (p.m2 + frac_symbol(p, f.lattice)))
    return f.with_values(apply_spatial_symbol(f.values, symbol, f.lattice.d))


def heat_quadrature_multiplier(lam: np.ndarray, s: float, eps: float) -> np.ndarray:
    """C_s * int_0^inf (1 - e^{-theta lam}) theta^{-1-s} d theta per eigenvalue lam = q^2.

    The integral splits into a power series on [0, theta_min], Simpson in
    log theta on [theta_min, theta_max] and the closed-form tail beyond.
    """
    if not 0 < s < 1:
        raise DomainError(f"heat-kernel representation needs 0 < s < 1, got {s}")
    lam = np.asarray(lam, dtype=float)
    uniq, inverse_idx = np.unique(lam, return_inverse=True)
    positive = uniq[uniq > 0]
    out = np.zeros_like(uniq)
    if positive.size == 0:
        return out[inverse_idx].reshape(lam.shape)

    theta_min = (eps / 8) ** 2
    theta_max = max(HEAT_TAIL_LOG / positive.min(), 10 * theta_min)

    n = np.arange(1, HEAT_SERIES_TERMS + 1)
    coeff = (-1.0) ** (n + 1) * theta_min ** (n - s) / (gamma_fn(n + 1) * (n - s))
    head = np.sum(coeff[None, :] * positive[:, None] ** n[None, :], axis=1)

    u = np.linspace(np.log(theta_min), np.log(theta_max), HEAT_QUAD_NODES)
    integrand = -np.expm1(-positive[:, None] * np.exp(u)[None, :]) * np.exp(-s * u)[None, :]
    middle = simpson(integrand, x=u, axis=1)

    tail = theta_max ** (-s) / s
    out[uniq > 0] = (head + middle + tail) * s / gamma_fn(1 - s)
    return out[inverse_idx].reshape(lam.shape)


def frac_laplacian_heat_quadrature(f: Field, p: MassFracParams) -> Field:
    """(-Delta)^s f via the heat-kernel representation, as an independent oracle."""
    lam = q_grid(f.lattice) ** 2
    symbol = heat_quadrature_multiplier(lam, p.s, f.lattice.eps)
    return f.with_values(apply_spatial_symbol(f.values, symbol, f.lattice.d))


def levy_kernel(p: MassFracParams, lat: LatticeSpec) -> np.ndarray:
    """Jump kernel K_s(x) on the spatial torus with K_s(0) set to 0.

    With the lattice symbol, q has period pi/eps in every direction, so K_s
    vanishes off the sublattice 2 eps Z^d and is positive on it.
    """
    if not 0 < p.s < 1:
        raise DomainError("the jump-kernel form is only used for 0 < s < 1")
    a = np.fft.ifftn(frac_symbol(p, lat)).real
    kernel = -a / lat.cell
    kernel[(0,) * lat.d] = 0.0
    return kernel


def _convolve(kernel: np.ndarray, values: np.ndarray, lat: LatticeSpec) -> np.ndarray:
    """eps^d sum_y kernel(x - y) values(y), circular over the torus."""
    axes = spatial_axes(values.ndim, lat.d)
    kernel_hat = np.fft.fftn(kernel)
    return np.fft.ifftn(np.fft.fftn(values, axes=axes) * kernel_hat, axes=axes).real * lat.cell


def levy_apply(f: Field, p: MassFracParams) -> Field:
    """(-Delta)^s f = eps^d sum_{y != x} K_s(x - y)(f(x) - f(y))."""
    kernel = levy_kernel(p, f.lattice)
    mass = kernel.sum() * f.lattice.cell
    return f.with_values(f.values * mass - _convolve(kernel, f.values, f.lattice))


def leibniz_defect(f: Field, g: Field, p: MassFracParams) -> Field:
    """Leibniz defect I_s(f, g) = f L g + g L f - L(f g) with L = (-Delta)^s.

    Equals eps^d sum_y K_s(x - y)(f(x) - f(y))(g(x) - g(y)), so I_s(f, f) >= 0.
    """
    if not 0 < p.s < 1:
        raise DomainError("Leibniz defect is defined for 0 < s < 1")
    lf = apply_frac_laplacian(f, p).values
    lg = apply_frac_laplacian(g, p).values
    lfg = apply_frac_laplacian(f.with_values(f.values * g.values), p).values
    return f.with_values(f.values * lg + g.values * lf - lfg)


def leibniz_defect_kernel(f: Field, g: Field, p: MassFracParams) -> Field:
    """Kernel-sum form of the Leibniz defect."""
    lat = f.lattice
    kernel = levy_kernel(p, lat)
    mass = kernel.sum() * lat.cell
    fv, gv = f.values, g.values
    values = (
        fv * gv * mass
        - fv * _convolve(kernel, gv, lat)
        - gv * _convolve(kernel, fv, lat)
        + _convolve(kernel, fv * gv, lat)
    )
    return f.with_values(values)


def carre_du_champ(f: Field, p: MassFracParams) -> Field:
    """D(f)(x) = (eps^d sum_y K_s(x - y)(f(y) - f(x))^2)^(1/2), per component."""
    lat = f.lattice
    kernel = levy_kernel(p, lat)
    mass = kernel.sum() * lat.cell
    fv = f.values
    squared = fv**2 * mass - 2 * fv * _convolve(kernel, fv, lat) + _convolve(kernel, fv**2, lat)
    return f.with_values(np.sqrt(np.clip(squared, 0.0, None)))


def convexity_gap(u: Field, phi_id: ConvexPhi, p: MassFracParams) -> Field:
    """Phi'(u)(-Delta)^s u - (-Delta)^s Phi(u) for a convex Phi."""
    match phi_id:
        case "square":
            phi, dphi = u.values**2, 2 * u.values
        case "abs":
            phi, dphi = np.abs(u.values), np.sign(u.values)
        case "relu":
            phi, dphi = np.maximum(u.values, 0.0), (u.values > 0).astype(float)
        case _:
            raise DomainError(f"unknown convex function {phi_id!r}")
    lu = apply_frac_laplacian(u, p).values
    lphi = apply_frac_laplacian(u.with_values(phi), p).values
    return u.with_values(dphi * lu - lphi)


def green_apply(f: Field, p: MassFracParams) -> Field:
    """Causal Green operator of d/dt + m^2 + (-Delta)^s on the window.

    Each spatial mode is integrated exactly for piecewise-constant forcing,
    u_{n+1} = e^{-A dt} u_n + (1 - e^{-A dt}) / A f_n, with zero data at -T.
    """
    if f.kind != "spacetime":
        raise DomainError("green_apply needs a space-time field")
    lat = f.lattice
    axes = spatial_axes(f.values.ndim, lat.d)
    rate = p.m2 + frac_symbol(p, lat)
    decay = np.exp(-rate * lat.dt)
    gain = -np.expm1(-rate * lat.dt) / rate
    f_hat = np.fft.fftn(f.values, axes=axes)
    u_hat = np.zeros_like(f_hat)
    for n in range(lat.Nt - 1):
        u_hat[:, n + 1] = decay * u_hat[:, n] + gain * f_hat[:, n]
    return f.with_values(np.fft.ifftn(u_hat, axes=axes).real)


def impulse(lat: LatticeSpec, t_index: int = 0, x_index: tuple[int, ...] | None = None) -> Field:
    """Discrete space-time delta with unit integral (height 1 / (dt eps^d))."""
    field = Field.zeros(lat, kind="spacetime")
    site = x_index if x_index is not None else (0,) * lat.d
    field.values[(0, t_index, *site)] = 1.0 / (lat.dt * lat.cell)
    return field


def torus_distance(lat: LatticeSpec) -> np.ndarray:
    """Euclidean distance to the origin on the torus, shape (M,)*d."""
    coords = [lat.eps * np.minimum(np.arange(lat.M), lat.M - np.arange(lat.M))] * lat.d
    mesh = np.meshgrid(*coords, indexing="ij")
    return np.sqrt(sum(c**2 for c in mesh))


def even_sublattice_mask(lat: LatticeSpec) -> np.ndarray:
    """True on sites of 2 eps Z^d, the support of lattice-symbol kernels."""
    idx = np.meshgrid(*[np.arange(lat.M)] * lat.d, indexing="ij")
    mask = np.ones(lat.space_shape, dtype=bool)
    for i in idx:
        mask &= i % 2 == 0
    return mask


def green_tail_constant(
    kernel: Field, p: MassFracParams, c: float = 0.5, t_floor: float | None = None
) -> float:
    """sup of G(t, x)(|x| + t^{1/2s})^{d+2s} / (t e^{-c m^2 t}) over t > t_floor.

    ``kernel`` is the response to ``impulse`` placed at time index 0.
    """
    lat = kernel.lattice
    t = lat.times - lat.times[0]
    t_floor = lat.dt if t_floor is None else t_floor
    r = torus_distance(lat)
    best = 0.0
    for n in np.flatnonzero(t > t_floor):
        scale = (r + t[n] ** (1 / (2 * p.s))) ** (lat.d + 2 * p.s)
        weight = scale / (t[n] * np.exp(-c * p.m2 * t[n]))
        best = max(best, float(np.max(np.abs(kernel.values[0, n]) * weight)))
    return best


def discrete_gradient_sup(f: Field) -> float:
    """max over sites and axes of |f(x + eps e_i) - f(x)| / eps."""
    lat = f.lattice
    axes = spatial_axes(f.values.ndim, lat.d)
    jumps = (np.max(np.abs(np.roll(f.values, -1, axis=ax) - f.values)) for ax in axes)
    return float(max(jumps)) / lat.eps
