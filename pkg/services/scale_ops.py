"""Scale-decomposition multipliers: cutoffs, J/Jdot/Gdot, smoothing K, LP blocks.

Symbols live on the space-time dual lattice in FFT order with shape
(Nt, *space), except Littlewood-Paley blocks which act on space only.
"""

import logging
import os
import threading
from collections import OrderedDict
from collections.abc import Callable

import numpy as np

from models.errors import DegenerateKernelError, DomainError, KernelCapExceeded
from models.lattice import LatticeSpec, MassFracParams
from models.scales import MultiplierOp, ScaleIndex
from services.lattice_spectral import q_grid, temporal_frequencies

logger = logging.getLogger(__name__)

DEFAULT_KERNEL_CAP = 1 << 24
DEFAULT_EXPONENT_GRID = np.arange(0.0, 8.0 + 1e-9, 0.01)
SYMBOL_CACHE_SIZE = 64

_symbol_cache: OrderedDict[tuple, np.ndarray] = OrderedDict()
_cache_lock = threading.Lock()


def _cached(key: tuple, build: Callable[[], np.ndarray]) -> np.ndarray:
    with _cache_lock:
        hit = _symbol_cache.get(key)
        if hit is not None:
            _symbol_cache.move_to_end(key)
            return hit
    symbol = build()
    symbol.setflags(write=False)
    with _cache_lock:
        symbol = _symbol_cache.setdefault(key, symbol)
        while len(_symbol_cache) > SYMBOL_CACHE_SIZE:
            _symbol_cache.popitem(last=False)
        return symbol


def clear_symbol_cache() -> None:
    with _cache_lock:
        _symbol_cache.clear()


def _glue(x: np.ndarray) -> np.ndarray:
    return np.exp(-1.0 / x)


def bump(eta) -> np.ndarray:
    """C-infinity cutoff: 1 on |eta| <= 1, 0 on |eta| >= 2, smooth monotone glue between."""
    x = np.abs(np.asarray(eta, dtype=float))
    out = np.where(x <= 1.0, 1.0, 0.0)
    mid = (x > 1.0) & (x < 2.0)
    a, b = _glue(2.0 - x[mid]), _glue(x[mid] - 1.0)
    out[mid] = a / (a + b)
    return out


def bump_derivative(eta) -> np.ndarray:
    """Derivative of ``bump`` in eta."""
    eta = np.asarray(eta, dtype=float)
    x = np.abs(eta)
    out = np.zeros_like(x)
    mid = (x > 1.0) & (x < 2.0)
    u, v = 2.0 - x[mid], x[mid] - 1.0
    a, b = _glue(u), _glue(v)
    da, db = -a / u**2, b / v**2
    out[mid] = (da * b - a * db) / (a + b) ** 2
    return out * np.sign(eta)


def scale_factor(sigma: float, ell: int = 0) -> float:
    """2^{-ell} [[sigma]] / sigma."""
    return float(np.ldexp((1.0 - sigma) / sigma, -ell))


def j_profile(eta, sigma: float, ell: int = 0) -> np.ndarray:
    """j_{sigma,ell}(eta) = j(2^{-ell} sigma^{-1} [[sigma]] eta)."""
    return bump(scale_factor(sigma, ell) * np.asarray(eta, dtype=float))


def time_eta(lat: LatticeSpec, s: float) -> np.ndarray:
    """|omega|^{1/2s} over the temporal dual grid."""
    return np.abs(temporal_frequencies(lat)) ** (1.0 / (2.0 * s))


def _outer(time_part: np.ndarray, space_part: np.ndarray) -> np.ndarray:
    return time_part.reshape((-1,) + (1,) * space_part.ndim) * space_part[None]


def linear_symbol(p: MassFracParams, lat: LatticeSpec) -> np.ndarray:
    """i omega + m^2 + q^{2s}, the symbol of L_eps."""
    omega = temporal_frequencies(lat)
    return _outer(1j * omega, np.ones(lat.space_shape)) + (p.m2 + q_grid(lat) ** (2 * p.s))[None]


def build_J(sigma: float, ell: int, lat: LatticeSpec, p: MassFracParams) -> MultiplierOp:
    """J_{sigma,ell} = j_{sigma,ell}(|omega|^{1/2s}) j_{sigma,ell}(q(k)); ell = 0 is J_sigma."""
    ScaleIndex(sigma=sigma)

    def build() -> np.ndarray:
        return _outer(j_profile(time_eta(lat, p.s), sigma, ell), j_profile(q_grid(lat), sigma, ell))

    symbol = _cached(("J", sigma, ell, lat, p.s), build)
    return MultiplierOp(kind="J", lattice=lat, symbol=symbol, s=p.s, sigma=sigma, ell=ell)


def build_Jdot(sigma: float, lat: LatticeSpec, p: MassFracParams) -> MultiplierOp:
    """Analytic sigma-derivative of the J_sigma symbol."""
    ScaleIndex(sigma=sigma)

    def build() -> np.ndarray:
        c = scale_factor(sigma)
        dc = -1.0 / sigma**2
        tau, q = time_eta(lat, p.s), q_grid(lat)
        jt, jq = bump(c * tau), bump(c * q)
        djt, djq = dc * tau * bump_derivative(c * tau), dc * q * bump_derivative(c * q)
        return _outer(djt, jq) + _outer(jt, djq)

    symbol = _cached(("Jdot", sigma, lat, p.s), build)
    return MultiplierOp(kind="Jdot", lattice=lat, symbol=symbol, s=p.s, sigma=sigma)


def build_G(p: MassFracParams, lat: LatticeSpec) -> MultiplierOp:
    """Full propagator (i omega + m^2 + q^{2s})^{-1} on the periodic window."""
    symbol = _cached(("G", lat, p), lambda: 1.0 / linear_symbol(p, lat))
    return MultiplierOp(kind="G", lattice=lat, symbol=symbol, s=p.s)


def build_Gdot(sigma: float, p: MassFracParams, lat: LatticeSpec) -> MultiplierOp:
    """Gdot_sigma = L^{-1} Jdot_sigma."""
    jdot = build_Jdot(sigma, lat, p).symbol
    symbol = _cached(("Gdot", sigma, lat, p), lambda: jdot / linear_symbol(p, lat))
    return MultiplierOp(kind="Gdot", lattice=lat, symbol=symbol, s=p.s, sigma=sigma)


def build_G_small(sigma: float, p: MassFracParams, lat: LatticeSpec) -> MultiplierOp:
    """Small-scale propagator G_{sigma,1} = (1 - J_sigma) L^{-1} = int_sigma^1 Gdot."""
    j_sym = build_J(sigma, 0, lat, p).symbol
    symbol = _cached(("Gsmall", sigma, lat, p), lambda: (1.0 - j_sym) / linear_symbol(p, lat))
    return MultiplierOp(kind="Gsmall", lattice=lat, symbol=symbol, s=p.s, sigma=sigma)


def _k_symbol(sigma: float, p: MassFracParams, lat: LatticeSpec) -> np.ndarray:
    b = 1.0 - sigma
    omega = temporal_frequencies(lat)
    time_part = 1.0 / (1.0 + b ** (2 * p.s) * 1j * omega)
    space_part = (1.0 + b**2 * q_grid(lat) ** 2) ** -2
    return _outer(time_part, space_part)


def build_K(sigma: float, p: MassFracParams, lat: LatticeSpec) -> MultiplierOp:
    """Smoothing K_sigma = (1 + [[sigma]]^{2s} d_t)^{-1} (1 + [[sigma]]^2 (-Delta))^{-2}."""
    symbol = _cached(("K", sigma, lat, p.s), lambda: _k_symbol(sigma, p, lat))
    return MultiplierOp(kind="K", lattice=lat, symbol=symbol, s=p.s, sigma=sigma)


def build_L(sigma: float, p: MassFracParams, lat: LatticeSpec) -> MultiplierOp:
    """L_sigma, the inverse of K_sigma."""
    symbol = _cached(("L", sigma, lat, p.s), lambda: 1.0 / _k_symbol(sigma, p, lat))
    return MultiplierOp(kind="L", lattice=lat, symbol=symbol, s=p.s, sigma=sigma)


def build_Keta_sigma(eta: float, sigma: float, p: MassFracParams, lat: LatticeSpec) -> MultiplierOp:
    """K_{eta,sigma} = L_sigma K_eta for eta <= sigma."""
    if eta > sigma:
        raise DomainError(f"K_(eta,sigma) needs eta <= sigma, got eta={eta}, sigma={sigma}")
    symbol = build_L(sigma, p, lat).symbol * build_K(eta, p, lat).symbol
    return MultiplierOp(kind="Keta", lattice=lat, symbol=symbol, s=p.s, sigma=sigma, eta=eta)


def _lp_envelope(i: int, q: np.ndarray) -> np.ndarray:
    """psi_i(q) = j(2^{1-i} q): plateau q <= 2^{i-1}, support q < 2^i."""
    return bump(np.ldexp(q, 1 - i))


def lp_block(i: int, lat: LatticeSpec) -> MultiplierOp:
    """Spatial Littlewood-Paley block; Delta_{-1} is the low-frequency piece."""
    if i < -1:
        raise DomainError(f"LP index must be >= -1, got {i}")

    def build() -> np.ndarray:
        q = q_grid(lat)
        if i == -1:
            return _lp_envelope(-1, q)
        return _lp_envelope(i, q) - _lp_envelope(i - 1, q)

    symbol = _cached(("LP", i, lat), build)
    return MultiplierOp(kind="LP", lattice=lat, symbol=symbol, domain="space", index=i)


def lp_levels(lat: LatticeSpec) -> list[int]:
    """Block indices -1..N whose symbols sum to one on every lattice frequency."""
    q_max = float(np.max(q_grid(lat)))
    top = -1
    while np.ldexp(1.0, top - 1) < q_max:
        top += 1
    return list(range(-1, top + 1))


def mu_point(i: int) -> float:
    """Dyadic scale mu_i with [[mu_i]] = 2^{-i-2}."""
    return 1.0 - np.ldexp(1.0, -i - 2)


def sigma_saturation(lat: LatticeSpec, s: float) -> float:
    """Smallest sigma for which J_sigma is identically one on the lattice."""
    reach = max(float(np.max(q_grid(lat))), float(np.max(time_eta(lat, s))))
    # [[sigma]]/sigma <= 1/reach
    return reach / (reach + 1.0)


def sigma_grid(lat: LatticeSpec, s: float, per_octave: int = 8) -> np.ndarray:
    """Ascending sigma grid with [[sigma]] = 2^{-2-j/r}, j = -r, -r+1, ...

    Starts at sigma = 1/2 and stops at the first point where J_sigma == 1 on the lattice.
    """
    target = 1.0 - sigma_saturation(lat, s)
    points = []
    j = -per_octave
    while True:
        bracket = 2.0 ** (-2.0 - j / per_octave)
        points.append(1.0 - bracket)
        if bracket <= target:
            break
        j += 1
    return np.array(points)


def kernel_cap() -> int:
    return int(os.getenv("FRACPHI4_KERNEL_CAP", DEFAULT_KERNEL_CAP))


def kernel_realize(op: MultiplierOp) -> np.ndarray:
    """Real-space kernel of a multiplier, normalised so sum * cell volume = symbol at 0."""
    if op.symbol.size > kernel_cap():
        raise KernelCapExceeded(f"{op.symbol.size} entries exceeds cap {kernel_cap()}")
    lat = op.lattice
    measure = lat.cell * (lat.dt if op.domain == "spacetime" else 1.0)
    raw = np.fft.ifftn(op.symbol)
    scale = max(float(np.max(np.abs(raw))), 1e-300)
    if float(np.max(np.abs(raw.imag))) > 1e-8 * scale:
        logger.warning("kernel of %s has imaginary part %.3e", op.kind, np.max(np.abs(raw.imag)))
    return raw.real / measure


def decay_fit(
    values: np.ndarray,
    radii: np.ndarray,
    scale: float = 1.0,
    exponent_grid: np.ndarray | None = None,
) -> tuple[float, float]:
    """Fit |K(z)| ~ C (1 + |z|/scale)^{-p} by least squares in log space over a grid of p.

    Args:
        values: Kernel samples
        radii: Matching distances (parabolic or Euclidean)
        scale: Length scale of the plateau
        exponent_grid: Candidate exponents p

    Returns:
        Tuple (C, p) minimising the squared log residual
    """
    grid = DEFAULT_EXPONENT_GRID if exponent_grid is None else np.asarray(exponent_grid)
    if grid.size == 0:
        raise DomainError("exponent grid is empty")
    mags = np.abs(np.ravel(values))
    r = np.ravel(radii)
    peak = float(np.max(mags, initial=0.0))
    keep = (mags > 1e-12 * peak) & np.isfinite(r)
    if peak == 0.0 or np.count_nonzero(keep) < 2 or np.ptp(r[keep]) == 0:
        raise DegenerateKernelError("kernel has fewer than two usable samples")
    y = np.log(mags[keep])
    x = np.log1p(r[keep] / scale)
    log_c = np.mean(y[None, :] + grid[:, None] * x[None, :], axis=1)
    resid = np.sum((y[None, :] - log_c[:, None] + grid[:, None] * x[None, :]) ** 2, axis=1)
    best = int(np.argmin(resid))
    return float(np.exp(log_c[best])), float(grid[best])
