"""Discrete Taylor split V = LV + RV of translation-invariant two-point kernels.

The path from z to z + h first runs along the spatial axes in order 1..d
(a staircase of unit lattice steps) and then along time, so no mixed
space-time second differences appear. L keeps the zeroth moment and the
symmetrised first spatial moments; R collects

- ``time``: the time leg, psi(z + h) - psi(z + (0, h_x));
- ``spatial``: the second-order remainder of the staircase;
- ``symmetrisation``: |h_k|/2 * eps^2 d^{k+} d^{k-} from replacing the one-sided
  first differences by their average.
"""

import logging

import numpy as np

from models.errors import BoxOverflowError, DomainError
from models.flow import LocalKernel, TwoPointKernel
from models.lattice import LatticeSpec

logger = logging.getLogger(__name__)

BOX_EDGE_TOL = 1e-8
BOX_OVERFLOW_WARN = 1e-3


def _measure(lat: LatticeSpec) -> float:
    return lat.dt * lat.cell


def signed_offsets(n: int) -> np.ndarray:
    """Integer displacements 0, 1, ..., -1 in FFT order; the antipode is negative."""
    return np.fft.fftfreq(n, 1.0 / n).round().astype(int)


def _unit(lat: LatticeSpec, axis: int, sign: int) -> tuple[int, ...]:
    idx = [0] * lat.d
    idx[axis] = sign % lat.M
    return tuple(idx)


def kernel_from_symbol(symbol: np.ndarray, lat: LatticeSpec) -> TwoPointKernel:
    """Two-point kernel whose action on psi is the Fourier multiplier ``symbol``."""
    values = np.fft.ifftn(np.conj(symbol)).real / _measure(lat)
    return TwoPointKernel(lattice=lat, values=values)


def apply_two_point(V: TwoPointKernel, psi: np.ndarray) -> np.ndarray:
    """V(psi)(z) = sum_h V(h) psi(z + h) dt eps^d."""
    out = np.fft.ifftn(np.fft.fftn(psi) * np.conj(np.fft.fftn(V.values)))
    return out.real * _measure(V.lattice)


def _check(V: TwoPointKernel) -> None:
    if V.values.shape != V.lattice.spacetime_shape:
        raise DomainError(f"kernel shape {V.values.shape} != {V.lattice.spacetime_shape}")
    if not np.all(np.isfinite(V.values)):
        raise DomainError("kernel is not summable on the box")


def _spatial_projection(V: TwoPointKernel) -> np.ndarray:
    return V.values.sum(axis=0)


def _one_sided_masses(w: np.ndarray, lat: LatticeSpec) -> list[tuple[float, float]]:
    """Per axis, sum of |h_k| w(h) over h_k > 0 and over h_k < 0."""
    offsets = signed_offsets(lat.M)
    out = []
    for axis in range(lat.d):
        shape = [1] * lat.d
        shape[axis] = lat.M
        h = offsets.reshape(shape)
        pos = float(np.sum(np.where(h > 0, h * w, 0.0)))
        neg = float(np.sum(np.where(h < 0, -h * w, 0.0)))
        out.append((pos, neg))
    return out


def _warn_box_edge(w: np.ndarray, lat: LatticeSpec) -> None:
    total = float(np.sum(np.abs(w)))
    if total == 0.0:
        return
    for axis in range(lat.d):
        edge = float(np.sum(np.abs(np.take(w, lat.M // 2, axis=axis))))
        if edge > BOX_EDGE_TOL * total:
            logger.warning(
                "kernel mass %.3e on the antipodal shell of axis %d; "
                "first moments depend on the cut",
                edge / total, axis,
            )


def box_overflow(V: TwoPointKernel) -> float:
    """Fraction of sum |V| sitting on the antipodal shells of the window.

    The window is the truncation box of every stored kernel; mass on its
    outermost time slice or spatial face has wrapped around the torus.
    """
    _check(V)
    lat = V.lattice
    mags = np.abs(V.values)
    total = float(np.sum(mags))
    if total == 0.0:
        return 0.0
    shell = np.zeros(mags.shape, dtype=bool)
    shell[lat.Nt // 2] = True
    for axis in range(lat.d):
        face = [slice(None)] * mags.ndim
        face[1 + axis] = lat.M // 2
        shell[tuple(face)] = True
    return float(np.sum(mags[shell])) / total


def check_box_overflow(V: TwoPointKernel, label: str, tolerance: float | None = None) -> float:
    """Monitor one kernel against the window edge.

    Args:
        V: Kernel realised on the window
        label: Name used in the log and the error
        tolerance: Largest admissible overflow fraction; None only logs

    Returns:
        The overflow fraction

    Raises:
        BoxOverflowError: overflow above ``tolerance``
    """
    overflow = box_overflow(V)
    if tolerance is not None and overflow > tolerance:
        raise BoxOverflowError(
            f"{label}: {overflow:.3e} of the kernel mass is on the window edge "
            f"(tolerance {tolerance:g}); enlarge T or M"
        )
    if overflow > BOX_OVERFLOW_WARN:
        logger.warning("%s: kernel-box overflow %.3e", label, overflow)
    return overflow


def localize_L(V: TwoPointKernel, check_box: bool = True) -> LocalKernel:
    """Zeroth moment and symmetrised first spatial moments of V.

    Args:
        V: Two-point kernel on the window
        check_box: Warn when V carries mass on the antipodal shell

    Returns:
        LocalKernel with ``mass`` = sum V dt eps^d and ``moments[k]`` = sum (h_k eps) V dt eps^d

    Raises:
        DomainError: non-finite kernel values
    """
    _check(V)
    lat = V.lattice
    w = _spatial_projection(V)
    if check_box:
        _warn_box_edge(w, lat)
    measure = _measure(lat)
    moments = tuple((pos - neg) * lat.eps * measure for pos, neg in _one_sided_masses(w, lat))
    return LocalKernel(lattice=lat, mass=float(np.sum(w)) * measure, moments=moments)


def apply_local(L: LocalKernel, psi: np.ndarray) -> np.ndarray:
    lat = L.lattice
    out = L.mass * psi
    for axis, m in enumerate(L.moments):
        ax = 1 + axis
        out = out + m * (np.roll(psi, -1, axis=ax) - np.roll(psi, 1, axis=ax)) / (2 * lat.eps)
    return out


def remainder_R(V: TwoPointKernel) -> dict[str, TwoPointKernel]:
    """The three pieces of V - LV, each as a two-point kernel."""
    _check(V)
    lat = V.lattice
    w = _spatial_projection(V)

    time_leg = V.values.copy()
    time_leg[0] -= w

    spatial = np.zeros(lat.spacetime_shape)
    symmetrisation = np.zeros(lat.spacetime_shape)
    origin = (0,) * lat.d
    spatial[0] += w
    spatial[0][origin] -= float(np.sum(w))
    for axis, (pos, neg) in enumerate(_one_sided_masses(w, lat)):
        fwd, bwd = _unit(lat, axis, 1), _unit(lat, axis, -1)
        spatial[0][fwd] -= pos
        spatial[0][bwd] -= neg
        spatial[0][origin] += pos + neg
        half = 0.5 * (pos + neg)
        symmetrisation[0][fwd] += half
        symmetrisation[0][bwd] += half
        symmetrisation[0][origin] -= 2 * half

    return {
        "time": TwoPointKernel(lattice=lat, values=time_leg),
        "spatial": TwoPointKernel(lattice=lat, values=spatial),
        "symmetrisation": TwoPointKernel(lattice=lat, values=symmetrisation),
    }


def remainder_kernel(V: TwoPointKernel) -> TwoPointKernel:
    parts = remainder_R(V)
    return TwoPointKernel(lattice=V.lattice, values=sum(p.values for p in parts.values()))
