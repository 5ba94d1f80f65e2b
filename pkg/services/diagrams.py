"""Evaluation, differentiation and Gaussian expectation of force polynomials."""

import logging

import numpy as np

from models.diagrams import ONE, PSI, XI, Line, Monomial, Poly
from models.errors import UnsupportedContraction
from models.lattice import LatticeSpec

logger = logging.getLogger(__name__)

OpSymbols = dict[str, np.ndarray]


def apply_symbol(symbol: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Space-time multiplier on an array of shape (Nt, *space); keeps complex inputs complex."""
    out = np.fft.ifftn(np.fft.fftn(values) * symbol)
    return out.real if np.isrealobj(values) else out


def evaluate(
    poly: Poly,
    psi: np.ndarray,
    xi: np.ndarray | None,
    ops: OpSymbols,
) -> np.ndarray:
    """Evaluate a polynomial pointwise on the space-time grid.

    Args:
        poly: Polynomial to evaluate
        psi: Input field, shape (Nt, *space); may be complex for complex-step derivatives
        xi: Noise realisation of the same shape, or None for the deterministic part
        ops: Symbols for every line operator name used in ``poly``

    Returns:
        Array of the same shape as ``psi``
    """
    cache: dict[Monomial, np.ndarray] = {}

    def value(mono: Monomial) -> np.ndarray | None:
        if mono in cache:
            return cache[mono]
        if xi is None and mono.noise_count:
            return None
        out = np.ones_like(psi)
        if mono.n_psi:
            out = out * psi**mono.n_psi
        if mono.n_xi:
            out = out * xi**mono.n_xi
        for line in mono.lines:
            inner = value(line.body)
            if inner is None:
                return None
            out = out * apply_symbol(ops[line.op], inner)
        cache[mono] = out
        return out

    total = np.zeros_like(psi)
    for mono, coef in poly.terms.items():
        v = value(mono)
        if v is not None:
            total = total + coef * v
    return total


def derivative(poly: Poly, direction: Poly) -> Poly:
    """Directional derivative D poly(psi)[direction], with direction itself a polynomial."""
    out = Poly()
    for mono, coef in poly.terms.items():
        out = out + _monomial_derivative(mono, direction) * coef
    return out


def _monomial_derivative(mono: Monomial, direction: Poly) -> Poly:
    out = Poly()
    if mono.n_psi:
        rest = Monomial(mono.n_psi - 1, mono.n_xi, mono.lines)
        out = out + Poly.of(rest, float(mono.n_psi)) * direction
    for i, line in enumerate(mono.lines):
        inner = _monomial_derivative(line.body, direction)
        if inner.is_zero():
            continue
        out = out + Poly.of(mono.without_line(i)) * inner.line(line.op)
    return out


def spacetime_volume(lat: LatticeSpec) -> float:
    return 2 * lat.T * lat.volume


def contraction(sym_a: np.ndarray, sym_b: np.ndarray, lat: LatticeSpec) -> float:
    """E[(A xi)(z)(B xi)(z)] for space-time white noise: sum_p Re(A conj B) / volume."""
    return float(np.sum((sym_a * np.conj(sym_b)).real) / spacetime_volume(lat))


def expectation(poly: Poly, ops: OpSymbols, lat: LatticeSpec) -> Poly:
    """Average over the noise, returning a noise-free polynomial.

    Supported: monomials without noise, with an odd noise count (zero), and
    with two noise legs attached at the root either bare or through one line
    each. Anything else raises UnsupportedContraction.
    """
    out = Poly()
    for mono, coef in poly.terms.items():
        count = mono.noise_count
        if count == 0:
            out = out + Poly.of(mono, coef)
            continue
        if count % 2 == 1:
            continue
        if count != 2:
            raise UnsupportedContraction(f"{count} noise legs in {mono}")
        value, rest = _pair_at_root(mono, ops, lat)
        out = out + Poly.of(rest, coef * value)
    return out


def _pair_at_root(mono: Monomial, ops: OpSymbols, lat: LatticeSpec) -> tuple[float, Monomial]:
    noise_lines = [i for i, line in enumerate(mono.lines) if line.body == XI]
    other_noise = sum(line.body.noise_count for line in mono.lines if line.body != XI)
    if other_noise:
        raise UnsupportedContraction(f"noise nested below the root in {mono}")
    identity = np.ones(lat.spacetime_shape)
    symbols = [identity] * mono.n_xi + [ops[mono.lines[i].op] for i in noise_lines]
    kept = tuple(line for i, line in enumerate(mono.lines) if i not in noise_lines)
    rest = Monomial(mono.n_psi, 0, kept)
    return contraction(symbols[0], symbols[1], lat), rest


def line_of(op: str, body: Monomial = XI) -> Monomial:
    return Monomial(lines=(Line(op, body),))


__all__ = [
    "ONE",
    "PSI",
    "XI",
    "apply_symbol",
    "contraction",
    "derivative",
    "evaluate",
    "expectation",
    "line_of",
    "spacetime_volume",
]
