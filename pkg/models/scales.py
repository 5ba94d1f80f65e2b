from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PydField

from models.lattice import LatticeSpec

MultiplierKind = Literal["J", "Jdot", "G", "Gdot", "Gsmall", "K", "Keta", "L", "LP"]
SymbolDomain = Literal["space", "spacetime"]


class ScaleIndex(BaseModel):
    """Scale parameter sigma in [1/2, 1); bracket = 1 - sigma."""

    model_config = ConfigDict(frozen=True)

    sigma: float = PydField(ge=0.5, lt=1.0)

    @property
    def bracket(self) -> float:
        return 1.0 - self.sigma


class MultiplierOp(BaseModel):
    """Precomputed Fourier symbol of one scale operator on a lattice."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: MultiplierKind
    lattice: LatticeSpec
    symbol: np.ndarray
    domain: SymbolDomain = "spacetime"
    s: float = 1.0
    sigma: float | None = None
    eta: float | None = None
    ell: int | None = None
    index: int | None = None  # Littlewood-Paley block

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Apply to an array whose trailing axes match the symbol's domain."""
        n_axes = self.symbol.ndim
        axes = tuple(range(values.ndim - n_axes, values.ndim))
        out = np.fft.ifftn(np.fft.fftn(values, axes=axes) * self.symbol, axes=axes)
        return out.real

    def compose(self, other: "MultiplierOp") -> np.ndarray:
        """Symbol of the composition self * other, broadcasting space symbols over time."""
        a, b = self.symbol, other.symbol
        if a.ndim < b.ndim:
            a = a[None]
        elif b.ndim < a.ndim:
            b = b[None]
        return a * b
