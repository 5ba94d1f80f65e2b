from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PydField, model_validator

FieldKind = Literal["slice", "spacetime"]


class LatticeSpec(BaseModel):
    """Discretised window [-T, T) x torus of side eps*M in d dimensions."""

    model_config = ConfigDict(frozen=True)

    d: int = PydField(ge=1, le=3)
    eps: float = PydField(gt=0)
    M: int = PydField(ge=2)
    T: float = PydField(gt=0)
    dt: float = PydField(gt=0)
    Nt: int = PydField(ge=2)
    continuum_symbol: bool = False  # use q(k) = |k| instead of the lattice symbol

    @model_validator(mode="after")
    def _check_window(self) -> "LatticeSpec":
        if abs(self.Nt * self.dt - 2 * self.T) > 1e-9 * max(1.0, 2 * self.T):
            raise ValueError(f"Nt*dt = {self.Nt * self.dt} must equal 2T = {2 * self.T}")
        if self.M & (self.M - 1):
            raise ValueError(f"M = {self.M} must be a power of two")
        return self

    @classmethod
    def build(
        cls, d: int, eps: float, M: int, T: float = 1.0, Nt: int = 16, **kwargs
    ) -> "LatticeSpec":
        """Build a lattice deriving dt from the window and Nt."""
        return cls(d=d, eps=eps, M=M, T=T, dt=2 * T / Nt, Nt=Nt, **kwargs)

    @property
    def space_shape(self) -> tuple[int, ...]:
        return (self.M,) * self.d

    @property
    def spacetime_shape(self) -> tuple[int, ...]:
        return (self.Nt, *self.space_shape)

    @property
    def cell(self) -> float:
        """Spatial cell volume eps^d."""
        return self.eps**self.d

    @property
    def period(self) -> float:
        return self.eps * self.M

    @property
    def volume(self) -> float:
        return self.period**self.d

    @property
    def times(self) -> np.ndarray:
        return -self.T + self.dt * np.arange(self.Nt)

    def shape_for(self, kind: FieldKind, n: int = 1) -> tuple[int, ...]:
        return (n, *(self.space_shape if kind == "slice" else self.spacetime_shape))


class MassFracParams(BaseModel):
    """Fractional order s and mass squared of the linear operator."""

    model_config = ConfigDict(frozen=True)

    s: float = PydField(gt=0, le=1)
    m2: float = PydField(gt=0)


class Field(BaseModel):
    """Real field with n components on a time slice or on the full space-time grid.

    Values have shape (n, *space) for a slice and (n, Nt, *space) for space-time.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lattice: LatticeSpec
    values: np.ndarray
    kind: FieldKind = "slice"

    @model_validator(mode="after")
    def _check_values(self) -> "Field":
        values = np.asarray(self.values, dtype=float)
        expected = self.lattice.shape_for(self.kind, values.shape[0] if values.ndim else 1)
        if values.shape != expected:
            raise ValueError(f"values shape {values.shape} does not match {expected}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        self.values = values
        return self

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def with_values(self, values: np.ndarray) -> "Field":
        return Field(lattice=self.lattice, values=values, kind=self.kind)

    @classmethod
    def zeros(cls, lattice: LatticeSpec, kind: FieldKind = "slice", n: int = 1) -> "Field":
        return cls(lattice=lattice, values=np.zeros(lattice.shape_for(kind, n)), kind=kind)


class SpectralField(BaseModel):
    """Fourier coefficients of a Field, FFT-natural frequency order."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lattice: LatticeSpec
    coeffs: np.ndarray
    kind: FieldKind = "slice"

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    def is_hermitian(self, atol: float = 1e-10) -> bool:
        """Coefficients at -(omega, k) are conjugates of those at (omega, k)."""
        axes = tuple(range(1, self.coeffs.ndim))
        flipped = np.roll(np.flip(self.coeffs, axis=axes), shift=1, axis=axes)
        scale = max(1.0, float(np.max(np.abs(self.coeffs), initial=0.0)))
        return bool(np.allclose(flipped, np.conj(self.coeffs), atol=atol * scale))
