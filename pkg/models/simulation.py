from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PydField, model_validator

from models.lattice import Field, LatticeSpec, MassFracParams

NOISE_NORMALIZATION = "var_per_site_step = dt/eps^d"


class NoiseSpec(BaseModel):
    """Counter-based white-noise stream: one (seed, stream_id) pair per chain."""

    model_config = ConfigDict(frozen=True)

    seed: int = PydField(ge=0, lt=2**64)
    stream_id: int = PydField(default=0, ge=0)
    components: int = PydField(default=1, ge=1)
    normalization: Literal["var_per_site_step = dt/eps^d"] = NOISE_NORMALIZATION


class SimConfig(BaseModel):
    """Langevin run: lattice, couplings, tilt and sampling schedule."""

    model_config = ConfigDict(frozen=True)

    lattice: LatticeSpec
    mass: MassFracParams
    lam: float = PydField(default=1.0, ge=0)
    r_eps: float = 0.0
    n: int = PydField(default=1, ge=1)
    theta_tilt: float = PydField(default=0.0, ge=0)
    theta_star: float = PydField(default=float("inf"), gt=0)
    tilt_A: float = PydField(default=2.0, gt=0)
    tilt_B: float = PydField(default=2.0, gt=0)
    dt: float | None = PydField(default=None, gt=0)  # Langevin step; defaults to lattice.dt
    burn_in: int = PydField(default=1000, ge=0)
    n_samples: int = PydField(default=1000, ge=1)
    sample_stride: int = PydField(default=10, ge=1)
    blowup_cap: float = PydField(default=1e6, gt=0)
    noise: bool = True

    @model_validator(mode="after")
    def _check(self) -> "SimConfig":
        if not np.isfinite(self.r_eps):
            raise ValueError("r_eps must be finite")
        if self.theta_tilt >= self.theta_star:
            raise ValueError(
                f"theta_tilt = {self.theta_tilt} must be below theta_star = {self.theta_star}"
            )
        return self

    @property
    def step(self) -> float:
        return self.dt if self.dt is not None else self.lattice.dt


class SampleStream(BaseModel):
    """Decorrelated time-slice snapshots of one chain with per-sample observables.

    ``values`` has shape (n_samples, n, *space).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lattice: LatticeSpec
    values: np.ndarray
    observables: dict[str, np.ndarray] = {}
    seed: int
    stream_id: int = 0
    normalization: str = NOISE_NORMALIZATION

    @model_validator(mode="after")
    def _check(self) -> "SampleStream":
        shape = self.values.shape
        if self.values.ndim != self.lattice.d + 2 or shape[2:] != self.lattice.space_shape:
            raise ValueError(f"sample shape {shape} does not match the lattice")
        for name, series in self.observables.items():
            if len(series) != self.n_samples:
                raise ValueError(
                    f"observable {name!r} has {len(series)} entries, expected {self.n_samples}"
                )
        return self

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def fields(self) -> list[Field]:
        return [Field(lattice=self.lattice, values=v) for v in self.values]
