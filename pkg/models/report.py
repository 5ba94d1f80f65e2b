from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field as PydField, model_validator

from models.lattice import LatticeSpec, MassFracParams
from models.simulation import NOISE_NORMALIZATION, SimConfig
from models.weights import NormReport

Command = Literal["simulate", "flow", "verify", "report"]
SnapshotKind = Literal["field", "kernel-trajectory", "cumulant-trajectory", "sample-stream"]


class CumulantEstimate(BaseModel):
    """Connected moment of one component pattern over a grid of separations."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    order: int = PydField(ge=1, le=4)
    components: tuple[int, ...]
    separations: list[int]
    values: list[float]
    errors: list[float]
    n_samples: int = PydField(ge=1)

    @model_validator(mode="after")
    def _check(self) -> "CumulantEstimate":
        if len(self.components) != self.order:
            raise ValueError(f"{len(self.components)} components for order {self.order}")
        if not len(self.values) == len(self.errors) == len(self.separations):
            raise ValueError("values, errors and separations must have equal length")
        if any(e < 0 or e != e for e in self.errors):
            raise ValueError("jackknife errors must be >= 0")
        return self

    def z_scores(self) -> list[float]:
        return [abs(v) / e if e > 0 else (0.0 if v == 0 else float("inf"))
                for v, e in zip(self.values, self.errors)]


class VerifierResult(BaseModel):
    """Outcome of one measured inequality left <= margin * right."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    identifier: str
    left: float
    right: float
    margin: float = PydField(default=1.0, gt=0)
    passed: bool | None = None
    note: str = ""

    @model_validator(mode="after")
    def _verdict(self) -> "VerifierResult":
        verdict = bool(self.left <= self.margin * self.right)
        if self.passed is None:
            self.passed = verdict
        elif self.passed != verdict:
            raise ValueError(f"passed={self.passed} contradicts left <= margin * right")
        return self

    @property
    def constant(self) -> float:
        """Measured constant left / right."""
        if self.right == 0:
            return 0.0 if self.left == 0 else float("inf")
        return self.left / self.right


# --- run configuration ----------------------------------------------------------------------


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RunSection(_Section):
    seed: int = PydField(default=0, ge=0, lt=2**64)
    out: str = "runs"
    chains: int = PydField(default=1, ge=1)


class LatticeSection(_Section):
    d: int = PydField(default=1, ge=1, le=3)
    eps: float = PydField(default=0.5, gt=0)
    M: int = PydField(default=16, ge=2)
    T: float = PydField(default=1.0, gt=0)
    Nt: int = PydField(default=16, ge=2)
    continuum_symbol: bool = False


class PhysicsSection(_Section):
    s: float = PydField(default=0.8, gt=0, le=1)
    m2: float = PydField(default=1.0, gt=0)
    lam: float = PydField(default=1.0, ge=0)
    kappa: float | None = None
    n: int = PydField(default=1, ge=1)


class FlowSection(_Section):
    ell_bar: int = PydField(default=1, ge=0)
    per_octave: int = PydField(default=8, ge=1)
    r_bar: float = 0.0
    integrator: Literal["exact", "midpoint"] = "exact"
    tolerance: float | None = PydField(default=None, gt=0)
    box_tolerance: float | None = PydField(default=None, gt=0, le=1)


class SimSection(_Section):
    dt: float | None = PydField(default=None, gt=0)
    burn_in: int = PydField(default=1000, ge=0)
    n_samples: int = PydField(default=1000, ge=1)
    sample_stride: int = PydField(default=10, ge=1)
    theta_tilt: float = PydField(default=0.0, ge=0)
    theta_star: float = PydField(default=float("inf"), gt=0)
    tilt_A: float = PydField(default=2.0, gt=0)
    tilt_B: float = PydField(default=2.0, gt=0)
    blowup_cap: float = PydField(default=1e6, gt=0)


class DiagnosticsSection(_Section):
    cumulant_order: int = PydField(default=4, ge=1, le=4)
    separations: list[int] = [0, 1, 2]
    besov_gamma: float = 0.5
    theta_grid: list[float] = []
    margin: float = PydField(default=10.0, gt=0)


class RunConfig(BaseModel):
    """Everything one run needs; sections mirror the config file."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    run: RunSection = RunSection()
    lattice: LatticeSection = LatticeSection()
    physics: PhysicsSection = PhysicsSection()
    flow: FlowSection = FlowSection()
    sim: SimSection = SimSection()
    diagnostics: DiagnosticsSection = DiagnosticsSection()

    def lattice_spec(self) -> LatticeSpec:
        lat = self.lattice
        return LatticeSpec.build(
            d=lat.d, eps=lat.eps, M=lat.M, T=lat.T, Nt=lat.Nt, continuum_symbol=lat.continuum_symbol
        )

    def mass(self) -> MassFracParams:
        return MassFracParams(s=self.physics.s, m2=self.physics.m2)

    def sim_config(self, r_eps: float, theta_tilt: float | None = None) -> SimConfig:
        sim = self.sim
        return SimConfig(
            lattice=self.lattice_spec(),
            mass=self.mass(),
            lam=self.physics.lam,
            r_eps=r_eps,
            n=self.physics.n,
            theta_tilt=sim.theta_tilt if theta_tilt is None else theta_tilt,
            theta_star=sim.theta_star,
            tilt_A=sim.tilt_A,
            tilt_B=sim.tilt_B,
            dt=sim.dt,
            burn_in=sim.burn_in,
            n_samples=sim.n_samples,
            sample_stride=sim.sample_stride,
            blowup_cap=sim.blowup_cap,
        )


class RunReport(BaseModel):
    """Results of one command, traceable to (config_hash, seed)."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    command: Command
    config_hash: str
    seed: int
    flow_params: dict[str, Any] | None = None
    counterterms: dict[int, float] = {}
    norms: list[NormReport] = []
    verifiers: list[VerifierResult] = []
    cumulants: list[CumulantEstimate] = []
    tables: dict[str, list[dict[str, bool | int | float | str]]] = {}
    timings: dict[str, float] = {}
    normalization: str = NOISE_NORMALIZATION
    artifacts: list[str] = []

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verifiers)


class SnapshotHeader(BaseModel):
    """JSON header of a snapshot file; arrays follow in ``arrays`` order."""

    kind: SnapshotKind
    version: int = 1
    lattice: LatticeSpec
    arrays: dict[str, list[int]]  # name -> shape, payload order
    dtype: Literal["<f8"] = "<f8"
    meta: dict[str, Any] = {}
