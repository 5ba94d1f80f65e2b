from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PydField

from models.diagrams import Poly
from models.lattice import LatticeSpec, MassFracParams

Relevance = Literal["relevant", "marginal", "irrelevant"]


class GradeIndex(BaseModel):
    """Perturbative order ell and polynomial degree k of a force component."""

    model_config = ConfigDict(frozen=True)

    ell: int = PydField(ge=0)
    k: int = PydField(ge=0)

    def homogeneity(self, params: "FlowParams") -> float:
        return -params.alpha + params.delta * self.ell + params.beta * self.k


class MultiIndex(BaseModel):
    """Tuple of grades indexing a joint cumulant."""

    model_config = ConfigDict(frozen=True)

    grades: tuple[GradeIndex, ...]

    @property
    def n(self) -> int:
        return len(self.grades)

    @property
    def L(self) -> int:
        return sum(g.ell for g in self.grades)

    @property
    def K(self) -> int:
        return sum(g.k for g in self.grades)

    @property
    def parity_zero(self) -> bool:
        """Cumulants with n + K odd vanish by the psi -> -psi, xi -> -xi symmetry."""
        return (self.n + self.K) % 2 == 1

    def homogeneity(self, params: "FlowParams") -> float:
        return (
            -params.rho_hom
            + params.theta * self.n
            + params.delta * self.L
            + params.beta * self.K
        )


class FlowParams(BaseModel):
    """Resolved exponent vector with the constraint tables it satisfies."""

    s: float
    d: int
    delta_star: float
    delta: float
    kappa: float
    beta: float
    theta: float
    rho_hom: float
    alpha: float
    zeta_exp: float
    gamma: float
    kappa0: float
    flat_b: float
    kappa_bar: float
    a: int
    v: float
    ell_bar: int
    k_bar: int
    ell_hat: int
    ell_bar_post: int
    k_bar_post: int
    scaling_table: dict[str, float] = {}
    table_fix: dict[str, float] = {}


class GradeClass(BaseModel):
    """A grade together with its homogeneity and relevance class."""

    grade: GradeIndex
    homogeneity: float
    relevance: Relevance


class ForceKernel(BaseModel):
    """Component F^[ell],(k) of the effective force as a symbolic polynomial.

    Lines named "G" stand for the small-scale propagator at the kernel's
    scale, so one symbolic form serves every sigma.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    grade: GradeIndex
    poly: Poly
    sigma: float = 1.0
    local: bool = False  # contains no lines
    noise_tag: bool = False  # the bare noise component F^[0],(0)


class CumulantKernel(BaseModel):
    """Fourier symbol of a translation-invariant cumulant block."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    index: MultiIndex
    symbol: np.ndarray
    sigma: float

    @property
    def parity_zero(self) -> bool:
        return self.index.parity_zero


class KernelTrajectory(BaseModel):
    """Solved force components with the small-scale propagator at each checkpoint."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lattice: LatticeSpec
    mass: MassFracParams
    lam: float
    r_bar: float
    counterterms: dict[int, float]
    ell_bar: int
    components: dict[tuple[int, int], Poly]
    sigmas: np.ndarray
    g_small: np.ndarray | None = None  # midpoint only: (len(sigmas), Nt, *space), complex
    integrator: Literal["exact", "midpoint"] = "exact"
    box_overflow: float = 0.0  # largest window-edge mass fraction of G_{sigma,1}

    def index_of(self, sigma: float) -> int:
        idx = int(np.argmin(np.abs(self.sigmas - sigma)))
        if abs(self.sigmas[idx] - sigma) > 1e-12:
            raise KeyError(f"sigma={sigma} is not a checkpoint")
        return idx


class CumulantTrajectory(BaseModel):
    """Cumulant flow output: zero-momentum means along the grid, full symbols at checkpoints."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lattice: LatticeSpec
    mass: MassFracParams
    lam: float
    r_bar: float
    ell_bar: int
    sigmas: np.ndarray
    counterterms: dict[int, float]
    local_means: dict[int, np.ndarray]  # ell -> zero-momentum value per sigma
    mean_symbols: dict[int, np.ndarray]  # ell -> symbol at sigma = 1/2
    line_symbol: np.ndarray  # kappa_2(F^[1],(2), xi) at sigma = 1/2
    parity_zero_blocks: dict[str, float]  # block label -> max |value| seen along the flow
    per_octave: int = 8
    components: int = 1
    box_overflow: dict[str, float] = {}  # block label -> window-edge mass fraction at 1/2


class RemainderFamily(BaseModel):
    """Remainder R_mu along the scale grid, with the residual of L phi_mu = J_mu(F_mu + R_mu)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    mus: list[float]
    remainders: dict[float, np.ndarray]
    residuals: dict[float, float]  # relative sup residual per mu
    steps: int


class TwoPointKernel(BaseModel):
    """Translation-invariant kernel V(z, z1) = V(z1 - z) on the space-time grid.

    ``values[t, x]`` is the kernel at displacement (t, x) taken modulo the window,
    so V(psi)(z) = sum_h V(h) psi(z + h) dt eps^d.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    lattice: LatticeSpec
    values: np.ndarray


class LocalKernel(BaseModel):
    """Local part c delta + sum_k m_k (d^{k+} + d^{k-}) delta / 2 of a two-point kernel."""

    lattice: LatticeSpec
    mass: float
    moments: tuple[float, ...]  # first spatial moments, one per axis
