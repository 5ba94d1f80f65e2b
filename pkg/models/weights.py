from typing import Literal

from pydantic import BaseModel, ConfigDict, Field as PydField, model_validator

from models.flow import FlowParams

WeightKind = Literal["w", "w_tilde", "h", "v", "o"]
NormKind = Literal[
    "triple", "sharp", "kernel", "kernel_majorant", "cumulant", "family", "besov"
]


class ParabolicPoint(BaseModel):
    """Space-time point (t, x)."""

    model_config = ConfigDict(frozen=True)

    t: float
    x: tuple[float, ...]

    @model_validator(mode="after")
    def _finite(self) -> "ParabolicPoint":
        if not all(abs(c) < float("inf") for c in (self.t, *self.x)):
            raise ValueError("coordinates must be finite")
        return self

    def minus(self, other: "ParabolicPoint") -> "ParabolicPoint":
        return ParabolicPoint(t=self.t - other.t, x=tuple(a - b for a, b in zip(self.x, other.x)))


class WeightSpec(BaseModel):
    """Rescaling exponent a, weight power v, polynomial exponent kappa0 and tree exponent flat_b."""

    model_config = ConfigDict(frozen=True)

    a: float = PydField(gt=1)
    v: float = PydField(gt=0, lt=1 / 3)
    kappa0: float = PydField(gt=0)
    flat_b: float = PydField(gt=0)
    s: float = PydField(gt=0, le=1)
    delta: float | None = None
    gamma: float | None = None

    @model_validator(mode="after")
    def _windows(self) -> "WeightSpec":
        if self.flat_b >= 2 * self.s:
            raise ValueError(f"flat_b = {self.flat_b} must be < 2s = {2 * self.s}")
        if self.delta is not None and self.flat_b <= 2 * self.s - 2 * self.delta:
            raise ValueError("flat_b must exceed 2s - 2 delta")
        if self.gamma is not None and abs(self.a * self.v - self.gamma) > 1e-9:
            raise ValueError(f"a * v = {self.a * self.v} must equal gamma = {self.gamma}")
        return self

    @classmethod
    def from_params(cls, params: FlowParams) -> "WeightSpec":
        return cls(
            a=params.a,
            v=params.v,
            kappa0=params.kappa0,
            flat_b=params.flat_b,
            s=params.s,
            delta=params.delta,
            gamma=params.gamma,
        )


class NormReport(BaseModel):
    """One measured norm with the scales and weights it was taken at."""

    kind: NormKind
    value: float = PydField(ge=0)
    sigma: float | None = None
    mu: float | None = None
    params: dict[str, float] = {}

    @model_validator(mode="after")
    def _finite(self) -> "NormReport":
        if self.value == float("inf") or self.value != self.value:
            raise ValueError("norm value must be finite")
        return self
