import numpy as np
import pytest

from models.lattice import Field, LatticeSpec, MassFracParams


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def lat1() -> LatticeSpec:
    """d = 1, M = 64, unit spacing."""
    return LatticeSpec.build(d=1, eps=1.0, M=64, T=1.0, Nt=16)


@pytest.fixture
def lat2() -> LatticeSpec:
    return LatticeSpec.build(d=2, eps=0.5, M=16, T=1.0, Nt=16)


@pytest.fixture
def params08() -> MassFracParams:
    return MassFracParams(s=0.8, m2=1.0)


def random_slice(lat: LatticeSpec, rng: np.random.Generator, n: int = 1) -> Field:
    return Field(lattice=lat, values=rng.standard_normal(lat.shape_for("slice", n)))


def random_spacetime(lat: LatticeSpec, rng: np.random.Generator, n: int = 1) -> Field:
    return Field(
        lattice=lat,
        values=rng.standard_normal(lat.shape_for("spacetime", n)),
        kind="spacetime",
    )


def smooth_slice(lat: LatticeSpec, rng: np.random.Generator, modes: int = 4) -> Field:
    """Random trigonometric polynomial with frequencies up to ``modes`` per axis."""
    x = lat.eps * np.arange(lat.M)
    grids = np.meshgrid(*[x] * lat.d, indexing="ij")
    values = np.zeros(lat.space_shape)
    for _ in range(2 * modes):
        m = rng.integers(1, modes + 1, size=lat.d)
        phase = sum(2 * np.pi * mi * g / lat.period for mi, g in zip(m, grids))
        values += rng.standard_normal() * np.cos(phase + rng.uniform(0, 2 * np.pi))
    return Field(lattice=lat, values=values[None])
