"""Symbolic polynomials in the input field psi and the noise xi.

A monomial is a product, at one space-time point z, of psi(z)^n_psi,
xi(z)^n_xi and a multiset of lines (op * body)(z), where ``op`` names a
translation-invariant multiplier ("G" for the small-scale propagator,
"Gdot" for its sigma-derivative) and ``body`` is again a monomial.
"""

from dataclasses import dataclass, field


@dataclass(frozen=True, order=True)
class Monomial:
    n_psi: int = 0
    n_xi: int = 0
    lines: tuple["Line", ...] = ()

    @property
    def degree(self) -> int:
        """Number of psi legs, counting those inside lines."""
        return self.n_psi + sum(line.body.degree for line in self.lines)

    @property
    def noise_count(self) -> int:
        return self.n_xi + sum(line.body.noise_count for line in self.lines)

    @property
    def line_count(self) -> int:
        return len(self.lines) + sum(line.body.line_count for line in self.lines)

    def times(self, other: "Monomial") -> "Monomial":
        return Monomial(
            self.n_psi + other.n_psi,
            self.n_xi + other.n_xi,
            tuple(sorted(self.lines + other.lines)),
        )

    def without_line(self, index: int) -> "Monomial":
        return Monomial(self.n_psi, self.n_xi, self.lines[:index] + self.lines[index + 1 :])


@dataclass(frozen=True, order=True)
class Line:
    op: str
    body: Monomial


PSI = Monomial(n_psi=1)
XI = Monomial(n_xi=1)
ONE = Monomial()


@dataclass
class Poly:
    """Finite sum of coefficient * monomial."""

    terms: dict[Monomial, float] = field(default_factory=dict)

    @classmethod
    def of(cls, monomial: Monomial, coef: float = 1.0) -> "Poly":
        return cls({monomial: coef}) if coef != 0 else cls()

    def copy(self) -> "Poly":
        return Poly(dict(self.terms))

    def is_zero(self) -> bool:
        return not self.terms

    def __add__(self, other: "Poly") -> "Poly":
        out = dict(self.terms)
        for mono, coef in other.terms.items():
            total = out.get(mono, 0.0) + coef
            if total == 0.0:
                out.pop(mono, None)
            else:
                out[mono] = total
        return Poly(out)

    def __mul__(self, other: "Poly | float") -> "Poly":
        if isinstance(other, int | float):
            return Poly({m: c * other for m, c in self.terms.items()}) if other != 0 else Poly()
        out = Poly()
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                out = out + Poly.of(m1.times(m2), c1 * c2)
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Poly":
        return self * -1.0

    def __sub__(self, other: "Poly") -> "Poly":
        return self + (-other)

    def line(self, op: str) -> "Poly":
        """op applied to this polynomial, split by linearity into single-line monomials."""
        return Poly({Monomial(lines=(Line(op, m),)): c for m, c in self.terms.items()})

    def project(self, degree: int) -> "Poly":
        return Poly({m: c for m, c in self.terms.items() if m.degree == degree})

    def degrees(self) -> set[int]:
        return {m.degree for m in self.terms}
