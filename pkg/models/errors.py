class Fracphi4Error(Exception):
    """Base class for all errors raised by the lab."""


class DomainError(Fracphi4Error, ValueError):
    """Argument outside the domain of an operation (negative time, s = 1 for kernel forms, ...)."""


class ValidationFailure(Fracphi4Error):
    """Configuration rejected; carries every (key, reason) pair found."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{key}: {reason}" for key, reason in errors))


class ParameterError(Fracphi4Error, ValueError):
    """A row of the parameter constraint tables is violated."""

    def __init__(self, row: str, detail: str):
        self.row = row
        super().__init__(f"[{row}] {detail}")


class NumericalFailure(Fracphi4Error):
    """Numerical abort; the CLI maps these to exit code 3."""


class BlowUpError(NumericalFailure):
    """Field sup norm exceeded the blow-up cap."""


class DegenerateKernelError(NumericalFailure):
    """Kernel has too few nonzero entries to fit."""


class KernelCapExceeded(NumericalFailure):
    """Materialising a kernel would exceed the configured entry cap."""


class QuadratureToleranceError(NumericalFailure):
    """A-posteriori quadrature error estimate above tolerance."""


class BoxOverflowError(NumericalFailure):
    """Kernel mass leaking out of the truncation box above tolerance."""


class InsufficientSamples(NumericalFailure):
    """Not enough samples for the requested estimator."""


class UnsupportedContraction(NumericalFailure):
    """Expectation of a diagram pattern the Wick evaluator does not cover."""


class SnapshotError(Fracphi4Error):
    """Snapshot magic, version, length or checksum mismatch."""


class MissingPrerequisite(Fracphi4Error):
    """A command needs an artifact that an earlier command produces."""
