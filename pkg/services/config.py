"""Flat ``[section]`` / ``key = value`` run configuration.

The canonical text (fixed section order, sorted keys, ``repr`` floats) is
what gets hashed, so a config and its serialisation share one hash.
"""

import hashlib
import logging
import math
from pathlib import Path

from pydantic import BaseModel, ValidationError

from models.errors import ParameterError, ValidationFailure
from models.report import (
    DiagnosticsSection,
    FlowSection,
    LatticeSection,
    PhysicsSection,
    RunConfig,
    RunSection,
    SimSection,
)
from services.params import resolve_params

logger = logging.getLogger(__name__)

SECTIONS: dict[str, type[BaseModel]] = {
    "run": RunSection,
    "lattice": LatticeSection,
    "physics": PhysicsSection,
    "flow": FlowSection,
    "sim": SimSection,
    "diagnostics": DiagnosticsSection,
}
LIST_KEYS = {("diagnostics", "separations"), ("diagnostics", "theta_grid")}
COMMENT = ("#", ";")


def _read_sections(text: str, errors: list[tuple[str, str]]) -> dict[str, dict[str, str]]:
    raw: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith(COMMENT):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SECTIONS:
                errors.append((current, f"unknown section (line {lineno})"))
            raw.setdefault(current, {})
            continue
        if "=" not in line:
            errors.append((f"line {lineno}", "expected 'key = value'"))
            continue
        if current is None:
            errors.append((f"line {lineno}", "key outside of any [section]"))
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw[current]:
            errors.append((f"{current}.{key}", f"duplicate key (line {lineno})"))
            continue
        raw[current][key] = value
    return raw


def _coerce(section: str, values: dict[str, str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in values.items():
        if (section, key) in LIST_KEYS:
            out[key] = [item.strip() for item in value.split(",") if item.strip()]
        elif value.lower() in ("", "none"):
            out[key] = None
        else:
            out[key] = value
    return out


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a run configuration.

    Args:
        text: Config file contents

    Returns:
        RunConfig with defaults filled in

    Raises:
        ValidationFailure: carrying every (key, reason) pair found, including
            parameter-table violations reported by ``resolve_params``
    """
    errors: list[tuple[str, str]] = []
    raw = _read_sections(text, errors)

    sections: dict[str, BaseModel] = {}
    for name, model in SECTIONS.items():
        try:
            sections[name] = model.model_validate(_coerce(name, raw.get(name, {})))
        except ValidationError as exc:
            for err in exc.errors():
                key = ".".join(str(part) for part in err["loc"])
                errors.append((f"{name}.{key}", err["msg"]))

    if not errors:
        cfg = RunConfig(**sections)
        try:
            cfg.lattice_spec()
        except ValidationError as exc:
            errors.extend(("lattice", err["msg"]) for err in exc.errors())
        phys = cfg.physics
        try:
            resolve_params(phys.s, cfg.lattice.d, phys.kappa, cfg.flow.ell_bar)
        except ParameterError as exc:
            errors.append(("physics.s" if exc.row == "subcritical" else "physics.kappa", str(exc)))

    if errors:
        logger.warning("config rejected with %d error(s)", len(errors))
        raise ValidationFailure(errors)
    return cfg


def load_config(path: Path | str) -> RunConfig:
    """Read and parse a config file (UTF-8)."""
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _literal(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, list):
        return ", ".join(_literal(item) for item in value)
    return str(value)


def serialise_config(cfg: RunConfig) -> str:
    """Canonical text of a config; ``parse_config`` inverts it exactly."""
    lines: list[str] = []
    for name in SECTIONS:
        section = getattr(cfg, name).model_dump()
        lines.append(f"[{name}]")
        lines.extend(
            f"{key} = {_literal(section[key])}"
            for key in sorted(section)
            if section[key] is not None
        )
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: RunConfig) -> str:
    """sha256 hex digest of the canonical serialisation."""
    return hashlib.sha256(serialise_config(cfg).encode("utf-8")).hexdigest()


def with_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None) -> RunConfig:
    """Copy of ``cfg`` with command-line overrides of the run section applied."""
    update = {k: v for k, v in (("seed", seed), ("out", out)) if v is not None}
    if not update:
        return cfg
    return cfg.model_copy(update={"run": cfg.run.model_copy(update=update)})
