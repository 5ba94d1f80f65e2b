"""Run-summary bundle: markdown summary, CSV tables and a README in one zip."""

import csv
import logging
import sys
from io import BytesIO, StringIO
from pathlib import Path
from zipfile import ZIP_DEFLATED, ZipFile, ZipInfo

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from models.report import RunReport

logger = logging.getLogger(__name__)

# source checkout first, then the data-files location of an installed wheel
TEMPLATE_DIRS = [
    Path(__file__).parent.parent / "templates",
    Path(sys.prefix) / "share" / "fracphi4" / "templates",
]
ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
Row = dict[str, float | int | bool | str]


def _cell(value: float | int | bool | str | None) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def report_tables(report: RunReport) -> dict[str, list[Row]]:
    """Flatten one report into named tables of scalar rows."""
    tables: dict[str, list[Row]] = {}
    if report.counterterms:
        tables["counterterms"] = [
            {"order": ell, "r": r} for ell, r in sorted(report.counterterms.items())
        ]
    if report.verifiers:
        tables["verifiers"] = [
            {
                "identifier": v.identifier,
                "left": v.left,
                "right": v.right,
                "margin": v.margin,
                "constant": v.constant,
                "passed": bool(v.passed),
            }
            for v in report.verifiers
        ]
    if report.norms:
        tables["norms"] = [
            {"kind": n.kind, "value": n.value, "sigma": n.sigma, "mu": n.mu, **n.params}
            for n in report.norms
        ]
    if report.cumulants:
        tables["cumulants"] = [
            {
                "order": c.order,
                "components": "".join(str(i) for i in c.components),
                "separation": r,
                "value": value,
                "error": error,
                "n_samples": c.n_samples,
            }
            for c in report.cumulants
            for r, value, error in zip(c.separations, c.values, c.errors)
        ]
    tables.update(report.tables)
    return {f"{report.command}_{name}": rows for name, rows in tables.items()}


def write_csv(rows: list[Row], config_hash: str, seed: int) -> str:
    """CSV text with ``config_hash`` and ``seed`` leading every row; floats at 17 digits."""
    keys: list[str] = []
    for row in rows:
        keys.extend(k for k in row if k not in keys)
    buffer = StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["config_hash", "seed", *keys])
    for row in rows:
        writer.writerow([config_hash, seed, *(_cell(row.get(k)) for k in keys)])
    return buffer.getvalue()


def render_summary(reports: list[RunReport], config_text: str) -> str:
    """Markdown summary of every command that has run for one configuration."""
    env = Environment(
        loader=FileSystemLoader(TEMPLATE_DIRS),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )
    env.filters["g"] = lambda x, digits=6: "-" if x is None else f"{x:.{digits}g}"
    template = env.get_template("report_summary.md.j2")
    first = reports[0]
    return template.render(
        config_hash=first.config_hash,
        seed=first.seed,
        normalization=first.normalization,
        reports=reports,
        config_text=config_text,
    )


def _write_member(zip_file: ZipFile, name: str, data: str) -> None:
    info = ZipInfo(name, date_time=ZIP_EPOCH)
    info.compress_type = ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zip_file.writestr(info, data.encode("utf-8"))


def create_summary_zip(reports: list[RunReport], config_text: str) -> bytes:
    """Zip the summary, one CSV per table and a README.

    Members are sorted and carry a fixed timestamp, so the bytes depend only on
    the reports and the config. Timings are left out.

    Args:
        reports: Reports of one (config, seed) pair, any commands
        config_text: Canonical config text

    Returns:
        ZIP file as bytes
    """
    if not reports:
        raise ValueError("no reports to bundle")
    members = {
        "summary.md": render_summary(reports, config_text),
        "config.ini": config_text,
        "README.txt": _generate_readme(),
    }
    for report in reports:
        for name, rows in report_tables(report).items():
            members[f"tables/{name}.csv"] = write_csv(rows, report.config_hash, report.seed)

    zip_buffer = BytesIO()
    with ZipFile(zip_buffer, "w") as zip_file:
        for name in sorted(members):
            _write_member(zip_file, name, members[name])
    logger.info("summary bundle: %d members", len(members))
    zip_buffer.seek(0)
    return zip_buffer.read()


def _generate_readme() -> str:
    """Generate README explaining the bundle contents."""
    return """fracphi4 run bundle

Contents:
---------
summary.md     human-readable summary of every command run for this config and seed
config.ini     canonical configuration; its sha256 is the config_hash column
tables/*.csv   one file per table, named <command>_<table>.csv

Notes:
------
- Every CSV row starts with config_hash and seed.
- Floats are written with 17 significant digits and read back exactly.
- Noise convention: per-site variance dt/eps^d per step.
- Plots are not included; the CSVs are the plot data.
"""
