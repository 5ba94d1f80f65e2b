"""Command orchestration: flow, simulate, verify and report for one (config, seed)."""

import logging
import time
from pathlib import Path

import numpy as np

from models.errors import MissingPrerequisite
from models.flow import KernelTrajectory
from models.lattice import Field
from models.report import Command, RunConfig, RunReport
from models.simulation import NoiseSpec, SampleStream
from services.config import config_hash, serialise_config
from services.cumulants import solve_cumulant_flow
from services.database import cache_report, get_cached_report
from services.diagnostics import (
    besov_seminorm,
    coercive_bound_check,
    estimate_cumulants,
    jensen_tilt_experiment,
    on_symmetry_check,
)
from services.flow_engine import solve_kernel_flow
from services.params import resolve_params
from services.report import create_summary_zip
from services.snapshot import load_snapshot, persist_snapshot
from services.spde_sim import drift_from_trajectory, run_stationary, step_exponential_euler
from services.verifiers import operator_identity_suite

logger = logging.getLogger(__name__)

KERNEL_SNAPSHOT = "kernel.snap"
CUMULANT_SNAPSHOT = "cumulants.snap"
BUNDLE = "bundle.zip"
COMMANDS: tuple[Command, ...] = ("flow", "simulate", "verify", "report")
# verify and report read whatever the run directory holds, so only these are cached
CACHED: tuple[Command, ...] = ("flow", "simulate")


def run_dir(cfg: RunConfig) -> Path:
    """Output directory of one configuration: ``<out>/<config hash prefix>/seed-<seed>``."""
    return Path(cfg.run.out) / config_hash(cfg)[:16] / f"seed-{cfg.run.seed}"


def _stream_path(directory: Path, chain: int) -> Path:
    return directory / f"stream-{chain}.snap"


def _report_path(directory: Path, cmd: Command) -> Path:
    return directory / f"report-{cmd}.json"


def _rows(table: dict[str, float], key: str) -> list[dict[str, float | str]]:
    return [{key: name, "value": value} for name, value in sorted(table.items())]


def r_eps(cfg: RunConfig, counterterms: dict[int, float]) -> float:
    """Mass counterterm of the Langevin drift: bare r_bar plus the flow's r_1..r_ell_bar."""
    return cfg.flow.r_bar + sum(counterterms[ell] for ell in sorted(counterterms))


# --- commands -----------------------------------------------------------------------------


def _flow(cfg: RunConfig, report: RunReport, directory: Path) -> None:
    params = resolve_params(cfg.physics.s, cfg.lattice.d, cfg.physics.kappa, cfg.flow.ell_bar)
    lat, mass, lam = cfg.lattice_spec(), cfg.mass(), cfg.physics.lam
    cumulants = solve_cumulant_flow(
        params,
        lam,
        lat,
        mass,
        cfg.flow.r_bar,
        cfg.flow.per_octave,
        tolerance=cfg.flow.tolerance,
        components=cfg.physics.n,
        box_tolerance=cfg.flow.box_tolerance,
    )
    kernels = solve_kernel_flow(
        params,
        lam,
        cumulants.counterterms,
        lat,
        mass,
        r_bar=cfg.flow.r_bar,
        integrator=cfg.flow.integrator,
        per_octave=cfg.flow.per_octave,
        box_tolerance=cfg.flow.box_tolerance,
    )
    report.flow_params = params.model_dump(exclude={"scaling_table", "table_fix"})
    report.counterterms = dict(cumulants.counterterms)
    report.tables = {
        "scaling_rows": _rows(params.scaling_table, "row"),
        "post_rows": _rows(params.table_fix, "row"),
        "parity_zero_blocks": _rows(cumulants.parity_zero_blocks, "block"),
        "box_overflow": _rows(
            {**cumulants.box_overflow, "G_small": kernels.box_overflow}, "kernel"
        ),
    }
    report.artifacts += [
        str(persist_snapshot(cumulants, directory / CUMULANT_SNAPSHOT)),
        str(persist_snapshot(kernels, directory / KERNEL_SNAPSHOT)),
    ]


def _load_counterterms(directory: Path) -> tuple[dict[int, float], KernelTrajectory]:
    path = directory / KERNEL_SNAPSHOT
    if not path.exists():
        raise MissingPrerequisite(
            f"{path} not found: run `fracphi4 flow` with the same config and seed first"
        )
    traj = load_snapshot(path, expect="kernel-trajectory")
    return traj.counterterms, traj


def _simulate(cfg: RunConfig, report: RunReport, directory: Path) -> None:
    counterterms, traj = _load_counterterms(directory)
    sim_cfg = cfg.sim_config(r_eps(cfg, counterterms))
    force = drift_from_trajectory(traj) if cfg.physics.n == 1 else None
    report.counterterms = dict(counterterms)
    rows = []
    for chain in range(cfg.run.chains):
        noise = NoiseSpec(seed=cfg.run.seed, stream_id=chain, components=cfg.physics.n)
        stream = run_stationary(sim_cfg, noise, force=force)
        report.artifacts.append(str(persist_snapshot(stream, _stream_path(directory, chain))))
        phi2 = stream.observables["phi2"]
        rows.append({
            "chain": chain,
            "r_eps": sim_cfg.r_eps,
            "phi2_mean": float(np.mean(phi2)),
            "phi2_std": float(np.std(phi2, ddof=1)) if phi2.size > 1 else 0.0,
            "tilt_norm4_mean": float(np.mean(stream.observables["tilt_norm4"])),
        })
    report.tables = {"chains": rows}


def _trajectory_window(cfg: RunConfig, stream: SampleStream, r: float) -> Field:
    """Continue the chain from its last sample over one lattice window at the lattice step."""
    lat = stream.lattice
    sim_cfg = cfg.sim_config(r).model_copy(update={"dt": lat.dt})
    noise = NoiseSpec(seed=cfg.run.seed, stream_id=cfg.run.chains, components=stream.n)
    state = stream.fields[-1]
    slices = []
    for step in range(lat.Nt):
        state = step_exponential_euler(state, sim_cfg, noise, step)
        slices.append(state.values)
    return Field(lattice=lat, values=np.stack(slices, axis=1), kind="spacetime")


def _verify(cfg: RunConfig, report: RunReport, directory: Path) -> None:
    report.verifiers = operator_identity_suite(seed=cfg.run.seed)
    path = _stream_path(directory, 0)
    if not path.exists():
        logger.info("no sample stream in %s; operator checks only", directory)
        return

    counterterms, _ = _load_counterterms(directory)
    r = r_eps(cfg, counterterms)
    stream = load_snapshot(path, expect="sample-stream")
    diag = cfg.diagnostics
    report.counterterms = dict(counterterms)
    report.cumulants = [
        estimate_cumulants(stream, order, diag.separations)
        for order in range(1, diag.cumulant_order + 1)
    ]
    report.norms = [besov_seminorm(stream.fields[-1], diag.besov_gamma)]
    if stream.n >= 2:
        report.verifiers.append(on_symmetry_check(stream, diag.separations))
    if cfg.physics.lam > 0:
        window = _trajectory_window(cfg, stream, r)
        lat = window.lattice
        # weight vanishing at both ends of the time window
        rho = np.sin(np.pi * (np.arange(lat.Nt) + 0.5) / lat.Nt) ** 2
        rho = rho.reshape(lat.Nt, *([1] * lat.d))
        report.verifiers.append(
            coercive_bound_check(window, cfg.physics.lam, cfg.mass(), rho=rho, margin=diag.margin)
        )
    if diag.theta_grid:
        noise = NoiseSpec(seed=cfg.run.seed, stream_id=cfg.run.chains + 1, components=stream.n)
        report.tables = {
            "jensen": jensen_tilt_experiment(cfg.sim_config(r), noise, diag.theta_grid)
        }


def _report(cfg: RunConfig, report: RunReport, directory: Path) -> None:
    earlier = [
        RunReport.model_validate_json(_report_path(directory, cmd).read_bytes())
        for cmd in COMMANDS[:-1]
        if _report_path(directory, cmd).exists()
    ]
    if not earlier:
        raise MissingPrerequisite(f"no command has run in {directory}; nothing to report")
    chain = 0
    while _stream_path(directory, chain).exists():
        stream = load_snapshot(_stream_path(directory, chain), expect="sample-stream")
        names = sorted(stream.observables)
        report.tables[f"samples_chain{chain}"] = [
            {"sample": i, **{name: float(stream.observables[name][i]) for name in names}}
            for i in range(stream.n_samples)
        ]
        chain += 1
    bundle = create_summary_zip([*earlier, report], serialise_config(cfg))
    path = directory / BUNDLE
    path.write_bytes(bundle)
    report.artifacts.append(str(path))


HANDLERS = {"flow": _flow, "simulate": _simulate, "verify": _verify, "report": _report}


def run_command(cmd: Command, cfg: RunConfig, no_cache: bool = False) -> RunReport:
    """Run one command and persist its report next to its artifacts.

    Args:
        cmd: "flow", "simulate", "verify" or "report"
        cfg: Validated configuration
        no_cache: Ignore the result cache

    Returns:
        RunReport of the command

    Raises:
        MissingPrerequisite: an earlier command's artifacts are missing
        NumericalFailure: a numerical abort inside the command
    """
    if cmd not in HANDLERS:
        raise ValueError(f"unknown command {cmd!r}")
    chash, seed = config_hash(cfg), cfg.run.seed
    if not no_cache and cmd in CACHED:
        cached = get_cached_report(chash, seed, cmd)
        if cached is not None:
            logger.info("%s: cached result for %s (seed %d)", cmd, chash[:12], seed)
            return cached

    directory = run_dir(cfg)
    directory.mkdir(parents=True, exist_ok=True)
    report = RunReport(command=cmd, config_hash=chash, seed=seed)
    start = time.perf_counter()
    HANDLERS[cmd](cfg, report, directory)
    report.timings[cmd] = time.perf_counter() - start

    path = _report_path(directory, cmd)
    path.write_bytes(report.model_dump_json(indent=2).encode("utf-8"))
    report.artifacts.append(str(path))
    logger.info("%s finished in %.2fs (%s)", cmd, report.timings[cmd], directory)
    if cmd in CACHED:
        cache_report(report)
    return report
