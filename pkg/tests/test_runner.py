from pathlib import Path

import pytest

from models.errors import MissingPrerequisite
from services.config import parse_config
from services.runner import BUNDLE, r_eps, run_command, run_dir
from services.verifiers import operator_identity_suite

TINY = """
[run]
seed = 17
out = {out}

[lattice]
d = 1
eps = 0.5
M = 8
T = 1.0
Nt = 8

[physics]
s = 0.8
lam = 0.5

[flow]
ell_bar = 1
per_octave = 2

[sim]
burn_in = 20
n_samples = 120
sample_stride = 1

[diagnostics]
cumulant_order = 2
separations = 0, 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("FRACPHI4_CACHE_DB", str(root / "cache.db"))
        yield root


@pytest.fixture(scope="module")
def cfg(workspace):
    return parse_config(TINY.format(out=workspace / "out"))


@pytest.fixture(scope="module")
def pipeline(cfg):
    return {cmd: run_command(cmd, cfg) for cmd in ("flow", "simulate", "verify")}


def test_verify_without_stream_runs_operator_suite_only(workspace):
    cfg = parse_config(TINY.format(out=workspace / "empty"))
    report = run_command("verify", cfg)
    expected = [r.identifier for r in operator_identity_suite(seed=17)]
    assert [r.identifier for r in report.verifiers] == expected
    assert report.cumulants == [] and report.norms == []


def test_prerequisites_are_named(workspace):
    cfg = parse_config(TINY.format(out=workspace / "fresh"))
    with pytest.raises(MissingPrerequisite, match="fracphi4 flow"):
        run_command("simulate", cfg)
    with pytest.raises(MissingPrerequisite):
        run_command("report", cfg)


def test_simulate_consumes_flow_counterterms(cfg, pipeline):
    flow, simulate = pipeline["flow"], pipeline["simulate"]
    assert flow.counterterms.keys() == {1}
    assert simulate.counterterms == flow.counterterms
    assert simulate.tables["chains"][0]["r_eps"] == pytest.approx(r_eps(cfg, flow.counterterms))
    assert all(Path(p).exists() for p in flow.artifacts + simulate.artifacts)
    assert flow.flow_params["ell_bar"] == 1


def test_verify_adds_stream_diagnostics(pipeline):
    verify = pipeline["verify"]
    assert [c.order for c in verify.cumulants] == [1, 2]
    assert verify.norms[0].kind == "besov"
    assert verify.verifiers[-1].identifier == "coercive_weighted"


def test_flow_result_is_cached(cfg, pipeline):
    again = run_command("flow", cfg)
    assert again.timings == pipeline["flow"].timings
    fresh = run_command("flow", cfg, no_cache=True)
    assert fresh.counterterms == pipeline["flow"].counterterms


def test_report_is_idempotent(cfg, pipeline):
    run_command("report", cfg)
    first = (run_dir(cfg) / BUNDLE).read_bytes()
    run_command("report", cfg)
    assert (run_dir(cfg) / BUNDLE).read_bytes() == first


def test_component_count_reaches_the_counterterms(workspace):
    text = TINY.format(out=workspace / "components").replace("ell_bar = 1", "ell_bar = 2")
    scalar = run_command("flow", parse_config(text))
    pair_cfg = parse_config(text.replace("lam = 0.5", "lam = 0.5\nn = 2"))
    pair = run_command("flow", pair_cfg)
    assert pair.counterterms[2] == pytest.approx(4 / 3 * scalar.counterterms[2], rel=1e-10)
    assert {row["kernel"] for row in pair.tables["box_overflow"]} >= {"line", "G_small"}

    simulate = run_command("simulate", pair_cfg)
    assert simulate.tables["chains"][0]["r_eps"] == pytest.approx(
        r_eps(pair_cfg, pair.counterterms)
    )
