import json
import subprocess
import sys

import numpy as np
import pytest

from widearea import cli
from widearea.config import ConfigError, PipelineConfig
from widearea.pipeline import (
    ReportError,
    cmd_pipeline,
    cmd_report,
    relative_error,
    trough_index,
    trough_reduction_pct,
)
from widearea.protocol import ProtocolError


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("two_area")
    assert cli.main(["pipeline", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def summary(run_dir):
    return json.loads((run_dir / "summary.json").read_text())


def test_relative_error_identities():
    y = np.sin(np.linspace(0, 10, 100))
    assert relative_error(y, y) == 0.0
    assert relative_error(y, np.zeros_like(y)) == 1.0
    with pytest.raises(ValueError):
        relative_error(y, y[:-1])
    with pytest.raises(ValueError):
        relative_error(np.zeros(3), np.ones(3))


def test_trough_helpers():
    y = np.array([0.0, -5.0, 1.0, -3.0, 2.0])
    assert trough_index(y) == 1
    assert trough_index(y, 2) == 3
    assert trough_reduction_pct(y, y / 2, 1) == pytest.approx(50.0)


def test_selected_loop_is_oracle_optimal(summary):
    assert summary["loops"]["matches_oracle"]
    assert summary["loops"]["selected"]["tie"] == "tie1"
    assert summary["loops"]["selected"]["gen"] == "gen3"
    assert summary["grouping"] == [1, 1, 2, 2]


def test_closed_loop_damping_improves(summary):
    ol = summary["open_loop_zeta"]
    c = summary["cases"]
    assert c["wadc_strong"]["zeta"] > 2 * ol
    assert c["wadc_strong"]["zeta"] - ol > c["wadc_weak"]["zeta"] - ol
    assert all(v["stable"] and v["bounded"] for v in c.values())


def test_relative_error_ordering(summary):
    c = summary["cases"]
    assert c["wadc_strong"]["relative_error"] > c["pss"]["relative_error"] > c["wadc_weak"]["relative_error"]
    assert c["wadc_strong"]["trough_reduction_pct"] > c["wadc_weak"]["trough_reduction_pct"]


def test_run_artifacts_present(run_dir):
    for name in ("config.json", "sim_probe.csv", "sim_baseline.csv", "grouping.json", "consensus_trace.json",
                 "arx.json", "modes.json", "loops.json", "wadc_strong.json", "wadc_weak.json", "summary.json"):
        assert (run_dir / name).exists(), name
    for case in PipelineConfig.defaults()["controllers"]:
        assert (run_dir / f"closedloop_{case}.csv").exists()


def test_rerun_is_byte_identical(run_dir, tmp_path):
    assert cli.main(["pipeline", "--out", str(tmp_path)]) == 0
    for name in ("summary.json", "consensus_trace.json", "closedloop_wadc_strong.csv"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()


def test_report_outputs_and_determinism(run_dir, tmp_path):
    a = cmd_report(run_dir, tmp_path / "a")
    b = cmd_report(run_dir, tmp_path / "b")
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    header = (tmp_path / "a" / "relative_speed.csv").read_text().splitlines()[0]
    assert header == "time,exciter_only,pss,wadc_strong,wadc_weak,pss_wadc"
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(manifest["files"]) == {p.name for p in a[:-1]}


def test_report_on_empty_dir_lists_expected(tmp_path):
    with pytest.raises(ReportError, match="summary.json"):
        cmd_report(tmp_path)
    assert cli.main(["report", "--out", str(tmp_path)]) == 3


def test_unknown_key_names_key(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"admm": {"rhoo": 2.0}}))
    assert cli.main(["pipeline", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "admm.rhoo" in capsys.readouterr().err


@pytest.mark.parametrize("cfg, key", [
    ({"sysid": {"k": 1}}, "sysid.k"),
    ({"delay_ms": -5}, "delay_ms"),
    ({"controllers": ["wadc_fancy"]}, "controllers"),
    ({"model": {"name": "ieee39"}}, "model.name"),
    ({"wadc": {"vmax": -0.1}}, "wadc.vmax"),
    ({"bogus": 1}, "bogus"),
    ({"scenario": {"t_ned": 3}}, "scenario.t_ned"),
])
def test_config_validation(cfg, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        PipelineConfig.from_dict(cfg)


def test_invalid_json_is_config_error(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    assert cli.main(["simulate", "--config", str(p), "--out", str(tmp_path)]) == 2


def test_stage_failure_keeps_partial_outputs(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"sysid": {"N": 400}}))
    out = tmp_path / "o"
    assert cli.main(["pipeline", "--config", str(p), "--out", str(out)]) == 3
    assert "stage 'identify'" in capsys.readouterr().err
    assert (out / "sim_probe.csv").exists() and (out / "grouping.json").exists()
    assert not (out / "summary.json").exists()


def test_protocol_error_exit_code(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise ProtocolError("area 2 vanished")
    monkeypatch.setattr(cli, "cmd_pipeline", boom)
    assert cli.main(["identify-dist", "--out", str(tmp_path)]) == 4


def test_stage_subcommand_stops_early(tmp_path):
    assert cli.main(["group", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "grouping.json").exists()
    assert not (tmp_path / "consensus_trace.json").exists()


def test_seed_and_delay_flags(tmp_path):
    assert cli.main(["design", "--out", str(tmp_path), "--seed", "3", "--delay-ms", "100"]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["seed"] == 3 and cfg["delay_ms"] == 100
    probe = (tmp_path / "sim_probe.csv").read_text()
    assert probe != cmd_pipeline(PipelineConfig.from_dict({}), tmp_path / "x", until="simulate") \
        .out.joinpath("sim_probe.csv").read_text()


def test_distributed_pipeline_matches_in_process(run_dir, tmp_path):
    r = subprocess.run([sys.executable, "-m", "widearea.cli", "pipeline", "--dist", "--out", str(tmp_path)],
                       capture_output=True, text=True, timeout=300)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "summary.json").read_bytes() == (run_dir / "summary.json").read_bytes()
    assert (tmp_path / "transcript.bin").stat().st_size > 0


def test_print_config_is_valid_json(capsys):
    assert cli.main(["print-config"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert PipelineConfig.from_dict(d).data == PipelineConfig.defaults()


def test_bad_cli_usage_exit_code():
    with pytest.raises(SystemExit) as e:
        cli.main(["pipeline", "--seed", "x"])
    assert e.value.code == 2
