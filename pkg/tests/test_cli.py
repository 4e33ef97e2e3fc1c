"""End-to-end CLI runs: exit codes, emitted files, flag/config interplay."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from spinosc.cli import main
from spinosc.output import CSV_COLUMNS, read_csv

TINY = """\
J = 0.5
delta_z_over_zg = 1.0
k_zg2_over_omega = 0.05
action_over_hbar = 2.0
n_max = 32
dt = 0.002
t_final_periods = 0.05
sample_stride = 5
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def _run(argv, capsys=None):
    code = main(argv)
    return code


def test_missing_config_file_is_a_config_error(tmp_path, capsys):
    code = main(["--config", str(tmp_path / "absent.cfg"), "sse"])
    assert code == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("J = 0.5\nwibble = 3\n")
    assert main(["--config", str(path), "sse"]) == 2
    err = capsys.readouterr().err
    assert "line 2" in err and "wibble" in err


def test_bad_flag_value_is_a_config_error(capsys):
    assert main(["sse", "-J", "0.7"]) == 2
    assert "half-integer" in capsys.readouterr().err


def test_sse_run_emits_schema_csv_and_config_echo(tiny_config, tmp_path):
    out = tmp_path / "out"
    code = main([
        "sse", "--config", tiny_config,
        "--output-dir", str(out), "--basename", "tiny",
    ])
    assert code == 0
    csv_path = out / "tiny_J0p5.csv"
    assert csv_path.exists()
    with open(csv_path) as fh:
        assert fh.readline().strip() == ",".join(CSV_COLUMNS)
    cols = read_csv(str(csv_path))
    assert len(cols["t"]) == 6  # 25 steps, stride 5, plus t = 0
    assert "z_mean" in cols and "entropy" in cols
    assert "z_classical" not in cols

    echo = (out / "tiny_config.txt").read_text()
    assert "mode=sse" in echo and "n_max=32" in echo
    # echoed text must itself be a valid config
    from spinosc.config import parse_config
    parse_config(echo)


def test_compare_mode_adds_classical_trace(tiny_config, tmp_path):
    out = tmp_path / "out"
    code = main([
        "compare", "--config", tiny_config,
        "--output-dir", str(out), "--basename", "cmp",
    ])
    assert code == 0
    cols = read_csv(str(out / "cmp_J0p5.csv"))
    assert "z_mean" in cols and "z_classical" in cols and "Sx" in cols
    assert len(cols["z_classical"]) == len(cols["t"])


def test_classical_mode_leaves_quantum_columns_empty(tiny_config, tmp_path):
    out = tmp_path / "out"
    assert main([
        "classical", "--config", tiny_config,
        "--output-dir", str(out), "--basename", "cl",
    ]) == 0
    cols = read_csv(str(out / "cl_J0p5.csv"))
    assert "z_classical" in cols and "Sx" in cols
    assert "z_mean" not in cols and "entropy" not in cols


def test_cumulant_mode_emits_covariances_without_entropy(tiny_config, tmp_path):
    out = tmp_path / "out"
    assert main([
        "cumulant", "--config", tiny_config,
        "--output-dir", str(out), "--basename", "cum",
    ]) == 0
    cols = read_csv(str(out / "cum_J0p5.csv"))
    assert "Czz" in cols and "CJzJz" in cols
    assert "entropy" not in cols and "jx_mean" not in cols


def test_ensemble_mode_writes_aggregate_and_summary(tiny_config, tmp_path):
    out = tmp_path / "out"
    code = main([
        "ensemble", "--config", tiny_config,
        "--n-traj", "3", "--batch-size", "2", "--jobs", "2",
        "--output-dir", str(out), "--basename", "ens",
    ])
    assert code == 0
    agg = read_csv(str(out / "ens_J0p5_agg.csv"))
    assert "z_mean_avg" in agg and "entropy_var" in agg
    summary = json.loads((out / "ens_summary.json").read_text())
    run = summary["runs"]["0.5"]
    assert run["n_traj"] == 3 and run["n_failed"] == 0
    assert 0.0 <= run["up_fraction"] <= 1.0
    assert summary["e_max_vs_J"] == [[0.5, run["mean_e_max"]]]


def test_svg_flag_produces_wellformed_plot(tiny_config, tmp_path):
    out = tmp_path / "out"
    assert main([
        "sse", "--config", tiny_config, "--svg",
        "--output-dir", str(out), "--basename", "tiny",
    ]) == 0
    svg = (out / "tiny_J0p5.svg").read_text()
    ET.fromstring(svg)
    assert svg.startswith("<svg")


def test_output_dir_env_fallback(tiny_config, tmp_path, monkeypatch):
    env_dir = tmp_path / "from_env"
    monkeypatch.setenv("SPINOSC_OUTPUT_DIR", str(env_dir))
    assert main(["sse", "--config", tiny_config, "--basename", "envy"]) == 0
    assert (env_dir / "envy_J0p5.csv").exists()
    # explicit flag wins over the environment
    flag_dir = tmp_path / "from_flag"
    assert main([
        "sse", "--config", tiny_config,
        "--output-dir", str(flag_dir), "--basename", "envy",
    ]) == 0
    assert (flag_dir / "envy_J0p5.csv").exists()


def test_flags_before_subcommand_survive(tiny_config, tmp_path):
    out = tmp_path / "out"
    code = main([
        "--seed", "9", "--config", tiny_config,
        "sse", "--output-dir", str(out), "--basename", "pre",
    ])
    assert code == 0
    echo = (out / "pre_config.txt").read_text()
    assert "seed=9" in echo.splitlines()


def test_default_basename_names_mode_preset_seed(tiny_config, tmp_path):
    out = tmp_path / "out"
    assert main([
        "sse", "--config", tiny_config, "--seed", "5",
        "--output-dir", str(out),
    ]) == 0
    assert (out / "sse_desk_seed5_J0p5.csv").exists()
    assert (out / "sse_desk_seed5_config.txt").exists()


def test_numerical_failure_flushes_partial_csv(tmp_path, capsys):
    # cutoff far too small for the well separation: the tail guard trips
    path = tmp_path / "blowup.cfg"
    path.write_text(
        "J = 0.5\ndelta_z_over_zg = 10.0\nk_zg2_over_omega = 0.05\n"
        "action_over_hbar = 2.0\nn_max = 16\ndt = 0.002\n"
        "t_final_periods = 1.0\nsample_stride = 5\n"
    )
    out = tmp_path / "out"
    code = main([
        "sse", "--config", str(path),
        "--output-dir", str(out), "--basename", "boom",
    ])
    assert code == 3
    err = capsys.readouterr().err
    assert "numerical failure" in err
    cols = read_csv(str(out / "boom_J0p5.csv"))
    # the partial record is flushed with NaN rows after the failure point
    assert len(cols["t"]) > 1
    assert np.isnan(cols["z_mean"][-1])


def test_output_path_collision_is_io_error(tiny_config, tmp_path, capsys):
    target = tmp_path / "not_a_dir"
    target.write_text("occupied")
    code = main([
        "sse", "--config", tiny_config,
        "--output-dir", str(target), "--basename", "x",
    ])
    assert code == 4
    assert "i/o error" in capsys.readouterr().err
