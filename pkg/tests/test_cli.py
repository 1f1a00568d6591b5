import json
import subprocess
import sys

import pytest

from ldwm.cli import EXIT_INVARIANT, EXIT_IO, EXIT_OK, EXIT_USAGE, build_parser, main

from conftest import TINY

CONFIG = dict(learning_rate=3e-3, batch_size=2, total_steps=2, p_prior=0.25, kl_weight=1e-3,
              seed=0, bc=False, clip_norm=100.0, **TINY)


def write_config(path, **over):
    values = {**CONFIG, **over}
    path.write_text("".join(f"{k}={int(v) if isinstance(v, bool) else v}\n" for k, v in values.items()))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--episodes", "3", "--seed", "4", "--out", str(root / "data")]) == EXIT_OK
    cfg = write_config(root / "wm.cfg")
    for name, extra in (("wm", []), ("bc", ["--bc"])):
        rc = main(["train", "--config", str(cfg), "--data", str(root / "data"),
                   "--out", str(root / f"{name}.ldwm"), "--deterministic"] + extra)
        assert rc == EXIT_OK
    return root


def test_help_documents_every_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for cmd in ("gen-data", "train", "eval", "disturb", "compare", "imagine"):
        assert cmd in out


@pytest.mark.parametrize("cmd,flags", [
    ("gen-data", ["--episodes", "--seed", "--out", "--jobs"]),
    ("train", ["--config", "--data", "--out", "--bc", "--seed", "--steps", "--batch-size", "--deterministic"]),
    ("disturb", ["--ckpt", "--expert", "--routes", "--out", "--plots", "--jobs"]),
    ("compare", ["--wm", "--bc", "--routes", "--out"]),
    ("imagine", ["--ckpt", "--data", "--horizon", "--zero-noise", "--out"]),
])
def test_subcommand_help_lists_flags(cmd, flags, capsys):
    with pytest.raises(SystemExit):
        main([cmd, "--help"])
    out = capsys.readouterr().out
    for flag in flags:
        assert flag in out


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--out", "x", "--bogus"])
    assert exc.value.code == EXIT_USAGE
    assert "--bogus" in capsys.readouterr().err


def test_imagine_horizon_defaults_to_eleven():
    args = build_parser().parse_args(["imagine", "--ckpt", "c", "--data", "d", "--out", "o"])
    assert args.horizon == 11


def test_missing_config_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate=1e-3\nbatch_size=4\n")
    rc = main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "m.ldwm")])
    assert rc == EXIT_USAGE
    err = capsys.readouterr().err
    assert "missing key 'kl_weight'" in err and "missing key 'total_steps'" in err


def test_missing_dataset_is_io_error(tmp_path):
    cfg = write_config(tmp_path / "c.cfg")
    rc = main(["train", "--config", str(cfg), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m.ldwm")])
    assert rc == EXIT_IO


def test_gen_data_is_idempotent(workspace, tmp_path):
    assert main(["gen-data", "--episodes", "3", "--seed", "4", "--out", str(tmp_path / "again")]) == EXIT_OK
    first = sorted(p.name for p in (workspace / "data").glob("*.ldwm"))
    assert first == sorted(p.name for p in (tmp_path / "again").glob("*.ldwm"))
    for name in first + ["manifest.json"]:
        assert (workspace / "data" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_train_writes_checkpoint_log_and_config(workspace, tmp_path):
    assert (workspace / "wm.csv").exists() and (workspace / "wm.cfg").exists()
    rc = main(["train", "--config", str(workspace / "wm.cfg"), "--data", str(workspace / "data"),
               "--out", str(tmp_path / "wm.ldwm"), "--deterministic"])
    assert rc == EXIT_OK
    assert (tmp_path / "wm.ldwm").read_bytes() == (workspace / "wm.ldwm").read_bytes()
    # flags override the file
    rc = main(["train", "--config", str(workspace / "wm.cfg"), "--data", str(workspace / "data"),
               "--out", str(tmp_path / "s.ldwm"), "--steps", "1"])
    assert rc == EXIT_OK
    assert "total_steps=1\n" in (tmp_path / "s.cfg").read_text()


def test_eval_requires_exactly_one_policy_source(tmp_path, workspace):
    assert main(["eval", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["eval", "--expert", "--ckpt", str(workspace / "wm.ldwm"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_eval_expert_report_and_plot(tmp_path, capsys):
    assert main(["eval", "--expert", "--routes", "1", "--plots", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert "route_completion" in capsys.readouterr().out
    assert (tmp_path / "eval.csv").exists() and (tmp_path / "eval.txt").exists()
    assert len(list(tmp_path.glob("eval_route_*.svg"))) == 1


def test_disturb_policy_reports_recovery(workspace, tmp_path, capsys):
    rc = main(["disturb", "--ckpt", str(workspace / "wm.ldwm"), "--routes", "1", "--plots", "1",
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert "recovery_rate" in (tmp_path / "disturb.txt").read_text()
    assert len(list(tmp_path.glob("disturb_route_*.svg"))) == 1


def test_compare_refuses_mismatched_configs(workspace, tmp_path, capsys):
    cfg = write_config(tmp_path / "other.cfg", learning_rate=1e-2)
    assert main(["train", "--config", str(cfg), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "bc_other.ldwm"), "--bc"]) == EXIT_OK
    rc = main(["compare", "--wm", str(workspace / "wm.ldwm"), "--bc", str(tmp_path / "bc_other.ldwm"),
               "--routes", "1", "--out", str(tmp_path / "cmp")])
    assert rc == EXIT_INVARIANT
    assert "learning_rate" in capsys.readouterr().err


def test_compare_emits_table_and_plots(workspace, tmp_path, capsys):
    rc = main(["compare", "--wm", str(workspace / "wm.ldwm"), "--bc", str(workspace / "bc.ldwm"),
               "--routes", "1", "--plots", "1", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "WM" in text and "BC" in text and "paper ref" in text
    assert (tmp_path / "compare.csv").exists()
    assert len(list(tmp_path.glob("compare_route_*.svg"))) == 1


def test_imagine_writes_frames_and_checks_invariants(workspace, tmp_path, capsys):
    rc = main(["imagine", "--ckpt", str(workspace / "wm.ldwm"), "--data", str(workspace / "data"),
               "--episodes", "2", "--zero-noise", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["horizon"] == 11 and summary["episodes"] == 2
    assert summary["max_softmax_sum_error"] <= 1e-6 and summary["raster_in_unit_range"]
    assert sorted(p.name for p in tmp_path.glob("*.ppm")) == ["imagined_00.ppm", "imagined_01.ppm"]


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "ldwm.cli", "gen-data", "--episodes", "0", "--out", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "--episodes must be at least 1" in proc.stderr
