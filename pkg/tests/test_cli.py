"""CLI behavior: verbs, overrides, exit codes, console output."""
import pytest

from gridplan import cli
from gridplan.trainer import TrainingDiverged

CLASSICAL_INI = """
[experiment]
mode = eval-static
seeds = 0,1
episodes = 2
algos = astar,bfs
[map]
family = simple
width = 8
height = 8
"""


def write_cfg(tmp_path, text=CLASSICAL_INI, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestParser:
    def test_verbs_present(self):
        parser = cli.build_parser()
        sub = next(a for a in parser._actions
                   if isinstance(a, cli.argparse._SubParsersAction))
        assert set(sub.choices) == {"train", "eval", "ablate", "sweep",
                                    "plot-data"}

    def test_config_flag_required(self):
        with pytest.raises(SystemExit):
            cli.build_parser().parse_args(["eval"])

    def test_plot_data_takes_report(self):
        args = cli.build_parser().parse_args(["plot-data", "--report", "r"])
        assert args.report == "r"


class TestExitCodes:
    def test_happy_path_eval(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        code = cli.main(["eval", "-c", cfg,
                         "--output-dir", str(tmp_path / "out")])
        out = capsys.readouterr().out
        assert code == cli.EXIT_OK
        assert "# resolved configuration" in out
        assert "[experiment]" in out
        assert f"report written to {tmp_path / 'out'}" in out
        assert "astar: mean SR 1.000" in out
        assert (tmp_path / "out" / "episodes.csv").exists()

    def test_quiet_suppresses_echo(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        code = cli.main(["eval", "-c", cfg, "--quiet",
                         "--output-dir", str(tmp_path / "out")])
        out = capsys.readouterr().out
        assert code == cli.EXIT_OK
        assert "# resolved configuration" not in out
        assert "report written to" in out

    def test_verb_mode_mismatch_is_config_error(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        code = cli.main(["sweep", "-c", cfg])
        err = capsys.readouterr().err
        assert code == cli.EXIT_CONFIG
        assert "cannot run under 'sweep'" in err

    def test_bad_config_file(self, tmp_path, capsys):
        bad = CLASSICAL_INI.replace("episodes = 2", "episodes = -2")
        cfg = write_cfg(tmp_path, bad)
        code = cli.main(["eval", "-c", cfg])
        err = capsys.readouterr().err
        assert code == cli.EXIT_CONFIG
        assert "config error:" in err and "episodes" in err

    def test_missing_config_file(self, tmp_path, capsys):
        code = cli.main(["eval", "-c", str(tmp_path / "absent.ini")])
        assert code == cli.EXIT_CONFIG

    def test_divergence_exit_code(self, tmp_path, capsys, monkeypatch):
        def boom(cfg):
            raise TrainingDiverged("non-finite loss at step 7")
        monkeypatch.setattr(cli, "run_suite", boom)
        cfg = write_cfg(tmp_path)
        code = cli.main(["eval", "-c", cfg, "--quiet"])
        err = capsys.readouterr().err
        assert code == cli.EXIT_DIVERGED
        assert "training diverged" in err

    def test_runtime_exit_code(self, tmp_path, capsys, monkeypatch):
        def boom(cfg):
            raise OSError("disk full")
        monkeypatch.setattr(cli, "run_suite", boom)
        cfg = write_cfg(tmp_path)
        code = cli.main(["eval", "-c", cfg, "--quiet"])
        err = capsys.readouterr().err
        assert code == cli.EXIT_RUNTIME
        assert "runtime error: OSError" in err


class TestOverrides:
    def test_seed_and_episode_overrides_reach_config(self, tmp_path, capsys,
                                                     monkeypatch):
        seen = {}

        def record(cfg):
            seen["cfg"] = cfg
            return {"summaries": {}}
        monkeypatch.setattr(cli, "run_suite", record)
        cfg = write_cfg(tmp_path)
        code = cli.main(["eval", "-c", cfg, "--seeds", "7,8,9",
                         "--episodes", "5", "--workers", "3", "--quiet",
                         "--output-dir", str(tmp_path / "o")])
        assert code == cli.EXIT_OK
        assert seen["cfg"].seeds == [7, 8, 9]
        assert seen["cfg"].episodes == 5
        assert seen["cfg"].workers == 3
        assert seen["cfg"].output_dir == str(tmp_path / "o")

    def test_override_visible_in_echo(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setattr(cli, "run_suite",
                            lambda cfg: {"summaries": {}})
        cfg = write_cfg(tmp_path)
        cli.main(["eval", "-c", cfg, "--seeds", "4,5"])
        assert "seeds = 4,5" in capsys.readouterr().out


class TestPlotData:
    def test_missing_report_dir(self, tmp_path, capsys):
        code = cli.main(["plot-data", "--report", str(tmp_path / "nope")])
        assert code == cli.EXIT_RUNTIME
        assert "error:" in capsys.readouterr().err

    def test_emits_figures_from_report(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path)
        assert cli.main(["eval", "-c", cfg, "--quiet",
                         "--output-dir", str(tmp_path / "out")]) == 0
        code = cli.main(["plot-data", "--report", str(tmp_path / "out")])
        out = capsys.readouterr().out
        assert code == cli.EXIT_OK
        assert "fig_metrics_by_algo.csv" in out

    def test_module_entry_point(self, tmp_path):
        import subprocess
        import sys
        cfg = write_cfg(tmp_path)
        proc = subprocess.run(
            [sys.executable, "-m", "gridplan", "eval", "-c", cfg, "--quiet",
             "--output-dir", str(tmp_path / "out"), "--episodes", "1",
             "--seeds", "0,1"],
            capture_output=True, text=True, timeout=120)
        assert proc.returncode == 0, proc.stderr
        assert "report written to" in proc.stdout
