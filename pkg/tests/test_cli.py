import json
import shutil
from pathlib import Path

import pytest

from tofcal import cli

pytestmark = pytest.mark.filterwarnings("ignore:.*under-populated", "ignore:.*channel combinations below")

TINY = Path(__file__).parent / "data" / "tiny.cfg"
STAGES = ("simulate", "preprocess", "calibrate", "train", "evaluate", "explain")


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    for stage in STAGES:
        assert run(stage, "--config", TINY, "--seed", 3, "--threads", 1, "--out", out) == 0
    return out


def test_all_stages_write_summaries(workdir):
    for stage in STAGES:
        doc = json.loads((workdir / f"{stage}_summary.json").read_text())
        assert doc["format"] == f"tofcal-{stage}-summary"
    train = json.loads((workdir / "train_summary.json").read_text())
    assert len(train["grid"]) == 4
    assert (workdir / "models" / "best.json").exists()
    assert (workdir / "explain" / "importance.csv").exists()


def test_explain_local_accuracy_recorded(workdir):
    doc = json.loads((workdir / "explain_summary.json").read_text())
    assert doc["max_local_accuracy_gap_ps"] <= 1e-9
    assert {r["group"] for r in doc["group_importance"]} == {"F_so", "F_T_s", "F_T_o", "F_E_s", "F_E_o",
                                                             "F_Pos_s", "F_Pos_o"}


def test_report(workdir, capsys):
    assert run("report", "--config", TINY, "--out", workdir) == 0
    text = capsys.readouterr().out
    assert "## CTR (ps)" in text and "## Linearity" in text
    assert (workdir / "report.md").read_text() == text


def test_energy_window_flag(workdir, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(workdir, out)
    assert run("evaluate", "--config", TINY, "--out", out, "--energy-window", "300,700") == 0
    doc = json.loads((out / "evaluate_summary.json").read_text())
    assert {r["window"] for r in doc["ctr"]} == {"300-700"}
    assert run("evaluate", "--config", TINY, "--out", out, "--energy-window", "700,300") == 2


def test_missing_input_exit_code(tmp_path, capsys):
    assert run("calibrate", "--config", TINY, "--out", tmp_path / "empty") == 3
    assert "missing input" in capsys.readouterr().err


def test_config_errors_exit_code(tmp_path, capsys):
    assert run("simulate", "--set", "skew.nope=1 ps", "--out", tmp_path) == 2
    assert "unknown config key 'skew.nope'" in capsys.readouterr().err
    assert run("simulate", "--threads", 0, "--out", tmp_path) == 2
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--no-such-flag")
    assert exc.value.code == 2


def test_config_command_prints_effective_values(capsys):
    assert run("config", "--config", TINY, "--set", "run.seed=9") == 0
    text = capsys.readouterr().out
    assert "run.seed = 9" in text
    assert "boost.depths = 4, 6" in text
