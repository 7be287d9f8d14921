import csv
import subprocess
import sys

import pytest
import yaml

from conftest import TINY_CONFIG
from modnet.cli import build_parser, main
from modnet.dataset import load

SUBCOMMANDS = {
    "gen-data": ["--out", "--seed", "--grid", "--size"],
    "train": ["--config", "--data", "--out", "--resume"],
    "eval": ["--checkpoint", "--data", "--out"],
    "render-identities": ["--checkpoint", "--out"],
    "report": ["--run-dir"],
}


def exit_code(argv):
    """Run the CLI in-process; argparse usage errors surface as SystemExit."""
    try:
        return main(argv)
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({**TINY_CONFIG, "steps": 10, "checkpoint_interval": 5}))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_data):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.yaml"
    cfg.write_text(yaml.safe_dump({**TINY_CONFIG, "steps": 4}))
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--data", str(tiny_data), "--out", str(run)]) == 0
    return run


@pytest.mark.parametrize("sub", sorted(SUBCOMMANDS))
def test_help_lists_flags(sub, capsys):
    assert exit_code([sub, "--help"]) == 0
    out = capsys.readouterr().out
    for flag in SUBCOMMANDS[sub]:
        assert flag in out


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "modnet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in SUBCOMMANDS:
        assert sub in proc.stdout


def test_unknown_flag_rejected(tmp_path):
    assert exit_code(["gen-data", "--out", str(tmp_path / "x.bin"), "--colour", "red"]) == 2
    assert exit_code(["frobnicate"]) == 2


# -- gen-data -------------------------------------------------------------------

def test_gen_data_default_grid(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d.bin")]) == 0
    assert len(load(tmp_path / "d.bin")) == 4608
    assert "4608 images" in capsys.readouterr().out


def test_gen_data_same_seed_identical(tmp_path):
    for name in ("a.bin", "b.bin"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--seed", "3", "--grid", "2,2,2,1,2"]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert load(tmp_path / "a.bin").manifest.seed == 3


@pytest.mark.parametrize("grid", ["4,6,6", "a,b,c,d,e", "4,6,0,4,8", "5,1,1,1,1"])
def test_gen_data_bad_grid(tmp_path, grid, capsys):
    assert exit_code(["gen-data", "--out", str(tmp_path / "d.bin"), "--grid", grid]) == 2
    assert "--grid" in capsys.readouterr().err
    assert not (tmp_path / "d.bin").exists()


def test_gen_data_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MODNET_SEED", "9")
    assert main(["gen-data", "--out", str(tmp_path / "d.bin"), "--grid", "1,1,1,1,2"]) == 0
    assert load(tmp_path / "d.bin").manifest.seed == 9


# -- train ----------------------------------------------------------------------

def test_train_smoke_and_resume(tmp_path, tiny_data, config_file, capsys):
    run = tmp_path / "run"
    argv = ["train", "--config", str(config_file), "--data", str(tiny_data), "--out", str(run)]
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert "non-finite aborted steps: 0" in out
    assert len((run / "metrics.jsonl").read_text().splitlines()) == 10
    assert (run / "config.yaml").exists()

    cfg = yaml.safe_load(config_file.read_text())
    cfg["steps"] = 15
    config_file.write_text(yaml.safe_dump(cfg))
    assert main(argv + ["--resume"]) == 0
    lines = (run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 15 and '"step": 11' in lines[10]
    assert (run / "checkpoints" / "ckpt_0000015.zip").exists()


def test_train_missing_inputs(tmp_path, tiny_data, config_file):
    base = ["--out", str(tmp_path / "run")]
    assert exit_code(["train", "--config", str(tmp_path / "nope.yaml"), "--data", str(tiny_data)] + base) == 2
    assert exit_code(["train", "--config", str(config_file), "--data", str(tmp_path / "nope.bin")] + base) == 2
    assert exit_code(["train", "--config", str(config_file), "--data", str(tiny_data), "--resume"] + base) == 2


def test_train_bad_config_key(tmp_path, tiny_data):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("m: 2\nbogus: 1\n")
    assert exit_code(["train", "--config", str(cfg), "--data", str(tiny_data), "--out", str(tmp_path / "r")]) == 2


def test_train_seed_from_environment(tmp_path, tiny_data, config_file, monkeypatch):
    monkeypatch.setenv("MODNET_SEED", "21")
    cfg = yaml.safe_load(config_file.read_text())
    config_file.write_text(yaml.safe_dump({**cfg, "steps": 1}))
    assert main(["train", "--config", str(config_file), "--data", str(tiny_data), "--out", str(tmp_path / "r")]) == 0
    assert yaml.safe_load((tmp_path / "r" / "config.yaml").read_text())["seed"] == 21


# -- eval / render / report -------------------------------------------------------

def test_eval_writes_table(tmp_path, trained, tiny_data):
    ckpt = trained / "checkpoints" / "ckpt_0000004.zip"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tiny_data), "--out", str(tmp_path / "e1")]) == 0
    rows = list(csv.reader((tmp_path / "e1" / "routing_table.csv").open()))
    assert rows[0] == ["shape", "m_1", "m_2"]
    assert len(rows) == 1 + 2
    for row in rows[1:]:
        assert abs(sum(float(v) for v in row[1:]) - 100.0) <= 0.01
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tiny_data), "--out", str(tmp_path / "e2")]) == 0
    for p in (tmp_path / "e1").rglob("*"):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "e2" / p.relative_to(tmp_path / "e1")).read_bytes(), p.name


def test_render_identities(tmp_path, trained):
    ckpt = trained / "checkpoints" / "ckpt_0000004.zip"
    assert main(["render-identities", "--checkpoint", str(ckpt), "--out", str(tmp_path / "r")]) == 0
    names = sorted(p.name for p in (tmp_path / "r").iterdir())
    assert names == ["identities_grid.png", "identity_1.png", "identity_2.png"]


def test_corrupt_or_missing_checkpoint(tmp_path, tiny_data, capsys):
    bad = tmp_path / "bad.zip"
    bad.write_bytes(b"not a zip")
    assert exit_code(["render-identities", "--checkpoint", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert "cannot read checkpoint" in capsys.readouterr().err
    assert exit_code(["eval", "--checkpoint", str(tmp_path / "none.zip"), "--data", str(tiny_data),
                      "--out", str(tmp_path / "e")]) == 2


def test_report_on_run_dir(trained, tiny_data):
    ckpt = trained / "checkpoints" / "ckpt_0000004.zip"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(tiny_data), "--out", str(trained / "eval")]) == 0
    assert main(["report", "--run-dir", str(trained)]) == 0
    text = (trained / "report.md").read_text()
    assert "## Omitted" not in text and "## Module collapse" in text
    first = text.split("## Loss curves", 1)[1]
    assert main(["report", "--run-dir", str(trained)]) == 0
    assert (trained / "report.md").read_text().split("## Loss curves", 1)[1] == first


def test_report_missing_run_dir(tmp_path):
    assert exit_code(["report", "--run-dir", str(tmp_path / "nope")]) == 2


def test_parser_has_all_subcommands():
    actions = [a for a in build_parser()._actions if a.dest == "command"]
    assert set(actions[0].choices) == set(SUBCOMMANDS)
