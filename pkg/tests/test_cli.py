import subprocess
import sys

import pytest

from passion.cli import main
from passion.data import container_header, load_container
from passion.presence import load_manifest, missing_rates


def test_gen_presence_stdout(capsys):
    assert main(["gen-presence", "--targets", "0.2,0.5", "--n", "10", "--seed", "4"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "10 2 4"


def test_gen_presence_file(tmp_path):
    path = tmp_path / "p.txt"
    assert main(["gen-presence", "--targets", "0.2,0.5,0.8", "--n", "100", "--out", str(path)]) == 0
    C = load_manifest(path)
    assert C.n_samples == 100 and abs(missing_rates(C)[2] - 0.8) <= 0.05


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-presence", "--targets", "0.2,x", "--n", "5"],
        ["gen-presence", "--targets", "1.5", "--n", "5"],
        ["train", "--config", "/nonexistent.cfg"],
        ["evaluate", "--checkpoint", "/nonexistent.npz", "--data", "/nonexistent.pass"],
    ],
)
def test_errors_are_one_line(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_gen_data_then_train_then_evaluate(tmp_path, capsys):
    spec = tmp_path / "data.cfg"
    spec.write_text("n_samples = 4\nn_modalities = 2\nn_classes = 3\nshape = 40x40\nprofiles = 1|1,2\nseed = 5\nmissing_rates = 0.25, 0.5\n")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    manifest = (tmp_path / "d" / "manifest.txt").read_text()
    assert "presence = " in manifest and "profiles = 1|1,2" in manifest
    train = load_container(tmp_path / "d" / "data.pass")
    assert any(len(s.images) < 2 for s in train)

    spec.write_text("n_samples = 2\nn_modalities = 2\nshape = 40x40\nprofiles = 1|1,2\nseed = 6\n")
    assert main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "t")]) == 0
    assert container_header(tmp_path / "t" / "data.pass")["records"] == 2

    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"data_path = {tmp_path / 'd' / 'data.pass'}\ntest_path = {tmp_path / 't' / 'data.pass'}\n"
        "n_modalities = 2\nmissing_rates = 0.25,0.5\nshape = 40x40\nepochs = 1\nwidth = 4\ndepth = 3\n"
    )
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / "run")]) == 0
    assert "seed = 3" in (tmp_path / "run" / "resolved_config.txt").read_text()
    assert (tmp_path / "run" / "rp_curves.png").exists()

    assert main(["evaluate", "--checkpoint", str(tmp_path / "run" / "checkpoint.npz"),
                 "--data", str(tmp_path / "t" / "data.pass"), "--out", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "eval_report.csv").read_text() == (tmp_path / "run" / "eval_report.csv").read_text()
    assert (tmp_path / "ev" / "dice_by_subset.png").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "passion", "gen-presence", "--targets", "0", "--n", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("2 1 0")
    bad = subprocess.run([sys.executable, "-m", "passion", "nope"], capture_output=True, text=True)
    assert bad.returncode == 2
