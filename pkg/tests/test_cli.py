import csv
import hashlib
import re
from pathlib import Path

import numpy as np
import pytest

from hiermil import cli
from hiermil.train import load_checkpoint


def run_cli(argv, capsys):
    try:
        code = cli.main(argv)
    except SystemExit as exc:           # argparse usage errors
        code = exc.code
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("clids")
    code = cli.main(["gen-data", "--out", str(out), "--n", "25", "--seed", "11"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def cli_run(cli_dataset, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("clirun")
    code = cli.main(["train", "--data", str(cli_dataset / "manifest.txt"),
                     "--model", "hamil", "--M", "3", "--K", "6", "--patch", "16", "16",
                     "--epochs", "2", "--patience", "1", "--seed", "2",
                     "--out", str(run_dir), "--quiet", "--force"])
    assert code == 0
    return run_dir


# --- gen-data -------------------------------------------------------------------

def test_gen_data_split_counts(cli_dataset, capsys):
    code, out, _ = run_cli(["gen-data", "--out", str(cli_dataset), "--n", "25",
                            "--seed", "11", "--force"], capsys)
    assert code == 0
    assert "train 16 / val 4 / test 5" in out


def test_gen_data_same_flags_same_digest(tmp_path, capsys):
    args = ["gen-data", "--n", "8", "--seed", "4"]
    code1, out1, _ = run_cli(args + ["--out", str(tmp_path / "a")], capsys)
    code2, out2, _ = run_cli(args + ["--out", str(tmp_path / "b")], capsys)
    assert code1 == code2 == 0
    digest = lambda s: re.search(r"manifest sha256: (\w+)", s).group(1)
    assert digest(out1) == digest(out2)


def test_gen_data_refuses_overwrite_without_force(cli_dataset, capsys):
    code, _, err = run_cli(["gen-data", "--out", str(cli_dataset), "--n", "8"], capsys)
    assert code == 1
    assert "hiermil-error kind=ConfigurationError" in err


def test_gen_data_missing_out_usage_error(capsys):
    code, _, err = run_cli(["gen-data", "--n", "8"], capsys)
    assert code == 2


# --- train -----------------------------------------------------------------------

def test_train_echoes_defaults(cli_dataset, tmp_path, capsys):
    # default M/K/lr echo; tiny epochs so the run stays fast
    code, out, _ = run_cli(
        ["train", "--data", str(cli_dataset / "manifest.txt"), "--K", "6",
         "--epochs", "2", "--patience", "1", "--out", str(tmp_path / "r"),
         "--quiet"], capsys)
    assert code == 0
    assert "model=hamil M=6 K=6 lr=0.0001 epochs=2 patience=1" in out


def test_train_run_directory_contents(cli_run):
    assert (cli_run / "config.txt").exists()
    assert (cli_run / "history.csv").exists()
    assert (cli_run / "best.ckpt").exists()
    assert (cli_run / "last.ckpt").exists()      # loadable after interruption
    ckpt = load_checkpoint(cli_run / "last.ckpt")
    assert ckpt.family == "hamil"
    with (cli_run / "history.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "subbag_loss", "bag_loss",
                             "val_auroc", "learning_rate"]


def test_train_refuses_overwrite(cli_dataset, cli_run, capsys):
    code, _, err = run_cli(["train", "--data", str(cli_dataset / "manifest.txt"),
                            "--epochs", "2", "--patience", "1",
                            "--out", str(cli_run)], capsys)
    assert code == 1 and "ConfigurationError" in err


def test_train_model_dispatch_abmil(cli_dataset, tmp_path, capsys):
    code, _, _ = run_cli(["train", "--data", str(cli_dataset / "manifest.txt"),
                          "--model", "abmil", "--M", "2", "--K", "4",
                          "--epochs", "2", "--patience", "1",
                          "--out", str(tmp_path / "ab"), "--quiet"], capsys)
    assert code == 0
    assert load_checkpoint(tmp_path / "ab" / "best.ckpt").family == "abmil"


def test_train_invalid_model_usage_error(cli_dataset, tmp_path, capsys):
    code, _, _ = run_cli(["train", "--data", str(cli_dataset / "manifest.txt"),
                          "--model", "transformer", "--out", str(tmp_path / "x")], capsys)
    assert code == 2


def test_train_config_file_flags_override(cli_dataset, tmp_path, capsys):
    cfgfile = tmp_path / "train.cfg"
    cfgfile.write_text("epochs: 2\npatience: 1\nM: 2\nK: 5\nseed: 9\n")
    code, out, _ = run_cli(
        ["train", "--data", str(cli_dataset / "manifest.txt"),
         "--config", str(cfgfile), "--K", "4", "--out", str(tmp_path / "r"),
         "--quiet"], capsys)
    assert code == 0
    assert "M=2 K=4" in out          # file gave M, the flag overrode K
    assert "seed=9" in out


# --- eval ----------------------------------------------------------------------------

def test_eval_prints_mean_std_rows(cli_dataset, cli_run, tmp_path, capsys):
    csv_path = tmp_path / "metrics.csv"
    code, out, _ = run_cli(["eval", "--ckpt", str(cli_run / "best.ckpt"),
                            "--data", str(cli_dataset / "manifest.txt"),
                            "--split", "test", "--csv", str(csv_path)], capsys)
    assert code == 0
    assert re.search(r"accuracy\s+\d\.\d{3} ± \d\.\d{3}", out)
    with csv_path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["split"] == "test"
    assert 0.0 <= float(rows[0]["auroc"]) <= 1.0


def test_eval_repeats_one_zero_std(cli_dataset, cli_run, capsys):
    code, out, _ = run_cli(["eval", "--ckpt", str(cli_run / "best.ckpt"),
                            "--data", str(cli_dataset / "manifest.txt"),
                            "--split", "test", "--repeats", "1", "--quiet"], capsys)
    assert code == 0
    assert out.count("± 0.000") >= 3


# --- heatmap ------------------------------------------------------------------------------

def test_heatmap_outputs_and_max_location(cli_dataset, cli_run, tmp_path, capsys):
    from hiermil.data import load_manifest
    manifest = load_manifest(cli_dataset / "manifest.txt")
    vid = manifest.entries[0].id
    out_dir = tmp_path / "maps"
    code, out, _ = run_cli(["heatmap", "--ckpt", str(cli_run / "best.ckpt"),
                            "--data", str(cli_dataset / "manifest.txt"),
                            "--volume-id", vid, "--out", str(out_dir),
                            "--seed", "3"], capsys)
    assert code == 0
    pgms = list(out_dir.glob("*.pgm"))
    assert len(pgms) == 3                     # one per sampled sub-bag (M=3)
    match = re.search(r"max-attention patch: slice (\d+) rows (\d+):(\d+) cols (\d+):(\d+)", out)
    assert match
    # printed location matches the argmax over the patch CSV
    with (out_dir / f"{vid}_patches.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    best = max(rows, key=lambda r: float(r["instance_attention"]) * float(r["subbag_attention"]))
    assert (int(match.group(1)), int(match.group(2)), int(match.group(4))) == \
        (int(best["slice"]), int(best["row_offset"]), int(best["col_offset"]))


def test_heatmap_deterministic_given_seed(cli_dataset, cli_run, tmp_path, capsys):
    from hiermil.data import load_manifest
    vid = load_manifest(cli_dataset / "manifest.txt").entries[1].id
    outs = []
    for sub in ("m1", "m2"):
        out_dir = tmp_path / sub
        code, out, _ = run_cli(["heatmap", "--ckpt", str(cli_run / "best.ckpt"),
                                "--data", str(cli_dataset / "manifest.txt"),
                                "--volume-id", vid, "--out", str(out_dir),
                                "--seed", "5"], capsys)
        assert code == 0
        outs.append(sorted((p.name, hashlib.sha256(p.read_bytes()).hexdigest())
                           for p in out_dir.glob("*")))
    assert outs[0] == outs[1]


def test_heatmap_unknown_volume(cli_dataset, cli_run, tmp_path, capsys):
    code, _, err = run_cli(["heatmap", "--ckpt", str(cli_run / "best.ckpt"),
                            "--data", str(cli_dataset / "manifest.txt"),
                            "--volume-id", "vol9999", "--out", str(tmp_path / "x")], capsys)
    assert code == 1 and "NotFoundError" in err


# --- flops -----------------------------------------------------------------------------------

def test_flops_report_and_ratio(capsys):
    code, out, _ = run_cli(["flops"], capsys)
    assert code == 0
    assert "1 MAC = 2 FLOPs" in out
    match = re.search(r"supervised3d / hamil = ([\d.]+)", out)
    assert match and float(match.group(1)) > 50


def test_flops_k_doubling(capsys):
    def hamil_total(k):
        code, out, _ = run_cli(["flops", "--model", "hamil", "--K", str(k)], capsys)
        assert code == 0
        return float(re.search(r"hamil\s+([\d.e+]+) FLOPs", out).group(1))
    assert hamil_total(120) / hamil_total(60) == pytest.approx(2.0, rel=0.01)


# --- determinism across invocations ------------------------------------------------------------

def test_cmd_train_byte_identical_runs(cli_dataset, tmp_path, capsys):
    args = ["train", "--data", str(cli_dataset / "manifest.txt"), "--M", "2",
            "--K", "4", "--epochs", "3", "--patience", "2", "--seed", "8",
            "--precision", "float64", "--quiet"]
    code1, _, _ = run_cli(args + ["--out", str(tmp_path / "r1")], capsys)
    code2, _, _ = run_cli(args + ["--out", str(tmp_path / "r2")], capsys)
    assert code1 == code2 == 0
    assert (tmp_path / "r1" / "history.csv").read_bytes() == \
        (tmp_path / "r2" / "history.csv").read_bytes()
    assert (tmp_path / "r1" / "best.ckpt").read_bytes() == \
        (tmp_path / "r2" / "best.ckpt").read_bytes()
