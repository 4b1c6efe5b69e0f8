import os

import numpy as np
import pytest
from PIL import Image

from conftest import toy_domains
from uidkat.cli import cli, parse_config_file

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")


def _write_images(folder, images):
    os.makedirs(folder, exist_ok=True)
    for i, img in enumerate(images):
        data = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(data).save(os.path.join(folder, f"img{i:02d}.png"))


@pytest.fixture(scope="module")
def toy_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    hazy, clean = toy_domains(0, 4, size=64)
    _write_images(root / "hazy", hazy)
    _write_images(root / "clean", clean)
    return root


def test_unknown_subcommand_is_usage_error(capsys):
    assert cli(["frobnicate"]) == 1


def test_no_subcommand_prints_help(capsys):
    assert cli([]) == 1
    assert "COMMAND" in capsys.readouterr().out


def test_help_per_subcommand():
    for cmd in ["train", "infer", "eval", "audit", "gradcheck",
                "synth-haze", "bench"]:
        assert cli([cmd, "--help"]) == 0


def test_parse_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("variant = T\nepochs=4  # short\n\n# comment\nlr=1e-3\n")
    assert parse_config_file(cfg) == {"variant": "T", "epochs": "4",
                                      "lr": "1e-3"}


def test_parse_config_file_rejects_garbage(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("no equals sign\n")
    with pytest.raises(ValueError):
        parse_config_file(cfg)


def test_audit_json(capsys):
    assert cli(["audit", "--variant", "T", "--input-size", "64",
                "--json"]) == 0
    import json
    report = json.loads(capsys.readouterr().out)
    assert report["variant"] == "T"
    assert report["total_params"] == sum(report["param_breakdown"].values())


def test_gradcheck_passes(capsys):
    assert cli(["gradcheck", "--seed", "7"]) == 0


def test_synth_haze_reproducible(toy_dirs, tmp_path):
    out1, out2 = tmp_path / "h1", tmp_path / "h2"
    assert cli(["synth-haze", "--clean", str(toy_dirs / "clean"),
                "--out", str(out1), "--seed", "3"]) == 0
    assert cli(["synth-haze", "--clean", str(toy_dirs / "clean"),
                "--out", str(out2), "--seed", "3"]) == 0
    for name in sorted(os.listdir(out1)):
        a = (out1 / name).read_bytes()
        b = (out2 / name).read_bytes()
        assert a == b


def test_train_infer_eval_pipeline(toy_dirs, tmp_path, capsys):
    run = tmp_path / "run"
    config = tmp_path / "train.cfg"
    config.write_text("variant=T\nepochs=1\ndecay_start_epoch=1\n")
    # CLI flag overrides the config file value
    rc = cli(["train", "--hazy", str(toy_dirs / "hazy"),
              "--clean", str(toy_dirs / "clean"), "--out", str(run),
              "--config", str(config), "--image-size", "64",
              "--epochs", "2", "--decay-start", "1", "--locations", "8",
              "--seed", "0"])
    assert rc == 0
    log = (run / "train_log.csv").read_text().splitlines()
    assert log[0] == "step,epoch,lr,adv_g,ide,pc,total_g,adv_d"
    assert len(log) == 1 + 2 * 4

    pred = tmp_path / "pred"
    assert cli(["infer", "--checkpoint", str(run / "checkpoint"),
                "--input", str(toy_dirs / "hazy"), "--out", str(pred)]) == 0
    assert len(os.listdir(pred)) == 4
    # idempotent: re-running produces byte-identical outputs
    before = {n: (pred / n).read_bytes() for n in os.listdir(pred)}
    assert cli(["infer", "--checkpoint", str(run / "checkpoint"),
                "--input", str(toy_dirs / "hazy"), "--out", str(pred)]) == 0
    assert {n: (pred / n).read_bytes() for n in os.listdir(pred)} == before

    csv = tmp_path / "metrics.csv"
    assert cli(["eval", "--pred", str(pred), "--gt", str(toy_dirs / "clean"),
                "--csv", str(csv)]) == 0
    assert csv.read_text().startswith("name,psnr_db,ssim")


def test_infer_pads_odd_sizes(toy_dirs, tmp_path):
    run = tmp_path / "run"
    rc = cli(["train", "--hazy", str(toy_dirs / "hazy"),
              "--clean", str(toy_dirs / "clean"), "--out", str(run),
              "--variant", "T", "--image-size", "64", "--epochs", "2",
              "--decay-start", "1", "--locations", "8", "--seed", "0"])
    assert rc == 0
    odd = tmp_path / "odd"
    odd.mkdir()
    img = np.rint(np.random.default_rng(0).uniform(0, 1, (70, 50, 3)) * 255)
    Image.fromarray(img.astype(np.uint8)).save(odd / "odd.png")
    pred = tmp_path / "odd_out"
    assert cli(["infer", "--checkpoint", str(run / "checkpoint"),
                "--input", str(odd), "--out", str(pred)]) == 0
    with Image.open(pred / "odd.png") as out:
        assert out.size == (50, 70)


def test_infer_rejects_oversize(toy_dirs, tmp_path):
    run = tmp_path / "run"
    cli(["train", "--hazy", str(toy_dirs / "hazy"),
         "--clean", str(toy_dirs / "clean"), "--out", str(run),
         "--variant", "T", "--image-size", "64", "--epochs", "2",
         "--decay-start", "1", "--locations", "8", "--seed", "0"])
    big = tmp_path / "big"
    big.mkdir()
    Image.new("RGB", (80, 80)).save(big / "big.png")
    rc = cli(["infer", "--checkpoint", str(run / "checkpoint"),
              "--input", str(big), "--out", str(tmp_path / "o"),
              "--max-size", "64"])
    assert rc == 2


def test_missing_checkpoint_is_runtime_error(tmp_path):
    assert cli(["infer", "--checkpoint", str(tmp_path / "nope"),
                "--input", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


def test_bench_runs(capsys):
    assert cli(["bench", "--variant", "T", "--input-size", "32",
                "--repeats", "2", "--warmup", "0"]) == 0
    out = capsys.readouterr().out
    assert "median" in out and "numpy" in out
