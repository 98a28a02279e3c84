import json
import subprocess
import sys

import pytest

from stkd.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

TINY = """\
arch.backbone = tiny
arch.aspp_channels = 16
arch.aspp_rates = 1, 2, 3
arch.low_channels = 16
arch.high_channels = 32
arch.unit_channels = 16
train.crop = 64
train.batch_size = 2
train.checkpoint_every = 1000
"""


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--stage", "3", "--data", "x", "--out", "y"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


def test_bad_config_is_usage_error(tmp_path, synth_root, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("arch.bogus = 1\n")
    code = main(["train", "--stage", "1", "--config", str(cfg), "--data", str(synth_root), "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "arch.bogus" in capsys.readouterr().err


def test_train_infer_eval_round(tiny_file, synth_root, tmp_path, capsys):
    out = tmp_path / "run"
    base = ["--config", str(tiny_file), "--data", str(synth_root), "--out", str(out), "--max-iter", "3"]
    assert main(["train", "--stage", "1", *base]) == EXIT_OK
    assert (out / "stage1_final.stkd").is_file()
    assert main(["train", "--stage", "2", *base]) == EXIT_OK
    init = json.loads((out / "stage2_init.json").read_text())
    assert init["fresh"] and all(k.startswith("encoder.") for k in init["fresh"])
    assert len((out / "loss_stage2.tsv").read_text().splitlines()) == 4

    maps = tmp_path / "maps"
    code = main(["infer", "--ckpt", str(out / "stage2_final.stkd"), "--data", str(synth_root), "--out", str(maps)])
    assert code == EXIT_OK
    assert len(list(maps.rglob("*.png"))) == 20
    assert json.loads((maps / "timing.json").read_text())["timing"]["frames"] == 20

    report = tmp_path / "eval.json"
    gt = synth_root / "Annotations" / "480p"
    assert main(["eval", "--pred", str(maps), "--gt", str(gt), "--out", str(report)]) == EXIT_OK
    rep = json.loads(report.read_text())
    assert rep["frame_count"] == 20 and 0 <= rep["f_max"] <= 1
    assert "conventions" in rep
    assert "max F" in capsys.readouterr().out


def test_stage2_without_stage1(tiny_file, synth_root, tmp_path, capsys):
    code = main(["train", "--stage", "2", "--config", str(tiny_file), "--data", str(synth_root), "--out", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "stage-1 checkpoint" in capsys.readouterr().err


def test_missing_checkpoint(synth_root, tmp_path):
    code = main(["infer", "--ckpt", str(tmp_path / "none.stkd"), "--data", str(synth_root), "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_missing_data(tiny_file, tmp_path):
    code = main(["train", "--stage", "1", "--config", str(tiny_file), "--data", str(tmp_path / "no"), "--out", str(tmp_path)])
    assert code == EXIT_DATA


def test_eval_unpaired(tmp_path, synth_root, capsys):
    gt = synth_root / "Annotations" / "480p"
    pred = tmp_path / "pred"
    (pred / "seq00").mkdir(parents=True)
    (pred / "seq00" / "00000.png").write_bytes((gt / "seq00" / "00000.png").read_bytes())
    code = main(["eval", "--pred", str(pred), "--gt", str(gt), "--out", str(tmp_path / "r.json")])
    assert code == EXIT_DATA
    assert "seq01/00009" in capsys.readouterr().err


def test_divergence_exit_code(tiny_file, synth_root, tmp_path, monkeypatch):
    import stkd.training as training

    real = training.spatial_loss

    def poisoned(*args, **kwargs):
        rep = real(*args, **kwargs)
        rep.total = rep.total * float("inf")
        return rep

    monkeypatch.setattr(training, "spatial_loss", poisoned)
    code = main(["train", "--stage", "1", "--config", str(tiny_file), "--data", str(synth_root), "--out", str(tmp_path), "--max-iter", "2"])
    assert code == EXIT_NUMERIC


def test_synth_and_module_entry(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "stkd", "synth", "--out", str(tmp_path / "s"), "--sequences", "2", "--frames", "3"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert len(list((tmp_path / "s" / "JPEGImages" / "480p").rglob("*.png"))) == 6
    help_text = subprocess.run([sys.executable, "-m", "stkd", "--help"], capture_output=True, text=True).stdout
    for cmd in ("train", "infer", "eval", "ablate"):
        assert cmd in help_text


def test_ablate_unknown_scenario(tiny_file, synth_root, tmp_path, capsys):
    code = main(["ablate", "--config", str(tiny_file), "--data", str(synth_root), "--out", str(tmp_path), "--scenarios", "bs,nope"])
    assert code == EXIT_USAGE
    assert "nope" in capsys.readouterr().err


def test_ablate_runs_two_scenarios(tiny_file, synth_root, tmp_path, capsys):
    cfg = tmp_path / "abl.cfg"
    cfg.write_text(TINY + "train.stage1.max_iter = 2\ntrain.stage2.max_iter = 2\n")
    code = main(["ablate", "--config", str(cfg), "--data", str(synth_root), "--out", str(tmp_path / "a"), "--scenarios", "bs,full"])
    assert code == EXIT_OK
    rows = json.loads((tmp_path / "a" / "ablation.json").read_text())
    assert [r["scenario"] for r in rows] == ["bs", "full"]
    assert "Ours" in (tmp_path / "a" / "ablation.md").read_text()
