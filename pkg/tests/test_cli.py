import json

import numpy as np
import pytest

from conftest import fake_encoder
from hdrvqa.cli import main
from hdrvqa.media import HdrFrame, sidecar_path, write_frames, write_geometry

TINY_TRAIN = {"model": {"encoder_kind": "toy-cnn"},
              "train": {"batch_size": 10, "crop_size": 32, "patch_size": None, "epochs": 1,
                        "warmup_epochs": 0, "base_lr": 0.01, "half_scale_prob": 0.0}}


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("ft")
    cfg = _write_json(out / "cfg.json", TINY_TRAIN)
    assert main(["finetune", "--toy", "--toy-contents", "2", "--toy-size", "32", "--config", str(cfg),
                 "--out", str(out / "run")]) == 0
    return out / "run" / "final.pt"


@pytest.fixture(scope="module")
def videos(tmp_path_factory):
    d = tmp_path_factory.mktemp("videos")
    rng = np.random.default_rng(0)
    labels = ["video_id,content_id,score"]
    for c in range(15):  # 3 test contents, 6 test videos per trial
        base = rng.random((16, 16, 3))
        for k in range(2):
            level = k * 0.5
            frames = [HdrFrame.from_rgb(np.clip(base * (1 - level) + rng.random((16, 16, 3)) * 0.05, 0, 1))
                      for _ in range(2)]
            path = d / f"c{c}_v{k}.rgb"
            write_geometry(sidecar_path(path), write_frames(path, frames))
            labels.append(f"c{c}_v{k},c{c},{100 - 60 * level + rng.normal(0, 3):.3f}")
    (d / "labels.csv").write_text("\n".join(labels) + "\n")
    return d


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "feature bank schema 1" in capsys.readouterr().out


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        main(["transmogrify"])
    assert exc.value.code == 2


def test_ablate_needs_values(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["ablate", "--axis", "epochs", "--values", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_missing_checkpoint(capsys, tmp_path, videos):
    code, _, err = _run(capsys, "predict", "--video", videos / "c0_v0.rgb", "--ckpt", tmp_path / "no.pt",
                        "--head", tmp_path / "no.joblib")
    assert code == 2
    assert err.startswith("ERROR CKPT_NOT_FOUND:") and err.count("\n") == 1


def test_unknown_config_key(capsys, tmp_path):
    cfg = _write_json(tmp_path / "c.json", {"train": {"epochs": 1, "learning_rate": 3}})
    code, _, err = _run(capsys, "finetune", "--toy", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2 and "BAD_CONFIG" in err and "learning_rate" in err


def test_invalid_warmup(capsys, tmp_path):
    cfg = _write_json(tmp_path / "c.json", {"train": {"epochs": 2, "warmup_epochs": 2}})
    code, _, err = _run(capsys, "finetune", "--toy", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2 and err.startswith("ERROR BAD_CONFIG")


def test_finetune_outputs(checkpoint):
    run = checkpoint.parent
    for name in ("config.json", "config.hash", "train_log.jsonl", "epoch_001.pt", "final.pt", "loss.png"):
        assert (run / name).exists(), name


def test_finetune_resume_skips(capsys, checkpoint):
    cfg = checkpoint.parent.parent / "cfg.json"
    before = checkpoint.stat().st_mtime_ns
    code, out, _ = _run(capsys, "finetune", "--toy", "--toy-contents", 2, "--toy-size", 32, "--config", cfg,
                        "--out", checkpoint.parent, "--resume")
    assert code == 0 and "up to date" in out and checkpoint.stat().st_mtime_ns == before


def test_extract_evaluate_predict(capsys, tmp_path, checkpoint, videos):
    bank = tmp_path / "f.bank"
    code, out, _ = _run(capsys, "extract", "--ckpt", checkpoint, "--videos", videos, "--out", bank,
                        "--csv", tmp_path / "f.csv")
    assert code == 0 and out.strip().endswith("\t30")

    code, out, _ = _run(capsys, "extract", "--ckpt", checkpoint, "--videos", videos, "--out", bank, "--resume")
    assert code == 0 and "extracted" not in out

    ev = tmp_path / "eval"
    args = ["evaluate", "--bank", bank, "--labels", videos / "labels.csv", "--out", ev, "--trials", 5]
    code, out, _ = _run(capsys, *args, "--head-out", tmp_path / "head.joblib")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "metric\tmedian\tstd" and lines[1].startswith("SROCC\t")
    first = (ev / "report.json").read_bytes()
    assert (ev / "trials.tsv").read_text().count("\n") == 6
    assert (ev / "evaluation.png").stat().st_size > 0
    report = json.loads(first)
    assert len(report["report"]["per_trial"]) + len(report["excluded"]) == 5

    code, _, _ = _run(capsys, *args)
    assert code == 0 and (ev / "report.json").read_bytes() == first
    assert json.loads(first)["config"]["inputs"][str(bank)]

    before = (ev / "report.json").stat().st_mtime_ns
    code, out, _ = _run(capsys, *args, "--resume")
    assert code == 0 and out.startswith("metric") and (ev / "report.json").stat().st_mtime_ns == before

    code, out, _ = _run(capsys, "predict", "--video", videos / "c3_v1.rgb", "--ckpt", checkpoint,
                        "--head", tmp_path / "head.joblib")
    assert code == 0
    (line,) = out.splitlines()
    vid, score = line.split("\t")
    assert vid == "c3_v1" and np.isfinite(float(score))


def test_evaluate_rejects_bad_config(capsys, tmp_path, videos):
    cfg = _write_json(tmp_path / "e.json", {"C_grid": [1.0], "gamma": 2})
    code, _, err = _run(capsys, "evaluate", "--bank", tmp_path / "none.bank", "--labels", videos / "labels.csv",
                        "--out", tmp_path / "o", "--config", cfg)
    assert code == 2 and "gamma" in err


def test_forge_with_fake_encoder(capsys, tmp_path):
    enc = fake_encoder()
    enc_cfg = _write_json(tmp_path / "enc.json", {"cut": enc.cut, "encode": enc.encode, "upscale": enc.upscale,
                                                  "probe": enc.probe, "container": ".json"})
    sources = _write_json(tmp_path / "src.json", [{"source_id": "s1", "duration": 250, "path": "s1.mov"}])
    code, out, _ = _run(capsys, "forge", "--sources", sources, "--out", tmp_path / "corpus", "--encoder", enc_cfg,
                        "--seed", 3)
    assert code == 0
    rows = out.strip().splitlines()
    assert len(rows) == 1 + 20
    assert (tmp_path / "corpus" / "manifest.json").exists()
    assert (tmp_path / "corpus" / "config.hash").exists()


def test_forge_bad_encoder_key(capsys, tmp_path):
    enc_cfg = _write_json(tmp_path / "enc.json", {"binary": "ffmpeg"})
    sources = _write_json(tmp_path / "src.json", [{"source_id": "s1", "duration": 250}])
    code, _, err = _run(capsys, "forge", "--sources", sources, "--out", tmp_path / "c", "--encoder", enc_cfg)
    assert code == 2 and err.startswith("ERROR BAD_CONFIG")


def test_ablate_toy(capsys, tmp_path):
    code, out, _ = _run(capsys, "ablate", "--axis", "epochs", "--values", 0, 1, "--out", tmp_path / "ab",
                        "--toy-contents", 5, "--toy-size", 32)
    assert code == 0
    rows = [r.split("\t") for r in out.strip().splitlines()]
    assert rows[0] == ["epochs", "probe_accuracy", "std", "seeds"] and [r[0] for r in rows[1:]] == ["0", "1"]
    assert 0 <= float(rows[1][1]) <= 1
    for name in ("ablation.png", "ablation.tsv", "ablation_runs.tsv", "config.hash"):
        assert (tmp_path / "ab" / name).exists(), name


def test_ablate_init_needs_path(capsys, tmp_path):
    code, _, err = _run(capsys, "ablate", "--axis", "init", "--values", "random", "sdr-pretrained",
                        "--out", tmp_path / "ab")
    assert code == 2 and "init-path" in err


def test_ablate_init_missing_checkpoint(capsys, tmp_path):
    code, _, err = _run(capsys, "ablate", "--axis", "init", "--values", "sdr-pretrained-checkpoint",
                        "--init-path", tmp_path / "nope.pt", "--out", tmp_path / "ab")
    assert code == 2 and err.startswith("ERROR CKPT_NOT_FOUND")
