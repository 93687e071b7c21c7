import json

import numpy as np
import pytest

from localedit.cli import main
from localedit.io import read_mask_png, read_pfm, write_png
from localedit.synth import default_scene, image_task

INSTR = "recolor sphere-A red"


@pytest.fixture
def top_image(tmp_path):
    before, _, _ = image_task(default_scene(), INSTR, 64)
    path = tmp_path / "img.png"
    write_png(path, before)
    return path


def test_relevance_outputs(tmp_path, top_image):
    out, mask = tmp_path / "o" / "rel.pfm", tmp_path / "o" / "mask.png"
    assert main(["relevance", "--input", str(top_image), "--instruction", INSTR, "--tau", "0.5",
                 "--out", str(out), "--mask", str(mask)]) == 0
    rel, m = read_pfm(out), read_mask_png(mask)
    assert rel.shape == (32, 32) and m.shape == (64, 64)
    assert rel.min() >= 0 and rel.max() <= 1
    _, _, support = image_task(default_scene(), INSTR, 64)
    # 2x2 latent blocks straddle the object outline
    assert np.count_nonzero(m & support) / np.count_nonzero(m | support) > 0.85
    cfg = json.loads((tmp_path / "o" / "effective_config.json").read_text())
    assert cfg["editor"]["tau"] == 0.5


def test_rerun_byte_identical(tmp_path, top_image):
    outs = []
    for k in range(2):
        p = tmp_path / f"e{k}.png"
        assert main(["edit-image", "--input", str(top_image), "--instruction", INSTR, "--steps", "10",
                     "--seed", "3", "--out", str(p)]) == 0
        outs.append(p.read_bytes())
    assert outs[0] == outs[1]


def test_usage_errors(tmp_path, top_image, capsys):
    assert main(["frobnicate"]) == 2
    assert main(["relevance", "--input", str(top_image)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"editor": {"nope": 1}}')
    assert main(["relevance", "--input", str(top_image), "--instruction", INSTR, "--config", str(bad),
                 "--out", str(tmp_path / "r.pfm"), "--mask", str(tmp_path / "m.png")]) == 2


def test_runtime_error_one_line(tmp_path, top_image, capsys):
    code = main(["relevance", "--input", str(top_image), "--instruction", "paint it black",
                 "--out", str(tmp_path / "r.pfm"), "--mask", str(tmp_path / "m.png")])
    err = capsys.readouterr().err.strip()
    assert code == 1 and len(err.splitlines()) == 1 and "paint it black" in err


def test_synth_and_metrics(tmp_path):
    assert main(["synth", "image", "--instruction", INSTR, "--resolution", "32", "--out", str(tmp_path / "s")]) == 0
    s = tmp_path / "s"
    assert main(["metrics", "psnr", "--a", str(s / "before.png"), "--b", str(s / "before.png"),
                 "--out", str(tmp_path / "m")]) == 0
    summary = json.loads((tmp_path / "m" / "summary.json").read_text())
    assert summary["values"] == [100.0]
    assert main(["metrics", "iou", "--a", str(s / "support.png"), "--b", str(s / "support.png"),
                 "--out", str(tmp_path / "m2")]) == 0
    assert (tmp_path / "m2" / "metrics.csv").read_text().splitlines()[0] == "a,b,iou"


def test_make_scene_and_capture(tmp_path):
    scene = tmp_path / "scene.json"
    assert main(["synth", "make-scene", "--random", "2", "--seed", "1", "--out", str(scene)]) == 0
    assert len(json.loads(scene.read_text())["primitives"]) == 2
    assert main(["synth", "capture", "--scene", str(scene), "--views", "2", "--resolution", "8",
                 "--out", str(tmp_path / "cap")]) == 0
    assert len(list((tmp_path / "cap").glob("view_*.png"))) == 2
    assert len(json.loads((tmp_path / "cap" / "cameras.json").read_text())) == 2


def test_fit_render_edit_small(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"field": {"dims": [8, 8, 8], "n_samples": 16, "batch_size": 256},
                               "scene_edit": {"total_iters": 4, "n_edit": 2, "relevance_warmup": 2}}))
    common = ["--config", str(cfg), "--views", "2", "--resolution", "8"]
    assert main(["fit", "--iters", "150", "--out", str(tmp_path / "fit")] + common) == 0
    assert main(["render", "--field", str(tmp_path / "fit"), "--out", str(tmp_path / "r")] + common) == 0
    assert np.isfinite(read_pfm(tmp_path / "r" / "relevance_000.pfm")).all()
    assert main(["edit-scene", "--instruction", INSTR, "--prefit", str(tmp_path / "fit"),
                 "--out", str(tmp_path / "ed")] + common) == 0
    assert (tmp_path / "ed" / "field.bin").exists()
    assert (tmp_path / "ed" / "metrics.csv").read_text().count("\n") == 3
