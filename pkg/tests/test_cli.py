import json

import numpy as np
import pytest

from vlws.cli import main
from vlws.core import read_manifest
from vlws.ingest import encode_mask, save_png
from vlws.synthetic import synthetic_scene

RUN_CFG = """\
train.epochs=2
train.patience=1
train.batch_size=4
train.max_steps=2
train.lr_visual=1e-3
train.lr_text=1e-4
train.lr_min=1e-6
model.width_multiplier=0.0625
encoder.backend=stub
data.manifest={manifests}
data.out_dir=run
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--train", "4", "--val", "2", "--size", "32"]) == 0
    manifests = sorted(p.name for p in (root / "data").glob("*.manifest"))
    assert len(manifests) == 8
    picked = [f"data/{m}" for m in manifests if m.startswith(("rose", "uav_soybean"))]
    (root / "run.cfg").write_text(RUN_CFG.format(manifests=",".join(picked)))
    return root


def test_train_eval_map(workspace, capsys):
    cfg = str(workspace / "run.cfg")
    assert main(["train", "--config", cfg]) == 0
    run = workspace / "run"
    assert (run / "best.npz").exists() and (run / "history.jsonl").exists()
    assert (run / "overall.tsv").read_text().startswith("Method\tWeed\tCrop\tBg\tAvg")
    assert main(["eval", "--config", cfg, "--ckpt", str(run / "best.npz"), "--eval-caption", "template"]) == 0
    report = json.loads((run / "eval_val" / "report.json").read_text())
    assert set(report["per_dataset"]) == {"ROSE", "UAV Soybean"}
    scene, _ = synthetic_scene(48, 3)
    save_png(scene, workspace / "scene.png")
    out = workspace / "map"
    assert main(["map", "--ckpt", str(run / "best.npz"), "--scene", str(workspace / "scene.png"), "--out", str(out),
                 "--tile", "32", "--blend", "mean"]) == 0
    areas = json.loads((out / "areas.json").read_text())
    assert sum(areas.values()) == pytest.approx(1.0)
    assert (out / "weed_map.png").exists() and (out / "overlay.png").exists()


def test_adapt_ablate_analyze(workspace):
    cfg = str(workspace / "run.cfg")
    assert main(["adapt", "--config", cfg, "--target", "ROSE", "--fractions", "0.5,1.0", "--out", str(workspace / "adapt")]) == 0
    table = (workspace / "adapt" / "adapt_ROSE.tsv").read_text().splitlines()
    assert table[0].endswith("50%\t100%") and len(table) == 5
    assert main(["ablate", "--config", cfg, "--lambda-vl", "0,0.02", "--out", str(workspace / "abl")]) == 0
    assert len((workspace / "abl" / "lambda_ablation.tsv").read_text().splitlines()) == 3
    assert main(["analyze-embeddings", "--config", cfg, "--budget", "3", "--out", str(workspace / "emb")]) == 0
    tiles = np.loadtxt(workspace / "emb" / "similarity_vl_tiles.tsv", delimiter="\t")
    assert tiles.shape == (6, 6)


def test_tile_and_caption(tmp_path):
    image, mask = synthetic_scene(80, 1)
    save_png(image, tmp_path / "scene.png")
    save_png(encode_mask(mask), tmp_path / "scene_mask.png")
    out = tmp_path / "tiles"
    assert main(["tile", "--in", str(tmp_path / "scene.png"), "--mask", str(tmp_path / "scene_mask.png"),
                 "--out", str(out), "--tile", "64"]) == 0
    origins = (out / "origins.tsv").read_text().splitlines()[1:]
    assert [tuple(map(int, r.split("\t")[:2])) for r in origins] == [(0, 0), (0, 16), (16, 0), (16, 16)]
    assert main(["caption", "--manifest", str(out / "tiles.manifest"), "--out", str(out / "captioned.manifest")]) == 0
    captioned = read_manifest(out / "captioned.manifest")
    assert all(e.caption and e.caption.startswith("Soybean ") for e in captioned.entries)


def test_missing_command_exits():
    with pytest.raises(SystemExit):
        main([])
