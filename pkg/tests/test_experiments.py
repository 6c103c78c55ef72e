import numpy as np
import pytest

from vlws.experiments import (
    SweepSpec,
    StitchLayout,
    block_means,
    cosine_matrix,
    embedding_similarity_matrix,
    predict_scene,
    render_overlay,
    run_adaptation_sweep,
    run_lambda_ablation,
    stitch_map,
)
from vlws.ingest import TilingConfig
from vlws.model import ModelConfig, VLWSModel
from vlws.synthetic import synthetic_scene
from vlws.trainer import TrainConfig

TINY = ModelConfig(width_multiplier=0.0625)
QUICK = TrainConfig(lr_visual=1e-3, lr_text=1e-4, lr_min=1e-6, epochs=2, patience=1, batch_size=4, max_steps=1)

EVEN_A, ODD_A = (0.6, 0.3, 0.1), (0.2, 0.5, 0.3)
EVEN_B, ODD_B = (0.1, 0.2, 0.7), (0.5, 0.4, 0.1)


def checker_tile(even, odd, h=4, w=4):
    p = np.empty((3, h, w))
    for r in range(h):
        for c in range(w):
            p[:, r, c] = even if (r + c) % 2 == 0 else odd
    return p


def two_tile_fixture():
    """4x6 scene, 4x4 tiles at columns 0 and 2: the overlap strip is columns 2-3."""
    return [((0, 0), checker_tile(EVEN_A, ODD_A)), ((0, 2), checker_tile(EVEN_B, ODD_B))]


def test_two_tile_overlap_strip():
    res = stitch_map(two_tile_fixture(), StitchLayout(4, 6))
    # hand means: even cells (0.35, 0.25, 0.40), odd cells (0.35, 0.45, 0.20)
    for r in range(4):
        for c in (2, 3):
            expect = (0.35, 0.25, 0.40) if (r + c) % 2 == 0 else (0.35, 0.45, 0.20)
            assert res.probs[:, r, c] == pytest.approx(expect, abs=1e-6)
            assert res.class_map[r, c] == (2 if (r + c) % 2 == 0 else 1)
    # outside the strip each tile is passed through
    assert np.array_equal(res.probs[:, :, :2], checker_tile(EVEN_A, ODD_A)[:, :, :2])
    assert np.array_equal(res.probs[:, :, 4:], checker_tile(EVEN_B, ODD_B)[:, :, 2:])
    assert sum(res.area_fractions.values()) == pytest.approx(1.0)
    assert res.rendered.shape == (4, 6, 3)


def test_stitch_order_invariant():
    tiles = two_tile_fixture()
    a = stitch_map(tiles, StitchLayout(4, 6))
    b = stitch_map(tiles[::-1], StitchLayout(4, 6))
    assert np.array_equal(a.probs, b.probs) and np.array_equal(a.class_map, b.class_map)


def test_single_tile_identity(rng):
    p = rng.dirichlet(np.ones(3), size=(5, 7)).transpose(2, 0, 1)
    res = stitch_map([((0, 0), p)], StitchLayout(5, 7))
    assert np.array_equal(res.probs, p) and np.array_equal(res.class_map, p.argmax(0))


def test_full_overlap_mean_and_majority(rng):
    p = rng.dirichlet(np.ones(3), size=(3, 3)).transpose(2, 0, 1)
    q = rng.dirichlet(np.ones(3), size=(3, 3)).transpose(2, 0, 1)
    res = stitch_map([((0, 0), p), ((0, 0), q)], StitchLayout(3, 3))
    assert np.array_equal(res.class_map, ((p + q) / 2).argmax(0))
    # majority with one vote each: a tie resolves to the lower class index
    maj = stitch_map([((0, 0), p), ((0, 0), q)], StitchLayout(3, 3, "majority"))
    assert np.array_equal(maj.class_map, np.minimum(p.argmax(0), q.argmax(0)))


def test_coverage_gap():
    with pytest.raises(ValueError, match=r"coverage gap at \(0,4\)"):
        stitch_map([((0, 0), np.full((3, 4, 4), 1 / 3))], StitchLayout(4, 6))


def test_overlay_leaves_background():
    image = np.full((2, 2, 3), 100, np.uint8)
    cmap = np.array([[0, 1], [2, 0]])
    out = render_overlay(image, cmap, 0.5)
    assert out[0, 0].tolist() == [100, 100, 100]
    assert out[0, 1].tolist() == [50, 178, 50] and out[1, 0].tolist() == [178, 50, 50]


def test_predict_scene_covers_scene():
    image, _ = synthetic_scene(48, 0)
    model = VLWSModel(TINY).eval()
    res = predict_scene(model, image, TilingConfig(32, 0.25, 1.0))
    assert res.class_map.shape == (48, 48) and res.probs.shape == (3, 48, 48)
    assert np.allclose(res.probs.sum(0), 1.0, atol=1e-5)


def test_cosine_matrix_properties(rng):
    m = cosine_matrix(rng.normal(size=(6, 5)))
    assert np.array_equal(m, m.T) and (np.diag(m) == 1).all() and (np.abs(m) <= 1).all()
    bm = block_means(m, ["a", "a", "a", "b", "b", "b"], ["a", "b"])
    assert bm.shape == (2, 2) and bm[0, 1] == pytest.approx(bm[1, 0])
    with pytest.raises(ValueError, match="degenerate"):
        cosine_matrix(np.zeros((2, 3)))


@pytest.mark.parametrize("backend", ["vl", "baseline-visual"])
def test_similarity_matrix(tiny_catalog, backend):
    res = embedding_similarity_matrix(tiny_catalog, backend, model_cfg=TINY, budget=4, seed=0)
    n = len(res.labels)
    assert res.matrix.shape == (n, n) and n == 8
    assert np.array_equal(res.matrix, res.matrix.T) and (np.diag(res.matrix) == 1).all()
    assert res.block_means.shape == (2, 2)
    assert res.block_table().splitlines()[0].split("\t") == ["", "UAV Soybean", "ROSE"]


def test_adaptation_sweep_protocol(tiny_catalog):
    spec = SweepSpec("ROSE", (0.2, 0.5, 1.0), QUICK)
    report = run_adaptation_sweep(spec, tiny_catalog, TINY)
    kept = [set(c.target_train_ids) for c in report.cells]
    assert [len(k) for k in kept] == [1, 3, 6]
    assert kept[0] <= kept[1] <= kept[2]
    assert len({c.target_val_hash for c in report.cells}) == 1
    assert report.sources == ["UAV Soybean"]
    lines = report.table().strip().splitlines()
    assert lines[0].split("\t") == ["Target Dataset", "Source Datasets", "Class", "20%", "50%", "100%"]
    assert [ln.split("\t")[2] for ln in lines[1:]] == ["Weed", "Crop", "Background", "Mean"]
    with pytest.raises(ValueError, match="missing manifest for dataset 'PhenoBench'"):
        run_adaptation_sweep(SweepSpec("PhenoBench", (1.0,), QUICK), tiny_catalog, TINY)


def test_lambda_ablation_zero_row(tiny_catalog):
    report = run_lambda_ablation(tiny_catalog, (0.0, 0.02), QUICK, TINY)
    zero_steps = [h for h in report.histories[0] if h["kind"] == "step"]
    assert zero_steps and all(h["vl"] == 0.0 for h in zero_steps)
    assert any(h["vl"] > 0 for h in report.histories[1] if h["kind"] == "step")
    lines = report.table().strip().splitlines()
    assert lines[0].split("\t") == ["lambda_VL", "Weed", "Crop", "Bg", "Average"]
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["0.00", "0.02"]
