import json
import math

import pytest
import torch

from vlws.ingest import catalog_from_records
from vlws.losses import LossConfig
from vlws.metrics import DiceAccumulator
from vlws.model import ModelConfig, VLWSModel, read_checkpoint_meta
from vlws.synthetic import synthetic_records
from vlws.trainer import (
    EvalReport,
    NonFiniteLoss,
    TrainConfig,
    dump_run_config,
    evaluate,
    evaluate_items,
    load_run_config,
    lr_at,
    make_batches,
    train,
)
from vlws.vlencoder import EncoderConfig

TINY = ModelConfig(width_multiplier=0.0625)


def quick_cfg(**kw):
    base = dict(lr_visual=1e-3, lr_text=1e-4, lr_min=1e-6, epochs=3, batch_size=4, patience=2, max_steps=4)
    base.update(kw)
    return TrainConfig(**base)


def test_lr_anchors():
    cfg = TrainConfig()
    assert lr_at(0, 3e-5, cfg) == pytest.approx(3e-5, rel=1e-12)
    assert lr_at(200, 3e-5, cfg) == pytest.approx(1e-7, rel=1e-12)
    assert lr_at(100, 3e-5, cfg) == pytest.approx(1.505e-5, rel=1e-12)
    lrs = [lr_at(e, 3e-5, cfg) for e in range(201)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(201, 3e-5, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_text=1e-4, lr_visual=1e-5)
    with pytest.raises(ValueError):
        TrainConfig(patience=200)


def test_make_batches_partition_and_determinism():
    items = list(range(16))
    batches = list(make_batches(items, 8, seed=0, epoch=0))
    assert [len(b) for b in batches] == [8, 8] and sorted(sum(batches, [])) == items
    assert batches == list(make_batches(items, 8, 0, 0))
    assert batches != list(make_batches(items, 8, 0, 1))
    assert [len(b) for b in make_batches(list(range(10)), 8, 0, 0)] == [8, 2]
    with pytest.raises(ValueError):
        list(make_batches([], 8, 0, 0))


def test_patience_with_frozen_metric(tiny_catalog):
    frozen = EvalReport({}, DiceAccumulator((1, 1, 1), (2, 2, 2), (2, 2, 2)))
    cfg = quick_cfg(epochs=20, patience=5, max_steps=None, batch_size=16)
    result = train(VLWSModel(TINY), tiny_catalog, cfg, validate_fn=lambda m, e: frozen)
    assert result.best_epoch == 0
    assert result.stopped_epoch == 0 + 5
    epochs = [h for h in result.history if h["kind"] == "epoch"]
    assert len(epochs) == 6


def test_history_records_and_determinism(tiny_catalog, tmp_path):
    cfg = quick_cfg(dtype="float64")
    a = train(VLWSModel(TINY), tiny_catalog, cfg, out_dir=tmp_path / "a")
    b = train(VLWSModel(TINY), tiny_catalog, cfg, out_dir=tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()
    steps = [h for h in a.history if h["kind"] == "step"]
    assert len(steps) == 4 == a.steps
    assert set(steps[0]) >= {"epoch", "step", "batch", "dice", "ce", "vl", "total", "lr_visual"}
    assert steps[0]["lr_visual"] == pytest.approx(1e-3)
    for s in steps:
        assert s["total"] == pytest.approx(0.6 * s["dice"] + 0.4 * s["ce"] + 0.02 * s["vl"], rel=1e-9)
    meta = read_checkpoint_meta(a.checkpoint)
    assert meta["fingerprint"]["seed"] == 0 and len(meta["fingerprint"]["data_hash"]) == 64
    lines = (tmp_path / "a" / "history.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in lines] == a.history


def test_evaluate_matches_train_time_metric(tiny_catalog, tmp_path):
    train_only = catalog_from_records(synthetic_records(4, 32, seed=9))
    result = train(VLWSModel(TINY), train_only, quick_cfg(dtype="float64", max_steps=3), out_dir=tmp_path)
    best = [h for h in result.history if h["kind"] == "epoch" and h["epoch"] == result.best_epoch][0]
    again = evaluate_items(result.model, train_only.split("train"))
    assert again.metric() == pytest.approx(best["metric"], abs=1e-6)
    from_disk = evaluate(result.checkpoint, train_only, "train")
    assert from_disk.metric() == pytest.approx(best["metric"], abs=1e-6)
    with pytest.raises(ValueError, match="empty"):
        evaluate_items(result.model, [])


def test_parameter_groups_cover_trainables(tiny_clip_dir):
    enc = EncoderConfig(backend="pretrained", weights_dir=str(tiny_clip_dir))
    model = VLWSModel(ModelConfig(width_multiplier=0.0625, backbone_init="random"), enc)
    visual, text = model.parameter_groups()
    ids_v, ids_t = {id(p) for p in visual}, {id(p) for p in text}
    assert not ids_v & ids_t
    assert ids_v | ids_t == {id(p) for p in model.parameters() if p.requires_grad}


def test_frozen_image_encoder_unchanged_by_training(tiny_clip_dir, tiny_catalog):
    enc = EncoderConfig(backend="pretrained", weights_dir=str(tiny_clip_dir))
    model = VLWSModel(ModelConfig(width_multiplier=0.0625, backbone_init="random"), enc)
    vision_before = [p.detach().clone() for p in model.image_encoder_parameters()]
    text_before = [p.detach().clone() for p in model.parameter_groups()[1]]
    train(model, tiny_catalog, quick_cfg(max_steps=2))
    assert all(torch.equal(a, b) for a, b in zip(vision_before, model.image_encoder_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(text_before, model.parameter_groups()[1]))


def test_non_finite_loss_aborts(tiny_catalog):
    model = VLWSModel(TINY)
    with torch.no_grad():
        model.decoder.classifier.bias.fill_(math.nan)
    with pytest.raises(NonFiniteLoss) as err:
        train(model, tiny_catalog, quick_cfg())
    snap = err.value.snapshot
    assert snap["step"] == 0 and len(snap["batch"]) == 4 and "dice" in snap


def test_lambda_zero_logs_zero_vl(tiny_catalog):
    result = train(VLWSModel(TINY), tiny_catalog, quick_cfg(max_steps=2), LossConfig(lambda_vl=0.0))
    steps = [h for h in result.history if h["kind"] == "step"]
    assert steps and all(s["vl"] == 0.0 for s in steps)
    assert all(s["total"] == pytest.approx(0.6 * s["dice"] + 0.4 * s["ce"], rel=1e-6) for s in steps)


def test_run_config_round_trip(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        "# desk run\n"
        "train.epochs=10\ntrain.patience=3\ntrain.max_steps=none\n"
        "loss.lambda_vl=0.05\nloss.class_weights=1,2,3\n"
        "model.width_multiplier=0.25\nmodel.aspp_rates=6,12,18\nmodel.disable_film=true\n"
        "encoder.backend=stub\n"
        "data.manifest=a.manifest, b.manifest\ndata.out_dir=out\n"
    )
    run = load_run_config(cfg_path)
    assert run.train.epochs == 10 and run.train.max_steps is None
    assert run.loss.class_weights == (1.0, 2.0, 3.0) and run.loss.lambda_vl == 0.05
    assert run.model.aspp_rates == (6, 12, 18) and run.model.disable_film is True
    assert run.manifests == [tmp_path / "a.manifest", tmp_path / "b.manifest"]
    assert run.out_dir == tmp_path / "out"
    again = tmp_path / "again.cfg"
    again.write_text(dump_run_config(run))
    run2 = load_run_config(again)
    assert (run2.train, run2.loss, run2.model, run2.encoder) == (run.train, run.loss, run.model, run.encoder)
    cfg_path.write_text("train.bogus=1\n")
    with pytest.raises(ValueError, match="unknown train key"):
        load_run_config(cfg_path)
