import numpy as np
import pytest
import torch

from vlws.vlencoder import (
    ENCODER_DIM,
    EncoderConfig,
    EncoderWeightsMissing,
    VLEncoder,
    l2_normalize,
    normalize_pair,
    quantize_image,
)


@pytest.fixture
def images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(2, 3, 16, 16, generator=g)


def test_stub_image_embeddings_deterministic(images):
    enc = VLEncoder().eval()
    a = enc.encode_image_global(images)
    assert a.shape == (2, ENCODER_DIM)
    assert torch.equal(a, VLEncoder().eval().encode_image_global(images))
    assert not torch.equal(a[0], a[1])
    # seeds pick different hash families
    assert not torch.equal(a, VLEncoder(EncoderConfig(seed=1)).encode_image_global(images))


def test_stub_hash_depends_on_quantized_bytes(images):
    enc = VLEncoder()
    on_grid = (images * 255).round() / 255
    # perturbations below half a gray level quantize to the same bytes
    assert quantize_image(on_grid[0]) == quantize_image(on_grid[0] + 1e-3)
    assert torch.equal(enc.encode_image_global(on_grid), enc.encode_image_global(on_grid + 1e-3))
    assert not torch.equal(enc.encode_image_global(images), enc.encode_image_global(images.flip(-1)))


def test_stub_text_embeddings():
    enc = VLEncoder()
    a = enc.encode_text(["Bean dense with heavy weeds, row-structured."] * 2)
    assert torch.equal(a[0], a[1])
    b = enc.encode_text(["Bean sparse with heavy weeds, row-structured."])
    assert not torch.equal(a[0], b[0])
    assert enc.encode_text(["x"], dtype=torch.float64).dtype == torch.float64
    with pytest.raises(ValueError, match="non-empty"):
        enc.encode_text([""])


def test_stub_has_no_backend_parameters():
    enc = VLEncoder()
    assert enc.image_encoder_parameters() == [] and enc.text_trainable_parameters() == []
    names = {n for n, _ in enc.named_parameters()}
    assert names == {"vis_proj.weight", "vis_proj.bias", "txt_proj.weight", "txt_proj.bias"}


def test_projection_heads_affine_and_independent():
    enc = VLEncoder(embed_dim=256)
    zero = torch.zeros(1, ENCODER_DIM)
    assert torch.equal(enc.project(zero, "vis")[0], enc.vis_proj.bias)
    assert torch.equal(enc.project(zero, "txt")[0], enc.txt_proj.bias)
    assert enc.vis_proj.weight.data_ptr() != enc.txt_proj.weight.data_ptr()
    with pytest.raises(ValueError):
        enc.project(torch.zeros(1, 256), "vis")


def test_l2_normalize():
    v = torch.zeros(8, dtype=torch.float64)
    v[:2] = torch.tensor([3.0, 4.0])
    out = l2_normalize(v)
    assert out[:2].tolist() == [0.6, 0.8] and out[2:].abs().sum() == 0
    assert torch.equal(l2_normalize(out), out)
    x = torch.from_numpy(np.random.default_rng(0).normal(size=(100, 16)))
    assert ((l2_normalize(x).norm(dim=1) - 1).abs() < 1e-6).all()
    with pytest.raises(ValueError, match="degenerate embedding"):
        l2_normalize(torch.zeros(4))
    a, b = normalize_pair(x[:3], x[3:6])
    assert a.shape == b.shape == (3, 16)


def test_missing_weights_message(monkeypatch, tmp_path):
    monkeypatch.delenv("VLWS_ENCODER_DIR", raising=False)
    with pytest.raises(EncoderWeightsMissing, match="encoder weights not found"):
        VLEncoder(EncoderConfig(backend="pretrained", weights_dir=str(tmp_path)))


def test_pretrained_backend_census(tiny_clip_dir):
    enc = VLEncoder(EncoderConfig(backend="pretrained", weights_dir=str(tiny_clip_dir), trainable_text_layers=2))
    clip = enc.backend.clip
    trainable = {n for n, p in clip.named_parameters() if p.requires_grad}
    expected = {
        n
        for n, _ in clip.named_parameters()
        if n.startswith(("text_model.encoder.layers.2.", "text_model.encoder.layers.3.", "text_model.final_layer_norm."))
    }
    assert trainable == expected
    assert all(not p.requires_grad for p in enc.image_encoder_parameters())


def test_pretrained_backend_determinism_and_frozen_image(tiny_clip_dir, images):
    enc = VLEncoder(EncoderConfig(backend="pretrained", weights_dir=str(tiny_clip_dir))).train()
    assert not enc.backend.clip.vision_model.training
    e1 = enc.encode_image_global(images)
    assert e1.shape == (2, ENCODER_DIM) and not e1.requires_grad
    assert torch.equal(e1, enc.encode_image_global(images))
    enc.eval()
    t = enc.encode_text(["Soybean dense with no weeds, irregular layout."] * 2)
    assert torch.equal(t[0], t[1])
    # gradients flow into trainable text blocks only
    enc.train()
    loss = enc.project(enc.encode_text(["Bean sparse."]), "txt").sum() + enc.project(e1, "vis").sum()
    loss.backward()
    assert all(p.grad is None for p in enc.image_encoder_parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in enc.text_trainable_parameters())
