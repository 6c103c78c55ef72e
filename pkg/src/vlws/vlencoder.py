"""Global image/text embeddings from a contrastive vision-language encoder.

Two backends sit behind the same interface:

* ``pretrained`` wraps a CLIP-style checkpoint on disk (``transformers`` format),
  found via ``EncoderConfig.weights_dir`` or the ``VLWS_ENCODER_DIR`` environment variable.
  The image tower is frozen; only the last ``trainable_text_layers`` text blocks and the
  final text layer norm are trainable.
* ``stub`` derives embeddings from a content hash with a counter-based generator. It has
  no parameters, needs no weights and is bit-reproducible, which keeps tests offline.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ENCODER_DIM = 512
ENV_ENCODER_DIR = "VLWS_ENCODER_DIR"

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class EncoderConfig:
    backend: str = "stub"  # "stub" | "pretrained"
    image_input_size: int = 224
    trainable_text_layers: int = 2
    freeze_image_encoder: bool = True
    weights_dir: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if self.backend not in ("stub", "pretrained"):
            raise ValueError(f"unknown encoder backend {self.backend!r}")
        if self.trainable_text_layers < 0:
            raise ValueError("trainable_text_layers must be >= 0")


class EncoderWeightsMissing(FileNotFoundError):
    pass


def _hash_vector(tag: bytes, payload: bytes, seed: int, dim: int = ENCODER_DIM) -> np.ndarray:
    digest = hashlib.sha256(tag + seed.to_bytes(8, "little", signed=True) + payload).digest()
    key = int.from_bytes(digest[:16], "little")
    v = np.random.Generator(np.random.Philox(key=key)).standard_normal(dim)
    return v / v.std()


def quantize_image(image: torch.Tensor) -> bytes:
    """Canonical bytes of a 3xHxW image in [0, 1]: HxWx3 uint8 plus its shape."""
    arr = (image.detach().to("cpu", torch.float64).clamp(0, 1) * 255).round().to(torch.uint8)
    arr = arr.permute(1, 2, 0).contiguous().numpy()
    return np.asarray(arr.shape, dtype="<i8").tobytes() + arr.tobytes()


class StubBackend(nn.Module):
    mean, std = CLIP_MEAN, CLIP_STD

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        vecs = [_hash_vector(b"image", quantize_image(img), self.seed) for img in images]
        return torch.as_tensor(np.stack(vecs), dtype=images.dtype, device=images.device)

    def encode_text(self, captions: Sequence[str], dtype=torch.float32, device=None) -> torch.Tensor:
        vecs = [_hash_vector(b"text", c.encode("utf-8"), self.seed) for c in captions]
        return torch.as_tensor(np.stack(vecs), dtype=dtype, device=device)

    def image_encoder_parameters(self) -> list[nn.Parameter]:
        return []

    def text_encoder_parameters(self) -> list[nn.Parameter]:
        return []


def _pooled(out) -> torch.Tensor:
    return out if isinstance(out, torch.Tensor) else out.pooler_output


class ClipBackend(nn.Module):
    def __init__(self, weights_dir: str | Path, trainable_text_layers: int = 2, freeze_image_encoder: bool = True):
        super().__init__()
        from transformers import AutoTokenizer, CLIPModel

        self.clip = CLIPModel.from_pretrained(str(weights_dir))
        self.tokenizer = AutoTokenizer.from_pretrained(str(weights_dir))
        self.max_tokens = self.clip.config.text_config.max_position_embeddings
        self.freeze_image_encoder = freeze_image_encoder
        self.mean, self.std = _normalization_stats(Path(weights_dir))
        if self.clip.config.projection_dim != ENCODER_DIM:
            raise ValueError(f"expected a {ENCODER_DIM}-dim joint space, got {self.clip.config.projection_dim}")

        self.clip.requires_grad_(False)
        blocks = self.clip.text_model.encoder.layers
        k = min(trainable_text_layers, len(blocks))
        if k:
            for block in blocks[len(blocks) - k :]:
                block.requires_grad_(True)
            self.clip.text_model.final_layer_norm.requires_grad_(True)
        if not freeze_image_encoder:
            self.clip.vision_model.requires_grad_(True)
            self.clip.visual_projection.requires_grad_(True)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.freeze_image_encoder:
            self.clip.vision_model.eval()
        return self

    def image_encoder_parameters(self) -> list[nn.Parameter]:
        return list(self.clip.vision_model.parameters()) + list(self.clip.visual_projection.parameters())

    def text_encoder_parameters(self) -> list[nn.Parameter]:
        return list(self.clip.text_model.parameters()) + list(self.clip.text_projection.parameters())

    def encode_image(self, pixel_values: torch.Tensor) -> torch.Tensor:
        if self.freeze_image_encoder:
            with torch.no_grad():
                return _pooled(self.clip.get_image_features(pixel_values=pixel_values)).detach()
        return _pooled(self.clip.get_image_features(pixel_values=pixel_values))

    def encode_text(self, captions: Sequence[str], dtype=torch.float32, device=None) -> torch.Tensor:
        enc = self.tokenizer(
            list(captions), padding=True, truncation=True, max_length=self.max_tokens, return_tensors="pt"
        )
        device = device or next(self.clip.parameters()).device
        out = self.clip.get_text_features(
            input_ids=enc["input_ids"].to(device), attention_mask=enc["attention_mask"].to(device)
        )
        return _pooled(out).to(dtype)


def _normalization_stats(weights_dir: Path) -> tuple[tuple, tuple]:
    cfg = weights_dir / "preprocessor_config.json"
    if cfg.exists():
        import json

        data = json.loads(cfg.read_text())
        if "image_mean" in data and "image_std" in data:
            return tuple(data["image_mean"]), tuple(data["image_std"])
    return CLIP_MEAN, CLIP_STD


def resolve_weights_dir(cfg: EncoderConfig) -> Path:
    candidate = cfg.weights_dir or os.environ.get(ENV_ENCODER_DIR)
    if not candidate or not (Path(candidate) / "config.json").exists():
        raise EncoderWeightsMissing(
            "encoder weights not found: point encoder.weights_dir or the "
            f"{ENV_ENCODER_DIR} environment variable at a CLIP checkpoint directory "
            "(transformers format), or run with backend=stub"
        )
    return Path(candidate)


def make_backend(cfg: EncoderConfig) -> nn.Module:
    if cfg.backend == "stub":
        return StubBackend(cfg.seed)
    return ClipBackend(resolve_weights_dir(cfg), cfg.trainable_text_layers, cfg.freeze_image_encoder)


class VLEncoder(nn.Module):
    """Backend plus the trainable 512 -> ``embed_dim`` visual and text projection heads."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), embed_dim: int = 256):
        super().__init__()
        self.cfg = cfg
        self.embed_dim = embed_dim
        self.backend = make_backend(cfg)
        self.vis_proj = nn.Linear(ENCODER_DIM, embed_dim)
        self.txt_proj = nn.Linear(ENCODER_DIM, embed_dim)
        self.register_buffer("pixel_mean", torch.tensor(self.backend.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(self.backend.std).view(1, 3, 1, 1), persistent=False)

    def encode_image_global(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) images in [0, 1] -> (B, 512) global embeddings."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if isinstance(self.backend, StubBackend):
            return self.backend.encode_image(images)
        size = self.cfg.image_input_size
        x = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False)
        x = (x - self.pixel_mean.to(x.dtype)) / self.pixel_std.to(x.dtype)
        pdtype = next(self.backend.clip.parameters()).dtype
        return self.backend.encode_image(x.to(pdtype)).to(images.dtype)

    def encode_text(self, captions: Sequence[str], dtype=torch.float32, device=None) -> torch.Tensor:
        if isinstance(captions, str):
            captions = [captions]
        if not captions or any(not c or not c.strip() for c in captions):
            raise ValueError("caption must be non-empty")
        return self.backend.encode_text(captions, dtype=dtype, device=device)

    def project(self, e: torch.Tensor, head: str) -> torch.Tensor:
        if e.shape[-1] != ENCODER_DIM:
            raise ValueError(f"expected {ENCODER_DIM}-dim embedding, got {e.shape[-1]}")
        if head == "vis":
            return self.vis_proj(e)
        if head == "txt":
            return self.txt_proj(e)
        raise ValueError(f"unknown projection head {head!r}")

    def image_encoder_parameters(self) -> list[nn.Parameter]:
        return self.backend.image_encoder_parameters()

    def text_trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.backend.text_encoder_parameters() if p.requires_grad]


def l2_normalize(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    if (norm <= eps).any():
        raise ValueError("degenerate embedding")
    return x / norm


def normalize_pair(e_v: torch.Tensor, e_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit-normalize visual and text embeddings (single vectors or batches)."""
    return l2_normalize(e_v), l2_normalize(e_t)
