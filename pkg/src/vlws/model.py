"""Segmentation network: dilated ResNet-101 + ASPP, global-embedding fusion, caption FiLM, decoder."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from vlws.vlencoder import EncoderConfig, VLEncoder, l2_normalize

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
RESNET101_BLOCKS = (3, 4, 23, 3)


@dataclass(frozen=True)
class ModelConfig:
    output_stride: int = 8
    aspp_rates: tuple[int, int, int] = (12, 24, 36)
    lowlevel_channels: int = 48
    decoder_channels: int = 256
    num_classes: int = 3
    width_multiplier: float = 1.0
    disable_fusion: bool = False
    disable_film: bool = False
    backbone_init: str = "auto"  # auto | random | imagenet | <path to state dict>
    seed: int = 0

    def __post_init__(self):
        if self.output_stride != 8:
            raise ValueError("only output stride 8 is supported")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must be in (0, 1]")
        object.__setattr__(self, "aspp_rates", tuple(int(r) for r in self.aspp_rates))

    @property
    def baseline(self) -> bool:
        return self.disable_fusion and self.disable_film

    def ch(self, n: int) -> int:
        """Scaled channel count: rounded up, at least 8 (full width returns n unchanged)."""
        if self.width_multiplier == 1:
            return n
        return max(8, math.ceil(n * self.width_multiplier))

    @property
    def embed_dim(self) -> int:
        return self.ch(256)

    @property
    def fused_channels(self) -> int:
        return self.ch(256) + self.embed_dim


@dataclass
class FeatureBundle:
    low_level: torch.Tensor  # (B, 256, H/4, W/4)
    deep: torch.Tensor  # (B, 2048, H/8, W/8)
    aspp: torch.Tensor  # (B, 256, H/8, W/8)
    fused: torch.Tensor  # (B, 512, H/8, W/8)
    modulated: torch.Tensor  # (B, 512, H/8, W/8)
    decoder_input_channels: int = 0


@dataclass
class ModelOutput:
    logits: torch.Tensor
    v_hat: Optional[torch.Tensor]
    t_hat: Optional[torch.Tensor]
    features: Optional[FeatureBundle] = None


def conv_bn_relu(cin: int, cout: int, k: int = 1, dilation: int = 1) -> nn.Sequential:
    pad = dilation * (k // 2)
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


# --- backbone -----------------------------------------------------------------
# Attribute names follow torchvision's ResNet so ImageNet state dicts load directly.


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, planes: int, stride: int = 1, dilation: int = 1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class DilatedResNet(nn.Module):
    """ResNet-101 with the last two stages dilated (rates 2, 4) for output stride 8."""

    def __init__(self, cfg: ModelConfig, blocks: Sequence[int] = RESNET101_BLOCKS):
        super().__init__()
        stem = cfg.ch(64)
        self.conv1 = nn.Conv2d(3, stem, 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(stem)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.inplanes = stem
        self.layer1 = self._make_layer(cfg.ch(64), blocks[0], stride=1, dilation=1)
        self.layer2 = self._make_layer(cfg.ch(128), blocks[1], stride=2, dilation=1)
        self.layer3 = self._make_layer(cfg.ch(256), blocks[2], stride=1, dilation=2)
        self.layer4 = self._make_layer(cfg.ch(512), blocks[3], stride=1, dilation=4)
        self.low_channels = cfg.ch(64) * Bottleneck.expansion
        self.out_channels = cfg.ch(512) * Bottleneck.expansion
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def _make_layer(self, planes: int, n: int, stride: int, dilation: int) -> nn.Sequential:
        out = planes * Bottleneck.expansion
        downsample = None
        if stride != 1 or self.inplanes != out:
            downsample = nn.Sequential(
                nn.Conv2d(self.inplanes, out, 1, stride=stride, bias=False), nn.BatchNorm2d(out)
            )
        layers = [Bottleneck(self.inplanes, planes, stride, dilation, downsample)]
        self.inplanes = out
        layers += [Bottleneck(out, planes, 1, dilation) for _ in range(n - 1)]
        return nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        low = self.layer1(x)
        deep = self.layer4(self.layer3(self.layer2(low)))
        return low, deep

    def load_imagenet(self, source: str = "imagenet") -> None:
        if source == "imagenet":
            from torchvision.models import ResNet101_Weights

            try:
                state = ResNet101_Weights.IMAGENET1K_V1.get_state_dict(progress=False)
            except Exception as exc:  # download failures surface with a clear cause
                raise FileNotFoundError(
                    "ImageNet ResNet-101 weights unavailable; pass model.backbone_init=<path> "
                    "to a local state dict or use backbone_init=random"
                ) from exc
        else:
            state = torch.load(source, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        self.load_state_dict(state, strict=True)


# --- heads --------------------------------------------------------------------


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int, rates: Sequence[int]):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn_relu(cin, cout, 1)] + [conv_bn_relu(cin, cout, 3, dilation=r) for r in rates]
        )
        # no BatchNorm after pooling: a 1x1 map breaks batch statistics at batch size 1
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 2), cout, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [b(x) for b in self.branches]
        pooled = F.interpolate(self.pool(x), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return self.project(torch.cat(outs + [pooled], dim=1))


class FiLM(nn.Module):
    """Per-channel scale and shift generated from a conditioning vector; starts at identity."""

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.gamma = nn.Linear(cond_dim, channels)
        self.beta = nn.Linear(cond_dim, channels)
        nn.init.zeros_(self.gamma.weight)
        nn.init.ones_(self.gamma.bias)
        nn.init.zeros_(self.beta.weight)
        nn.init.zeros_(self.beta.bias)

    def params(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.gamma(cond), self.beta(cond)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.params(cond)
        return modulate(x, gamma, beta)


def modulate(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    if gamma.shape[-1] != x.shape[1] or beta.shape[-1] != x.shape[1]:
        raise ValueError("FiLM parameter width does not match feature channels")
    return gamma[..., None, None] * x + beta[..., None, None]


def fuse(aspp: torch.Tensor, e_vis: torch.Tensor) -> torch.Tensor:
    """Concatenate the spatially broadcast global embedding after the ASPP channels."""
    if e_vis.ndim != 2 or e_vis.shape[0] != aspp.shape[0]:
        raise ValueError(f"embedding shape {tuple(e_vis.shape)} does not match batch {aspp.shape[0]}")
    b, _, h, w = aspp.shape
    return torch.cat([aspp, e_vis[:, :, None, None].expand(b, e_vis.shape[1], h, w)], dim=1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, fused_channels: int, low_channels: int):
        super().__init__()
        dec = cfg.ch(cfg.decoder_channels)
        self.reduce = conv_bn_relu(fused_channels, cfg.ch(256), 1)
        self.low = conv_bn_relu(low_channels, cfg.ch(cfg.lowlevel_channels), 1)
        self.concat_channels = cfg.ch(256) + cfg.ch(cfg.lowlevel_channels)
        self.refine = nn.Sequential(
            conv_bn_relu(self.concat_channels, dec, 3), conv_bn_relu(dec, dec, 3)
        )
        self.classifier = nn.Conv2d(dec, cfg.num_classes, 1)

    def forward(self, modulated: torch.Tensor, low: torch.Tensor, out_size) -> torch.Tensor:
        x = F.interpolate(self.reduce(modulated), size=low.shape[-2:], mode="bilinear", align_corners=False)
        x = torch.cat([x, self.low(low)], dim=1)
        assert x.shape[1] == self.concat_channels
        logits = self.classifier(self.refine(x))
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


# --- full model ---------------------------------------------------------------


class VLWSModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), enc_cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.enc_cfg = enc_cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.backbone = DilatedResNet(cfg)
            self.aspp = ASPP(self.backbone.out_channels, cfg.ch(256), cfg.aspp_rates)
            d = cfg.embed_dim
            if cfg.baseline:
                self.encoder = None
            else:
                self.encoder = VLEncoder(enc_cfg, embed_dim=d)
            # learned stand-in for the global embedding when fusion is ablated
            self.fusion_null = nn.Parameter(torch.zeros(d)) if cfg.disable_fusion else None
            self.film = None if cfg.disable_film else FiLM(d, cfg.fused_channels)
            self.decoder = Decoder(cfg, cfg.fused_channels, self.backbone.low_channels)
            self.contrastive_head = None if cfg.baseline else nn.Linear(cfg.fused_channels, d)
        init = cfg.backbone_init
        if init == "auto":
            init = "imagenet" if enc_cfg.backend == "pretrained" else "random"
        if init != "random":
            if cfg.width_multiplier != 1:
                raise ValueError("pretrained backbone weights require width_multiplier=1")
            self.backbone.load_imagenet(init)

    def extract_features(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 8 or w % 8:
            raise ValueError(f"invalid input extent {h}x{w}: must be multiples of 8")
        return self.backbone(images)

    def forward(
        self, images: torch.Tensor, captions: Optional[Sequence[str]] = None, return_features: bool = False
    ) -> ModelOutput:
        low, deep = self.extract_features(images)
        aspp = self.aspp(deep)
        b = images.shape[0]
        e_txt = None
        if self.encoder is not None:
            if captions is None or len(captions) != b:
                raise ValueError("one caption per image is required")
            e_txt = self.encoder.project(self.encoder.encode_text(captions, images.dtype, images.device), "txt")
        if self.fusion_null is not None:
            e_vis = self.fusion_null.to(aspp.dtype).expand(b, -1)
        else:
            e_vis = self.encoder.project(self.encoder.encode_image_global(images), "vis")
        fused = fuse(aspp, e_vis)
        modulated = fused if self.film is None else self.film(fused, e_txt)
        logits = self.decoder(modulated, low, images.shape[-2:])
        v_hat = t_hat = None
        if self.contrastive_head is not None:
            v_hat = l2_normalize(self.contrastive_head(modulated.mean(dim=(2, 3))))
            t_hat = l2_normalize(e_txt)
        bundle = None
        if return_features:
            bundle = FeatureBundle(low, deep, aspp, fused, modulated, self.decoder.concat_channels)
        return ModelOutput(logits, v_hat, t_hat, bundle)

    def image_encoder_parameters(self) -> list[nn.Parameter]:
        return [] if self.encoder is None else self.encoder.image_encoder_parameters()

    def parameter_groups(self) -> tuple[list[nn.Parameter], list[nn.Parameter]]:
        """(visual-path trainables, text-encoder trainables); together they cover every trainable."""
        text = [] if self.encoder is None else self.encoder.text_trainable_parameters()
        text_ids = {id(p) for p in text}
        visual = [p for p in self.parameters() if p.requires_grad and id(p) not in text_ids]
        return visual, text

    def frozen_state_keys(self) -> set[str]:
        """State-dict keys of frozen pretrained encoder weights (restored from disk, not checkpoints)."""
        if self.encoder is None:
            return set()
        prefix = "encoder.backend."
        return {prefix + n for n, p in self.encoder.backend.named_parameters() if not p.requires_grad}


# --- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "vlws-checkpoint"
CHECKPOINT_VERSION = 1


def _config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_checkpoint(path: str | Path, model: VLWSModel, fingerprint: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    """Write an ``.npz`` archive: one ``param/<name>`` array per state entry plus ``__meta__``.

    ``__meta__`` is a uint8 array holding UTF-8 JSON with keys ``format``, ``version``,
    ``model_config``, ``encoder_config``, ``fingerprint`` and ``extra``. Frozen pretrained
    encoder weights are omitted and reloaded from the encoder directory.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    skip = model.frozen_state_keys()
    arrays = {
        f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items() if k not in skip
    }
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": _config_to_dict(model.cfg),
        "encoder_config": _config_to_dict(model.enc_cfg),
        "fingerprint": fingerprint or {},
        "extra": extra or {},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint_meta(path: str | Path) -> dict:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: checkpoint version {meta.get('version')} does not match supported version {CHECKPOINT_VERSION}"
        )
    return meta


def load_checkpoint(path: str | Path, encoder_overrides: Optional[dict] = None) -> tuple[VLWSModel, dict]:
    meta = read_checkpoint_meta(path)
    mcfg = dict(meta["model_config"], backbone_init="random")
    ecfg = dict(meta["encoder_config"], **(encoder_overrides or {}))
    model = VLWSModel(ModelConfig(**mcfg), EncoderConfig(**ecfg))
    with np.load(path) as data:
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    if any(v.dtype == torch.float64 for v in state.values()):
        model.double()
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected or set(missing) - model.frozen_state_keys():
        raise ValueError(f"{path}: checkpoint does not match model (missing={missing}, unexpected={unexpected})")
    return model, meta
