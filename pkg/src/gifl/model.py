"""Encoder -> UFLT -> decoder pipeline, target features, loss and prediction."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from gifl.checkpoint import load_archive
from gifl.errors import ConfigError, NumericError, ShapeError
from gifl.uflt import INIT_STD, LN_EPS, UFLT, ViTLayer, init_params, vit_layer_shapes

TARGET_MODES = ("authentic", "mask", "full", "forged")
IOU_EPS = 1e-6


@dataclass
class EncoderConfig:
    name: str = "tiny-vit"
    layers: int = 2
    dim: int = 64
    heads: int = 4
    ffn_ratio: int = 4
    patch: int = 4
    pos_grid: int = 8
    seed: int = 1234

    def to_dict(self) -> dict:
        return asdict(self)


ENCODER_PRESETS = {
    # DINOv2 positional tables are sized for 518 px pretraining -> 37x37 grid
    "vit-l-encoder": dict(name="vit-l/14", layers=24, dim=1024, heads=16, patch=14, pos_grid=37),
    "vit-b-encoder": dict(name="vit-b/14", layers=12, dim=768, heads=12, patch=14, pos_grid=37),
}


class ViTEncoder(nn.Module):
    """Plain ViT backbone: conv patch embedding, CLS token, learned positions."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Conv2d(3, cfg.dim, kernel_size=cfg.patch, stride=cfg.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + cfg.pos_grid**2, cfg.dim))
        for i in range(cfg.layers):
            self.add_module(f"block{i}", ViTLayer(cfg.dim, cfg.heads, cfg.ffn_ratio))
        self.norm = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        init_params(self, cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        with torch.no_grad():
            for p in (self.patch_embed.weight, self.cls_token, self.pos_embed):
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)
            self.patch_embed.bias.zero_()

    def _positions(self, h: int, w: int) -> torch.Tensor:
        g = self.cfg.pos_grid
        if (h, w) == (g, g):
            return self.pos_embed
        grid = self.pos_embed[:, 1:].reshape(1, g, g, -1).permute(0, 3, 1, 2)
        grid = nn.functional.interpolate(grid, size=(h, w), mode="bicubic", align_corners=False)
        return torch.cat([self.pos_embed[:, :1], grid.permute(0, 2, 3, 1).reshape(1, h * w, -1)], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(x)
        b, d, h, w = tokens.shape
        tokens = tokens.flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1) + self._positions(h, w)
        for i in range(self.cfg.layers):
            tokens = getattr(self, f"block{i}")(tokens)
        return self.norm(tokens)[:, 1:]


class FrozenEncoder:
    """Immutable feature extractor shared by input and target branches.

    Wraps any module mapping ``(B, 3, H, W)`` to ``(B, N, D)`` patch tokens.
    Gradients never reach its parameters.
    """

    def __init__(self, module: nn.Module, name: str, patch: int, dim: int):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self.module = module
        self.name = name
        self.patch = patch
        self.dim = dim

    @classmethod
    def from_config(cls, cfg: EncoderConfig, dtype=torch.float32) -> "FrozenEncoder":
        return cls(ViTEncoder(cfg).to(dtype), cfg.name, cfg.patch, cfg.dim)

    @property
    def dtype(self):
        return next(self.module.parameters()).dtype

    def evaluate(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.module(x)

    def state_arrays(self, prefix: str = "encoder.") -> Dict[str, np.ndarray]:
        return {prefix + k: v.detach().cpu().numpy() for k, v in self.module.state_dict().items()}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.state_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def load_encoder(path, dtype=torch.float32) -> FrozenEncoder:
    """Build a frozen ViT encoder from a named-array archive.

    The header must carry an ``encoder`` section with an :class:`EncoderConfig`;
    arrays are read from the ``encoder.`` namespace.
    """
    arrays, header = load_archive(path)
    if "encoder" not in header:
        raise ConfigError(f"{path} carries no encoder config")
    cfg = EncoderConfig(**header["encoder"])
    module = ViTEncoder(cfg)
    state = {k[len("encoder."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("encoder.")}
    module.load_state_dict(state)
    return FrozenEncoder(module.to(dtype), cfg.name, cfg.patch, cfg.dim)


def encoder_param_shapes(cfg: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
    d, p = cfg.dim, cfg.patch
    shapes = OrderedDict()
    shapes["patch_embed.weight"] = (d, 3, p, p)
    shapes["patch_embed.bias"] = (d,)
    shapes["cls_token"] = (1, 1, d)
    shapes["pos_embed"] = (1, 1 + cfg.pos_grid**2, d)
    for i in range(cfg.layers):
        shapes.update(vit_layer_shapes(f"block{i}", d, cfg.ffn_ratio))
    shapes.update({"norm.weight": (d,), "norm.bias": (d,)})
    return shapes


def count_encoder_params(cfg: EncoderConfig, image_size: int = 448) -> dict:
    shapes = encoder_param_shapes(cfg)
    breakdown: Dict[str, int] = OrderedDict()
    for name, shape in shapes.items():
        key = "transformer blocks" if name.startswith("block") else name.split(".")[0]
        breakdown[key] = breakdown.get(key, 0) + math.prod(shape)
    n = (image_size // cfg.patch) ** 2 + 1
    d = cfg.dim
    macs = cfg.layers * (4 * n * d * d + 2 * n * n * d + 2 * cfg.ffn_ratio * n * d * d)
    macs += (n - 1) * 3 * cfg.patch**2 * d
    # DINOv2 checkpoints also carry per-layer scale vectors and a mask token; they
    # do not change the forward map used here, so they are reported but not built
    not_modeled = {"layerscale": 2 * cfg.layers * d, "mask_token": d}
    return {
        "params": sum(breakdown.values()),
        "macs": macs,
        "flops_estimate": 2 * macs,
        "breakdown": dict(breakdown),
        "not_modeled": not_modeled,
    }


# --- image/mask batches -------------------------------------------------------


def as_image_batch(imgs, dtype=torch.float32) -> torch.Tensor:
    """``(H, W, 3)`` / ``(B, H, W, 3)`` arrays -> ``(B, 3, H, W)`` tensor."""
    if isinstance(imgs, torch.Tensor) and imgs.ndim == 4 and imgs.shape[1] == 3:
        return imgs.to(dtype)
    arr = np.asarray(imgs)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ShapeError(f"expected (B, H, W, 3) images, got {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def as_mask_batch(masks, dtype=torch.float32) -> torch.Tensor:
    """``(H, W)`` / ``(B, H, W)`` -> ``(B, H, W)`` tensor."""
    if isinstance(masks, torch.Tensor):
        t = masks
    else:
        t = torch.from_numpy(np.ascontiguousarray(np.asarray(masks)))
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise ShapeError(f"expected (B, H, W) masks, got {tuple(t.shape)}")
    return t.to(dtype)


def encode(imgs, enc: FrozenEncoder) -> torch.Tensor:
    """Patch-token features of an image batch under the frozen encoder."""
    x = as_image_batch(imgs, enc.dtype)
    h, w = x.shape[-2:]
    if h % enc.patch or w % enc.patch:
        raise ShapeError(f"image {h}x{w} not divisible by encoder patch {enc.patch}")
    return enc.evaluate(x)


def build_target_features(imgs, masks, enc: FrozenEncoder, mode: str = "authentic") -> torch.Tensor:
    """Regression target under one of the target modes.

    ``authentic`` removes forged pixels (``I * (1 - M)``), ``forged`` keeps only
    them (``I * M``), ``full`` encodes the whole image and ``mask`` encodes the
    mask itself as a gray image.
    """
    x = as_image_batch(imgs, enc.dtype)
    m = as_mask_batch(masks, enc.dtype)
    if x.shape[0] != m.shape[0] or x.shape[-2:] != m.shape[-2:]:
        raise ShapeError(f"images {tuple(x.shape)} and masks {tuple(m.shape)} disagree")
    m = m[:, None]
    if mode == "authentic":
        inp = x * (1 - m)
    elif mode == "forged":
        inp = x * m
    elif mode == "full":
        inp = x
    elif mode == "mask":
        inp = m.expand(-1, 3, -1, -1)
    else:
        raise ConfigError(f"unknown target mode {mode!r}")
    return encode(inp, enc)


class Decoder(nn.Module):
    """One fully connected layer emitting ``patch**2`` logits per token."""

    def __init__(self, dim: int, patch: int, seed: int = 0):
        super().__init__()
        self.patch = patch
        self.fc = nn.Linear(dim, patch * patch)
        init_params(self, seed)

    def forward(self, f_r: torch.Tensor, grid=None) -> torch.Tensor:
        return decode_mask(f_r, self, grid)[0]


def decode_mask(f_r: torch.Tensor, dec: Decoder, grid: Optional[Tuple[int, int]] = None):
    """Token features -> ``(logits, prob)`` maps of shape ``(B, H, W)``."""
    b, n, _ = f_r.shape
    p = dec.patch
    if grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ShapeError(f"{n} tokens are not a square grid; pass grid=(h, w)")
        grid = (side, side)
    h, w = grid
    if h * w != n:
        raise ShapeError(f"grid {grid} does not hold {n} tokens")
    logits = dec.fc(f_r).reshape(b, h, w, p, p).permute(0, 1, 3, 2, 4).reshape(b, h * p, w * p)
    return logits, torch.sigmoid(logits)


def total_loss(
    f_r: torch.Tensor,
    f_t: Optional[torch.Tensor],
    logits: torch.Tensor,
    m_t,
    weights: Sequence[float] = (10.0, 1.0, 1.0),
) -> Dict[str, torch.Tensor]:
    """Weighted feature MSE + pixel BCE + soft IoU.

    The IoU term pools intersection and union over the whole batch. With a zero
    feature weight (classification objective) ``f_t`` may be ``None`` and the
    loss has no dependence on it.
    """
    g = as_mask_batch(m_t, logits.dtype)
    if g.shape != logits.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} vs masks {tuple(g.shape)}")
    w_l2, w_bce, w_iou = weights
    tensors = [f_r, logits] + ([f_t] if f_t is not None else [])
    if not all(torch.isfinite(t).all() for t in tensors):
        raise NumericError("non-finite values reach the loss")
    if w_l2 and f_t is None:
        raise ConfigError("feature loss weight is nonzero but no target features were given")
    l2 = torch.mean((f_r - f_t) ** 2) if f_t is not None else logits.new_zeros(())
    bce = nn.functional.binary_cross_entropy_with_logits(logits, g)
    p = torch.sigmoid(logits)
    inter = torch.sum(p * g)
    union = torch.sum(p) + torch.sum(g) - inter
    iou = 1 - (inter + IOU_EPS) / (union + IOU_EPS)
    total = (w_l2 * l2 if w_l2 else 0.0) + w_bce * bce + w_iou * iou
    if not torch.isfinite(total):
        raise NumericError(f"loss is not finite: {float(total)}")
    return {"total": total, "l2": l2, "bce": bce, "iou": iou}


class GIFLModel(nn.Module):
    """Trainable part of the pipeline (UFLT + decoder); the encoder stays outside."""

    def __init__(self, uflt: UFLT, decoder: Decoder):
        super().__init__()
        self.uflt = uflt
        self.decoder = decoder

    def forward(self, f_in: torch.Tensor, grid=None):
        f_r = self.uflt(f_in, grid)
        logits, prob = decode_mask(f_r, self.decoder, grid)
        return f_r, logits, prob


def predict(imgs, enc: FrozenEncoder, model: GIFLModel) -> dict:
    """Probability map, binary mask (``prob >= 0.5``) and image score (max prob).

    Accepts one image ``(H, W, 3)`` or a batch; outputs follow the input rank.
    """
    single = np.asarray(imgs).ndim == 3
    x = as_image_batch(imgs, enc.dtype)
    grid = (x.shape[-2] // enc.patch, x.shape[-1] // enc.patch)
    model.eval()
    with torch.no_grad():
        _, _, prob = model(encode(x, enc), grid)
    prob = prob.to(torch.float64).cpu().numpy()
    mask = (prob >= 0.5).astype(np.uint8)
    score = prob.reshape(prob.shape[0], -1).max(axis=1)
    if single:
        return {"prob": prob[0], "mask": mask[0], "image_score": float(score[0])}
    return {"prob": prob, "mask": mask, "image_score": score}
