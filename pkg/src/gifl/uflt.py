"""Universal Forgery Localization Transformer.

A stack of dual-domain blocks. Each block runs one pre-norm ViT layer on the
spatial token stream and one on the spectral stream, then exchanges residuals
in both directions:

    out_spa = A_s + patch_ifft(expand(A_f))
    out_spe = A_f + compress(patch_fft(A_s))

The spectral stream is entered with ``compress(patch_fft(F_I))`` and folded
back at the exit with ``patch_ifft(expand(.))`` before a final LayerNorm.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import torch
from torch import nn

from gifl.errors import ConfigError, ShapeError
from gifl.spectral import (
    SpectralLinear,
    SpectralScope,
    patch_fft,
    patch_ifft,
    spectral_compress,
    spectral_dim,
    spectral_expand,
)

VARIANTS = ("dual", "spatial_only", "spectral_only")
LN_EPS = 1e-6
INIT_STD = 0.02


@dataclass
class UFLTConfig:
    layers: int = 24
    dim: int = 1024
    heads: int = 16
    ffn_ratio: int = 4
    patch: int = 14
    variant: str = "dual"
    scope: SpectralScope = field(default_factory=SpectralScope)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.scope, str):
            self.scope = SpectralScope.parse(self.scope)
        elif isinstance(self.scope, dict):
            self.scope = SpectralScope(**self.scope)
        self.validate()

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError("UFLT needs at least one layer")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown UFLT variant {self.variant!r}")
        if self.variant != "spatial_only":
            spectral_dim(self.dim, self.scope)

    @property
    def spec_dim(self) -> int:
        return spectral_dim(self.dim, self.scope)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scope"] = str(self.scope)
        return d


PRESETS = {
    "uflt-l": dict(layers=24, dim=1024, heads=16, patch=14),
    "uflt-b": dict(layers=12, dim=768, heads=12, patch=14),
    "tiny": dict(layers=2, dim=16, heads=2, patch=4),
}


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class ViTLayer(nn.Module):
    """Pre-norm transformer layer: MHSA and a GELU FFN, each with a residual."""

    def __init__(self, dim: int, heads: int, ffn_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, ffn_ratio * dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DualDomainBlock(nn.Module):
    def __init__(self, cfg: UFLTConfig):
        super().__init__()
        self.spa = ViTLayer(cfg.dim, cfg.heads, cfg.ffn_ratio)
        self.spe = ViTLayer(cfg.dim, cfg.heads, cfg.ffn_ratio)
        self.cross = SpectralLinear(cfg.dim, cfg.spec_dim)

    def forward(self, x_spa, x_spe, scope: SpectralScope, grid=None):
        return dual_domain_block(x_spa, x_spe, self, scope, grid)


def dual_domain_block(x_spa, x_spe, block: DualDomainBlock, scope: SpectralScope, grid=None):
    """One dual-domain layer with a two-way residual exchange."""
    if x_spa.shape != x_spe.shape:
        raise ShapeError(f"stream shapes differ: {tuple(x_spa.shape)} vs {tuple(x_spe.shape)}")
    dim = x_spa.shape[-1]
    a_s = block.spa(x_spa)
    a_f = block.spe(x_spe)
    out_spa = a_s + patch_ifft(spectral_expand(a_f, block.cross), scope, dim, grid)
    out_spe = a_f + spectral_compress(patch_fft(a_s, scope, grid), block.cross)
    return out_spa, out_spe


class UFLT(nn.Module):
    """Feature regressor mapping frozen-encoder tokens to reconstructed features."""

    def __init__(self, cfg: UFLTConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.variant != "spatial_only":
            self.io = SpectralLinear(cfg.dim, cfg.spec_dim)
        for i in range(cfg.layers):
            if cfg.variant == "dual":
                self.add_module(f"block{i}", DualDomainBlock(cfg))
            else:
                self.add_module(f"block{i}", ViTLayer(cfg.dim, cfg.heads, cfg.ffn_ratio))
        self.norm = nn.LayerNorm(cfg.dim, eps=LN_EPS)
        init_params(self, cfg.seed)

    def blocks(self):
        return [getattr(self, f"block{i}") for i in range(self.cfg.layers)]

    def forward(self, f_in: torch.Tensor, grid=None) -> torch.Tensor:
        cfg = self.cfg
        if f_in.ndim != 3 or f_in.shape[-1] != cfg.dim:
            raise ShapeError(f"expected (B, N, {cfg.dim}) tokens, got {tuple(f_in.shape)}")
        scope = cfg.scope
        if cfg.variant == "spatial_only":
            x = f_in
            for blk in self.blocks():
                x = blk(x)
            return self.norm(x)
        x_spe = spectral_compress(patch_fft(f_in, scope, grid), self.io)
        if cfg.variant == "spectral_only":
            for blk in self.blocks():
                x_spe = blk(x_spe)
            back = patch_ifft(spectral_expand(x_spe, self.io), scope, cfg.dim, grid)
            return self.norm(back)
        x_spa = f_in
        for blk in self.blocks():
            x_spa, x_spe = blk(x_spa, x_spe, scope, grid)
        back = patch_ifft(spectral_expand(x_spe, self.io), scope, cfg.dim, grid)
        return self.norm(x_spa + back)


def uflt_forward(f_in: torch.Tensor, model: UFLT, grid=None) -> torch.Tensor:
    return model(f_in, grid)


def init_params(module: nn.Module, seed: int) -> None:
    """Truncated-normal(0.02) weights, zero biases, unit LayerNorm gains.

    Parameters are visited in registration order with one seeded generator,
    so the result depends only on ``seed`` and the architecture.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.LayerNorm):
                sub.weight.fill_(1.0)
                sub.bias.zero_()
            elif isinstance(sub, nn.Linear):
                nn.init.trunc_normal_(sub.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()


# --- analytic structure -------------------------------------------------------


def _linear(prefix: str, n_in: int, n_out: int) -> Dict[str, Tuple[int, ...]]:
    return {f"{prefix}.weight": (n_out, n_in), f"{prefix}.bias": (n_out,)}


def vit_layer_shapes(prefix: str, dim: int, ffn_ratio: int = 4) -> Dict[str, Tuple[int, ...]]:
    shapes = OrderedDict()
    shapes.update({f"{prefix}.norm1.weight": (dim,), f"{prefix}.norm1.bias": (dim,)})
    shapes.update(_linear(f"{prefix}.attn.qkv", dim, 3 * dim))
    shapes.update(_linear(f"{prefix}.attn.proj", dim, dim))
    shapes.update({f"{prefix}.norm2.weight": (dim,), f"{prefix}.norm2.bias": (dim,)})
    shapes.update(_linear(f"{prefix}.mlp.fc1", dim, ffn_ratio * dim))
    shapes.update(_linear(f"{prefix}.mlp.fc2", ffn_ratio * dim, dim))
    return shapes


def spectral_linear_shapes(prefix: str, dim: int, spec_dim: int) -> Dict[str, Tuple[int, ...]]:
    shapes = OrderedDict()
    shapes.update(_linear(f"{prefix}.compress", spec_dim, dim))
    shapes.update(_linear(f"{prefix}.expand", dim, spec_dim))
    return shapes


def param_shapes(cfg: UFLTConfig, decoder: bool = False) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape, mirroring ``UFLT(cfg).named_parameters()``."""
    d, s = cfg.dim, (cfg.spec_dim if cfg.variant != "spatial_only" else 0)
    shapes = OrderedDict()
    if cfg.variant != "spatial_only":
        shapes.update(spectral_linear_shapes("io", d, s))
    for i in range(cfg.layers):
        if cfg.variant == "dual":
            shapes.update(vit_layer_shapes(f"block{i}.spa", d, cfg.ffn_ratio))
            shapes.update(vit_layer_shapes(f"block{i}.spe", d, cfg.ffn_ratio))
            shapes.update(spectral_linear_shapes(f"block{i}.cross", d, s))
        else:
            shapes.update(vit_layer_shapes(f"block{i}", d, cfg.ffn_ratio))
    shapes.update({"norm.weight": (d,), "norm.bias": (d,)})
    if decoder:
        shapes.update(_linear("decoder.fc", d, cfg.patch * cfg.patch))
    return shapes


def _numel(shape) -> int:
    return int(math.prod(shape))


def _fft_flops(n_points: int, n_transforms: int) -> float:
    # radix-2 estimate for a complex transform of n points: 5 n log2 n
    if n_points <= 1:
        return 0.0
    return 5.0 * n_points * math.log2(n_points) * n_transforms


def count_params(cfg: UFLTConfig, decoder: bool = False, image_size: int = 448) -> dict:
    """Exact parameter count plus a one-pass FLOP estimate at ``image_size``.

    ``macs`` follows the usual per-layer formulas (attention ``4ND^2 + 2N^2D``,
    FFN ``2 r N D^2``, linear maps by shape); ``flops`` is ``2 * macs`` plus
    an FFT term. ``breakdown`` itemizes parameters by sub-component.
    """
    shapes = param_shapes(cfg, decoder)
    total = sum(_numel(s) for s in shapes.values())

    breakdown: Dict[str, int] = OrderedDict()
    for name, shape in shapes.items():
        if name.startswith("block"):
            part = name.split(".")[1]
            key = {"spa": "spatial stream", "spe": "spectral stream", "cross": "cross maps"}.get(part)
            key = key or ("spectral stream" if cfg.variant == "spectral_only" else "spatial stream")
        elif name.startswith("io"):
            key = "entry/exit spectral maps"
        elif name.startswith("decoder"):
            key = "decoder"
        else:
            key = "final norm"
        breakdown[key] = breakdown.get(key, 0) + _numel(shape)

    n = (image_size // cfg.patch) ** 2
    d = cfg.dim
    layer_macs = 4 * n * d * d + 2 * n * n * d + 2 * cfg.ffn_ratio * n * d * d
    streams = 2 if cfg.variant == "dual" else 1
    macs = cfg.layers * streams * layer_macs
    fft_flops = 0.0
    if cfg.variant != "spatial_only":
        s = cfg.spec_dim
        n_maps = cfg.layers + 1 if cfg.variant == "dual" else 1
        macs += n_maps * 2 * n * d * s
        n_fft = 2 * n_maps
        if cfg.scope.kind == "per_token":
            fft_flops = _fft_flops(s // 2, n * n_fft)
        elif cfg.scope.kind == "full_grid":
            fft_flops = _fft_flops(n, d * n_fft)
        else:
            w = cfg.scope.window
            fft_flops = _fft_flops(w * w, (n // (w * w)) * d * n_fft)
    if decoder:
        macs += n * d * cfg.patch * cfg.patch
    return {
        "params": total,
        "macs": macs,
        "flops_estimate": 2 * macs + fft_flops,
        "breakdown": dict(breakdown),
    }
