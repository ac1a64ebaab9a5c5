"""Patch-level Fourier transforms between the spatial and spectral token streams.

Every transform uses orthonormal normalization, so Parseval holds as an
equality and a forward/inverse round trip is the identity. Complex spectra
are packed as ``real || imag`` along the channel axis.

Three scopes are supported:

* ``per_token``: each token's D-vector is reshaped to ``d x d`` and transformed
  on its own (``d*d`` must equal D, otherwise it is zero-padded to the next square).
* ``token_windows``: a per-channel 2-D FFT over non-overlapping ``w x w`` windows
  of the token grid.
* ``full_grid``: a per-channel 2-D FFT over the whole token grid.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import torch
from torch import nn

from gifl.errors import ConfigError, ShapeError

SCOPE_KINDS = ("per_token", "token_windows", "full_grid")

_active_traces: List[list] = []


@dataclass(frozen=True)
class SpectralScope:
    kind: str = "per_token"
    window: Optional[int] = None
    pad: bool = True

    def __post_init__(self):
        if self.kind not in SCOPE_KINDS:
            raise ConfigError(f"unknown spectral scope {self.kind!r}")
        if self.kind == "token_windows" and (self.window is None or self.window < 1):
            raise ConfigError("token_windows scope needs a positive window size")

    def __str__(self) -> str:
        if self.kind == "token_windows":
            return f"token_windows({self.window})"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "SpectralScope":
        """Inverse of ``str(scope)``, e.g. ``"token_windows(8)"``."""
        text = text.strip()
        if text.startswith("token_windows"):
            inner = text[len("token_windows"):].strip("()= ")
            return cls("token_windows", int(inner))
        return cls(text)


@contextlib.contextmanager
def trace_calls() -> Iterator[list]:
    """Record every spectral transform executed inside the block.

    Yields a list that fills with ``(op_name, scope)`` tuples.
    """
    record: list = []
    _active_traces.append(record)
    try:
        yield record
    finally:
        _active_traces.remove(record)


def _trace(op: str, scope: SpectralScope) -> None:
    for record in _active_traces:
        record.append((op, scope))


def token_side(dim: int) -> int:
    """Side ``d`` of the square a D-vector is folded into (``d*d >= D``)."""
    return math.isqrt(dim - 1) + 1 if dim > 0 else 0


def spectral_dim(dim: int, scope: SpectralScope) -> int:
    """Channel width of the packed spectrum for a D-wide token stream."""
    if scope.kind == "per_token":
        d = token_side(dim)
        if d * d != dim and not scope.pad:
            raise ShapeError(f"D={dim} is not a perfect square and padding is disabled")
        return 2 * d * d
    return 2 * dim


def infer_grid(n_tokens: int, grid: Optional[Tuple[int, int]] = None) -> Tuple[int, int]:
    if grid is not None:
        if grid[0] * grid[1] != n_tokens:
            raise ShapeError(f"grid {grid} does not hold {n_tokens} tokens")
        return tuple(grid)
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise ShapeError(f"{n_tokens} tokens do not form a square grid; pass grid explicitly")
    return side, side


def _windows(x: torch.Tensor, scope: SpectralScope, grid) -> Tuple[torch.Tensor, Tuple[int, int], tuple]:
    # (B, N, C) -> (B, h/w, w, w/w, w, C) view plus the two FFT axes
    b, n, c = x.shape
    h, w = infer_grid(n, grid)
    if scope.kind == "full_grid":
        return x.reshape(b, h, w, c), (1, 2), (h, w)
    ws = scope.window
    if h % ws or w % ws:
        raise ShapeError(f"window {ws} does not divide token grid {h}x{w}")
    return x.reshape(b, h // ws, ws, w // ws, ws, c), (2, 4), (h, w)


def patch_fft(x: torch.Tensor, scope: SpectralScope = SpectralScope(), grid=None) -> torch.Tensor:
    """Forward transform ``(B, N, D) -> (B, N, spectral_dim(D))``."""
    if x.ndim != 3:
        raise ShapeError(f"expected (B, N, D) embeddings, got {tuple(x.shape)}")
    _trace("patch_fft", scope)
    b, n, dim = x.shape
    if scope.kind == "per_token":
        d = token_side(dim)
        if d * d != dim:
            if not scope.pad:
                raise ShapeError(f"D={dim} is not a perfect square and padding is disabled")
            x = nn.functional.pad(x, (0, d * d - dim))
        spec = torch.fft.fft2(x.reshape(b, n, d, d), norm="ortho").reshape(b, n, d * d)
    else:
        xw, axes, _ = _windows(x, scope, grid)
        spec = torch.fft.fft2(xw, dim=axes, norm="ortho").reshape(b, n, dim)
    return torch.cat([spec.real, spec.imag], dim=-1)


def patch_ifft(
    xf: torch.Tensor,
    scope: SpectralScope = SpectralScope(),
    dim: Optional[int] = None,
    grid=None,
) -> torch.Tensor:
    """Inverse transform; keeps the real part of the result.

    ``dim`` is the spatial width to return. It only differs from half the
    spectral width when ``per_token`` padding was applied on the way in.
    """
    if xf.ndim != 3:
        raise ShapeError(f"expected (B, N, 2D) spectra, got {tuple(xf.shape)}")
    b, n, s = xf.shape
    if s % 2:
        raise ShapeError(f"spectral width {s} is odd")
    _trace("patch_ifft", scope)
    half = s // 2
    spec = torch.complex(xf[..., :half], xf[..., half:])
    if scope.kind == "per_token":
        d = math.isqrt(half)
        if d * d != half:
            raise ShapeError(f"per_token spectrum width {s} is not 2*d*d")
        out = torch.fft.ifft2(spec.reshape(b, n, d, d), norm="ortho").real.reshape(b, n, half)
        if dim is not None and dim != half:
            if dim > half:
                raise ShapeError(f"cannot unpad {half} channels to {dim}")
            out = out[..., :dim]
        return out
    if dim is not None and dim != half:
        raise ShapeError(f"{scope} spectra carry exactly 2*D channels")
    sw, axes, _ = _windows(spec, scope, grid)
    return torch.fft.ifft2(sw, dim=axes, norm="ortho").real.reshape(b, n, half)


class SpectralLinear(nn.Module):
    """Affine maps between a D-wide stream and its packed spectrum."""

    def __init__(self, dim: int, spec_dim: Optional[int] = None):
        super().__init__()
        spec_dim = 2 * dim if spec_dim is None else spec_dim
        self.compress = nn.Linear(spec_dim, dim)
        self.expand = nn.Linear(dim, spec_dim)


def spectral_compress(xf: torch.Tensor, lin: SpectralLinear) -> torch.Tensor:
    if xf.shape[-1] != lin.compress.in_features:
        raise ShapeError(f"spectrum width {xf.shape[-1]} != {lin.compress.in_features}")
    return lin.compress(xf)


def spectral_expand(x: torch.Tensor, lin: SpectralLinear) -> torch.Tensor:
    if x.shape[-1] != lin.expand.in_features:
        raise ShapeError(f"embedding width {x.shape[-1]} != {lin.expand.in_features}")
    return lin.expand(x)
