"""Desk-scale forgery dataset construction.

Synthetic, mask-conditioned editors stand in for generative inpainting models.
Each source image receives one irregular mask (randomly rotated and flipped)
shared by every editing method, and authentic copies are mixed in as
negatives. Records are stored in a tab-separated manifest:

    image_path  mask_path  label  method_tag  split

with ``-`` for an absent mask and paths relative to the manifest file.
"""

from __future__ import annotations

import io
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw
from scipy import ndimage

from gifl.core_types import (
    DATASET_SIZE,
    check_image,
    load_image,
    load_mask,
    save_image,
    save_mask,
)
from gifl.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

METHODS = ("noise_fill", "smooth_fill", "copy_move", "splice")
DEGRADATIONS = ("jpeg", "resize_cycle", "sharpen", "mean_blur", "motion_blur", "gamma", "iso_noise")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MANIFEST_NAME = "manifest.tsv"
STATS_ROWS = ("Mean", "Variance", "Max", "Min")


def derive_seed(*keys: int) -> int:
    """Independent per-record seed from a global seed and indices."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# --- records and manifests ----------------------------------------------------


@dataclass
class DatasetRecord:
    image_path: str
    mask_path: Optional[str]
    label: str
    method_tag: str
    split: str

    def __post_init__(self):
        if self.label not in ("forged", "authentic"):
            raise ConfigError(f"unknown label {self.label!r}")
        if self.label == "forged" and self.mask_path is None:
            raise ConfigError(f"forged record {self.image_path} has no mask")

    @property
    def item_id(self) -> str:
        return Path(self.image_path).stem


def write_manifest(records: Sequence[DatasetRecord], path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return "-"
        p = Path(p)
        if p.is_absolute():
            p = p.resolve().relative_to(base) if p.resolve().is_relative_to(base) else p
        return p.as_posix()

    lines = ["\t".join([rel(r.image_path), rel(r.mask_path), r.label, r.method_tag, r.split]) for r in records]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path, split: Optional[str] = None) -> List[DatasetRecord]:
    """Parse a manifest; returned paths are resolved against its directory."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 5:
            raise ConfigError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
        img, mask, label, method, rec_split = fields
        rec = DatasetRecord(
            image_path=str(base / img),
            mask_path=None if mask == "-" else str(base / mask),
            label=label,
            method_tag=method,
            split=rec_split,
        )
        if split is None or rec.split == split:
            records.append(rec)
    return records


# --- masks --------------------------------------------------------------------


def make_mask_bank(n: int, size: int = DATASET_SIZE, seed: int = 0) -> List[np.ndarray]:
    """Free-form stroke masks unrelated to any image content."""
    rng = np.random.default_rng(seed)
    bank = []
    for _ in range(n):
        canvas = PILImage.new("L", (size, size), 0)
        draw = ImageDraw.Draw(canvas)
        cx, cy = rng.uniform(0.3, 0.7, size=2) * size
        for _ in range(int(rng.integers(1, 3))):
            x, y = cx, cy
            width = max(2, int(rng.uniform(0.1, 0.2) * size))
            for _ in range(int(rng.integers(2, 5))):
                angle = rng.uniform(0, 2 * np.pi)
                length = rng.uniform(0.1, 0.25) * size
                nx = float(np.clip(x + length * np.cos(angle), 0, size - 1))
                ny = float(np.clip(y + length * np.sin(angle), 0, size - 1))
                draw.line([(x, y), (nx, ny)], fill=255, width=width)
                r = width / 2
                draw.ellipse([nx - r, ny - r, nx + r, ny + r], fill=255)
                x, y = nx, ny
        bank.append((np.asarray(canvas) >= 128).astype(np.uint8))
    return bank


def load_mask_bank(directory, size: int = DATASET_SIZE) -> List[np.ndarray]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ConfigError(f"no mask images in {directory}")
    return [load_mask(p, size) for p in paths]


def sample_mask(bank: Sequence[np.ndarray], seed: int) -> np.ndarray:
    """Uniform pick from the bank, random quarter-turn, random h/v flips."""
    if len(bank) == 0:
        raise ConfigError("mask bank is empty")
    rng = np.random.default_rng(seed)
    mask = np.asarray(bank[int(rng.integers(len(bank)))])
    mask = np.rot90(mask, k=int(rng.integers(4)))
    if rng.random() < 0.5:
        mask = mask[:, ::-1]
    if rng.random() < 0.5:
        mask = mask[::-1, :]
    return np.ascontiguousarray(mask, dtype=np.uint8)


def mask_stats(masks: Sequence[np.ndarray]) -> dict:
    """Mean, population variance and extremes of the forged-area ratio."""
    if len(masks) == 0:
        raise ConfigError("mask_stats needs at least one mask")
    # exact rationals, rounded once, so the table does not depend on summation order
    ratios = [Fraction(int(np.count_nonzero(m)), int(np.size(m))) for m in masks]
    return {
        "Mean": float(statistics.mean(ratios)),
        "Variance": float(statistics.pvariance(ratios)),
        "Max": float(max(ratios)),
        "Min": float(min(ratios)),
    }


def format_stats_table(stats_by_split: dict) -> str:
    """Tab-separated table with one column per split and rows Mean/Variance/Max/Min."""
    cols = list(stats_by_split)
    lines = ["\t".join(["stat"] + cols)]
    for row in STATS_ROWS:
        lines.append("\t".join([row] + [f"{stats_by_split[c][row]:.4f}" for c in cols]))
    return "\n".join(lines) + "\n"


# --- synthetic sources --------------------------------------------------------


def make_toy_sources(n: int, size: int = 64, seed: int = 0) -> List[np.ndarray]:
    """Procedural stand-ins for natural photographs.

    Colored 1/f noise (natural-image spectrum) with a few flat shapes on top.
    """
    rng = np.random.default_rng(seed)
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    falloff = 1.0 / np.maximum(np.hypot(fx, fy), 1.0 / size) ** 1.6
    out = []
    for _ in range(n):
        chans = []
        for _ in range(3):
            phase = np.exp(2j * np.pi * rng.random((size, size)))
            field_ = np.real(np.fft.ifft2(falloff * phase))
            chans.append(field_)
        img = np.stack(chans, axis=-1)
        mix = rng.normal(size=(3, 3)) * 0.3 + np.eye(3)
        img = img @ mix
        img = (img - img.mean()) / (img.std() + 1e-12) * 0.18 + rng.uniform(0.35, 0.65, size=3)
        canvas = PILImage.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
        draw = ImageDraw.Draw(canvas)
        for _ in range(int(rng.integers(1, 4))):
            x0, y0 = rng.uniform(0, 0.7, size=2) * size
            w, h = rng.uniform(0.1, 0.3, size=2) * size
            color = tuple(int(c) for c in rng.integers(0, 256, size=3))
            draw.ellipse([x0, y0, x0 + w, y0 + h], fill=color)
        out.append(np.asarray(canvas, dtype=np.float64) / 255.0)
    return out


# --- forgeries ----------------------------------------------------------------


def _reencode(img: np.ndarray, quality: int = 90) -> np.ndarray:
    buf = io.BytesIO()
    PILImage.fromarray(np.round(img * 255).astype(np.uint8)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    return np.asarray(PILImage.open(buf).convert("RGB"), dtype=np.float64) / 255.0


def _smooth_fill(img: np.ndarray, m: np.ndarray) -> np.ndarray:
    known = (1 - m).astype(np.float64)
    if not known.any():
        return np.full_like(img, img.mean())
    fill = np.zeros_like(img)
    todo = m.astype(bool).copy()
    sigma = 2.0
    while todo.any():
        den = ndimage.gaussian_filter(known, sigma, mode="nearest")
        num = np.stack([ndimage.gaussian_filter(img[..., c] * known, sigma, mode="nearest") for c in range(3)], -1)
        ok = todo & (den > 1e-6)
        fill[ok] = num[ok] / den[ok, None]
        todo &= ~ok
        sigma *= 2
    return fill


def _copy_move(img: np.ndarray, m: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # shift the masked footprint by at least an eighth of the image; the
    # source window must stay inside the frame
    h, w = m.shape
    ys, xs = np.nonzero(m)
    min_shift = max(1, min(h, w) // 8)
    for _ in range(10):
        dy = int(rng.integers(-ys.min(), h - ys.max()))
        dx = int(rng.integers(-xs.min(), w - xs.max()))
        if max(abs(dy), abs(dx)) < min_shift:
            continue
        out = img.copy()
        out[ys, xs] = img[ys + dy, xs + dx]
        return out
    raise ConfigError("copy_move found no in-bounds source window after 10 tries")


def synth_forgery(
    img: np.ndarray,
    mask: np.ndarray,
    method: str,
    seed: int = 0,
    donor: Optional[np.ndarray] = None,
    full_generation: bool = False,
) -> np.ndarray:
    """Edit the masked region with one of the synthetic methods.

    With ``full_generation=False`` unmasked pixels are returned bit-for-bit.
    ``full_generation=True`` re-encodes the whole output, leaving a global
    fingerprint the way a generator's direct output would.
    """
    check_image(img)
    if mask.shape != img.shape[:2]:
        raise ShapeError(f"mask {mask.shape} vs image {img.shape}")
    m = mask.astype(bool)
    rng = np.random.default_rng(seed)
    out = img.copy()
    if m.any():
        if method == "noise_fill":
            out[m] = rng.random((int(m.sum()), 3))
        elif method == "smooth_fill":
            out[m] = _smooth_fill(img, mask)[m]
        elif method == "copy_move":
            out = _copy_move(img, mask, rng)
        elif method == "splice":
            if donor is None:
                raise ConfigError("splice requires a donor image")
            if donor.shape != img.shape:
                raise ShapeError(f"donor {donor.shape} vs image {img.shape}")
            out[m] = donor[m]
        else:
            raise ConfigError(f"unknown forgery method {method!r}")
    elif method not in METHODS:
        raise ConfigError(f"unknown forgery method {method!r}")
    if full_generation:
        out = _reencode(out)
    return out


def blend_masking(forged: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Paste authentic content back outside the mask."""
    if forged.shape != original.shape or forged.shape[:2] != mask.shape:
        raise ShapeError(f"shapes differ: {forged.shape}, {original.shape}, {mask.shape}")
    m = mask.astype(np.float64)[..., None]
    return m * forged + (1 - m) * original


# --- degradations -------------------------------------------------------------


@dataclass
class DegradationSpec:
    kind: str
    quality: int = 25
    scale: int = 2
    kernel: int = 7
    gamma: float = 1.5
    color_shift: float = 0.05
    intensity: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATIONS:
            raise ConfigError(f"unknown degradation {self.kind!r}; choose from {DEGRADATIONS}")


SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float64)


def _halve(x: np.ndarray) -> np.ndarray:
    # pairwise sums keep constant inputs exact
    return ((x[0::2, 0::2] + x[1::2, 0::2]) + (x[0::2, 1::2] + x[1::2, 1::2])) * 0.25


def _double(x: np.ndarray, axis: int) -> np.ndarray:
    # bilinear x2 with half-pixel centers, written as lerps so constants stay exact
    prev = np.concatenate([np.take(x, [0], axis), np.take(x, range(x.shape[axis] - 1), axis)], axis)
    nxt = np.concatenate([np.take(x, range(1, x.shape[axis]), axis), np.take(x, [-1], axis)], axis)
    even = x + 0.25 * (prev - x)
    odd = x + 0.25 * (nxt - x)
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] *= 2
    return out.reshape(shape)


def motion_kernel(size: int, angle: float) -> np.ndarray:
    """Normalized line kernel through the center at ``angle`` radians."""
    k = np.zeros((size, size))
    c = (size - 1) / 2
    for t in np.linspace(-c, c, 8 * size):
        x, y = c + t * np.cos(angle), c + t * np.sin(angle)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            if 0 <= x0 + dx < size and 0 <= y0 + dy < size:
                k[y0 + dy, x0 + dx] += wgt
    return k / k.sum()


def _per_channel(img: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(img[..., c]) for c in range(img.shape[-1])], axis=-1)


def degrade(img: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply one degradation; output is clipped to [0, 1]."""
    check_image(img)
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if kind == "jpeg":
        out = _reencode(img, spec.quality)
    elif kind == "resize_cycle":
        s = spec.scale
        if s < 1 or s & (s - 1):
            raise ConfigError(f"resize_cycle scale must be a power of two, got {s}")
        h, w = img.shape[:2]
        if h % s or w % s:
            raise ShapeError(f"image {h}x{w} not divisible by scale {s}")
        out = img
        while s > 1:
            out = _halve(out)
            s //= 2
        s = spec.scale
        while s > 1:
            out = _double(_double(out, 0), 1)
            s //= 2
    elif kind == "sharpen":
        out = _per_channel(img, lambda ch: ndimage.convolve(ch, SHARPEN_KERNEL, mode="nearest"))
    elif kind == "mean_blur":
        out = ndimage.uniform_filter(img, size=(spec.kernel, spec.kernel, 1), mode="reflect")
    elif kind == "motion_blur":
        kern = motion_kernel(spec.kernel, rng.uniform(0, np.pi))
        out = _per_channel(img, lambda ch: ndimage.convolve(ch, kern, mode="reflect"))
    elif kind == "gamma":
        out = np.power(img, spec.gamma)
    else:
        from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

        hsv = rgb_to_hsv(img)
        hsv[..., 0] = np.mod(hsv[..., 0] + rng.normal(0.0, spec.color_shift, img.shape[:2]), 1.0)
        v = hsv[..., 2]
        noise = rng.normal(0.0, spec.intensity * v.std(), img.shape[:2]) * (1.0 - v)
        hsv[..., 2] = np.clip(v + noise, 0.0, 1.0)
        out = hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def isometry(img: np.ndarray, k: int) -> np.ndarray:
    """k-th of the 8 square symmetries (quarter turns, then a flip)."""
    out = np.rot90(img, k % 4)
    if (k // 4) % 2:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


# --- dataset build ------------------------------------------------------------


def parse_ratio(text) -> float:
    """``"1:2"`` (negatives : forged) or a plain number -> negatives per forged image."""
    if isinstance(text, (int, float)):
        value = float(text)
    elif ":" in str(text):
        neg, pos = str(text).split(":")
        if float(pos) == 0:
            raise ConfigError(f"bad ratio {text!r}")
        value = float(Fraction(neg) / Fraction(pos))
    else:
        value = float(Fraction(str(text)))
    if value < 0:
        raise ConfigError(f"negative ratio must be >= 0, got {text!r}")
    return value


@dataclass
class DatasetConfig:
    sources: str
    masks: Optional[str]
    out: str
    methods: List[str] = field(default_factory=lambda: ["noise_fill", "smooth_fill"])
    neg_ratio: float = 1.0
    masking: bool = False
    full_generation: bool = True
    image_size: int = DATASET_SIZE
    test_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.neg_ratio = parse_ratio(self.neg_ratio)
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown forgery methods {bad}; choose from {METHODS}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")


def list_images(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError(f"{directory} is not a directory")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ConfigError(f"no source images in {directory}")
    return paths


def build_dataset(cfg: DatasetConfig, mask_bank: Optional[Sequence[np.ndarray]] = None) -> List[DatasetRecord]:
    """Generate forged and authentic images, masks, manifest, stats and config.

    Every enabled method edits the same masked area of a source image.
    Authentic records cycle through the sources (using image symmetries for
    repeats) until ``neg_ratio * n_forged`` of them exist.
    """
    sources = list_images(cfg.sources)
    size = cfg.image_size
    if mask_bank is None:
        if cfg.masks is None:
            raise ConfigError("a mask directory or an in-memory mask bank is required")
        mask_bank = load_mask_bank(cfg.masks, size)
    out = Path(cfg.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    n = len(sources)
    n_test = int(round(cfg.test_fraction * n))
    order = np.random.default_rng(derive_seed(cfg.seed, 0xD5)).permutation(n)
    test_ids = set(int(i) for i in order[:n_test])
    imgs = [load_image(p, size) for p in sources]

    records: List[DatasetRecord] = []
    masks_by_split = {"train": [], "test": []}
    for i, (path, img) in enumerate(zip(sources, imgs)):
        split = "test" if i in test_ids else "train"
        mask = sample_mask(mask_bank, derive_seed(cfg.seed, i))
        if mask.shape != img.shape[:2]:
            raise ShapeError(f"mask bank entries are {mask.shape}, images {img.shape[:2]}")
        masks_by_split[split].append(mask)
        mask_rel = f"masks/{path.stem}.png"
        save_mask(mask, out / mask_rel)
        for j, method in enumerate(cfg.methods):
            forged = synth_forgery(
                img,
                mask,
                method,
                seed=derive_seed(cfg.seed, i, j + 1),
                donor=imgs[(i + 1) % n],
                full_generation=cfg.full_generation,
            )
            if cfg.masking:
                forged = blend_masking(forged, img, mask)
            img_rel = f"images/{path.stem}_{method}.png"
            save_image(forged, out / img_rel)
            records.append(DatasetRecord(img_rel, mask_rel, "forged", method, split))

    n_auth = int(round(cfg.neg_ratio * len(records)))
    for k in range(n_auth):
        i, variant = k % n, k // n
        img_rel = f"images/{sources[i].stem}_auth{variant}.png"
        save_image(isometry(imgs[i], variant), out / img_rel)
        split = "test" if i in test_ids else "train"
        records.append(DatasetRecord(img_rel, None, "authentic", "authentic", split))

    perm = np.random.default_rng(derive_seed(cfg.seed, 0x5F)).permutation(len(records))
    records = [records[int(p)] for p in perm]
    write_manifest(records, out / MANIFEST_NAME)

    stats = {"all": mask_stats(masks_by_split["train"] + masks_by_split["test"])}
    for split in ("train", "test"):
        if masks_by_split[split]:
            stats[split] = mask_stats(masks_by_split[split])
    (out / "stats.tsv").write_text(format_stats_table(stats), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote %d records (%d authentic) to %s", len(records), n_auth, out)
    return read_manifest(out / MANIFEST_NAME)


def degrade_manifest(records: Sequence[DatasetRecord], spec: DegradationSpec, out_dir, image_size: int) -> List[DatasetRecord]:
    """Degraded copies of every image; masks are referenced, not copied."""
    out = Path(out_dir)
    new = []
    for idx, rec in enumerate(records):
        img = load_image(rec.image_path, image_size)
        local = DegradationSpec(**{**asdict(spec), "seed": derive_seed(spec.seed, idx)})
        rel = f"images/{rec.item_id}_{spec.kind}.png"
        save_image(degrade(img, local), out / rel)
        mask = None if rec.mask_path is None else str(Path(rec.mask_path).resolve())
        new.append(DatasetRecord(rel, mask, rec.label, rec.method_tag, rec.split))
    write_manifest(new, out / MANIFEST_NAME)
    return read_manifest(out / MANIFEST_NAME)
