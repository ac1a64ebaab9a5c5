"""Adam training loop, ablation matrix and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from gifl.checkpoint import config_hash, load_archive, save_archive
from gifl.core_types import load_image, load_mask
from gifl.dataset import DEGRADATIONS, DatasetRecord, DegradationSpec, degrade, derive_seed, read_manifest
from gifl.errors import ConfigError, NumericError
from gifl.model import (
    TARGET_MODES,
    Decoder,
    EncoderConfig,
    FrozenEncoder,
    GIFLModel,
    ViTEncoder,
    as_image_batch,
    as_mask_batch,
    build_target_features,
    encode,
    total_loss,
)
from gifl.spectral import SpectralScope
from gifl.uflt import UFLT, UFLTConfig

logger = logging.getLogger(__name__)

OBJECTIVES = ("regression", "classification")
LOSS_LOG_HEADER = ("step", "total", "l2", "bce", "iou")
ABLATION_OPTIONS = (
    "baseline", "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX",
    "data-VI", "data-VII", "data-VIII", "data-IX", "data-X", "data-XI",
)


@dataclass
class TrainSpec:
    objective: str = "regression"
    target_mode: str = "authentic"
    lr: float = 1e-4
    batch: int = 8
    steps: int = 100
    negative_ratio: Optional[float] = None
    masking: bool = False
    eval_masking: bool = False
    train_methods: Optional[List[str]] = None
    augment: List[str] = field(default_factory=list)
    loss_weights: Tuple[float, float, float] = (10.0, 1.0, 1.0)
    checkpoint_every: int = 100
    image_size: int = 448
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"unknown target mode {self.target_mode!r}")
        bad = [k for k in self.augment if k not in DEGRADATIONS]
        if bad:
            raise ConfigError(f"unknown augmentations {bad}")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.objective == "classification":
            self.loss_weights = (0.0,) + self.loss_weights[1:]
        if self.batch < 1 or self.steps < 0:
            raise ConfigError("batch must be >= 1 and steps >= 0")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d


def ablation_config(option: str, spec: Optional[TrainSpec] = None, cfg: Optional[UFLTConfig] = None):
    """``(TrainSpec, UFLTConfig)`` for one column of the ablation tables.

    ``baseline`` and ``I``-``IX`` follow the component ablation; ``data-VI``
    to ``data-XI`` cover the negative-sample and masking studies.
    """
    spec = TrainSpec() if spec is None else dataclasses.replace(spec)
    cfg = UFLTConfig() if cfg is None else dataclasses.replace(cfg)
    if option not in ABLATION_OPTIONS:
        raise ConfigError(f"unknown ablation option {option!r}; choose from {ABLATION_OPTIONS}")
    s, c = {}, {}
    if option == "I":
        s = dict(objective="classification")
    elif option == "II":
        s = dict(target_mode="mask")
    elif option == "III":
        s = dict(target_mode="full")
    elif option == "IV":
        s = dict(target_mode="forged")
    elif option == "V":
        c = dict(variant="spatial_only")
    elif option == "VI":
        c = dict(variant="spectral_only")
    elif option == "VII":
        c = dict(scope=SpectralScope("full_grid"))
    elif option == "VIII":
        c = dict(scope=SpectralScope("token_windows", 2))
    elif option == "IX":
        c = dict(scope=SpectralScope("token_windows", 8))
    elif option == "data-VI":
        s = dict(negative_ratio=0.0)
    elif option == "data-VII":
        s = dict(negative_ratio=0.5)
    elif option == "data-VIII":
        s = dict(negative_ratio=2.0)
    elif option == "data-IX":
        s = dict(masking=True, eval_masking=False)
    elif option == "data-X":
        s = dict(masking=False, eval_masking=True)
    elif option == "data-XI":
        s = dict(masking=True, eval_masking=True)
    if option in ("baseline", "I", "II", "III", "IV"):
        c.setdefault("variant", "dual")
    spec = dataclasses.replace(spec, **s)
    cfg = dataclasses.replace(cfg, **c)
    return spec, cfg


# --- model construction and checkpoints ---------------------------------------


def build_model(cfg: UFLTConfig, dtype=torch.float32) -> GIFLModel:
    return GIFLModel(UFLT(cfg), Decoder(cfg.dim, cfg.patch, seed=cfg.seed + 1)).to(dtype)


def run_config(cfg: UFLTConfig, enc_cfg: EncoderConfig) -> dict:
    return {"uflt": cfg.to_dict(), "encoder": enc_cfg.to_dict()}


def save_checkpoint(path, model: GIFLModel, enc: FrozenEncoder, enc_cfg: EncoderConfig, step: int, spec: TrainSpec) -> None:
    arrays = enc.state_arrays("encoder.")
    for k, v in model.state_dict().items():
        arrays[k] = v.detach().cpu().numpy()
    rc = run_config(model.uflt.cfg, enc_cfg)
    header = {
        **rc,
        "train": spec.to_dict(),
        "step": step,
        "seed": spec.seed,
        "config_hash": config_hash(rc),
        "encoder_checksum": enc.checksum(),
    }
    save_archive(path, arrays, header)


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild ``(encoder, model, header)`` from an archive."""
    arrays, header = load_archive(path)
    cfg = UFLTConfig(**header["uflt"])
    enc_cfg = EncoderConfig(**header["encoder"])
    enc_module = ViTEncoder(enc_cfg)
    enc_module.load_state_dict({k[8:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("encoder.")})
    enc = FrozenEncoder(enc_module.to(dtype), enc_cfg.name, enc_cfg.patch, enc_cfg.dim)
    model = build_model(cfg, dtype)
    state = {k: torch.from_numpy(v) for k, v in arrays.items() if not k.startswith("encoder.")}
    model.load_state_dict(state)
    model.to(dtype)
    return enc, model, header


# --- data ---------------------------------------------------------------------


def select_training_records(records: Sequence[DatasetRecord], spec: TrainSpec) -> List[DatasetRecord]:
    """Train-split records filtered by method and resampled to the negative ratio."""
    train = [r for r in records if r.split == "train"]
    forged = [r for r in train if r.label == "forged"]
    if spec.train_methods is not None:
        forged = [r for r in forged if r.method_tag in spec.train_methods]
    authentic = [r for r in train if r.label == "authentic"]
    if spec.negative_ratio is not None:
        want = int(round(spec.negative_ratio * len(forged)))
        if want > len(authentic):
            raise ConfigError(f"negative ratio {spec.negative_ratio} needs {want} authentic records, manifest has {len(authentic)}")
        authentic = authentic[:want]
    chosen = set(id(r) for r in forged + authentic)
    selected = [r for r in train if id(r) in chosen]
    if not selected:
        raise ConfigError("no training records selected")
    return selected


def load_records(records: Sequence[DatasetRecord], image_size: int):
    imgs = np.stack([load_image(r.image_path, image_size) for r in records])
    masks = np.stack([load_mask(r.mask_path, image_size) for r in records])
    return imgs, masks


def _check_manifest_masking(manifest_path: Path, spec: TrainSpec) -> None:
    cfg_path = manifest_path.parent / "config.json"
    if not cfg_path.exists():
        return
    built = json.loads(cfg_path.read_text()).get("masking")
    if built is not None and bool(built) != spec.masking:
        raise ConfigError(f"spec wants masking={spec.masking} but {manifest_path} was built with masking={built}")


def _augment(img: np.ndarray, kinds: Sequence[str], seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if not kinds or rng.random() < 0.5:
        return img
    kind = kinds[int(rng.integers(len(kinds)))]
    return degrade(img, DegradationSpec(kind, seed=int(rng.integers(2**31))))


# --- optimization -------------------------------------------------------------


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def make_optimizer(model: GIFLModel, spec: TrainSpec) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=spec.lr, betas=(0.9, 0.999), eps=1e-8)


def compute_losses(imgs, masks, model: GIFLModel, enc: FrozenEncoder, spec: TrainSpec) -> Dict[str, torch.Tensor]:
    x = as_image_batch(imgs, enc.dtype)
    m = as_mask_batch(masks, enc.dtype)
    grid = (x.shape[-2] // enc.patch, x.shape[-1] // enc.patch)
    f_in = encode(x, enc)
    f_t = build_target_features(x, m, enc, spec.target_mode) if spec.loss_weights[0] else None
    f_r, logits, _ = model(f_in, grid)
    return total_loss(f_r, f_t, logits, m, spec.loss_weights)


def train_step(batch, model: GIFLModel, enc: FrozenEncoder, opt: torch.optim.Optimizer, spec: TrainSpec) -> Dict[str, float]:
    """One Adam update of UFLT + decoder; the encoder is untouched.

    Raises NumericError (before any parameter changes) on a non-finite loss
    or gradient.
    """
    imgs, masks = batch
    model.train()
    opt.zero_grad(set_to_none=True)
    losses = compute_losses(imgs, masks, model, enc, spec)
    losses["total"].backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            opt.zero_grad(set_to_none=True)
            raise NumericError(f"non-finite gradient in {name}")
    opt.step()
    return {k: float(v.detach()) for k, v in losses.items()}


def _check_writable(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = out_dir / ".write_probe"
    probe.write_bytes(b"")
    probe.unlink()


def train_loop(
    spec: TrainSpec,
    cfg: UFLTConfig,
    enc_cfg: EncoderConfig,
    manifest,
    out_dir,
    encoder: Optional[FrozenEncoder] = None,
) -> Path:
    """Train from a manifest; returns the final checkpoint path.

    Writes ``loss.csv`` (one row per step), ``ckpt_XXXXXX.npz`` every
    ``spec.checkpoint_every`` steps, ``final.npz`` and ``config.json``.
    """
    out = Path(out_dir)
    _check_writable(out)
    set_determinism(spec.seed, spec.deterministic)
    dtype = spec.torch_dtype
    if isinstance(manifest, (str, Path)):
        _check_manifest_masking(Path(manifest), spec)
        records = read_manifest(manifest)
    else:
        records = list(manifest)
    records = select_training_records(records, spec)
    imgs, masks = load_records(records, spec.image_size)
    logger.info("training on %d records (%d authentic)", len(records), sum(r.label == "authentic" for r in records))

    enc = FrozenEncoder.from_config(enc_cfg, dtype) if encoder is None else encoder
    if enc.patch != cfg.patch or enc.dim != cfg.dim:
        raise ConfigError(f"encoder (patch {enc.patch}, dim {enc.dim}) does not match UFLT (patch {cfg.patch}, dim {cfg.dim})")
    model = build_model(cfg, dtype)
    opt = make_optimizer(model, spec)
    (out / "config.json").write_text(
        json.dumps({**run_config(cfg, enc_cfg), "train": spec.to_dict()}, indent=2, sort_keys=True) + "\n"
    )

    rng = np.random.default_rng(derive_seed(spec.seed, 0x7A))
    queue: List[int] = []
    log_rows = []
    n_batch = min(spec.batch, len(records))
    for step in range(1, spec.steps + 1):
        while len(queue) < n_batch:
            queue.extend(int(i) for i in rng.permutation(len(records)))
        idx, queue = queue[:n_batch], queue[n_batch:]
        b_imgs = imgs[idx]
        if spec.augment:
            b_imgs = np.stack([_augment(im, spec.augment, derive_seed(spec.seed, step, j)) for j, im in enumerate(b_imgs)])
        losses = train_step((b_imgs, masks[idx]), model, enc, opt, spec)
        log_rows.append([step] + [losses[k] for k in LOSS_LOG_HEADER[1:]])
        if spec.checkpoint_every and step % spec.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{step:06d}.npz", model, enc, enc_cfg, step, spec)

    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_LOG_HEADER)
        for row in log_rows:
            w.writerow([row[0]] + [repr(v) for v in row[1:]])
    final = out / "final.npz"
    save_checkpoint(final, model, enc, enc_cfg, spec.steps, spec)
    return final
