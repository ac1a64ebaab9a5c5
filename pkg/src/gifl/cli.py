"""Command-line entry point: ``gifl <subcommand> [flags]``.

Every subcommand reads an optional ``--config`` file (YAML or JSON with
``dataset``/``uflt``/``encoder``/``train`` sections); explicit flags win.
The resolved configuration is written into each output directory.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import yaml

from gifl.errors import ConfigError, GIFLError, VersionError

logger = logging.getLogger("gifl")

REFERENCE_COUNTS = {
    "vit-l-encoder": {"params": 304.4e6, "flops": 723.7e9, "tolerance": 0.02},
    "uflt-l": {"params": 718.0e6, "flops": 1676.4e9, "tolerance": 0.05},
}


class UsageError(GIFLError):
    """Bad flags or missing input locations."""


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(os.environ.get("GIFL_SEED", 0))


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} does not exist")
    text = p.read_text()
    data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    return data or {}


def _merge(section: dict, **flags) -> dict:
    out = dict(section or {})
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _on_off(value: Optional[str]) -> Optional[bool]:
    return None if value is None else value == "on"


def _methods(value: Optional[str]):
    return None if value is None else [m.strip() for m in value.split(",") if m.strip()]


def _write_resolved(out: Path, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


# --- subcommands ----------------------------------------------------------------


def cmd_toy_corpus(args) -> int:
    from gifl.core_types import save_image, save_mask
    from gifl.dataset import make_mask_bank, make_toy_sources

    out = Path(args.out)
    seed = _seed(args)
    for i, img in enumerate(make_toy_sources(args.n, args.size, seed)):
        save_image(img, out / "sources" / f"src{i:03d}.png")
    for i, mask in enumerate(make_mask_bank(args.n_masks, args.size, seed + 1)):
        save_mask(mask, out / "masks" / f"mask{i:03d}.png")
    print(f"wrote {args.n} sources and {args.n_masks} masks under {out}")
    return 0


def cmd_build_dataset(args) -> int:
    from gifl.dataset import MANIFEST_NAME, DatasetConfig, build_dataset, mask_stats
    from gifl.core_types import load_mask
    from gifl import plotting

    conf = _load_config(args.config).get("dataset", {})
    resolved = _merge(
        conf,
        sources=args.sources,
        masks=args.masks,
        out=args.out,
        methods=_methods(args.methods),
        neg_ratio=args.neg_ratio,
        masking=_on_off(args.masking),
        full_generation=_on_off(args.full_generation),
        image_size=args.image_size,
        test_fraction=args.test_fraction,
    )
    resolved["seed"] = _seed(args) if args.seed is not None or "seed" not in resolved else resolved["seed"]
    for key in ("sources", "masks", "out"):
        if not resolved.get(key):
            raise UsageError(f"--{key} is required")
    for key in ("sources", "masks"):
        if not Path(resolved[key]).is_dir():
            raise UsageError(f"--{key} {resolved[key]} is not a directory")
    cfg = DatasetConfig(**resolved)
    records = build_dataset(cfg)
    out = Path(cfg.out)
    _write_resolved(out, asdict(cfg))
    ratios = {"train": [], "test": []}
    for rec in records:
        if rec.label == "forged":
            m = load_mask(rec.mask_path, cfg.image_size)
            ratios[rec.split].append(m.mean())
    plotting.mask_ratio_hist(ratios, out / "mask_ratio.png")
    print((out / "stats.tsv").read_text(), end="")
    print(f"{len(records)} records -> {out / MANIFEST_NAME}")
    return 0


def _model_configs(conf: dict, args):
    from gifl.model import EncoderConfig
    from gifl.uflt import PRESETS, UFLTConfig

    ucfg = dict(PRESETS["tiny"])
    ucfg.update(dim=64, heads=4)
    ucfg.update(conf.get("uflt", {}))
    if args.preset:
        ucfg.update(PRESETS[args.preset])
    ucfg = _merge(ucfg, layers=args.layers, dim=args.dim, heads=args.heads, patch=args.patch, scope=args.scope)
    ecfg = dict(conf.get("encoder", {}))
    ecfg.setdefault("dim", ucfg["dim"])
    ecfg.setdefault("heads", ucfg["heads"])
    ecfg.setdefault("patch", ucfg["patch"])
    return UFLTConfig(**ucfg), ecfg, EncoderConfig


def cmd_train(args) -> int:
    from gifl import plotting
    from gifl.model import load_encoder
    from gifl.training import TrainSpec, ablation_config, train_loop

    conf = _load_config(args.config)
    if not args.manifest or not Path(args.manifest).is_file():
        raise UsageError(f"--manifest {args.manifest} is not a file")
    cfg, ecfg, EncoderConfig = _model_configs(conf, args)
    tconf = _merge(
        conf.get("train", {}),
        steps=args.steps,
        lr=args.lr,
        batch=args.batch,
        image_size=args.image_size,
        checkpoint_every=args.checkpoint_every,
        train_methods=_methods(args.train_methods),
        augment=_methods(args.augment),
    )
    tconf["seed"] = _seed(args) if args.seed is not None or "seed" not in tconf else tconf["seed"]
    if args.deterministic:
        tconf["deterministic"] = True
    spec = TrainSpec(**tconf)
    spec, cfg = ablation_config(args.option, spec, cfg)
    ecfg.setdefault("pos_grid", spec.image_size // cfg.patch)
    enc_cfg = EncoderConfig(**ecfg)
    encoder = load_encoder(args.encoder_weights, spec.torch_dtype) if args.encoder_weights else None
    out = Path(args.out)
    _write_resolved(out, {"option": args.option, "uflt": cfg.to_dict(), "encoder": enc_cfg.to_dict(), "train": spec.to_dict()})
    final = train_loop(spec, cfg, enc_cfg, args.manifest, out, encoder=encoder)
    with open(out / "loss.csv") as fh:
        rows = [[float(v) for v in r] for r in list(csv.reader(fh))[1:]]
    if rows:
        plotting.loss_curves(rows, out / "loss.png", title=f"option {args.option}")
    print(f"checkpoint -> {final}")
    return 0


def _load_ckpt(args):
    from gifl.checkpoint import check_compatible
    from gifl.training import load_checkpoint

    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"--checkpoint {args.checkpoint} is not a file")
    enc, model, header = load_checkpoint(args.checkpoint)
    if getattr(args, "config", None):
        conf = _load_config(args.config)
        if "uflt" in conf or "encoder" in conf:
            from gifl.model import EncoderConfig
            from gifl.uflt import UFLTConfig

            want = {
                "uflt": UFLTConfig(**{**header["uflt"], **conf.get("uflt", {})}).to_dict(),
                "encoder": EncoderConfig(**{**header["encoder"], **conf.get("encoder", {})}).to_dict(),
            }
            check_compatible(header, want)
    return enc, model, header


def cmd_eval(args) -> int:
    from gifl import plotting
    from gifl.dataset import read_manifest
    from gifl.metrics import evaluate
    from gifl.model import predict

    if not args.manifest or not Path(args.manifest).is_file():
        raise UsageError(f"--manifest {args.manifest} is not a file")
    enc, model, header = _load_ckpt(args)
    size = args.image_size or header["train"]["image_size"]
    records = read_manifest(args.manifest, split=args.split)
    built = Path(args.manifest).parent / "config.json"
    if built.exists():
        masked = json.loads(built.read_text()).get("masking")
        want = header["train"].get("eval_masking")
        if masked is not None and want is not None and bool(masked) != bool(want):
            logger.warning("checkpoint expects eval masking=%s but the manifest was built with masking=%s", want, masked)
    out = Path(args.out)
    _write_resolved(out, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "split": args.split, "image_size": size})
    report = evaluate(records, lambda img: predict(img, enc, model), out / "report.csv", image_size=size)
    aggs = report.aggregates()
    if aggs:
        plotting.metric_bars(aggs, out / "metrics.png", report.authentic_summary())
    print(report.to_csv(), end="")
    if report.failed:
        logger.error("%d items failed", len(report.failed))
        return 1
    return 0


def cmd_predict(args) -> int:
    from gifl import plotting
    from gifl.core_types import load_image, save_mask, save_prob
    from gifl.metrics import authenticity_metrics
    from gifl.model import predict

    enc, model, header = _load_ckpt(args)
    size = args.image_size or header["train"]["image_size"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.images:
        img = load_image(path, size)
        res = predict(img, enc, model)
        stem = Path(path).stem
        save_prob(res["prob"], out / f"{stem}_prob.png")
        save_mask(res["mask"], out / f"{stem}_mask.png")
        plotting.prediction_panel(img, res["prob"], out / f"{stem}_panel.png")
        verdict = authenticity_metrics(res["prob"], res["image_score"])["i_pred"]
        rows.append([stem, f"{res['image_score']:.4f}", f"{res['mask'].mean():.4f}", verdict])
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item", "image_score", "forged_fraction", "i_pred"])
        w.writerows(rows)
    for r in rows:
        print(",".join(r))
    return 0


def cmd_degrade(args) -> int:
    from gifl.dataset import DegradationSpec, degrade_manifest, read_manifest

    if not args.manifest or not Path(args.manifest).is_file():
        raise UsageError(f"--manifest {args.manifest} is not a file")
    spec = DegradationSpec(args.kind, seed=_seed(args))
    records = read_manifest(args.manifest, split=args.split)
    out = Path(args.out)
    _write_resolved(out, {**asdict(spec), "manifest": str(args.manifest), "image_size": args.image_size})
    new = degrade_manifest(records, spec, out, args.image_size)
    print(f"{len(new)} degraded records -> {out / 'manifest.tsv'}")
    return 0


def param_count_table(preset: str, image_size: int = 448, decoder: bool = True) -> dict:
    """Counts and FLOPs for a preset, with the reference delta when one exists."""
    from gifl.model import ENCODER_PRESETS, EncoderConfig, count_encoder_params
    from gifl.uflt import PRESETS, UFLTConfig, count_params

    if preset in ENCODER_PRESETS:
        res = count_encoder_params(EncoderConfig(**ENCODER_PRESETS[preset]), image_size)
    elif preset in PRESETS:
        res = count_params(UFLTConfig(**PRESETS[preset]), decoder=decoder, image_size=image_size)
    else:
        raise UsageError(f"unknown preset {preset!r}")
    ref = REFERENCE_COUNTS.get(preset)
    if ref is not None and (preset != "uflt-l" or decoder):
        res["reference_params"] = ref["params"]
        res["reference_flops"] = ref["flops"]
        res["params_delta"] = res["params"] / ref["params"] - 1
        res["flops_delta"] = res["flops_estimate"] / ref["flops"] - 1
        res["tolerance"] = ref["tolerance"]
    return res


def cmd_param_count(args) -> int:
    from gifl import plotting

    res = param_count_table(args.preset, args.image_size, decoder=not args.no_decoder)
    lines = [f"preset\t{args.preset}", f"image_size\t{args.image_size}"]
    lines.append(f"params\t{res['params']}\t{res['params'] / 1e6:.1f} M")
    lines.append(f"flops_estimate\t{res['flops_estimate']:.0f}\t{res['flops_estimate'] / 1e9:.1f} G")
    if "reference_params" in res:
        lines.append(
            f"reference\t{res['reference_params'] / 1e6:.1f} M\tdelta {res['params_delta'] * 100:+.2f}%"
            f"\ttolerance ±{res['tolerance'] * 100:.0f}%"
        )
        lines.append(f"reference_flops\t{res['reference_flops'] / 1e9:.1f} G\tdelta {res['flops_delta'] * 100:+.2f}%")
    lines.append("component\tparams\tshare")
    for name, n in res["breakdown"].items():
        lines.append(f"{name}\t{n}\t{n / res['params'] * 100:.2f}%")
    for name, n in res.get("not_modeled", {}).items():
        lines.append(f"not modeled: {name}\t{n}")
    if "reference_params" in res:
        rest = res["reference_params"] - res["params"] - sum(res.get("not_modeled", {}).values())
        lines.append(f"unattributed residual\t{rest:.0f}\t{rest / res['reference_params'] * 100:+.2f}%")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"param_count_{args.preset}.tsv").write_text(text)
        plotting.param_breakdown(res["breakdown"], out / f"param_count_{args.preset}.png", args.preset)
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from gifl.dataset import DEGRADATIONS
    from gifl.training import ABLATION_OPTIONS
    from gifl.uflt import PRESETS

    p = argparse.ArgumentParser(prog="gifl", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON config file; flags override it")
        sp.add_argument("--seed", type=int, help="global seed (fallback: $GIFL_SEED, then 0)")
        sp.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")

    sp = sub.add_parser("toy-corpus", help="procedural source images and a stroke mask bank")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--n-masks", type=int, default=32)
    sp.add_argument("--size", type=int, default=64)
    sp.set_defaults(func=cmd_toy_corpus)

    sp = sub.add_parser("build-dataset", help="forged + authentic dataset with manifest and stats")
    common(sp)
    sp.add_argument("--sources")
    sp.add_argument("--masks")
    sp.add_argument("--out")
    sp.add_argument("--methods", help="comma-separated list of forgery methods")
    sp.add_argument("--neg-ratio", help="authentic:forged, e.g. 1:1, 1:2, 0")
    sp.add_argument("--masking", choices=("on", "off"))
    sp.add_argument("--full-generation", choices=("on", "off"))
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--test-fraction", type=float)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("train", help="train UFLT + decoder for one ablation option")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--option", default="baseline", choices=ABLATION_OPTIONS)
    sp.add_argument("--preset", choices=tuple(PRESETS))
    sp.add_argument("--layers", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--heads", type=int)
    sp.add_argument("--patch", type=int)
    sp.add_argument("--scope")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--train-methods")
    sp.add_argument("--augment", help="comma-separated degradations applied with p=0.5")
    sp.add_argument("--encoder-weights", help="named-array archive with pretrained encoder weights")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metric report for a manifest")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--image-size", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="probability and binary masks for images")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("degrade", help="degraded copies of a manifest")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--kind", required=True, choices=DEGRADATIONS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--image-size", type=int, default=448)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("param-count", help="parameter and FLOP table for a preset")
    common(sp)
    sp.add_argument("--preset", required=True)
    sp.add_argument("--image-size", type=int, default=448)
    sp.add_argument("--no-decoder", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_param_count)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "deterministic", False):
        from gifl.training import set_determinism

        set_determinism(_seed(args), True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gifl {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except VersionError as exc:
        print(f"gifl {args.command}: version error: {exc}", file=sys.stderr)
        return 1
    except (GIFLError, OSError) as exc:
        print(f"gifl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
