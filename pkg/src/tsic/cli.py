"""Command-line entry point.

Subcommands: train, compress, decompress, eval, ablate, stability,
emit-maps. Text enters only decode-side commands; `compress` has no caption
flag at all, which enforces the decoder-only side-information contract at
the interface. Every command freezes its effective configuration into the
run directory for auditability.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .data import ImageTensor, TextEmbedding, load_manifest, normalize_image, denormalize_image
from .evaluation import bd_rate, build_curve, emit_maps, evaluate, stability_protocol, write_rdpoints
from .imageio import load_image, write_png
from .model import CodecModel
from .ssa import TextEncoderAdapter, embed_text
from .training import TARGET_BPP_POINTS, VARIANTS, TrainConfig, train_stage

__all__ = ["main"]


def _config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:10]


def _freeze_config(run_dir: Path, effective: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(effective, sort_keys=True, indent=2) + "\n")


def _parse_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _build_train_config(args) -> TrainConfig:
    base = {}
    if args.config:
        base.update(json.loads(Path(args.config).read_text()))
    base.update(_parse_overrides(args.set))
    for key, val in (("stage", args.stage), ("target_bpp", args.target_bpp),
                     ("variant", args.variant), ("seed", args.seed),
                     ("text_backend", args.text_backend),
                     ("deterministic", args.deterministic or base.get("deterministic", True))):
        if val is not None:
            base[key] = val
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise SystemExit(f"invalid training configuration: {exc}")


def _load_model(path) -> CodecModel:
    path = Path(path)
    if not path.exists():
        raise SystemExit(f"checkpoint not found: {path}")
    model, _ = CodecModel.load(path)
    return model


def _read_image(path) -> ImageTensor:
    path = Path(path)
    if not path.exists():
        raise SystemExit(f"image not found: {path}")
    try:
        return normalize_image(load_image(path))
    except ValueError as exc:
        raise SystemExit(f"cannot read image {path}: {exc}")


def _decode_text(args, adapter) -> TextEmbedding:
    if args.no_text:
        return TextEmbedding.zero()
    return embed_text(args.caption, adapter)


# -- subcommands -------------------------------------------------------------------


def _cmd_train(args) -> int:
    cfg = _build_train_config(args)
    manifest = load_manifest(args.manifest)
    run_dir = Path(args.run_dir) if args.run_dir else Path("runs") / f"train-{_config_hash(cfg.to_dict())}"
    _freeze_config(run_dir, {"command": "train", **cfg.to_dict()})

    resume = args.resume
    if cfg.stage == 2 and resume is None:
        candidate = run_dir / "stage1_checkpoint.tsck"
        if not candidate.exists():
            raise SystemExit(
                f"stage 2 needs a stage-1 checkpoint: pass --resume or provide {candidate}"
            )
        resume = candidate
    result = train_stage(manifest, cfg, run_dir, resume=resume)
    final = result.history[-1]
    print(f"stage {cfg.stage} done: checkpoint {result.checkpoint_path}")
    print(f"final epoch: total={final.total:.5f} bpp={final.bpp:.4f} mse={final.d_mse:.5f}")
    return 0


def _cmd_compress(args) -> int:
    model = _load_model(args.checkpoint)
    img = _read_image(args.image)
    obj = model.compress_image(img)
    out = Path(args.out)
    out.write_bytes(obj.to_bytes())
    print(f"wrote {out} ({out.stat().st_size} bytes), payload bpp={obj.file_bpp:.4f}")
    return 0


def _cmd_decompress(args) -> int:
    from .entropy_codec import BitstreamError, CompressedObject

    model = _load_model(args.checkpoint)
    blob = Path(args.bitstream).read_bytes()
    try:
        obj = CompressedObject.from_bytes(blob)
    except BitstreamError as exc:
        raise SystemExit(f"cannot parse bitstream: {exc}")
    adapter = TextEncoderAdapter.create(args.text_backend, seed=args.seed or 0)
    text = _decode_text(args, adapter)
    try:
        decoded = model.decompress_image(obj, text)
    except BitstreamError as exc:
        raise SystemExit(f"decode failed: {exc}")
    write_png(args.out, denormalize_image(decoded))
    print(f"wrote {args.out} ({obj.height}x{obj.width})")
    if args.emit_maps:
        from .evaluation import emit_maps_for_bitstream

        paths = emit_maps_for_bitstream(model, obj, text, args.emit_maps)
        print(f"emitted {len(paths)} map files under {args.emit_maps}")
    return 0


def _cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if len(manifest) == 0:
        raise SystemExit("evaluation manifest holds no images")
    imageset, captions = [], []
    for rec in manifest.records:
        imageset.append((rec.image_path, normalize_image(load_image(rec.resolve(manifest.base_dir)))))
        captions.append(rec.captions[min(args.caption_index, len(rec.captions) - 1)])
    adapter = TextEncoderAdapter.create(args.text_backend, seed=args.seed or 0)
    points = evaluate(imageset, model, captions, args.variant, text_adapter=adapter)
    run_dir = Path(args.out) if args.out else Path("runs") / f"eval-{_config_hash({'ckpt': str(args.checkpoint)})}"
    _freeze_config(run_dir, {"command": "eval", "checkpoint": str(args.checkpoint),
                             "variant": args.variant, "caption_index": args.caption_index})
    out = write_rdpoints(points, run_dir / "rdpoints.jsonl")
    mean_bpp = float(np.mean([p.bpp for p in points]))
    mean_psnr = float(np.mean([p.psnr_db for p in points]))
    mean_perc = float(np.mean([p.perc_proxy for p in points]))
    print(f"evaluated {len(points)} images: bpp={mean_bpp:.4f} psnr={mean_psnr:.2f}dB perc={mean_perc:.5f}")
    print(f"records: {out}")
    return 0


def _parse_variant_checkpoints(entries):
    """--checkpoint VARIANT:TARGET=PATH, e.g. full:0.30=runs/full/ckpt.tsck"""
    table = {}
    for item in entries or []:
        try:
            spec, path = item.split("=", 1)
            variant, target = spec.split(":")
            table[(variant, float(target))] = Path(path)
        except ValueError:
            raise SystemExit(f"--checkpoint expects VARIANT:TARGET=PATH, got {item!r}")
    return table


def _cmd_ablate(args) -> int:
    table = _parse_variant_checkpoints(args.checkpoint)
    targets = sorted({t for _, t in table}) or list(TARGET_BPP_POINTS)
    missing = [f"{v}:{t}" for v in VARIANTS for t in targets if (v, t) not in table]
    if missing:
        raise SystemExit("missing variant checkpoints: " + ", ".join(missing))

    manifest = load_manifest(args.manifest)
    imageset, captions = [], []
    for rec in manifest.records:
        imageset.append((rec.image_path, normalize_image(load_image(rec.resolve(manifest.base_dir)))))
        captions.append(rec.captions[0])
    adapter = TextEncoderAdapter.create(args.text_backend, seed=args.seed or 0)

    curves = {}
    for variant in VARIANTS:
        per_point = []
        for t in targets:
            model = _load_model(table[(variant, t)])
            per_point.append(evaluate(imageset, model, captions, variant, text_adapter=adapter))
        curves[variant] = build_curve(per_point)

    rows = []
    for variant in VARIANTS:
        if variant == "full":
            continue
        rows.append((variant, bd_rate(curves["full"], curves[variant])))

    run_dir = Path(args.out) if args.out else Path("runs") / "ablate"
    _freeze_config(run_dir, {"command": "ablate", "targets": targets,
                             "checkpoints": {f"{v}:{t}": str(p) for (v, t), p in table.items()}})
    report = {variant: value for variant, value in rows}
    (run_dir / "bd_rate.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"{'variant':<12} BD-rate vs full (perceptual-proxy axis)")
    for variant, value in rows:
        print(f"{variant:<12} {value:+.2f}%")
    return 0


def _cmd_stability(args) -> int:
    model = _load_model(args.checkpoint)
    img = _read_image(args.image)
    adapter = TextEncoderAdapter.create(args.text_backend, seed=args.seed or 0)
    rows = stability_protocol(model, img, args.caption, args.mismatched, text_adapter=adapter)
    run_dir = Path(args.out) if args.out else Path("runs") / "stability"
    _freeze_config(run_dir, {"command": "stability", "checkpoint": str(args.checkpoint),
                             "captions": args.caption, "mismatched": args.mismatched})
    write_rdpoints(rows, run_dir / "stability.jsonl")
    print(f"{'sentence':<10} {'bpp':>8} {'psnr(dB)':>10} {'perc':>10}")
    for row in rows:
        print(f"{row.caption_id:<10} {row.bpp:>8.4f} {row.psnr_db:>10.4f} {row.perc_proxy:>10.6f}")
    return 0


def _cmd_emit_maps(args) -> int:
    model = _load_model(args.checkpoint)
    img = _read_image(args.image)
    caption = None if args.no_text else args.caption
    paths = emit_maps(model, img, caption, args.out_dir)
    print(f"wrote {len(paths)} files under {args.out_dir}")
    return 0


# -- parser -----------------------------------------------------------------------


def _add_common(p, *, text_backend=True):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", default=None)
    if text_backend:
        p.add_argument("--text-backend", choices=["pretrained_frozen", "deterministic_stub"],
                       default="deterministic_stub")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsic", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file of TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--stage", type=int, choices=[1, 2], default=None)
    p.add_argument("--target-bpp", type=float, choices=list(TARGET_BPP_POINTS), default=None)
    p.add_argument("--variant", choices=list(VARIANTS), default=None)
    p.add_argument("--run-dir")
    p.add_argument("--resume")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compress", help="encode an image to a bitstream (no text involved)")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_compress)

    p = sub.add_parser("decompress", help="decode a bitstream with caption side information")
    p.add_argument("bitstream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--caption")
    group.add_argument("--no-text", action="store_true")
    p.add_argument("--emit-maps", metavar="DIR")
    _add_common(p)
    p.set_defaults(func=_cmd_decompress)

    p = sub.add_parser("eval", help="rate/distortion/perception records over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variant", choices=list(VARIANTS), default="full")
    p.add_argument("--caption-index", type=int, default=0)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="BD-rate table of text-ablation variants vs the full model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", action="append", metavar="VARIANT:TARGET=PATH")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("stability", help="decode one bitstream under several captions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--caption", action="append", required=True,
                   help="matched caption (repeat for each sentence)")
    p.add_argument("--mismatched", required=True)
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=_cmd_stability)

    p = sub.add_parser("emit-maps", help="write SSA prediction masks and the bit-allocation map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--caption")
    group.add_argument("--no-text", action="store_true")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_emit_maps)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
