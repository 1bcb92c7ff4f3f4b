"""Command line: ``sketchcolor <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 invalid input,
4 state error (missing or incompatible checkpoint).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .checkpoint import load_checkpoint
from .config import ENV_PREFIX, Config, apply_env_overrides, load_config, toy_config
from .data import build_dataset, load_manifest, write_manifest
from .errors import InvalidInputError, SketchColorError, UsageError
from .features import extract_dense_features
from .imaging import load_png, save_png, to_uint8
from .matching import ColorFeaturePair, semantic_match
from .pipeline import ablate, colorize, evaluate, format_table, load_refs
from .training import StagePlan, train

log = logging.getLogger("sketchcolor")


def _config(args):
    if args.config:
        return load_config(args.config)
    return apply_env_overrides(toy_config() if args.toy else Config())


def cmd_build_dataset(args, cfg) -> int:
    samples = build_dataset(cfg, args.stage, args.seed)
    path = write_manifest(samples, args.out)
    print(path)
    return 0


def cmd_train(args, cfg) -> int:
    samples = load_manifest(args.manifest, cfg)
    init = load_checkpoint(args.init) if args.init else None
    if args.steps is not None:
        cfg = cfg.replace(train={"steps": args.steps})
    plan = StagePlan.for_stage(args.stage, cfg)
    result = train(cfg, plan, samples, init=init, checkpoint_path=args.out, log_path=args.log)
    last = result.history[-1].as_dict() if result.history else {}
    print(json.dumps({"checkpoint": str(args.out), "step": result.trainer.step, **last}, sort_keys=True))
    return 0


def cmd_colorize(args, cfg) -> int:
    ref, mask = args.ref or [], args.mask or []
    if len(ref) != len(mask):
        raise UsageError(f"every --ref needs a --mask (got {len(ref)} refs, {len(mask)} masks)")
    out = colorize(args.checkpoint, args.sketch, ref, mask, args.out, seed=args.seed, steps=args.steps)
    print(out)
    return 0


def cmd_evaluate(args, cfg) -> int:
    rep = evaluate(args.checkpoint, args.manifest, seed=args.seed, steps=args.steps)
    print(json.dumps(rep.as_dict(), sort_keys=True, indent=1))
    return 0


def cmd_match(args, cfg) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    src, ref = load_png(args.source), load_png(args.reference)
    fs, fr = extract_dense_features(model, src), extract_dense_features(model, ref)
    cmap = semantic_match(ColorFeaturePair.from_maps(fs, fr), args.metric)
    h, w = fs.shape
    lines = ["# src_row src_col ref_row ref_col distance"]
    for r in range(h):
        for c in range(w):
            rr, rc = cmap.index[r, c]
            lines.append(f"{r} {c} {rr} {rc} {cmap.distance[r, c]:.6f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(args.triples or out.with_suffix(".txt")).write_text("\n".join(lines) + "\n")
    canvas = Image.fromarray(to_uint8(np.concatenate([src, ref], axis=1)))
    draw = ImageDraw.Draw(canvas)
    sy, sx = src.shape[0] / h, src.shape[1] / w
    ry, rx = ref.shape[0] / fr.shape[0], ref.shape[1] / fr.shape[1]
    for r in range(0, h, args.every):
        for c in range(0, w, args.every):
            rr, rc = cmap.index[r, c]
            draw.line([((c + 0.5) * sx, (r + 0.5) * sy), (src.shape[1] + (rc + 0.5) * rx, (rr + 0.5) * ry)],
                      fill=(255, 0, 0), width=1)
    canvas.save(out, format="PNG")
    print(out)
    return 0


def cmd_ablate(args, cfg) -> int:
    off = [s for s in args.off.split(",") if s] if args.off else None
    if args.steps is not None:
        cfg = cfg.replace(train={"steps": args.steps})
    rows = ablate(cfg, off, seed=args.seed, stage1_steps=args.stage1_steps)
    print(format_table(rows))
    return 0


def cmd_dump_control(args, cfg) -> int:
    """Write one heatmap per instance plus the channel-norm map of the latent control signal."""
    model = load_checkpoint(args.checkpoint).build_model()
    sketch = load_png(args.sketch, "L")
    refs = load_refs(args.ref or [], args.mask or [], sketch.shape)
    lc = model.latent_control(refs)[0].double().numpy()
    norm = np.linalg.norm(lc, axis=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scale = norm.max() if norm.max() > 0 else 1.0
    save_png(out / "control_norm.png", np.kron(norm / scale, np.ones((model.cfg.downsample,) * 2)))
    np.save(out / "control.npy", lc)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sketchcolor", description="Reference-based line art colorization.")
    p.add_argument("--config", help="JSON config file (defaults apply to missing fields)")
    p.add_argument("--toy", action="store_true", help="start from the desk-scale toy settings")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    b = sub.add_parser("build-dataset", help="generate synthetic sprite samples and a manifest")
    b.add_argument("--out", required=True)
    b.add_argument("--stage", type=int, choices=(1, 2), required=True)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build_dataset)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True, help="checkpoint path to write")
    t.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    t.add_argument("--steps", type=int)
    t.add_argument("--log", help="JSONL loss log path")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("colorize", help="colorize one sketch")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--sketch", required=True)
    c.add_argument("--ref", nargs="*", help="reference instance crops")
    c.add_argument("--mask", nargs="*", help="target-frame masks, one per --ref")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--steps", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_colorize)

    e = sub.add_parser("evaluate", help="PSNR/SSIM over a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("match", help="dense semantic correspondences between two images")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--source", required=True)
    m.add_argument("--reference", required=True)
    m.add_argument("--metric", choices=("euclidean", "cosine"), default="euclidean")
    m.add_argument("--out", required=True, help="side-by-side PNG")
    m.add_argument("--triples", help="correspondence text file (default: next to --out)")
    m.add_argument("--every", type=int, default=4, help="draw every n-th grid position")
    m.set_defaults(func=cmd_match)

    a = sub.add_parser("ablate", help="toy training and scoring per toggle set")
    a.add_argument("--off", help="comma-separated toggles: edge_loss,color_matching,instance_guider")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--steps", type=int)
    a.add_argument("--stage1-steps", type=int, default=0)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("dump-control", help="write latent control heatmaps for debugging")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--sketch", required=True)
    d.add_argument("--ref", nargs="*")
    d.add_argument("--mask", nargs="*")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_control)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.print_config:
            print(cfg.dumps())
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return UsageError.exit_code
        return args.func(args, cfg)
    except SketchColorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InvalidInputError.exit_code


__all__ = ["main", "build_parser", "ENV_PREFIX"]
