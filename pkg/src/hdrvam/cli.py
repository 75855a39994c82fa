"""``hdrvam`` command line tool: synth, segment, train, ablate, infer, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Errors are written to stderr as ``hdrvam: error[<code>]: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import imageio as io
from .errors import ConfigError, HdrVamError, MissingFileError, ShapeError
from .metrics import MU, evaluate
from .network import ModelConfig, ModelWeights, predict
from .segmentation import MaskPair, segment_stack
from .training import TrainConfig, inverse_sigmoid, load_dataset, run_ablation, synth_scene, train


class UsageError(HdrVamError):
    code = "usage"
    exit_code = 2


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse ``{"model": {...}, "train": {...}}``; unknown keys are rejected."""
    if path is None:
        return ModelConfig(), TrainConfig()
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    for key in raw:
        if key not in ("model", "train"):
            raise ConfigError(f"unknown config section {key!r}", key=key)
    try:
        return ModelConfig.from_dict(raw.get("model", {})), TrainConfig.from_dict(raw.get("train", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {text!r}") from None
    if h < 16 or w < 16 or h % 16 or w % 16:
        raise UsageError(f"--size extents must be positive multiples of 16, got {h}x{w}")
    return h, w


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    h, w = _parse_size(args.size)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from exc
    for i in range(args.count):
        name = f"scene_{i:04d}"
        io.save_scene(out / name, synth_scene(args.seed + i, h, w, scene_id=name))
    print(f"wrote {args.count} scene(s) to {out}")
    return 0


def masks_sidecar(masks: MaskPair) -> dict:
    return {
        "thresh_short": masks.thresh_short,
        "thresh_long": masks.thresh_long,
        "coverage_short": masks.coverage_short,
        "coverage_long": masks.coverage_long,
    }


def cmd_segment(args) -> int:
    stack = io.load_scene(args.scene_dir)
    masks = segment_stack(stack)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_tns(out / "mask_short.tns", masks.mask_short)
    io.write_tns(out / "mask_long.tns", masks.mask_long)
    (out / "masks.json").write_text(json.dumps(masks_sidecar(masks), indent=2) + "\n", encoding="utf-8")
    print(json.dumps(masks_sidecar(masks)))
    return 0


def cmd_train(args) -> int:
    mcfg, tcfg = load_config(args.config)
    if not Path(args.data).is_dir():
        raise MissingFileError(f"data directory {args.data} does not exist")
    weights_out = Path(args.out)
    weights_out.parent.mkdir(parents=True, exist_ok=True)
    metrics_out = Path(args.metrics) if args.metrics else weights_out.parent / "metrics.jsonl"
    result = train(args.data, mcfg, tcfg, weights_out, metrics_out)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"weights": str(weights_out), "metrics": str(metrics_out),
                      "epochs": len(result.log), "steps": result.state.step,
                      "final_train_mae": last.get("train_mae"), "final_val_mae": last.get("val_mae")}))
    return 0


def cmd_ablate(args) -> int:
    if not 0 < args.fraction < 1:
        raise UsageError("--fraction must lie in (0, 1)")
    mcfg, tcfg = load_config(args.config)
    train_stacks, _ = load_dataset(args.data)
    report = run_ablation(train_stacks, mcfg, tcfg, fraction=args.fraction)
    summary = {space: {k: v for k, v in arm.items() if k != "result"} for space, arm in report.items()}
    text = json.dumps(summary, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _load_masks(path, shape) -> MaskPair:
    root = Path(path)
    arrays = []
    for name in ("mask_short.tns", "mask_long.tns"):
        if not (root / name).is_file():
            raise MissingFileError(f"{root}: missing {name}")
        m = io.read_tns(root / name)
        if m.shape[-2:] != tuple(shape):
            raise ShapeError(f"{root}/{name} is {m.shape}, scene is {tuple(shape)}", axis="height")
        arrays.append(m.reshape(1, *shape))
    meta = {}
    if (root / "masks.json").is_file():
        meta = json.loads((root / "masks.json").read_text(encoding="utf-8"))
    return MaskPair(arrays[0], arrays[1], meta.get("thresh_short", 0), meta.get("thresh_long", 0))


def run_inference(stack: io.ExposureStack, weights: ModelWeights, mcfg: ModelConfig,
                  masks: MaskPair | None = None) -> np.ndarray:
    """Sigmoid-space prediction [3,H,W] at the scene's original size."""
    if masks is None:
        masks = segment_stack(stack)
    padded, (h, w) = io.pad_stack(stack)
    if padded is not stack:
        H, W = padded.shape
        masks = MaskPair(io.pad_to(masks.mask_short, H, W), io.pad_to(masks.mask_long, H, W),
                         masks.thresh_short, masks.thresh_long)
    y = predict(padded, masks, weights, mcfg)[0]
    return io.center_crop(y, h, w)


def cmd_infer(args) -> int:
    mcfg, _ = load_config(args.config)
    if not Path(args.weights).is_file():
        raise MissingFileError(f"weight file {args.weights} does not exist")
    weights = ModelWeights.load(args.weights, mcfg)
    stack = io.load_scene(args.scene)
    masks = _load_masks(args.masks, stack.shape) if args.masks else None
    y = run_inference(stack, weights, mcfg, masks)
    if args.sigmoid_out:
        io.write_pfm(args.out, y)
    else:
        io.write_pfm(args.out, io.HdrImage(np.maximum(inverse_sigmoid(y), 0.0)))
    return 0


def _eval_pairs(pred: Path, gt: Path):
    if pred.is_dir() and gt.is_dir():
        for p in sorted(pred.glob("*.pfm")):
            g = gt / p.name
            if not g.is_file():
                g = gt / p.stem / "gt.pfm"
            if not g.is_file():
                raise MissingFileError(f"no ground truth for {p.name} under {gt}")
            yield p.stem, p, g
    else:
        for f in (pred, gt):
            if not f.is_file():
                raise MissingFileError(f"{f} does not exist")
        yield pred.stem, pred, gt


def cmd_eval(args) -> int:
    if not args.mu > 0:
        raise UsageError("--mu must be positive")
    reports = []
    for scene_id, p, g in _eval_pairs(Path(args.pred), Path(args.gt)):
        a, b = io.read_pfm(p), io.read_pfm(g)
        if a.shape != b.shape:
            raise UsageError(f"size mismatch: {p} is {a.shape}, {g} is {b.shape}")
        rep = evaluate(a, b, args.mu, scene_id)
        reports.append(rep)
        print(json.dumps(rep.to_dict()))
    if not reports:
        raise UsageError("nothing to evaluate")
    mean_psnr = float(np.mean([r.psnr_db for r in reports]))
    mean_mu = float(np.mean([r.mu_psnr_db for r in reports]))
    print(f"PSNR={mean_psnr:.6f} MU_PSNR={mean_mu:.6f}")
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdrvam", description="Segmentation-guided multi-exposure HDR fusion")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic bracketed scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64x64", help="HxW, multiples of 16")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("segment", help="Otsu visibility masks for a scene")
    p.add_argument("scene_dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--metrics", help="metrics log (default: metrics.jsonl next to the weights)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train sigmoid-space and HDR-space loss arms and compare")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--fraction", type=float, default=0.5, help="loss fraction the arms race to")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="fuse one scene into an HDR image")
    p.add_argument("--weights", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--masks", help="directory with precomputed mask_short.tns / mask_long.tns")
    p.add_argument("--sigmoid-out", action="store_true", help="write the sigmoid-space prediction")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR and mu-PSNR against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mu", type=float, default=MU)
    p.set_defaults(func=cmd_eval)
    return parser


def _threads() -> int:
    raw = os.environ.get("HDRVAM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HDRVAM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("HDRVAM_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except HdrVamError as exc:
        print(f"hdrvam: error[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"hdrvam: error[io]: {exc}", file=sys.stderr)
        return 1


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
