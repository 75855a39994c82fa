"""Sigmoid-space MAE training with Adam, plateau decay and flip augmentation,
plus a synthetic bracketed-scene generator for small experiments."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptyDatasetError, NonFiniteLossError, ShapeError
from .imageio import GAMMA, ExposureStack, HdrImage, LdrImage, list_scenes, load_scene, pad_stack
from .network import ModelConfig, ModelWeights, NetInputs, forward, init_weights, make_inputs
from .segmentation import MaskPair, segment_stack

log = logging.getLogger(__name__)

EXPOSURES = (0.25, 1.0, 4.0)
LOGIT_EPS = 1e-7


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    plateau_patience: int = 10
    batch_size: int = 2
    epochs: int = 100
    # stop after this many optimiser steps (None: run all epochs)
    max_steps: int | None = None
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_space: str = "sigmoid"
    augment_flips: bool = True
    dtype: str = "float32"
    # wall-clock seconds in the metrics log; off gives byte-stable logs
    log_seconds: bool = True

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0", key="lr")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)", key="lr_decay_factor")
        if self.plateau_patience < 1:
            raise ConfigError("plateau_patience must be >= 1", key="plateau_patience")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0", key="max_steps")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative", key="seed")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)", key="adam_beta1")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps must be positive", key="adam_eps")
        if self.loss_space not in ("sigmoid", "hdr"):
            raise ConfigError("loss_space must be 'sigmoid' or 'hdr'", key="loss_space")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'", key="dtype")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown train config key {key!r}", key=key)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    weights: ModelWeights
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    best_val: float = math.inf
    epochs_since_improvement: int = 0

    @classmethod
    def create(cls, weights: ModelWeights, lr: float) -> "TrainState":
        m = {n: np.zeros_like(p.data) for n, p in weights.trainable().items()}
        v = {n: np.zeros_like(p.data) for n, p in weights.trainable().items()}
        return cls(weights, m, v, 0, lr)


# ---------------------------------------------------------------------------
# domain mapping and loss
# ---------------------------------------------------------------------------

def sigmoid_map(gt) -> np.ndarray:
    x = gt.pixels if isinstance(gt, HdrImage) else np.asarray(gt)
    return ad._sigmoid(np.asarray(x, dtype=np.result_type(x, np.float32)))


def inverse_sigmoid(y, eps: float = LOGIT_EPS) -> np.ndarray:
    """Logit with the argument clamped to [eps, 1 - eps]."""
    y = np.clip(np.asarray(y, dtype=np.float64), eps, 1.0 - eps)
    return np.log(y) - np.log1p(-y)


def mae_loss(pred, target) -> ad.Tensor:
    """Mean absolute error as a differentiable scalar."""
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}", axis="shape")
    return ad.mean_all(ad.abs_(ad.sub(pred, target)))


def training_loss(pred: ad.Tensor, gt: np.ndarray, loss_space: str) -> ad.Tensor:
    if loss_space == "sigmoid":
        return mae_loss(pred, sigmoid_map(gt).astype(pred.dtype))
    return mae_loss(ad.logit(pred, LOGIT_EPS), gt.astype(pred.dtype))


# ---------------------------------------------------------------------------
# optimiser and schedule
# ---------------------------------------------------------------------------

def adam_step(state: TrainState, grads: dict, cfg: TrainConfig | None = None) -> TrainState:
    """One bias-corrected Adam update, in place; returns ``state``."""
    cfg = cfg or TrainConfig(lr=state.lr)
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    trainable = state.weights.trainable()
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise KeyError(f"no gradient for trainable parameters: {', '.join(missing)}")
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in trainable.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - (state.lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
    return state


def plateau_schedule(state: TrainState, val_loss: float, cfg: TrainConfig | None = None) -> TrainState:
    cfg = cfg or TrainConfig()
    if val_loss < state.best_val - 1e-8:
        state.best_val = val_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= cfg.plateau_patience:
            state.lr *= cfg.lr_decay_factor
            state.epochs_since_improvement = 0
    return state


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

FLIPS = ("none", "horizontal", "vertical", "both")


def flip_array(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return a
    axes = {"horizontal": (-1,), "vertical": (-2,), "both": (-2, -1)}[kind]
    return np.ascontiguousarray(np.flip(a, axis=axes))


def augment_flip(stack: ExposureStack, masks: MaskPair, gt, rng, kind: str | None = None):
    """Apply one random flip (or ``kind``) identically to frames, masks and GT."""
    if kind is None:
        kind = FLIPS[int(rng.integers(len(FLIPS)))]

    def ldr(img):
        return LdrImage(flip_array(img.pixels, kind), img.exposure_time)

    gt_out = None
    if gt is not None:
        gt_out = HdrImage(flip_array(gt.pixels, kind)) if isinstance(gt, HdrImage) else flip_array(gt, kind)
    new_stack = ExposureStack(ldr(stack.short), ldr(stack.medium), ldr(stack.long),
                              None if stack.gt is None else HdrImage(flip_array(stack.gt.pixels, kind)),
                              stack.scene_id)
    new_masks = MaskPair(flip_array(masks.mask_short, kind), flip_array(masks.mask_long, kind),
                         masks.thresh_short, masks.thresh_long, masks.degenerate_short, masks.degenerate_long)
    return new_stack, new_masks, gt_out


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def synth_radiance(seed: int, h: int, w: int) -> np.ndarray:
    """Smooth ramp plus 3-8 coloured Gaussian blobs, clipped to [0, 4]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h - 0.5
    xx = (xx + 0.5) / w - 0.5
    theta = rng.uniform(0.0, 2.0 * np.pi)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    lo, hi = rng.uniform(0.02, 0.2), rng.uniform(0.3, 1.0)
    tint = rng.uniform(0.8, 1.0, size=3)
    rad = (lo + (hi - lo) * proj)[None] * tint[:, None, None]
    for _ in range(int(rng.integers(3, 9))):
        cy, cx = rng.uniform(-0.5, 0.5, size=2)
        sigma = rng.uniform(0.05, 0.2)
        amp = rng.uniform(0.3, 3.5)
        color = rng.uniform(0.6, 1.0, size=3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        rad = rad + amp * color[:, None, None] * blob[None]
    return np.clip(rad, 0.0, 4.0)


def expose(radiance: np.ndarray, t: float, gamma: float = GAMMA) -> np.ndarray:
    """Clip, gamma-encode and quantise to 1/255 steps."""
    v = np.clip(radiance * t, 0.0, 1.0) ** (1.0 / gamma)
    return (np.round(v * 255.0) / 255.0).astype(np.float32)


def synth_scene(seed: int, h: int = 64, w: int = 64, scene_id: str | None = None) -> ExposureStack:
    if h % 16 or w % 16:
        raise ShapeError(f"synthetic scenes need extents divisible by 16, got {h}x{w}", axis="height")
    rad = synth_radiance(seed, h, w)
    frames = [LdrImage(expose(rad, t), t) for t in EXPOSURES]
    gt = HdrImage(rad.astype(np.float32))
    return ExposureStack(*frames, gt=gt, scene_id=scene_id or f"scene_{seed:04d}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Example:
    stack: ExposureStack
    masks: MaskPair

    @property
    def gt(self) -> np.ndarray:
        return self.stack.gt.pixels


@dataclass
class TrainResult:
    weights: ModelWeights
    log: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    state: TrainState | None = None


def prepare(stacks) -> list[Example]:
    out = []
    for s in stacks:
        if s.gt is None:
            raise EmptyDatasetError(f"scene {s.scene_id!r} has no ground truth")
        padded, _ = pad_stack(s)
        out.append(Example(padded, segment_stack(padded)))
    return out


def _batch(examples: list[Example], dtype, gamma) -> tuple[NetInputs, np.ndarray]:
    inp = make_inputs([e.stack for e in examples], [e.masks for e in examples], gamma, dtype)
    gt = np.stack([e.gt for e in examples]).astype(dtype)
    return inp, gt


def evaluate_loss(examples: list[Example], weights: ModelWeights, mcfg: ModelConfig,
                  loss_space: str = "sigmoid", batch_size: int = 2) -> float:
    """Inference-mode loss averaged over all pixels of ``examples``."""
    total, count = 0.0, 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        inp, gt = _batch(chunk, weights.dtype, mcfg.gamma)
        y = forward(inp, None, weights, mcfg, mode="infer")
        loss = float(training_loss(y, gt, loss_space).data[0])
        total += loss * gt.size
        count += gt.size
    return total / count


def fit(train_stacks, val_stacks, mcfg: ModelConfig, tcfg: TrainConfig,
        weights: ModelWeights | None = None) -> TrainResult:
    """Train on in-memory stacks; ``val_stacks`` drive the plateau schedule."""
    train_ex = prepare(train_stacks)
    val_ex = prepare(val_stacks) if val_stacks else train_ex
    if not train_ex:
        raise EmptyDatasetError("no training scenes")
    dtype = np.dtype(tcfg.dtype)
    if weights is None:
        weights = init_weights(mcfg, tcfg.seed, dtype)
    else:
        weights = weights.astype(dtype)
    state = TrainState.create(weights, tcfg.lr)
    rng = np.random.default_rng(tcfg.seed + 1)
    result = TrainResult(weights=weights, state=state)
    max_steps = tcfg.max_steps

    for epoch in range(1, tcfg.epochs + 1):
        if max_steps is not None and state.step >= max_steps:
            break
        t0 = time.perf_counter()
        order = rng.permutation(len(train_ex))
        epoch_losses = []
        for i in range(0, len(order), tcfg.batch_size):
            if max_steps is not None and state.step >= max_steps:
                break
            chunk = [train_ex[j] for j in order[i:i + tcfg.batch_size]]
            if tcfg.augment_flips:
                flipped = []
                for e in chunk:
                    s, m, _ = augment_flip(e.stack, e.masks, None, rng)
                    flipped.append(Example(s, m))
                chunk = flipped
            inp, gt = _batch(chunk, dtype, mcfg.gamma)
            bn_updates: dict = {}
            y = forward(inp, None, weights, mcfg, mode="train", bn_updates=bn_updates)
            loss = training_loss(y, gt, tcfg.loss_space)
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at step {state.step}", step=state.step)
            grads = ad.backward(loss, weights.trainable())
            adam_step(state, grads, tcfg)
            for name, arr in bn_updates.items():
                weights[name].data = arr.astype(dtype)
            epoch_losses.append(value)
            result.step_losses.append(value)
        val = evaluate_loss(val_ex, weights, mcfg, tcfg.loss_space, tcfg.batch_size)
        if not math.isfinite(val):
            raise NonFiniteLossError(f"non-finite validation loss after step {state.step}", step=state.step)
        lr_used = state.lr
        plateau_schedule(state, val, tcfg)
        entry = {
            "epoch": epoch,
            "lr": lr_used,
            "train_mae": float(np.mean(epoch_losses)) if epoch_losses else None,
            "val_mae": val,
            "seconds": round(time.perf_counter() - t0, 4) if tcfg.log_seconds else None,
        }
        result.log.append(entry)
        log.info("epoch %d lr %.2e train %.5f val %.5f", epoch, lr_used, entry["train_mae"] or float("nan"), val)
    return result


def load_dataset(data_root) -> tuple[list[ExposureStack], list[ExposureStack]]:
    """Scenes under ``data_root``; ``train/`` and ``val/`` subdirectories are
    used when both exist, otherwise every scene serves both roles."""
    root = Path(data_root)
    if (root / "train").is_dir() and (root / "val").is_dir():
        train = [load_scene(p) for p in list_scenes(root / "train")]
        val = [load_scene(p) for p in list_scenes(root / "val")]
    else:
        train = [load_scene(p) for p in list_scenes(root)]
        val = []
    if not train:
        raise EmptyDatasetError(f"no scenes found under {root}")
    return train, val


def write_metrics(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(json.dumps(e) + "\n")


def train(data_root, model_config: ModelConfig, train_config: TrainConfig,
          weights_out=None, metrics_out=None) -> TrainResult:
    train_stacks, val_stacks = load_dataset(data_root)
    result = fit(train_stacks, val_stacks, model_config, train_config)
    if weights_out is not None:
        result.weights.save(weights_out)
    if metrics_out is not None:
        write_metrics(metrics_out, result.log)
    return result


# ---------------------------------------------------------------------------
# loss-space ablation
# ---------------------------------------------------------------------------

def epochs_to_fraction(log_entries, fraction: float = 0.5) -> int | None:
    """First epoch whose mean training loss is <= ``fraction`` of the first epoch's."""
    losses = [e["train_mae"] for e in log_entries if e["train_mae"] is not None]
    if not losses:
        return None
    target = fraction * losses[0]
    for i, v in enumerate(losses):
        if v <= target:
            return i + 1
    return None


def arm_summary(result: TrainResult, n_scenes: int, batch_size: int, fraction: float = 0.5) -> dict:
    steps_per_epoch = math.ceil(n_scenes / batch_size)
    epochs = epochs_to_fraction(result.log, fraction)
    return {
        "initial_loss": result.log[0]["train_mae"],
        "final_loss": result.log[-1]["train_mae"],
        "steps": result.state.step,
        "steps_to_fraction": None if epochs is None else epochs * steps_per_epoch,
        "result": result,
    }


def run_ablation(stacks, mcfg: ModelConfig, tcfg: TrainConfig, fraction: float = 0.5) -> dict:
    """Train the sigmoid-space and HDR-space arms from identical initial
    weights and report how quickly each halves its own loss."""
    report = {}
    for space in ("sigmoid", "hdr"):
        cfg = TrainConfig(**{**tcfg.to_dict(), "loss_space": space})
        res = fit(stacks, [], mcfg, cfg)
        report[space] = arm_summary(res, len(stacks), cfg.batch_size, fraction)
    return report
