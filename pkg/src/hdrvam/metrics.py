"""Linear and mu-law tone-mapped PSNR."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .imageio import GAMMA, ExposureStack, HdrImage, gamma_map

PSNR_CAP = 100.0
MU = 5000.0


@dataclass
class EvalReport:
    psnr_db: float
    mu_psnr_db: float
    mse: float
    scene_id: str = ""
    peak: float = 1.0
    mu: float = MU

    def to_dict(self) -> dict:
        return asdict(self)


def _pixels(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, HdrImage) else img, dtype=np.float64)


def mse(pred, gt) -> float:
    a, b = _pixels(pred), _pixels(gt)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}", axis="shape")
    return float(np.mean((a - b) ** 2))


def psnr(pred, gt, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``, capped at 100 dB."""
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = mse(pred, gt)
    if err < 1e-20:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / err))


def mu_tonemap(x, mu: float = MU) -> np.ndarray:
    if not mu > 0:
        raise ValueError("mu must be positive")
    return np.log1p(mu * np.clip(_pixels(x), 0.0, 1.0)) / math.log1p(mu)


def mu_psnr(pred, gt, mu: float = MU, peak: float | None = None) -> float:
    """PSNR of mu-law tone-mapped images after normalising by ``peak``
    (default: the ground-truth maximum)."""
    a, b = _pixels(pred), _pixels(gt)
    if peak is None:
        peak = float(b.max()) if b.max() > 0 else 1.0
    return psnr(mu_tonemap(a / peak, mu), mu_tonemap(b / peak, mu), peak=1.0)


def evaluate(pred, gt, mu: float = MU, scene_id: str = "") -> EvalReport:
    b = _pixels(gt)
    peak = float(b.max()) if b.max() > 0 else 1.0
    return EvalReport(
        psnr_db=psnr(pred, gt, peak),
        mu_psnr_db=mu_psnr(pred, gt, mu, peak),
        mse=mse(pred, gt),
        scene_id=scene_id,
        peak=peak,
        mu=mu,
    )


def baseline_medium(stack: ExposureStack, gamma: float = GAMMA) -> HdrImage:
    """The reference frame mapped to the linear domain: a no-fusion baseline."""
    return gamma_map(stack.medium, gamma)
