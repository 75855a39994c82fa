"""Image containers, exposure mapping, resampling and binary file formats.

Pixel arrays are channel-first ``[3, H, W]`` numpy arrays.  LDR values live
in [0, 1]; HDR values are non-negative linear radiance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ExposureOrderError,
    MissingFileError,
    PixelRangeError,
    RankError,
    SceneShapeError,
    TruncatedFileError,
    UnsupportedEndiannessError,
)

GAMMA = 2.24
LUMA_BT601 = (0.299, 0.587, 0.114)
SIZE_MULTIPLE = 16


@dataclass
class LdrImage:
    pixels: np.ndarray
    exposure_time: float

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[0] != 3:
            raise SceneShapeError(f"LDR pixels must be [3,H,W], got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min(initial=0.0) < 0.0 or p.max(initial=0.0) > 1.0:
            raise PixelRangeError("LDR pixel values must lie in [0, 1]")
        if not self.exposure_time > 0:
            raise ExposureOrderError(f"exposure time must be positive, got {self.exposure_time}")
        self.pixels = p

    @property
    def shape(self):
        return self.pixels.shape[1:]


@dataclass
class HdrImage:
    pixels: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[0] != 3:
            raise SceneShapeError(f"HDR pixels must be [3,H,W], got {p.shape}")
        if not np.all(np.isfinite(p)) or p.min(initial=0.0) < 0.0:
            raise PixelRangeError("HDR pixel values must be finite and non-negative")
        self.pixels = p

    @property
    def shape(self):
        return self.pixels.shape[1:]


@dataclass
class ExposureStack:
    """Three bracketed LDR frames; ``medium`` is the reference."""

    short: LdrImage
    medium: LdrImage
    long: LdrImage
    gt: HdrImage | None = None
    scene_id: str = ""

    def __post_init__(self):
        shapes = {self.short.shape, self.medium.shape, self.long.shape}
        if self.gt is not None:
            shapes.add(self.gt.shape)
        if len(shapes) != 1:
            raise SceneShapeError(f"images in scene {self.scene_id!r} differ in size: {sorted(shapes)}")
        t = (self.short.exposure_time, self.medium.exposure_time, self.long.exposure_time)
        if not t[0] < t[1] < t[2]:
            raise ExposureOrderError(f"exposure times must be strictly ascending, got {t}")

    @property
    def images(self) -> tuple[LdrImage, LdrImage, LdrImage]:
        return self.short, self.medium, self.long

    @property
    def shape(self):
        return self.medium.shape


# -- exposure-domain mapping -------------------------------------------------

def gamma_map(img: LdrImage, gamma: float = GAMMA) -> HdrImage:
    """Linearise an LDR frame: ``I**gamma / t``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return HdrImage(np.power(img.pixels, gamma) / img.exposure_time)


def six_channel(img: LdrImage, gamma: float = GAMMA) -> np.ndarray:
    """LDR channels followed by their gamma-mapped counterparts."""
    return np.concatenate([img.pixels, gamma_map(img, gamma).pixels], axis=0)


def luma(img: LdrImage | np.ndarray, coeffs=LUMA_BT601) -> np.ndarray:
    p = img.pixels if isinstance(img, LdrImage) else np.asarray(img)
    y = coeffs[0] * p[0] + coeffs[1] * p[1] + coeffs[2] * p[2]
    return np.clip(y, 0.0, 1.0)[None]


# -- resampling / padding ----------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_bilinear(t: np.ndarray, h2: int, w2: int) -> np.ndarray:
    if h2 < 1 or w2 < 1:
        raise ValueError("target size must be positive")
    c, h, w = t.shape
    if (h, w) == (h2, w2):
        return t.copy()
    mh = _interp_matrix(h, h2).astype(t.dtype)
    mw = _interp_matrix(w, w2).astype(t.dtype)
    return np.einsum("ph,chw,qw->cpq", mh, t, mw)


def pad_amounts(h: int, w: int, h2: int, w2: int) -> tuple[tuple[int, int], tuple[int, int]]:
    if h2 < h or w2 < w:
        raise ValueError(f"cannot pad {h}x{w} down to {h2}x{w2}")
    dh, dw = h2 - h, w2 - w
    return (dh // 2, dh - dh // 2), (dw // 2, dw - dw // 2)


def pad_to(t: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Edge-replicate ``t`` [..., H, W] to ``h2 x w2``; odd remainders go bottom/right."""
    ph, pw = pad_amounts(t.shape[-2], t.shape[-1], h2, w2)
    pads = [(0, 0)] * (t.ndim - 2) + [ph, pw]
    return np.pad(t, pads, mode="edge")


def center_crop(t: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`pad_to`."""
    (top, _), (left, _) = pad_amounts(h, w, t.shape[-2], t.shape[-1])
    return t[..., top:top + h, left:left + w]


def next_multiple(n: int, m: int = SIZE_MULTIPLE) -> int:
    return -(-n // m) * m


def pad_stack(stack: ExposureStack, multiple: int = SIZE_MULTIPLE) -> tuple[ExposureStack, tuple[int, int]]:
    """Pad every frame so height and width divide ``multiple``.

    Returns the padded stack and the original ``(H, W)`` for cropping back.
    """
    h, w = stack.shape
    h2, w2 = next_multiple(h, multiple), next_multiple(w, multiple)
    if (h2, w2) == (h, w):
        return stack, (h, w)

    def ldr(img):
        return LdrImage(pad_to(img.pixels, h2, w2), img.exposure_time)

    gt = None if stack.gt is None else HdrImage(pad_to(stack.gt.pixels, h2, w2))
    return ExposureStack(ldr(stack.short), ldr(stack.medium), ldr(stack.long), gt, stack.scene_id), (h, w)


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, img: HdrImage | np.ndarray):
    p = img.pixels if isinstance(img, HdrImage) else np.asarray(img)
    _, h, w = p.shape
    # rows are stored bottom-to-top, RGB interleaved
    payload = np.ascontiguousarray(p.transpose(1, 2, 0)[::-1], dtype="<f4")
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(payload.tobytes())


def _read_token_line(f) -> bytes:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise TruncatedFileError("PFM header is truncated")
    return line.strip()


def read_pfm_array(path) -> np.ndarray:
    """Decode a little-endian RGB Portable FloatMap to a float32 [3,H,W] array."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"PF":
            raise BadMagicError(f"{path}: not an RGB PFM file (magic {magic[:8]!r})")
        dims = _read_token_line(f).split()
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(_read_token_line(f))
        except (IndexError, ValueError) as exc:
            raise BadMagicError(f"{path}: malformed PFM header") from exc
        if scale > 0:
            raise UnsupportedEndiannessError(f"{path}: big-endian PFM (scale {scale}) is not supported")
        body = f.read()
    need = w * h * 3 * 4
    if len(body) < need:
        raise TruncatedFileError(f"{path}: payload has {len(body)} bytes, expected {need}")
    arr = np.frombuffer(body[:need], dtype="<f4").reshape(h, w, 3)[::-1]
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32)


def read_pfm(path) -> HdrImage:
    return HdrImage(read_pfm_array(path))


# -- TNS ---------------------------------------------------------------------

TNS_MAGIC = b"TNS1"


def encode_tns(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.ndim < 1 or t.ndim > 4:
        raise RankError(f"TNS supports rank 1..4, got {t.ndim}")
    header = TNS_MAGIC + struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tns(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    if buf[offset:offset + 4] != TNS_MAGIC:
        if len(buf) - offset < 4:
            raise TruncatedFileError("TNS data truncated inside magic")
        raise BadMagicError(f"bad TNS magic {bytes(buf[offset:offset + 4])!r}")
    pos = offset + 4
    if len(buf) < pos + 1:
        raise TruncatedFileError("TNS data truncated before rank byte")
    rank = buf[pos]
    pos += 1
    if rank < 1 or rank > 4:
        raise RankError(f"TNS rank must be 1..4, got {rank}")
    if len(buf) < pos + 4 * rank:
        raise TruncatedFileError("TNS data truncated inside extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * int(np.prod(shape))
    if len(buf) < pos + nbytes:
        raise TruncatedFileError(f"TNS payload has {len(buf) - pos} bytes, expected {nbytes}")
    arr = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
    return arr.astype(np.float32), pos + nbytes


def write_tns(path, t: np.ndarray):
    with open(path, "wb") as f:
        f.write(encode_tns(t))


def read_tns(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    arr, _ = decode_tns(buf)
    return arr


# -- scene directories -------------------------------------------------------

SCENE_FILES = ("short.tns", "medium.tns", "long.tns", "exposures.txt")


def is_scene_dir(path) -> bool:
    return all((Path(path) / name).is_file() for name in SCENE_FILES)


def load_scene(path) -> ExposureStack:
    root = Path(path)
    if not root.is_dir():
        raise MissingFileError(f"scene directory {root} does not exist")
    for name in SCENE_FILES:
        if not (root / name).is_file():
            raise MissingFileError(f"{root}: missing {name}")
    lines = [ln.strip() for ln in (root / "exposures.txt").read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != 3:
        raise ExposureOrderError(f"{root}/exposures.txt must hold three values, found {len(lines)}")
    times = [float(v) for v in lines]
    if not times[0] < times[1] < times[2]:
        raise ExposureOrderError(f"{root}: exposures {times} are not ascending")
    frames = []
    for name in ("short", "medium", "long"):
        t = read_tns(root / f"{name}.tns")
        if t.ndim != 3 or t.shape[0] != 3:
            raise SceneShapeError(f"{root}/{name}.tns must be [3,H,W], got {t.shape}")
        if t.min() < 0.0 or t.max() > 1.0 or not np.all(np.isfinite(t)):
            raise PixelRangeError(f"{root}/{name}.tns has pixels outside [0, 1]")
        frames.append(t)
    if len({f.shape for f in frames}) != 1:
        raise SceneShapeError(f"{root}: frame shapes differ: {[f.shape for f in frames]}")
    gt = None
    if (root / "gt.pfm").is_file():
        gt = read_pfm(root / "gt.pfm")
        if gt.shape != frames[0].shape[1:]:
            raise SceneShapeError(f"{root}: gt.pfm is {gt.shape}, frames are {frames[0].shape[1:]}")
    imgs = [LdrImage(f, t) for f, t in zip(frames, times)]
    return ExposureStack(*imgs, gt=gt, scene_id=root.name)


def save_scene(path, stack: ExposureStack):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name, img in zip(("short", "medium", "long"), stack.images):
        write_tns(root / f"{name}.tns", img.pixels)
    times = "".join(f"{img.exposure_time!r}\n" for img in stack.images)
    (root / "exposures.txt").write_text(times, encoding="utf-8")
    if stack.gt is not None:
        write_pfm(root / "gt.pfm", stack.gt)


def list_scenes(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError(f"data directory {root} does not exist")
    if is_scene_dir(root):
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and is_scene_dir(p))

