"""The fusion network: feature extraction, visual attention over masked
frames, spatial alignment, attention gating, an encoder/decoder
reconstruction stage and iterative refinement.

Everything is a plain function of (inputs, weights, config).  Weights are a
flat, ordered name -> :class:`Parameter` map; batch-norm running statistics
are stored alongside as non-trainable entries so a single weight file fully
describes a model.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BNState, Parameter, Tensor
from .errors import BadMagicError, ConfigError, ShapeError, TruncatedFileError, WeightsMismatchError
from .imageio import GAMMA, ExposureStack, six_channel
from .segmentation import MaskPair


@dataclass
class ModelConfig:
    base_channels: int = 32
    encoder_channels: tuple[int, ...] = (32, 64, 64, 64)
    decoder_channels: tuple[int, ...] = (64, 64, 64, 32)
    refine_channels: int = 16
    kernel_size: int = 3
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    refine_iters: int = 3
    align_stream: str = "ldr_only"
    # "gate": fuse S_i * f_i;  "concat": fuse the raw attention maps S_i
    attention_mode: str = "gate"
    # also feed the VAM output into the reconstruction input (it always
    # reaches the decoder skips)
    vam_in_fused: bool = False
    gamma: float = GAMMA

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.validate()

    def validate(self):
        if len(self.encoder_channels) != 4:
            raise ConfigError("encoder_channels must list four widths", key="encoder_channels")
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder_channels must list four widths", key="decoder_channels")
        for key in ("base_channels", "refine_channels"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive", key=key)
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ConfigError("channel widths must be positive", key="encoder_channels")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer", key="kernel_size")
        if self.refine_iters < 1:
            raise ConfigError("refine_iters must be >= 1", key="refine_iters")
        if not self.bn_epsilon > 0:
            raise ConfigError("bn_epsilon must be positive", key="bn_epsilon")
        if not 0 <= self.bn_momentum < 1:
            raise ConfigError("bn_momentum must lie in [0, 1)", key="bn_momentum")
        if self.align_stream != "ldr_only":
            raise ConfigError("align_stream supports only 'ldr_only'", key="align_stream")
        if self.attention_mode not in ("gate", "concat"):
            raise ConfigError("attention_mode must be 'gate' or 'concat'", key="attention_mode")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive", key="gamma")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}", key=key)
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    kind: str  # dw | pw | conv | bias | gamma | beta | mean | var

    @property
    def trainable(self) -> bool:
        return self.kind not in ("mean", "var")


def _sep_specs(prefix, cin, cout, k):
    return [
        ParamSpec(f"{prefix}.dw", (cin, 1, k, k), "dw"),
        ParamSpec(f"{prefix}.pw", (cout, cin, 1, 1), "pw"),
        ParamSpec(f"{prefix}.b", (cout,), "bias"),
    ]


def _conv_specs(prefix, cin, cout, k):
    return [ParamSpec(f"{prefix}.w", (cout, cin, k, k), "conv"), ParamSpec(f"{prefix}.b", (cout,), "bias")]


def _fe_specs(prefix, cin, c, k):
    return _sep_specs(f"{prefix}.sep1", cin, c, k) + _sep_specs(f"{prefix}.sep2", 2 * c, c, k)


def fused_channels(config: ModelConfig) -> int:
    n = 6 if config.vam_in_fused else 5
    return n * config.base_channels


def parameter_specs(config: ModelConfig) -> list[ParamSpec]:
    """Every parameter the network owns, in a fixed order."""
    c, k = config.base_channels, config.kernel_size
    specs = []
    specs += _fe_specs("fe_gamma", 6, c, k)
    specs += _fe_specs("fe_ldr", 3, c, k)
    specs += _fe_specs("vam.fe", 3, c, k)
    for side in ("short", "long"):
        for i in (1, 2, 3):
            specs += _conv_specs(f"align_{side}.conv{i}", c, c, k)
    for side in ("short", "long"):
        specs += _sep_specs(f"att_{side}.sep1", 2 * c, c, k)
        specs += _sep_specs(f"att_{side}.sep2", c, c, k)

    cin = fused_channels(config)
    for i, ec in enumerate(config.encoder_channels):
        p = f"recon.enc{i}"
        specs += _sep_specs(f"{p}.sep", cin, ec, k)
        specs += [
            ParamSpec(f"{p}.bn.gamma", (ec,), "gamma"),
            ParamSpec(f"{p}.bn.beta", (ec,), "beta"),
            ParamSpec(f"{p}.bn.running_mean", (ec,), "mean"),
            ParamSpec(f"{p}.bn.running_var", (ec,), "var"),
        ]
        cin = 2 * ec
    for i, dc in enumerate(config.decoder_channels):
        specs += _sep_specs(f"recon.dec{i}.sep", cin + 2 * c, dc, k)
        cin = dc
    specs += _sep_specs("recon.out.sep", cin, c, k)

    r = config.refine_channels
    specs += _sep_specs("refine.reduce", c, r, k)
    for i in range(config.refine_iters):
        specs += _sep_specs(f"refine.iter{i}.a", c + r, c, k)
        specs += _sep_specs(f"refine.iter{i}.b", c, c, k)
    specs += _conv_specs("refine.out", c, 3, k)
    return specs


class ModelWeights:
    """Ordered name -> Parameter map."""

    def __init__(self, params: Sequence[Parameter] = ()):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        for p in params:
            if p.name in self._params:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self._params[p.name] = p

    def __getitem__(self, name) -> Parameter:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def tensor(self, name) -> Tensor:
        return self._params[name].tensor

    def trainable(self) -> "OrderedDict[str, Parameter]":
        return OrderedDict((n, p) for n, p in self._params.items() if p.trainable)

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self._params.values() if p.trainable)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self._params.items())

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            [Parameter(n, Tensor(p.data.copy()), p.trainable) for n, p in self._params.items()]
        )

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(
            [Parameter(n, Tensor(p.data.astype(dtype)), p.trainable) for n, p in self._params.items()]
        )

    @property
    def dtype(self):
        return next(iter(self._params.values())).data.dtype

    # -- serialisation --------------------------------------------------

    def to_bytes(self) -> bytes:
        from .imageio import encode_tns

        out = [b"VAMW", struct.pack("<B", 1), struct.pack("<I", len(self._params))]
        for name, p in self._params.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(encode_tns(p.data))
        return b"".join(out)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, config: ModelConfig, dtype=np.float64) -> "ModelWeights":
        from .imageio import decode_tns

        if buf[:4] != b"VAMW":
            raise BadMagicError(f"not a weight file (magic {bytes(buf[:4])!r})")
        if len(buf) < 9:
            raise TruncatedFileError("weight file header truncated")
        if buf[4] != 1:
            raise BadMagicError(f"unsupported weight file version {buf[4]}")
        (count,) = struct.unpack_from("<I", buf, 5)
        pos = 9
        arrays = OrderedDict()
        for _ in range(count):
            if len(buf) < pos + 2:
                raise TruncatedFileError("weight file truncated inside a name")
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = bytes(buf[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            arr, pos = decode_tns(buf, pos)
            arrays[name] = arr
        return cls.from_arrays(arrays, config, dtype)

    @classmethod
    def load(cls, path, config: ModelConfig, dtype=np.float64) -> "ModelWeights":
        return cls.from_bytes(Path(path).read_bytes(), config, dtype)

    @classmethod
    def from_arrays(cls, arrays, config: ModelConfig, dtype=np.float64) -> "ModelWeights":
        specs = parameter_specs(config)
        expected = {s.name: s for s in specs}
        missing = [n for n in expected if n not in arrays]
        extra = [n for n in arrays if n not in expected]
        misshaped = [n for n, a in arrays.items() if n in expected and tuple(a.shape) != expected[n].shape]
        if missing or extra or misshaped:
            parts = []
            if missing:
                parts.append("missing: " + ", ".join(missing))
            if extra:
                parts.append("unexpected: " + ", ".join(extra))
            if misshaped:
                parts.append("wrong shape: " + ", ".join(misshaped))
            raise WeightsMismatchError("weights do not match model config (" + "; ".join(parts) + ")",
                                       missing, extra, misshaped)
        return cls([Parameter(s.name, Tensor(np.array(arrays[s.name], dtype=dtype)), s.trainable) for s in specs])


def _glorot(rng, shape, kind):
    if kind == "dw":
        # per-channel spatial filter: fans are the kernel area
        fan_in = fan_out = shape[2] * shape[3]
    else:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_weights(config: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelWeights:
    """Seeded Glorot-uniform kernels, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    params = []
    for s in parameter_specs(config):
        if s.kind in ("dw", "pw", "conv"):
            arr = _glorot(rng, s.shape, s.kind)
        elif s.kind in ("gamma", "var"):
            arr = np.ones(s.shape)
        else:
            arr = np.zeros(s.shape)
        params.append(Parameter(s.name, Tensor(arr.astype(dtype)), s.trainable))
    return ModelWeights(params)


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

@dataclass
class NetInputs:
    """Batched network inputs (arrays or tensors), each [N, C, H, W]."""

    ldr: tuple  # short, medium, long; 3 channels each
    six: tuple  # LDR + gamma-mapped; 6 channels each
    mask_short: object
    mask_long: object

    @property
    def shape(self):
        return ad.as_tensor(self.ldr[1]).shape


def make_inputs(stacks, masks, gamma: float = GAMMA, dtype=np.float64) -> NetInputs:
    if isinstance(stacks, ExposureStack):
        stacks = [stacks]
    if isinstance(masks, MaskPair):
        masks = [masks]
    if len(stacks) != len(masks):
        raise ShapeError(f"{len(stacks)} stacks but {len(masks)} mask pairs", axis="batch")
    for s, m in zip(stacks, masks):
        if m.mask_short.shape[-2:] != s.shape or m.mask_long.shape[-2:] != s.shape:
            raise ShapeError(f"masks {m.mask_short.shape} do not match scene {s.shape}", axis="height")
    ldr = tuple(np.stack([s.images[i].pixels for s in stacks]).astype(dtype) for i in range(3))
    six = tuple(np.stack([six_channel(s.images[i], gamma) for s in stacks]).astype(dtype) for i in range(3))
    ms = np.stack([np.asarray(m.mask_short).reshape(1, *s.shape) for s, m in zip(stacks, masks)]).astype(dtype)
    ml = np.stack([np.asarray(m.mask_long).reshape(1, *s.shape) for s, m in zip(stacks, masks)]).astype(dtype)
    return NetInputs(ldr, six, ms, ml)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def _sep(x, w: ModelWeights, prefix):
    return ad.sepconv2d(x, w.tensor(prefix + ".dw"), w.tensor(prefix + ".pw"), w.tensor(prefix + ".b"))


def _conv(x, w: ModelWeights, prefix):
    return ad.conv2d(x, w.tensor(prefix + ".w"), w.tensor(prefix + ".b"), stride=1, padding="same")


def _trace(trace, name, t):
    if trace is not None:
        trace.append((name, tuple(t.shape)))


def feature_extract(x, weights: ModelWeights, prefix: str = "fe_gamma") -> Tensor:
    x = ad.as_tensor(x)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"feature extraction needs even extents, got {h}x{w}", axis="height" if h % 2 else "width")
    s = _sep(x, weights, prefix + ".sep1")
    c = ad.concat_channels([ad.maxpool2(s), ad.avgpool2(s, 2)])
    return ad.upsample2(ad.relu(_sep(c, weights, prefix + ".sep2")))


def vam(i_short, i_long, mask_short, mask_long, weights: ModelWeights, prefix: str = "vam.fe") -> Tensor:
    """Features of the mask-gated short and long frames, summed."""
    feat_l = feature_extract(ad.multiply(mask_short, i_short), weights, prefix)
    feat_h = feature_extract(ad.multiply(mask_long, i_long), weights, prefix)
    return ad.add(feat_l, feat_h)


def spatial_align(ref_feat, inp_feat, weights: ModelWeights, prefix: str = "align_short") -> Tensor:
    ref1 = ad.relu(_conv(ref_feat, weights, prefix + ".conv1"))
    gated = ad.multiply(ad.relu(_conv(ref1, weights, prefix + ".conv2")), inp_feat)
    return ad.add(ad.relu(_conv(ref1, weights, prefix + ".conv3")), gated)


def attention(f_i, f_r, weights: ModelWeights, prefix: str = "att_short") -> Tensor:
    r = ad.relu(_sep(ad.concat_channels([f_i, f_r]), weights, prefix + ".sep1"))
    return ad.sigmoid(_sep(r, weights, prefix + ".sep2"))


def _bn_state(weights, prefix, config):
    return BNState(
        running_mean=weights[prefix + ".running_mean"].data.copy(),
        running_var=weights[prefix + ".running_var"].data.copy(),
        momentum=config.bn_momentum,
        eps=config.bn_epsilon,
    )


def reconstruct(fused_in, ref_feat, vam_feat, weights: ModelWeights, config: ModelConfig,
                mode: str = "infer", bn_updates: dict | None = None, trace: list | None = None) -> Tensor:
    """Four pooling encoder blocks, four decoder blocks fed with pooled
    reference and VAM features, and a final SepConv+ReLU."""
    x = ad.as_tensor(fused_in)
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"reconstruction needs extents divisible by 16, got {h}x{w}",
                         axis="height" if h % 16 else "width")
    for i in range(4):
        p = f"recon.enc{i}"
        x = _sep(x, weights, p + ".sep")
        state = _bn_state(weights, p + ".bn", config)
        x = ad.batchnorm(x, weights.tensor(p + ".bn.gamma"), weights.tensor(p + ".bn.beta"), state, mode)
        if mode == "train" and bn_updates is not None:
            bn_updates[p + ".bn.running_mean"] = state.running_mean
            bn_updates[p + ".bn.running_var"] = state.running_var
        x = ad.relu(x)
        x = ad.concat_channels([ad.maxpool2(x), ad.avgpool2(x, 2)])
        _trace(trace, f"enc{i}", x)
    # skip pyramids: level j is pooled by 2**j (cascaded 2x means are exact averages)
    ref_pyr, vam_pyr = [ref_feat], [vam_feat]
    for _ in range(4):
        ref_pyr.append(ad.avgpool2(ref_pyr[-1], 2))
        vam_pyr.append(ad.avgpool2(vam_pyr[-1], 2))
    for i in range(4):
        r, v = ref_pyr[4 - i], vam_pyr[4 - i]
        _trace(trace, f"dec{i}.skip", r)
        x = ad.concat_channels([x, r, v])
        x = ad.upsample2(ad.relu(_sep(x, weights, f"recon.dec{i}.sep")))
        _trace(trace, f"dec{i}", x)
    out = ad.relu(_sep(x, weights, "recon.out.sep"))
    _trace(trace, "recon.out", out)
    return out


def refine(recon_out, ref_feat, weights: ModelWeights, config: ModelConfig) -> Tensor:
    """Iterative refinement against reduced reference features; sigmoid output."""
    f_hat = ad.relu(_sep(ref_feat, weights, "refine.reduce"))
    x = recon_out
    for i in range(config.refine_iters):
        c = ad.concat_channels([x, f_hat])
        x = ad.relu(_sep(_sep(c, weights, f"refine.iter{i}.a"), weights, f"refine.iter{i}.b"))
    return ad.sigmoid(_conv(x, weights, "refine.out"))


def forward(stack, masks, weights: ModelWeights, config: ModelConfig, mode: str = "infer",
            bn_updates: dict | None = None, trace: list | None = None) -> Tensor:
    """Sigmoid-space prediction [N,3,H,W] for one or more stacks.

    ``stack`` may be an :class:`ExposureStack`, a sequence of them (with a
    matching ``masks`` sequence) or prebuilt :class:`NetInputs` (``masks``
    is then ignored).  In ``train`` mode new batch-norm running statistics
    are written to ``bn_updates`` when given; ``weights`` is never mutated.
    """
    if isinstance(stack, NetInputs):
        inp = stack
    else:
        inp = make_inputs(stack, masks, config.gamma, weights.dtype)
    ldr_s, ldr_m, ldr_l = (ad.as_tensor(t) for t in inp.ldr)
    six_s, six_m, six_l = (ad.as_tensor(t) for t in inp.six)
    h, w = ldr_m.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"network input must be divisible by 16, got {h}x{w}", axis="height" if h % 16 else "width")

    f1 = feature_extract(six_s, weights, "fe_gamma")
    f_r = feature_extract(six_m, weights, "fe_gamma")
    f3 = feature_extract(six_l, weights, "fe_gamma")
    _trace(trace, "fe_gamma", f_r)

    a_r = feature_extract(ldr_m, weights, "fe_ldr")
    out1 = spatial_align(a_r, feature_extract(ldr_s, weights, "fe_ldr"), weights, "align_short")
    out3 = spatial_align(a_r, feature_extract(ldr_l, weights, "fe_ldr"), weights, "align_long")
    _trace(trace, "align", out1)

    s1 = attention(f1, f_r, weights, "att_short")
    s3 = attention(f3, f_r, weights, "att_long")
    if config.attention_mode == "gate":
        att1, att3 = ad.multiply(s1, f1), ad.multiply(s3, f3)
    else:
        att1, att3 = s1, s3
    _trace(trace, "attention", s1)

    v = vam(ldr_s, ldr_l, inp.mask_short, inp.mask_long, weights, "vam.fe")
    _trace(trace, "vam", v)

    parts = [out1, out3, att1, att3, f_r] + ([v] if config.vam_in_fused else [])
    fused = ad.concat_channels(parts)
    _trace(trace, "fused", fused)
    recon = reconstruct(fused, f_r, v, weights, config, mode, bn_updates, trace)
    y = refine(recon, f_r, weights, config)
    _trace(trace, "output", y)
    return y


def predict(stack, masks, weights: ModelWeights, config: ModelConfig) -> np.ndarray:
    """Inference-mode forward returning a plain array."""
    return forward(stack, masks, weights, config, mode="infer").data
