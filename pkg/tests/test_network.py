import numpy as np
import pytest
from numpy.lib.stride_tricks import sliding_window_view

from hdrvam import autodiff as ad
from hdrvam import network as net
from hdrvam.errors import BadMagicError, ConfigError, ShapeError, TruncatedFileError, WeightsMismatchError
from hdrvam.segmentation import MaskPair, segment_stack
from hdrvam.training import synth_scene

CFG = net.ModelConfig()


@pytest.fixture(scope="module")
def weights():
    return net.init_weights(CFG, seed=3)


@pytest.fixture(scope="module")
def scene64():
    s = synth_scene(11, 64, 64)
    return s, segment_stack(s)


def zero_weights(cfg=CFG):
    w = net.init_weights(cfg, 0)
    for name, p in w.items():
        if not name.endswith(("gamma", "running_var")):
            p.data = np.zeros_like(p.data)
    return w


def randomized(w: net.ModelWeights, seed: int, scale: float = 0.3) -> net.ModelWeights:
    """Copy with non-zero biases and BN affine terms so zero-init shortcuts hide nothing."""
    rng = np.random.default_rng(seed)
    out = w.copy()
    for name, p in out.items():
        if name.endswith((".b", "beta")):
            p.data = rng.uniform(-scale, scale, p.data.shape)
        elif name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.data.shape)
    return out


# -- independent numpy transcriptions -----------------------------------------

def np_conv(x, w, b=None):
    k = w.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (k, k), (k, k)))
    win = sliding_window_view(xp, w.shape[-2:], axis=(2, 3))  # n c h w kh kw
    out = np.einsum("nchwuv,ocuv->nohw", win, w)
    return out if b is None else out + b[None, :, None, None]


def np_sep(x, w, prefix):
    dw, pw, b = (w[prefix + s].data for s in (".dw", ".pw", ".b"))
    k = dw.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (k, k), (k, k)))
    win = sliding_window_view(xp, dw.shape[-2:], axis=(2, 3))
    d = np.einsum("nchwuv,cuv->nchw", win, dw[:, 0])
    return np.einsum("nchw,oc->nohw", d, pw[:, :, 0, 0]) + b[None, :, None, None]


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# -- config / layout -----------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        net.ModelConfig(encoder_channels=(32, 64, 64))
    with pytest.raises(ConfigError):
        net.ModelConfig(kernel_size=4)
    with pytest.raises(ConfigError):
        net.ModelConfig(refine_iters=0)
    with pytest.raises(ConfigError) as e:
        net.ModelConfig.from_dict({"base_chanels": 8})
    assert e.value.key == "base_chanels"
    cfg = net.ModelConfig.from_dict(CFG.to_dict())
    assert cfg == CFG


def test_parameter_layout(weights):
    names = [s.name for s in net.parameter_specs(CFG)]
    assert len(names) == len(set(names)) == len(weights)
    assert net.fused_channels(CFG) == 160
    assert weights["recon.enc0.sep.pw"].shape == (32, 160, 1, 1)
    assert weights["recon.dec0.sep.pw"].shape == (64, 128 + 64, 1, 1)
    assert weights["refine.out.w"].shape == (3, 32, 3, 3)
    assert not weights["recon.enc1.bn.running_var"].trainable
    assert weights.num_trainable() == 153871


def test_init_is_seeded(weights):
    again = net.init_weights(CFG, seed=3)
    assert weights.to_bytes() == again.to_bytes()
    assert net.init_weights(CFG, seed=4).to_bytes() != weights.to_bytes()
    lim = np.sqrt(6.0 / (32 * 9 + 32 * 9))
    assert np.abs(weights["align_short.conv1.w"].data).max() <= lim
    assert np.all(weights["recon.enc0.bn.running_var"].data == 1.0)


# -- blocks --------------------------------------------------------------------

def test_feature_extract_contract(weights, rng):
    x = rng.uniform(0, 1, (2, 6, 8, 12))
    assert net.feature_extract(x, weights, "fe_gamma").shape == (2, 32, 8, 12)
    z = zero_weights()
    assert np.all(net.feature_extract(np.zeros((1, 6, 8, 8)), z, "fe_gamma").data == 0)
    with pytest.raises(ShapeError):
        net.feature_extract(np.zeros((1, 6, 7, 8)), weights, "fe_gamma")


def test_feature_extract_constant_input_interior(weights):
    w = randomized(weights, 0)
    s = net._sep(np.full((1, 6, 8, 8), 0.4), w, "fe_gamma.sep1").data
    inner = s[:, :, 1:-1, 1:-1]
    np.testing.assert_allclose(inner, inner[:, :, :1, :1] * np.ones_like(inner), rtol=0, atol=1e-14)
    assert not np.allclose(s[:, :, 0, 0], s[:, :, 3, 3])


def test_feature_extract_transcription(weights, rng):
    w = randomized(weights, 1)
    x = rng.uniform(0, 1, (1, 3, 8, 8))
    s = np_sep(x, w, "fe_ldr.sep1")
    mx = s.reshape(1, 32, 4, 2, 4, 2).max(axis=(3, 5))
    av = s.reshape(1, 32, 4, 2, 4, 2).mean(axis=(3, 5))
    r = relu(np_sep(np.concatenate([mx, av], axis=1), w, "fe_ldr.sep2"))
    want = ad.upsample2(r).data
    np.testing.assert_allclose(net.feature_extract(x, w, "fe_ldr").data, want, atol=1e-12)


def test_vam_cases(weights, rng):
    w = randomized(weights, 2)
    i_s, i_l = rng.uniform(0, 1, (1, 3, 8, 8)), rng.uniform(0, 1, (1, 3, 8, 8))
    ones = np.ones((1, 1, 8, 8))
    v = net.vam(i_s, i_l, ones, ones, w).data
    want = ad.add(net.feature_extract(i_s, w, "vam.fe"), net.feature_extract(i_l, w, "vam.fe")).data
    assert v.tobytes() == want.tobytes()
    zeros = np.zeros((1, 1, 8, 8))
    assert np.all(net.vam(i_s, i_l, zeros, zeros, zero_weights()).data == 0)
    ms = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float)
    ml = (rng.uniform(size=(1, 1, 8, 8)) > 0.5).astype(float)
    v = net.vam(i_s, i_l, ms, ml, w).data
    want = (net.feature_extract(ms * i_s, w, "vam.fe").data + net.feature_extract(ml * i_l, w, "vam.fe").data)
    assert v.tobytes() == want.tobytes()


def test_spatial_align_cases(weights, rng):
    ref, inp = rng.standard_normal((1, 32, 8, 8)), rng.standard_normal((1, 32, 8, 8))
    assert np.all(net.spatial_align(ref, inp, zero_weights(), "align_short").data == 0)

    gate = zero_weights()
    gate["align_short.conv2.b"].data = np.ones(32)
    np.testing.assert_array_equal(net.spatial_align(ref, inp, gate, "align_short").data, inp)

    w = randomized(weights, 3)

    def conv(x, name):
        return np_conv(x, w[name + ".w"].data, w[name + ".b"].data)

    ref1 = relu(conv(ref, "align_long.conv1"))
    m = relu(conv(ref1, "align_long.conv2")) * inp
    want = relu(conv(ref1, "align_long.conv3")) + m
    np.testing.assert_allclose(net.spatial_align(ref, inp, w, "align_long").data, want, atol=1e-12)


def test_attention_cases(weights, rng):
    f_i, f_r = rng.standard_normal((1, 32, 8, 8)), rng.standard_normal((1, 32, 8, 8))
    assert np.all(net.attention(f_i, f_r, zero_weights()).data == 0.5)
    w = randomized(weights, 4)
    s = net.attention(f_i, f_r, w, "att_long").data
    assert s.shape == (1, 32, 8, 8) and s.min() > 0 and s.max() < 1
    r = ad.relu(net._sep(ad.concat_channels([f_i, f_r]), w, "att_long.sep1"))
    want = ad.sigmoid(net._sep(r, w, "att_long.sep2")).data
    assert s.tobytes() == want.tobytes()
    np_want = sigmoid(np_sep(relu(np_sep(np.concatenate([f_i, f_r], 1), w, "att_long.sep1")), w, "att_long.sep2"))
    np.testing.assert_allclose(s, np_want, atol=1e-12)


def test_reconstruct_zero_and_shapes(weights, rng):
    fused = rng.standard_normal((1, 160, 32, 32))
    ref, v = rng.standard_normal((1, 32, 32, 32)), rng.standard_normal((1, 32, 32, 32))
    out = net.reconstruct(fused, ref, v, zero_weights(), CFG)
    assert out.shape == (1, 32, 32, 32) and np.all(out.data == 0)
    with pytest.raises(ShapeError):
        net.reconstruct(np.zeros((1, 160, 24, 24)), np.zeros((1, 32, 24, 24)), np.zeros((1, 32, 24, 24)),
                        weights, CFG)


def test_refine_cases(weights, rng):
    x, ref = rng.standard_normal((1, 32, 8, 8)), rng.standard_normal((1, 32, 8, 8))
    assert np.all(net.refine(x, ref, zero_weights(), CFG).data == 0.5)
    w = randomized(weights, 5)
    y = net.refine(x, ref, w, CFG).data
    assert y.shape == (1, 3, 8, 8) and y.min() > 0 and y.max() < 1
    # loop transcription with the public ops
    f_hat = ad.relu(net._sep(ref, w, "refine.reduce"))
    cur = ad.as_tensor(x)
    i = 0
    while i < 3:
        c = ad.concat_channels([cur, f_hat])
        cur = ad.relu(net._sep(net._sep(c, w, f"refine.iter{i}.a"), w, f"refine.iter{i}.b"))
        i += 1
    out = ad.sigmoid(net._conv(cur, w, "refine.out")).data
    assert y.tobytes() == out.tobytes()


# -- full forward ----------------------------------------------------------------

EXPECTED_TRACE = [
    ("fe_gamma", (2, 32, 64, 64)),
    ("align", (2, 32, 64, 64)),
    ("attention", (2, 32, 64, 64)),
    ("vam", (2, 32, 64, 64)),
    ("fused", (2, 160, 64, 64)),
    ("enc0", (2, 64, 32, 32)),
    ("enc1", (2, 128, 16, 16)),
    ("enc2", (2, 128, 8, 8)),
    ("enc3", (2, 128, 4, 4)),
    ("dec0.skip", (2, 32, 4, 4)),
    ("dec0", (2, 64, 8, 8)),
    ("dec1.skip", (2, 32, 8, 8)),
    ("dec1", (2, 64, 16, 16)),
    ("dec2.skip", (2, 32, 16, 16)),
    ("dec2", (2, 64, 32, 32)),
    ("dec3.skip", (2, 32, 32, 32)),
    ("dec3", (2, 32, 64, 64)),
    ("recon.out", (2, 32, 64, 64)),
    ("output", (2, 3, 64, 64)),
]


def test_shape_trace_64(weights):
    stacks = [synth_scene(i, 64, 64) for i in range(2)]
    trace = []
    y = net.forward(stacks, [segment_stack(s) for s in stacks], weights, CFG, trace=trace)
    assert trace == EXPECTED_TRACE
    assert y.shape == (2, 3, 64, 64)
    for k in range(4):
        # decoder block k sees features pooled by 2**(4-k)
        assert dict(trace)[f"dec{k}.skip"][2] == 64 // 2 ** (4 - k)


def test_forward_contract(weights, scene64):
    s, m = scene64
    w = randomized(weights, 6)
    y1 = net.predict(s, m, w, CFG)
    y2 = net.predict(s, m, w, CFG)
    assert y1.shape == (1, 3, 64, 64) and y1.min() > 0 and y1.max() < 1
    assert y1.tobytes() == y2.tobytes()
    ones = MaskPair(np.ones((1, 64, 64)), np.ones((1, 64, 64)), 1, 255)
    zeros = MaskPair(np.zeros((1, 64, 64)), np.zeros((1, 64, 64)), 255, 1)
    assert np.abs(net.predict(s, ones, w, CFG) - net.predict(s, zeros, w, CFG)).max() > 0
    with pytest.raises(ShapeError):
        net.predict(synth_scene(0, 16, 16), m, w, CFG)


def test_forward_rejects_indivisible(weights):
    s = synth_scene(0, 16, 16)
    m = segment_stack(s)
    inp = net.make_inputs(s, m)
    inp.six = tuple(x[:, :, :8] for x in inp.six)
    inp.ldr = tuple(x[:, :, :8] for x in inp.ldr)
    with pytest.raises(ShapeError):
        net.forward(inp, None, weights, CFG)


def test_forward_does_not_mutate_weights(weights, scene64):
    s, m = scene64
    before = weights.to_bytes()
    upd = {}
    net.forward(s, m, weights, CFG, mode="train", bn_updates=upd)
    assert weights.to_bytes() == before
    assert set(upd) == {f"recon.enc{i}.bn.{k}" for i in range(4) for k in ("running_mean", "running_var")}


def test_gradient_reaches_every_parameter(weights):
    stacks = [synth_scene(i + 20, 64, 64) for i in range(2)]
    w = randomized(weights, 7)
    y = net.forward(stacks, [segment_stack(s) for s in stacks], w, CFG, mode="train")
    r = np.random.default_rng(0).standard_normal(y.shape)
    grads = ad.backward(ad.sum_all(ad.multiply(y, ad.Tensor(r))), w.trainable())
    dead = [n for n, g in grads.items() if not np.any(g != 0)]
    assert dead == []
    assert len(grads) == len(w.trainable())


@pytest.mark.parametrize("overrides", [{"attention_mode": "concat"}, {"vam_in_fused": True},
                                       {"base_channels": 8, "encoder_channels": (8, 8, 16, 16),
                                        "decoder_channels": (16, 8, 8, 8), "refine_iters": 1}])
def test_config_variants_run(overrides):
    cfg = net.ModelConfig(**overrides)
    w = net.init_weights(cfg, 0)
    s = synth_scene(2, 16, 16)
    y = net.predict(s, segment_stack(s), w, cfg)
    assert y.shape == (1, 3, 16, 16) and 0 < y.min() and y.max() < 1


# -- weight files ----------------------------------------------------------------

def test_weight_file_roundtrip(tmp_path, weights):
    w32 = weights.astype(np.float32)
    w32.save(tmp_path / "w.vamw")
    back = net.ModelWeights.load(tmp_path / "w.vamw", CFG, np.float32)
    assert list(back) == list(w32)
    for n in w32:
        assert back[n].data.tobytes() == w32[n].data.tobytes()
        assert back[n].trainable == w32[n].trainable
    assert back.to_bytes() == w32.to_bytes()
    raw = (tmp_path / "w.vamw").read_bytes()
    assert raw[:5] == b"VAMW\x01" and int.from_bytes(raw[5:9], "little") == len(weights)


def test_weight_file_mismatch(weights):
    small = net.ModelConfig(base_channels=8)
    with pytest.raises(WeightsMismatchError) as e:
        net.ModelWeights.from_bytes(weights.to_bytes(), small)
    assert e.value.misshaped
    arrays = weights.arrays()
    arrays.pop("refine.out.b")
    arrays["extra.w"] = np.zeros(1)
    with pytest.raises(WeightsMismatchError) as e:
        net.ModelWeights.from_arrays(arrays, CFG)
    assert e.value.missing == ["refine.out.b"] and e.value.extra == ["extra.w"]
    assert "refine.out.b" in str(e.value)
    buf = weights.to_bytes()
    with pytest.raises(BadMagicError):
        net.ModelWeights.from_bytes(b"XXXX" + buf[4:], CFG)
    with pytest.raises(TruncatedFileError):
        net.ModelWeights.from_bytes(buf[:-3], CFG)
