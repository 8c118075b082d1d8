import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import QUANTIZED_TOYS, TOYS, load_toy, manifest, model_bytes, synthetic_image
from modelbreak.engine import forward
from modelbreak.errors import NotExecutableError, QuantizationError
from modelbreak.ir import DType, ModelGraph, QuantizationParams, Tensor
from modelbreak.quant import build_proxy, dequantize, dequantize_tensor, quantize, round_half_away
from modelbreak.tflite import import_tflite


def q(s, z, lo=-128, hi=127):
    return QuantizationParams.per_tensor(s, z, lo, hi)


@pytest.mark.parametrize("s,z", [(0.1, 0), (0.5, 10), (0.02, -128), (1.0, 127)])
def test_zero_maps_to_zero_point(s, z):
    assert quantize(0.0, q(s, z)) == z


def test_formula_examples():
    p = q(0.5, 10)
    assert quantize(1.0, p) == 12
    assert quantize(1000.0, p) == 127
    assert quantize(-1000.0, p) == -128
    assert dequantize(12, p) == 1.0
    assert dequantize(10, p) == 0.0


def test_rounding_is_half_away_from_zero():
    assert round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, -2.5]).tolist() == [1, 2, 3, -1, -2, -3]
    p = q(1.0, 0)
    assert quantize(2.5, p) == 3
    assert quantize(-2.5, p) == -3


def test_custom_clamp_range():
    p = q(1.0, 0, -7, 7)
    assert quantize(100, p) == 7
    assert quantize(-100, p) == -7


def _pairs(count, seed):
    rng = np.random.default_rng(seed)
    scales = np.exp(rng.uniform(np.log(1e-4), np.log(1.0), count))
    zps = rng.integers(-128, 128, count)
    return [(float(s), int(z)) for s, z in zip(scales, zps)]


def check_identity_on_int8(pairs):
    every = np.arange(-128, 128)
    for s, z in pairs:
        p = q(s, z)
        if not np.array_equal(quantize(dequantize(every, p), p), every):
            return False
    return True


def check_round_trip_bound(pairs, n, seed):
    """Worst (error - bound) over ``n`` reals per pair; <= 0 means the bound holds."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for s, z in pairs:
        p = q(s, z)
        w = rng.uniform(s * (-128 - z), s * (127 - z), n)
        back = dequantize(quantize(w, p), p).astype(np.float64)
        slack = 4 * np.spacing(np.maximum(np.abs(w), np.abs(back)).astype(np.float32)).astype(np.float64)
        worst = max(worst, float(np.max(np.abs(back - w) - (s / 2 + slack))))
    return worst


def test_identity_on_all_int8_values():
    assert check_identity_on_int8(_pairs(20, 0))


def test_round_trip_bound():
    assert check_round_trip_bound(_pairs(10, 1), 2000, 2) <= 0


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 10.0), st.integers(-128, 127), st.floats(-1e4, 1e4, allow_nan=False))
def test_quantize_stays_in_range(s, z, w):
    v = quantize(w, q(s, z))
    assert -128 <= v <= 127


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1.0), st.integers(-128, 127), st.floats(0, 1))
def test_round_trip_property(s, z, u):
    p = q(s, z)
    w = s * (-128 - z) + u * s * 255
    err = abs(float(dequantize(quantize(w, p), p)) - w)
    assert err <= s / 2 + 4 * float(np.spacing(np.float32(max(abs(w), s))))


def scalar_dequant(values, scale, zero_point, axis, shape):
    """Independent per-element loop: s[c] * (q - z[c]) with c the channel index."""
    flat = list(np.asarray(values).reshape(-1))
    out = []
    inner = int(np.prod(shape[axis + 1:])) if axis is not None else 1
    for i, v in enumerate(flat):
        c = 0 if len(scale) == 1 else (i // inner) % shape[axis]
        zp = zero_point[c] if len(zero_point) > 1 else zero_point[0]
        out.append(float(np.float32(scale[c] * (int(v) - zp))))
    return out


@pytest.mark.parametrize("name", QUANTIZED_TOYS)
def test_proxy_weights_match_scalar_oracle(name):
    model = import_tflite(model_bytes(name)).model
    proxy = build_proxy(model)
    checked = 0
    for tid, t in model.tensors.items():
        if t.data is None or not t.dtype.is_integer:
            continue
        qp = t.quant
        want = scalar_dequant(t.array(), qp.scale, qp.zero_point, qp.axis, t.shape)
        got = proxy.tensors[tid].array().reshape(-1).tolist()
        assert got == want
        checked += 1
    assert checked >= 4


def test_int8_conv_weights():
    model = import_tflite(model_bytes("toy_int8")).model
    t = model.tensors[1]
    s = t.quant.scale[0]
    assert t.quant.zero_point == (0,)
    assert np.array_equal(dequantize_tensor(t).array(), (s * t.array().astype(np.float64)).astype(np.float32))


def test_per_channel_slices_use_own_scale():
    model = import_tflite(model_bytes("toy_residual")).model
    t = model.tensors[1]
    assert len(set(t.quant.scale)) > 1
    w = dequantize_tensor(t).array()
    for c, s in enumerate(t.quant.scale):
        assert np.array_equal(w[c], (s * t.array()[c].astype(np.float64)).astype(np.float32))


def test_float_model_proxy_is_identity():
    model = import_tflite(model_bytes("toy_float")).model
    proxy = build_proxy(model)
    assert proxy.tensors == model.tensors
    assert proxy.nodes == model.nodes
    assert proxy.proxy


def test_proxy_is_float_and_executable():
    proxy = load_toy("toy_int8")
    assert all(t.dtype is DType.F32 and t.quant is None for t in proxy.tensors.values())
    with pytest.raises(NotExecutableError, match="proxy"):
        forward(load_toy("toy_int8", proxy=False), np.zeros((1, 8, 8, 3), np.float32))


def test_integer_tensor_without_params():
    t = Tensor(3, (2,), DType.I8, bytes(2), None, "w")
    with pytest.raises(QuantizationError, match="tensor 3 \\(w\\)"):
        dequantize_tensor(t)
    g = ModelGraph({3: t}, [], [3], [3])
    with pytest.raises(QuantizationError):
        build_proxy(g)


def proxy_fidelity(name):
    """Max-abs gap between proxy outputs and the quantized reference outputs."""
    m = manifest(name)
    proxy = load_toy(name)
    if "sample_images" in m:
        inputs = [synthetic_image(i)[None] for i in range(len(m["sample_images"]))]
    else:
        inputs = [np.asarray(x, np.float32) for x in m["sample_inputs"]]
    gap = 0.0
    for x, ref in zip(inputs, m["tflite_outputs"]):
        gap = max(gap, float(np.max(np.abs(forward(proxy, x) - np.asarray(ref)))))
    return gap


@pytest.mark.parametrize("name", QUANTIZED_TOYS)
def test_proxy_fidelity(name):
    assert proxy_fidelity(name) <= 0.05


def test_proxy_matches_float_reference():
    # float64 evaluation of the dequantized network, recorded at generation time
    m = manifest("safetycore_toy")
    proxy = load_toy("safetycore_toy")
    for i in range(3):
        y = forward(proxy, synthetic_image(i)[None])
        assert np.max(np.abs(y - np.asarray(m["float_outputs"][i]))) < 1e-4


@pytest.mark.parametrize("name", [t for t in TOYS if t not in QUANTIZED_TOYS])
def test_float_toys_match_interpreter(name):
    m = manifest(name)
    model = load_toy(name)
    for x, ref in zip(m["sample_inputs"], m["tflite_outputs"]):
        assert np.max(np.abs(forward(model, np.asarray(x, np.float32)) - np.asarray(ref))) < 1e-5
