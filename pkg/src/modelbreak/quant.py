"""Affine (scale / zero-point) quantization and float proxy construction.

    quantize(w)    = clip(round(w / s + z), qmin, qmax)
    dequantize(wq) = s * (wq - z)

``round`` is half-away-from-zero.  Per-channel parameters broadcast along
``QuantizationParams.axis``.
"""

from __future__ import annotations

import numpy as np

from .errors import QuantizationError
from .ir import DType, ModelGraph, QuantizationParams, Tensor


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _broadcast(q: QuantizationParams, ndim):
    scale = np.asarray(q.scale, dtype=np.float64)
    zp = np.asarray(q.zero_point, dtype=np.int64)
    if not q.per_channel:
        return scale[0], zp[0]
    if q.axis >= ndim:
        raise QuantizationError(f"channel axis {q.axis} but value has rank {ndim}")
    shape = [1] * ndim
    shape[q.axis] = len(q.scale)
    return scale.reshape(shape), zp.reshape(shape)


def quantize(w, q: QuantizationParams):
    """Real value(s) to integer(s).  Scalars in, Python int out."""
    arr = np.asarray(w, dtype=np.float64)
    s, z = _broadcast(q, arr.ndim)
    out = np.clip(round_half_away(arr / s + z), q.qmin, q.qmax).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def dequantize(wq, q: QuantizationParams):
    """Integer(s) to float32 real(s)."""
    arr = np.asarray(wq, dtype=np.int64)
    s, z = _broadcast(q, arr.ndim)
    out = (s * (arr - z)).astype(np.float32)
    return np.float32(out) if out.ndim == 0 else out


def dequantize_tensor(t: Tensor) -> Tensor:
    if t.quant is None:
        raise QuantizationError(
            f"integer tensor {t.id} ({t.name or 'unnamed'}) has no quantization parameters"
        )
    data = None
    if t.data is not None:
        data = dequantize(t.array(), t.quant).astype("<f4").tobytes()
    return Tensor(t.id, t.shape, DType.F32, data, None, t.name)


def build_proxy(model: ModelGraph) -> ModelGraph:
    """Float32 copy of ``model`` with every quantized tensor dequantized.

    Activation quantization is dropped; the proxy computes entirely in float
    with no simulated rounding layers.
    """
    tensors = {}
    for tid, t in model.tensors.items():
        tensors[tid] = dequantize_tensor(t) if t.dtype.is_integer else t
    return ModelGraph(tensors, model.nodes, model.inputs, model.outputs,
                      executable=model.executable, proxy=True, name=model.name)
