"""Internal model representation.

A :class:`ModelGraph` is a topologically ordered list of :class:`Node` objects
over an id-indexed table of :class:`Tensor` objects.  Activations are NHWC;
conv kernels are stored ``out_channels x kh x kw x in_channels``.

The on-disk interchange form is a JSON manifest plus a sidecar binary holding
raw little-endian tensor payloads (see :func:`save_graph`).
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import GraphError, MalformedBufferError, ShapeError

FORMAT_VERSION = 1


class DType(enum.Enum):
    F32 = "F32"
    I8 = "I8"
    I32 = "I32"

    @property
    def itemsize(self):
        return {"F32": 4, "I8": 1, "I32": 4}[self.value]

    @property
    def numpy(self):
        return {"F32": np.dtype("<f4"), "I8": np.dtype("i1"), "I32": np.dtype("<i4")}[self.value]

    @property
    def is_integer(self):
        return self is not DType.F32


_INT_RANGE = {DType.I8: (-128, 127), DType.I32: (-(2**31), 2**31 - 1)}


class OpKind(enum.Enum):
    CONV2D = "Conv2D"
    FULLY_CONNECTED = "FullyConnected"
    ADD = "Add"
    RELU = "Relu"
    LOGISTIC = "Logistic"
    SOFTMAX = "Softmax"
    MAX_POOL2D = "MaxPool2D"
    AVG_POOL2D = "AvgPool2D"
    MEAN = "Mean"
    RESHAPE = "Reshape"
    # placeholder for an operator the importer could not map; never executable
    UNSUPPORTED = "Unsupported"


ACTIVATIONS = frozenset({OpKind.RELU, OpKind.LOGISTIC, OpKind.SOFTMAX})

# (min inputs, max inputs)
_ARITY = {
    OpKind.CONV2D: (2, 3),
    OpKind.FULLY_CONNECTED: (2, 3),
    OpKind.ADD: (2, 2),
}


@dataclass(frozen=True)
class QuantizationParams:
    """Affine quantization: ``real = scale * (q - zero_point)``.

    ``scale`` and ``zero_point`` are tuples; a single entry means per-tensor,
    several entries mean per-channel along ``axis``.
    """

    scale: tuple
    zero_point: tuple
    qmin: int = -128
    qmax: int = 127
    axis: int | None = None

    def __post_init__(self):
        scale = tuple(float(s) for s in np.atleast_1d(self.scale))
        zp = tuple(int(z) for z in np.atleast_1d(self.zero_point))
        if len(zp) == 1 and len(scale) > 1:
            zp = zp * len(scale)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)
        if not scale:
            raise ValueError("quantization needs at least one scale")
        if len(zp) != len(scale):
            raise ValueError(f"{len(scale)} scales but {len(zp)} zero points")
        if not all(math.isfinite(s) and s > 0 for s in scale):
            raise ValueError(f"scales must be finite and positive, got {scale}")
        if self.qmin > self.qmax:
            raise ValueError(f"empty clamp range [{self.qmin}, {self.qmax}]")
        if not all(self.qmin <= z <= self.qmax for z in zp):
            raise ValueError(f"zero point outside [{self.qmin}, {self.qmax}]")
        if len(scale) > 1 and self.axis is None:
            raise ValueError("per-channel quantization needs a channel axis")

    @classmethod
    def per_tensor(cls, scale, zero_point=0, qmin=-128, qmax=127):
        return cls((scale,), (zero_point,), qmin, qmax)

    @property
    def per_channel(self):
        return len(self.scale) > 1

    def to_json(self):
        d = {"scale": list(self.scale), "zero_point": list(self.zero_point),
             "qmin": self.qmin, "qmax": self.qmax}
        if self.axis is not None:
            d["axis"] = self.axis
        return d

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["scale"]), tuple(d["zero_point"]), d["qmin"], d["qmax"], d.get("axis"))


@dataclass(frozen=True)
class Tensor:
    id: int
    shape: tuple
    dtype: DType
    data: bytes | None = None
    quant: QuantizationParams | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise ShapeError(f"tensor {self.id}: negative dimension in {self.shape}")
        if self.data is not None:
            want = self.size * self.dtype.itemsize
            if len(self.data) != want:
                raise GraphError(
                    f"tensor {self.id}: payload is {len(self.data)} bytes, shape {self.shape} "
                    f"x {self.dtype.value} needs {want}"
                )
        if self.quant is not None:
            if not self.dtype.is_integer:
                raise GraphError(f"tensor {self.id}: quantization parameters on a float tensor")
            lo, hi = _INT_RANGE[self.dtype]
            if self.quant.qmin < lo or self.quant.qmax > hi:
                raise GraphError(
                    f"tensor {self.id}: clamp range [{self.quant.qmin}, {self.quant.qmax}] "
                    f"exceeds {self.dtype.value}"
                )
            q = self.quant
            if q.per_channel:
                if not 0 <= q.axis < len(self.shape) or self.shape[q.axis] != len(q.scale):
                    raise GraphError(
                        f"tensor {self.id}: {len(q.scale)} channel scales do not fit axis {q.axis} "
                        f"of shape {self.shape}"
                    )

    @property
    def size(self):
        return math.prod(self.shape)

    @property
    def is_constant(self):
        return self.data is not None

    def array(self) -> np.ndarray:
        if self.data is None:
            raise GraphError(f"tensor {self.id} has no payload")
        return np.frombuffer(self.data, dtype=self.dtype.numpy).reshape(self.shape)


def _freeze(v):
    if isinstance(v, (list, tuple)):
        return tuple(_freeze(x) for x in v)
    return v


_PADDINGS = ("SAME", "VALID")


@dataclass(frozen=True)
class Node:
    kind: OpKind
    inputs: tuple
    outputs: tuple
    attrs: Mapping = field(default_factory=dict)

    def __post_init__(self):
        kind = OpKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        object.__setattr__(self, "outputs", tuple(int(i) for i in self.outputs))
        attrs = {k: _freeze(v) for k, v in dict(self.attrs).items()}
        object.__setattr__(self, "attrs", attrs)
        if kind is OpKind.UNSUPPORTED:
            if not self.outputs:
                raise GraphError("an operator needs at least one output")
            return
        lo, hi = _ARITY.get(kind, (1, 1))
        if not lo <= len(self.inputs) <= hi:
            raise GraphError(f"{kind.value} takes {lo}..{hi} inputs, got {len(self.inputs)}")
        if len(self.outputs) != 1:
            raise GraphError(f"{kind.value} produces exactly one output, got {len(self.outputs)}")
        _validate_attrs(kind, attrs)

    def __hash__(self):
        return hash((self.kind, self.inputs, self.outputs))


def _pair(attrs, key, kind):
    v = attrs.get(key)
    if not (isinstance(v, tuple) and len(v) == 2 and all(isinstance(x, int) and x >= 1 for x in v)):
        raise GraphError(f"{kind.value}: attribute {key!r} must be two positive ints, got {v!r}")


def _validate_attrs(kind, attrs):
    if kind in (OpKind.CONV2D, OpKind.MAX_POOL2D, OpKind.AVG_POOL2D):
        attrs.setdefault("padding", "VALID")
        attrs.setdefault("stride", (1, 1))
        if attrs["padding"] not in _PADDINGS:
            raise GraphError(f"{kind.value}: padding must be SAME or VALID, got {attrs['padding']!r}")
        _pair(attrs, "stride", kind)
        if kind is OpKind.CONV2D:
            attrs.setdefault("dilation", (1, 1))
            _pair(attrs, "dilation", kind)
        else:
            _pair(attrs, "window", kind)
    elif kind is OpKind.SOFTMAX:
        attrs.setdefault("axis", -1)
        attrs.setdefault("beta", 1.0)
        if attrs["axis"] != -1:
            raise GraphError("Softmax is only supported on the last axis")
        if not (isinstance(attrs["beta"], (int, float)) and attrs["beta"] > 0):
            raise GraphError(f"Softmax beta must be positive, got {attrs['beta']!r}")
    elif kind is OpKind.MEAN:
        attrs.setdefault("axes", (1, 2))
        attrs.setdefault("keep_dims", False)
        if attrs["axes"] != (1, 2):
            raise GraphError(f"Mean is only supported over spatial axes (1, 2), got {attrs['axes']}")
    elif kind is OpKind.RESHAPE:
        shape = attrs.get("shape")
        if not (isinstance(shape, tuple) and all(isinstance(d, int) and d >= 0 for d in shape)):
            raise GraphError(f"Reshape needs a concrete target shape, got {shape!r}")
    elif kind is OpKind.FULLY_CONNECTED:
        attrs.setdefault("keep_num_dims", False)


def conv_output_size(size, window, stride, dilation, padding):
    eff = (window - 1) * dilation + 1
    if padding == "SAME":
        return -(-size // stride)
    return max(0, -(-(size - eff + 1) // stride))


def same_padding(size, window, stride, dilation=1):
    """(before, after) padding; the odd extra pixel goes after (bottom/right)."""
    eff = (window - 1) * dilation + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    return total // 2, total - total // 2


def infer_output_shape(node: Node, shapes: Sequence[tuple]) -> tuple:
    """Output shape of ``node`` given its input shapes; raises ShapeError on mismatch."""
    k, a = node.kind, node.attrs
    x = shapes[0]
    if k is OpKind.CONV2D:
        w = shapes[1]
        if len(x) != 4 or len(w) != 4 or x[3] != w[3]:
            raise ShapeError(f"Conv2D: input {x} incompatible with kernel {w}")
        if len(shapes) == 3 and shapes[2] != (w[0],):
            raise ShapeError(f"Conv2D: bias {shapes[2]} does not match {w[0]} filters")
        oh = conv_output_size(x[1], w[1], a["stride"][0], a["dilation"][0], a["padding"])
        ow = conv_output_size(x[2], w[2], a["stride"][1], a["dilation"][1], a["padding"])
        return (x[0], oh, ow, w[0])
    if k in (OpKind.MAX_POOL2D, OpKind.AVG_POOL2D):
        if len(x) != 4:
            raise ShapeError(f"{k.value}: expected rank-4 NHWC input, got {x}")
        oh = conv_output_size(x[1], a["window"][0], a["stride"][0], 1, a["padding"])
        ow = conv_output_size(x[2], a["window"][1], a["stride"][1], 1, a["padding"])
        return (x[0], oh, ow, x[3])
    if k is OpKind.FULLY_CONNECTED:
        w = shapes[1]
        if len(w) != 2 or not x or w[1] == 0 or math.prod(x) % w[1]:
            raise ShapeError(f"FullyConnected: input {x} incompatible with weights {w}")
        if len(shapes) == 3 and shapes[2] != (w[0],):
            raise ShapeError(f"FullyConnected: bias {shapes[2]} does not match {w[0]} units")
        if a["keep_num_dims"]:
            if x[-1] != w[1]:
                raise ShapeError(f"FullyConnected: last dim of {x} is not {w[1]}")
            return x[:-1] + (w[0],)
        return (math.prod(x) // w[1], w[0])
    if k is OpKind.ADD:
        if shapes[0] != shapes[1]:
            raise ShapeError(f"Add: operand shapes differ, {shapes[0]} vs {shapes[1]}")
        return x
    if k in ACTIVATIONS:
        if k is OpKind.SOFTMAX and not x:
            raise ShapeError("Softmax on a scalar")
        return x
    if k is OpKind.MEAN:
        if len(x) != 4:
            raise ShapeError(f"Mean: expected rank-4 NHWC input, got {x}")
        return (x[0], 1, 1, x[3]) if a["keep_dims"] else (x[0], x[3])
    if k is OpKind.RESHAPE:
        if math.prod(a["shape"]) != math.prod(x):
            raise ShapeError(f"Reshape: cannot view {x} as {a['shape']}")
        return a["shape"]
    raise GraphError(f"no shape rule for {k}")


@dataclass(frozen=True)
class ModelGraph:
    """Immutable operator graph.  Construction validates ordering and producers."""

    tensors: Mapping
    nodes: tuple
    inputs: tuple
    outputs: tuple
    executable: bool = True
    proxy: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tensors", dict(self.tensors))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        self._validate()

    def _validate(self):
        for tid, t in self.tensors.items():
            if t.id != tid:
                raise GraphError(f"tensor table key {tid} holds tensor {t.id}")
        available = set()
        for tid in self.inputs:
            if tid not in self.tensors:
                raise GraphError(f"graph input {tid} is not a known tensor")
            available.add(tid)
        produced = set()
        for i, node in enumerate(self.nodes):
            for tid in node.inputs:
                if tid not in self.tensors:
                    raise GraphError(f"node {i} ({node.kind.value}) reads unknown tensor {tid}")
                if tid not in available and not self.tensors[tid].is_constant:
                    raise GraphError(
                        f"node {i} ({node.kind.value}) reads tensor {tid} before it is produced"
                    )
            for tid in node.outputs:
                if tid not in self.tensors:
                    raise GraphError(f"node {i} writes unknown tensor {tid}")
                if tid in produced or tid in self.inputs or self.tensors[tid].is_constant:
                    raise GraphError(f"tensor {tid} has more than one producer")
                produced.add(tid)
                available.add(tid)
        for tid in self.outputs:
            if tid not in available:
                raise GraphError(f"graph output {tid} is never produced")

    def check_shapes(self):
        """Every node's declared output shape must equal the inferred one."""
        for i, node in enumerate(self.nodes):
            if node.kind is OpKind.UNSUPPORTED:
                continue
            shapes = [self.tensors[t].shape for t in node.inputs]
            try:
                want = infer_output_shape(node, shapes)
            except ShapeError as e:
                raise ShapeError(f"node {i}: {e}") from None
            got = self.tensors[node.outputs[0]].shape
            if tuple(want) != got:
                raise ShapeError(
                    f"node {i} ({node.kind.value}) declares output {got}, inputs imply {tuple(want)}"
                )

    @property
    def input_shape(self):
        return self.tensors[self.inputs[0]].shape

    @property
    def output_shape(self):
        return self.tensors[self.outputs[0]].shape

    def producers(self):
        return {t: i for i, n in enumerate(self.nodes) for t in n.outputs}

    def final_activation(self):
        """Kind of the last non-Reshape node feeding the first graph output."""
        prod = self.producers()
        tid = self.outputs[0] if self.outputs else None
        while tid in prod:
            node = self.nodes[prod[tid]]
            if node.kind is not OpKind.RESHAPE:
                return node.kind
            tid = node.inputs[0]
        return None

    def replace(self, **changes):
        return replace(self, **changes)


# -- interchange format ----------------------------------------------------


def _sidecar(path):
    root, _ = os.path.splitext(path)
    return root + ".bin"


def save_graph(model: ModelGraph, path):
    """Write ``path`` (JSON manifest) and a ``.bin`` sidecar next to it."""
    path = os.fspath(path)
    blob = bytearray()
    tensors = []
    for tid in sorted(model.tensors):
        t = model.tensors[tid]
        entry = {"id": t.id, "name": t.name, "shape": list(t.shape), "dtype": t.dtype.value}
        if t.quant is not None:
            entry["quant"] = t.quant.to_json()
        if t.data is not None:
            blob.extend(b"\0" * (-len(blob) % 16))
            entry["data_offset"] = len(blob)
            entry["data_len"] = len(t.data)
            blob.extend(t.data)
        else:
            entry["data_offset"] = None
            entry["data_len"] = 0
        tensors.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": model.name,
        "executable": model.executable,
        "proxy": model.proxy,
        "data_file": os.path.basename(_sidecar(path)),
        "tensors": tensors,
        "nodes": [
            {"kind": n.kind.value, "inputs": list(n.inputs), "outputs": list(n.outputs),
             "attrs": n.attrs}
            for n in model.nodes
        ],
        "inputs": list(model.inputs),
        "outputs": list(model.outputs),
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")
    with open(_sidecar(path), "wb") as f:
        f.write(blob)


def load_graph(path) -> ModelGraph:
    path = os.fspath(path)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedBufferError(f"{path} is not a JSON model manifest ({e})") from None
    try:
        if manifest["format_version"] != FORMAT_VERSION:
            raise GraphError(f"unsupported format_version {manifest['format_version']}")
        data_path = os.path.join(os.path.dirname(path), manifest.get("data_file") or
                                 os.path.basename(_sidecar(path)))
        with open(data_path, "rb") as f:
            blob = f.read()
        tensors = {}
        for e in manifest["tensors"]:
            data = None
            if e.get("data_offset") is not None:
                off, n = int(e["data_offset"]), int(e["data_len"])
                if off < 0 or off + n > len(blob):
                    raise MalformedBufferError(f"tensor {e['id']} payload outside sidecar", off)
                data = bytes(blob[off:off + n])
            quant = QuantizationParams.from_json(e["quant"]) if e.get("quant") else None
            t = Tensor(int(e["id"]), tuple(e["shape"]), DType(e["dtype"]), data, quant, e.get("name", ""))
            tensors[t.id] = t
        nodes = [Node(OpKind(n["kind"]), n["inputs"], n["outputs"], n.get("attrs", {}))
                 for n in manifest["nodes"]]
        return ModelGraph(tensors, nodes, manifest["inputs"], manifest["outputs"],
                          bool(manifest.get("executable", True)), bool(manifest.get("proxy", False)),
                          manifest.get("name", ""))
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedBufferError(f"{path}: bad manifest entry ({e!r})") from None
