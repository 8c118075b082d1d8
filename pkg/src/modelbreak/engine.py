"""Float32 forward inference and reverse-mode input gradients.

Each op returns its output together with a closure that maps the output
gradient to gradients of its non-constant inputs.  A :class:`GradientTape`
keeps those closures in execution order; walking it backwards gives
d(loss)/d(input).  Only input gradients are produced, never weight gradients.

Summation order inside an op is fixed (numpy reductions and single-threaded
matmul over a fixed im2col layout), so repeated runs are bitwise identical.
"""

from __future__ import annotations

import enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NotExecutableError, NumericError, ShapeError
from .ir import ModelGraph, OpKind, conv_output_size, same_padding

BCE_EPS = 1e-7


class LossKind(enum.Enum):
    BCE = "BinaryCrossEntropy"
    CE = "CrossEntropy"
    MSE = "MeanSquaredError"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        aliases = {"bce": cls.BCE, "ce": cls.CE, "mse": cls.MSE}
        key = str(name).lower()
        if key in aliases:
            return aliases[key]
        return cls(name)


class GradientTape:
    """Backward closures recorded by :func:`forward`; usable exactly once."""

    def __init__(self, model: ModelGraph):
        self.model = model
        self.records = []
        self._used = False

    def backward(self, grad_output) -> np.ndarray:
        if self._used:
            raise RuntimeError("gradient tape already consumed")
        self._used = True
        grads = {self.model.outputs[0]: np.asarray(grad_output, dtype=np.float32)}
        for node, back, live in reversed(self.records):
            gy = grads.pop(node.outputs[0], None)
            if gy is None:
                continue
            for tid, g in zip(live, back(gy)):
                if tid in grads:
                    grads[tid] = grads[tid] + g
                else:
                    grads[tid] = g
        x = self.model.inputs[0]
        self.records = []
        return grads.get(x, np.zeros(self.model.tensors[x].shape, np.float32))


# -- ops -------------------------------------------------------------------


def _pad_nhwc(x, kh, kw, stride, dilation, padding, fill=0.0):
    if padding == "VALID":
        return x, (0, 0, 0, 0)
    pt, pb = same_padding(x.shape[1], kh, stride[0], dilation[0])
    pl, pr = same_padding(x.shape[2], kw, stride[1], dilation[1])
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)), constant_values=fill)
    return xp, (pt, pb, pl, pr)


def _windows(xp, kh, kw, stride, dilation, oh, ow):
    """View of shape (N, OH, OW, kh, kw, C) over the padded input."""
    eh, ew = (kh - 1) * dilation[0] + 1, (kw - 1) * dilation[1] + 1
    v = sliding_window_view(xp, (eh, ew), axis=(1, 2))
    v = v[:, ::stride[0], ::stride[1], :, ::dilation[0], ::dilation[1]][:, :oh, :ow]
    return v.transpose(0, 1, 2, 4, 5, 3)


def _scatter(dxp, parts, kh, kw, stride, dilation, oh, ow):
    """Adjoint of _windows: accumulate (N, OH, OW, kh, kw, C) back into dxp."""
    for i in range(kh):
        r = i * dilation[0]
        for j in range(kw):
            c = j * dilation[1]
            dxp[:, r:r + stride[0] * (oh - 1) + 1:stride[0],
                c:c + stride[1] * (ow - 1) + 1:stride[1], :] += parts[:, :, :, i, j, :]


def _crop(dxp, pads):
    pt, pb, pl, pr = pads
    return dxp[:, pt:dxp.shape[1] - pb, pl:dxp.shape[2] - pr, :]


def conv2d(x, w, b, stride=(1, 1), dilation=(1, 1), padding="VALID"):
    n, h, wd, c = x.shape
    o, kh, kw, _ = w.shape
    oh = conv_output_size(h, kh, stride[0], dilation[0], padding)
    ow = conv_output_size(wd, kw, stride[1], dilation[1], padding)
    xp, pads = _pad_nhwc(x, kh, kw, stride, dilation, padding)
    cols = _windows(xp, kh, kw, stride, dilation, oh, ow).reshape(n * oh * ow, kh * kw * c)
    wm = w.reshape(o, kh * kw * c)
    y = cols @ wm.T
    if b is not None:
        y += b
    y = y.reshape(n, oh, ow, o)

    def back(gy):
        parts = (gy.reshape(-1, o) @ wm).reshape(n, oh, ow, kh, kw, c)
        dxp = np.zeros(xp.shape, np.float32)
        _scatter(dxp, parts, kh, kw, stride, dilation, oh, ow)
        return [_crop(dxp, pads)]

    return y, back


def fully_connected(x, w, b, keep_num_dims=False):
    units, depth = w.shape
    x2 = x.reshape(-1, depth)
    y = x2 @ w.T
    if b is not None:
        y += b
    if keep_num_dims:
        y = y.reshape(x.shape[:-1] + (units,))

    def back(gy):
        return [(gy.reshape(-1, units) @ w).reshape(x.shape)]

    return y, back


def max_pool2d(x, window, stride, padding):
    n, h, wd, c = x.shape
    kh, kw = window
    oh = conv_output_size(h, kh, stride[0], 1, padding)
    ow = conv_output_size(wd, kw, stride[1], 1, padding)
    xp, pads = _pad_nhwc(x, kh, kw, stride, (1, 1), padding, fill=-np.inf)
    win = _windows(xp, kh, kw, stride, (1, 1), oh, ow).reshape(n, oh, ow, kh * kw, c)
    # argmax returns the first maximum in row-major window order
    arg = win.argmax(axis=3)
    y = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def back(gy):
        onehot = (np.arange(kh * kw)[None, None, None, :, None] == arg[:, :, :, None, :])
        parts = (onehot * gy[:, :, :, None, :]).astype(np.float32).reshape(n, oh, ow, kh, kw, c)
        dxp = np.zeros(xp.shape, np.float32)
        _scatter(dxp, parts, kh, kw, stride, (1, 1), oh, ow)
        return [_crop(dxp, pads)]

    return y, back


def avg_pool2d(x, window, stride, padding):
    """Average over the in-bounds part of each window (padding is not counted)."""
    n, h, wd, c = x.shape
    kh, kw = window
    oh = conv_output_size(h, kh, stride[0], 1, padding)
    ow = conv_output_size(wd, kw, stride[1], 1, padding)
    xp, pads = _pad_nhwc(x, kh, kw, stride, (1, 1), padding)
    ones, _ = _pad_nhwc(np.ones((1, h, wd, 1), np.float32), kh, kw, stride, (1, 1), padding)
    count = _windows(ones, kh, kw, stride, (1, 1), oh, ow).sum(axis=(3, 4))  # 1, OH, OW, 1
    y = _windows(xp, kh, kw, stride, (1, 1), oh, ow).sum(axis=(3, 4)) / count

    def back(gy):
        share = (gy / count)[:, :, :, None, None, :]
        parts = np.broadcast_to(share, (n, oh, ow, kh, kw, c))
        dxp = np.zeros(xp.shape, np.float32)
        _scatter(dxp, parts, kh, kw, stride, (1, 1), oh, ow)
        return [_crop(dxp, pads)]

    return y.astype(np.float32), back


def relu(x):
    mask = x > 0
    return np.where(mask, x, np.float32(0)), lambda gy: [gy * mask]


def logistic(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    y[~pos] = e / (1 + e)
    return y, lambda gy: [gy * y * (1 - y)]


def softmax(x, beta=1.0):
    z = x * np.float32(beta)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(gy):
        return [np.float32(beta) * y * (gy - (gy * y).sum(axis=-1, keepdims=True))]

    return y, back


def mean_spatial(x, keep_dims=False):
    n, h, w, c = x.shape
    y = x.mean(axis=(1, 2), keepdims=keep_dims, dtype=np.float32)

    def back(gy):
        g = gy.reshape(n, 1, 1, c) / np.float32(h * w)
        return [np.broadcast_to(g, x.shape).copy()]

    return y, back


def add(a, b):
    return a + b, lambda gy: [gy, gy]


def reshape(x, shape):
    return x.reshape(shape), lambda gy: [gy.reshape(x.shape)]


def _run_node(node, args):
    k, a = node.kind, node.attrs
    if k is OpKind.CONV2D:
        return conv2d(args[0], args[1], args[2] if len(args) > 2 else None,
                      a["stride"], a["dilation"], a["padding"])
    if k is OpKind.FULLY_CONNECTED:
        return fully_connected(args[0], args[1], args[2] if len(args) > 2 else None, a["keep_num_dims"])
    if k is OpKind.ADD:
        return add(*args)
    if k is OpKind.RELU:
        return relu(args[0])
    if k is OpKind.LOGISTIC:
        return logistic(args[0])
    if k is OpKind.SOFTMAX:
        return softmax(args[0], a["beta"])
    if k is OpKind.MAX_POOL2D:
        return max_pool2d(args[0], a["window"], a["stride"], a["padding"])
    if k is OpKind.AVG_POOL2D:
        return avg_pool2d(args[0], a["window"], a["stride"], a["padding"])
    if k is OpKind.MEAN:
        return mean_spatial(args[0], a["keep_dims"])
    if k is OpKind.RESHAPE:
        return reshape(args[0], a["shape"])
    raise NotExecutableError(f"no kernel for {k}")


def check_executable(model: ModelGraph):
    if not model.executable:
        raise NotExecutableError("model contains unsupported operators and cannot be executed")
    for t in model.tensors.values():
        if t.dtype.is_integer:
            raise NotExecutableError(
                f"tensor {t.id} ({t.name or 'unnamed'}) is {t.dtype.value}; build a float proxy first"
            )
    for i, node in enumerate(model.nodes):
        if node.kind in (OpKind.CONV2D, OpKind.FULLY_CONNECTED):
            # input gradients only: parameters must be constants
            if not all(model.tensors[t].is_constant for t in node.inputs[1:]):
                raise NotExecutableError(f"node {i} ({node.kind.value}) has non-constant parameters")


def forward(model: ModelGraph, x, record=False):
    """Run ``model`` on ``x``.  Returns the first graph output, or
    ``(output, tape)`` when ``record`` is set."""
    check_executable(model)
    x = np.asarray(x, dtype=np.float32)
    want = model.input_shape
    if x.shape != want:
        raise ShapeError(f"input shape {x.shape} does not match model input {want}")
    if not np.isfinite(x).all():
        raise NumericError(-1, "input")
    values = {model.inputs[0]: x}
    tape = GradientTape(model) if record else None
    for i, node in enumerate(model.nodes):
        args, live = [], []
        for tid in node.inputs:
            t = model.tensors[tid]
            if t.is_constant:
                args.append(t.array())
            else:
                args.append(values[tid])
                live.append(tid)
        # overflow is reported below as a NumericError naming the node
        with np.errstate(over="ignore", invalid="ignore"):
            y, back = _run_node(node, args)
            y = np.asarray(y, dtype=np.float32)
        if not np.isfinite(y).all():
            raise NumericError(i, node.kind.value)
        values[node.outputs[0]] = y
        if record:
            tape.records.append((node, back, live))
    out = values[model.outputs[0]]
    return (out, tape) if record else out


# -- losses ----------------------------------------------------------------


def _as_target(output, target, kind):
    t = np.asarray(target)
    if kind is LossKind.CE and t.shape != output.shape:
        idx = t.astype(np.int64).reshape(-1)
        rows = output.reshape(-1, output.shape[-1])
        if idx.shape[0] != rows.shape[0] or (idx < 0).any() or (idx >= rows.shape[1]).any():
            raise ShapeError(f"class targets {t.tolist()} do not fit output {output.shape}")
        onehot = np.zeros(rows.shape, np.float32)
        onehot[np.arange(len(idx)), idx] = 1
        return onehot.reshape(output.shape)
    if t.shape != output.shape:
        raise ShapeError(f"target shape {t.shape} does not match output {output.shape}")
    return t.astype(np.float32)


def loss_and_grad(output, target, kind):
    """Scalar loss and d(loss)/d(output)."""
    kind = LossKind.parse(kind)
    y = np.asarray(output, dtype=np.float32)
    t = _as_target(y, target, kind)
    if kind is LossKind.MSE:
        d = y - t
        return float(np.mean(d * d)), (2 * d / np.float32(d.size)).astype(np.float32)
    yc = np.clip(y, BCE_EPS, 1 - BCE_EPS).astype(np.float32)
    # the clamp is part of the loss: where it is active the loss is flat in y
    inside = ((y > BCE_EPS) & (y < 1 - BCE_EPS)).astype(np.float32)
    if kind is LossKind.BCE:
        val = -np.mean(t * np.log(yc) + (1 - t) * np.log(1 - yc))
        g = (-(t / yc) + (1 - t) / (1 - yc)) / np.float32(y.size)
        return float(val), (g * inside).astype(np.float32)
    # cross-entropy on probabilities, averaged over the batch
    batch = y.size // y.shape[-1] if y.ndim else 1
    val = -np.sum(t * np.log(yc)) / batch
    return float(val), (-(t / yc) / np.float32(batch) * inside).astype(np.float32)


def loss(output, target, kind) -> float:
    return loss_and_grad(output, target, kind)[0]


def value_and_grad(model, x, target, kind):
    """(loss, output, d loss / d x) at ``x``."""
    y, tape = forward(model, x, record=True)
    val, gy = loss_and_grad(y, target, kind)
    return val, y, tape.backward(gy)


def grad_input(model, x, target, kind) -> np.ndarray:
    return value_and_grad(model, x, target, kind)[2]
