"""Central finite-difference check of engine input gradients.

The reference side evaluates the network in float64 with code that shares
nothing with the engine: the scalar-loop oracle for small graphs, the
generator's numpy evaluator for the 224x224 toy.
"""

import os
import sys

import numpy as np

import oracles
from graphs import to_oracle
from modelbreak.engine import LossKind, forward, grad_input

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures"))

H = 1e-3
SMALL = 1e-3
ABS_TOL = 1e-4
REL_TOL = 1e-2


def _loss64(y, target, kind):
    y = y if isinstance(y, list) else np.asarray(y).tolist()
    if kind is LossKind.BCE:
        return oracles.bce(y, target)
    if kind is LossKind.MSE:
        return oracles.mse(y, target)
    return oracles.cross_entropy(y, target)


def default_target(model, x, kind, rng):
    """A target that leaves the loss gradient nonzero."""
    y = forward(model, x)
    if kind is LossKind.BCE:
        return (y < 0.5).astype(np.float64).tolist()   # disagree with the model
    if kind is LossKind.CE:
        rows = y.reshape(-1, y.shape[-1])
        onehot = np.zeros_like(rows, dtype=np.float64)
        # the runner-up class: far enough from 0 and 1 to stay off the clamp
        onehot[np.arange(len(rows)), np.argsort(rows, axis=-1)[:, -2]] = 1
        return onehot.reshape(y.shape).tolist()
    return (y + rng.normal(0, 0.5, y.shape)).astype(np.float64).tolist()


def _pattern(layers, x):
    """Which side of every kink the network is on at ``x``: the sign of each
    ReLU input and the argmax of each max-pool window."""
    import generate
    env = {}
    generate.np_forward(layers, x, trace=env)
    parts = []
    for L in layers:
        a = env[L["in"]]
        if L["op"] == "relu" or L.get("act") == "relu":
            src = a if L["op"] == "relu" else env[L["out"]]
            parts.append((src > 0).tobytes())
        elif L["op"] == "maxpool":
            parts.append(_pool_argmax(a, L["window"], L["stride"], L["padding"]).tobytes())
    return parts


def _pool_argmax(a, window, stride, padding):
    n, h, w, c = a.shape
    if padding == "SAME":
        oh, ow = -(-h // stride[0]), -(-w // stride[1])
        th = max((oh - 1) * stride[0] + window[0] - h, 0)
        tw = max((ow - 1) * stride[1] + window[1] - w, 0)
        a = np.pad(a, ((0, 0), (th // 2, th - th // 2), (tw // 2, tw - tw // 2), (0, 0)),
                   constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(a, window, axis=(1, 2))
    win = win[:, ::stride[0], ::stride[1]]
    return win.reshape(win.shape[:4] + (-1,)).argmax(axis=-1)


def compare(analytic, numeric):
    """Error and whether it passes: absolute below SMALL, relative above."""
    a, n = float(analytic), float(numeric)
    if max(abs(a), abs(n)) < SMALL:
        return abs(a - n), abs(a - n) <= ABS_TOL
    rel = abs(a - n) / max(abs(a), abs(n))
    return rel, rel <= REL_TOL


def check(model, x, kind, n_coords=64, seed=0, target=None, numpy_oracle=False):
    """Compare analytic and central-difference gradients on ``n_coords``
    random input coordinates.

    A coordinate whose +-H move crosses a ReLU or max-pool kink is skipped and
    another one drawn: central differences are not a valid reference there.
    Returns (rows, skipped) with rows of (coordinate, analytic, numeric,
    error, ok).
    """
    kind = LossKind.parse(kind)
    rng = np.random.default_rng(seed)
    x = np.asarray(x, np.float32)
    if target is None:
        target = default_target(model, x, kind, rng)
    engine_target = np.asarray(target, np.float32)
    g = grad_input(model, x, engine_target, kind)
    if numpy_oracle:
        import generate
        layers = to_oracle(model, as_numpy=True)

        def f(v):
            return _loss64(generate.np_forward(layers, v), target, kind)
    else:
        layers = to_oracle(model)

        def f(v):
            return _loss64(oracles.evaluate(layers, v.tolist()), target, kind)

    kink_layers = to_oracle(model, as_numpy=True)
    order = rng.permutation(x.size)
    base = x.astype(np.float64)
    here = _pattern(kink_layers, base)
    rows, skipped = [], 0
    for c in order:
        if len(rows) == n_coords:
            break
        idx = np.unravel_index(c, x.shape)
        up, down = base.copy(), base.copy()
        up[idx] += H
        down[idx] -= H
        if _pattern(kink_layers, up) != here or _pattern(kink_layers, down) != here:
            skipped += 1
            continue
        numeric = (f(up) - f(down)) / (2 * H)
        err, ok = compare(g[idx], numeric)
        rows.append((tuple(int(i) for i in idx), float(g[idx]), numeric, err, ok))
    return rows, skipped
