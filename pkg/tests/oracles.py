"""Independent reference implementations used to freeze expected values.

Nothing here imports modelbreak.  Everything is written as plain Python
loops over nested lists so it shares no code path with the numpy engine.
"""

import math


def _same_pad(size, k, stride, dil):
    eff = (k - 1) * dil + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    return total // 2, out


def _out_and_pad(size, k, stride, dil, padding):
    if padding == "SAME":
        return _same_pad(size, k, stride, dil)
    eff = (k - 1) * dil + 1
    return 0, max(0, -(-(size - eff + 1) // stride))


def conv2d(x, w, b, stride=(1, 1), dilation=(1, 1), padding="VALID"):
    """x: [N][H][W][C] nested lists, w: [O][kh][kw][C], b: [O] or None."""
    n, h, wd, c = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    o, kh, kw = len(w), len(w[0]), len(w[0][0])
    pt, oh = _out_and_pad(h, kh, stride[0], dilation[0], padding)
    pl, ow = _out_and_pad(wd, kw, stride[1], dilation[1], padding)
    out = []
    for bi in range(n):
        rows = []
        for oy in range(oh):
            cols = []
            for ox in range(ow):
                chans = []
                for oc in range(o):
                    acc = 0.0 if b is None else float(b[oc])
                    for ky in range(kh):
                        iy = oy * stride[0] + ky * dilation[0] - pt
                        if not 0 <= iy < h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride[1] + kx * dilation[1] - pl
                            if not 0 <= ix < wd:
                                continue
                            px = x[bi][iy][ix]
                            wk = w[oc][ky][kx]
                            for ic in range(c):
                                acc += px[ic] * wk[ic]
                    chans.append(acc)
                cols.append(chans)
            rows.append(cols)
        out.append(rows)
    return out


def pool2d(x, window, stride, padding, mode):
    n, h, wd, c = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    pt, oh = _out_and_pad(h, window[0], stride[0], 1, padding)
    pl, ow = _out_and_pad(wd, window[1], stride[1], 1, padding)
    out = []
    for bi in range(n):
        rows = []
        for oy in range(oh):
            cols = []
            for ox in range(ow):
                chans = []
                for ch in range(c):
                    vals = []
                    for ky in range(window[0]):
                        for kx in range(window[1]):
                            iy, ix = oy * stride[0] + ky - pt, ox * stride[1] + kx - pl
                            if 0 <= iy < h and 0 <= ix < wd:
                                vals.append(x[bi][iy][ix][ch])
                    chans.append(max(vals) if mode == "max" else sum(vals) / len(vals))
                cols.append(chans)
            rows.append(cols)
        out.append(rows)
    return out


def flatten(x):
    if isinstance(x, (list, tuple)):
        return [v for item in x for v in flatten(item)]
    return [x]


def fully_connected(x, w, b):
    """x: [N][...] nested, w: [O][I]; returns [N][O]."""
    flat = flatten(x)
    depth = len(w[0])
    rows = [flat[i:i + depth] for i in range(0, len(flat), depth)]
    return [[sum(r[i] * wo[i] for i in range(depth)) + (0.0 if b is None else b[o])
             for o, wo in enumerate(w)] for r in rows]


def mean_spatial(x, keep_dims=False):
    out = []
    for img in x:
        h, wd, c = len(img), len(img[0]), len(img[0][0])
        m = [sum(img[y][xx][ch] for y in range(h) for xx in range(wd)) / (h * wd) for ch in range(c)]
        out.append([[m]] if keep_dims else m)
    return out


def elementwise(x, fn):
    if isinstance(x, list):
        return [elementwise(v, fn) for v in x]
    return fn(x)


def relu(x):
    return elementwise(x, lambda v: v if v > 0 else 0.0)


def logistic(x):
    def f(v):
        if v >= 0:
            return 1.0 / (1.0 + math.exp(-v))
        e = math.exp(v)
        return e / (1.0 + e)
    return elementwise(x, f)


def softmax(x, beta=1.0):
    if isinstance(x[0], list):
        return [softmax(r, beta) for r in x]
    m = max(x)
    e = [math.exp(beta * (v - m)) for v in x]
    s = sum(e)
    return [v / s for v in e]


def add(a, b):
    if isinstance(a, list):
        return [add(u, v) for u, v in zip(a, b)]
    return a + b


def reshape(x, shape):
    flat = flatten(x)

    def build(vals, dims):
        if len(dims) == 1:
            return vals[:dims[0]]
        step = len(vals) // dims[0]
        return [build(vals[i * step:(i + 1) * step], dims[1:]) for i in range(dims[0])]

    return build(flat, list(shape))


def evaluate(layers, x):
    """Evaluate a generator layer list (see tests/fixtures/generate.py)."""
    env = {"input": x}
    for L in layers:
        op = L["op"]
        a = env[L["in"]]
        if op == "conv":
            y = conv2d(a, L["w"], L["b"], L["stride"], L.get("dilation", (1, 1)), L["padding"])
        elif op == "fc":
            y = fully_connected(a, L["w"], L["b"])
        elif op == "add":
            y = add(a, env[L["in2"]])
        elif op == "mean":
            y = mean_spatial(a, L.get("keep_dims", False))
        elif op == "maxpool":
            y = pool2d(a, L["window"], L["stride"], L["padding"], "max")
        elif op == "avgpool":
            y = pool2d(a, L["window"], L["stride"], L["padding"], "avg")
        elif op == "relu":
            y = relu(a)
        elif op == "logistic":
            y = logistic(a)
        elif op == "softmax":
            y = softmax(a, L.get("beta", 1.0))
        elif op == "reshape":
            y = reshape(a, L["shape"])
        else:
            raise ValueError(f"oracle has no rule for {op}")
        if L.get("act") == "relu":
            y = relu(y)
        env[L["out"]] = y
    return env[layers[-1]["out"]]


def bce(y, t, eps=1e-7):
    ys, ts = flatten(y), flatten(t)
    tot = 0.0
    for p, q in zip(ys, ts):
        p = min(max(p, eps), 1 - eps)
        tot += q * math.log(p) + (1 - q) * math.log(1 - p)
    return -tot / len(ys)


def signature_offsets(data: bytes):
    """Exhaustive substring search for every scanner signature pattern.

    Returns a dict family -> list of offsets where the family's identifying
    token occurs.  Used to certify negative-corpus buffers as clean.
    """
    hits = {"TFL3": [], "ET": [], "onnx": [], "PK\x03\x04": []}
    for i in range(len(data)):
        chunk = data[i:i + 4]
        if chunk == b"TFL3":
            hits["TFL3"].append(i)
        if len(chunk) == 4 and chunk[:2] == b"ET" and chunk[2:3].isdigit() and chunk[3:4].isdigit():
            hits["ET"].append(i)
        if chunk == b"onnx":
            hits["onnx"].append(i)
        if chunk == b"PK\x03\x04":
            hits["PK\x03\x04"].append(i)
    return hits


def mse(y, t):
    ys, ts = flatten(y), flatten(t)
    return sum((a - b) ** 2 for a, b in zip(ys, ts)) / len(ys)


def cross_entropy(y, t, eps=1e-7):
    """t: one-hot rows matching y's rows."""
    rows_y = y if isinstance(y[0], list) else [y]
    rows_t = t if isinstance(t[0], list) else [t]
    tot = 0.0
    for ry, rt in zip(rows_y, rows_t):
        tot -= sum(q * math.log(min(max(p, eps), 1 - eps)) for p, q in zip(ry, rt))
    return tot / len(rows_y)
