"""``modelbreak`` command line: scan, info, dequant, probe, attack, invert.

Exit codes: 0 success, 1 operational error (bad input, unusable model),
2 malformed file.  With ``--json`` errors are also written to stderr as JSON.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .attacks import AttackConfig, Mode, fgsm, invert, pgd, threshold_flips
from .engine import LossKind, forward, loss
from .errors import MalformedBufferError, ModelBreakError
from .imageio import JPEG_EXTENSIONS, from_model_input, load_image, save_png, to_model_input
from .ir import OpKind, load_graph, save_graph
from .probe import infer_task, probe_architecture, probe_io
from .quant import build_proxy
from .scanner import format_report, scan_path
from .tflite import format_summary, import_tflite, summarize

SEED_ENV = "MODELBREAK_SEED"


class UsageError(ModelBreakError):
    pass


# -- output helpers -------------------------------------------------------------


def _sig9(obj):
    """Round every float to 9 significant digits (numpy scalars and arrays included)."""
    if isinstance(obj, dict):
        return {k: _sig9(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sig9(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sig9(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(f"{float(obj):.9g}")
    return obj


def dumps(obj):
    return json.dumps(_sig9(obj), indent=2, sort_keys=True)


def _emit(args, payload, text):
    if args.json:
        print(dumps(payload))
    else:
        print(text)


def _warn(msg):
    print(f"warning: {msg}", file=sys.stderr)


# -- model loading ------------------------------------------------------------------


def load_model(path):
    """(ModelGraph, warnings, unsupported ops) from a .tflite file or an interchange manifest."""
    if str(path).lower().endswith(".json"):
        return load_graph(path), [], []
    with open(path, "rb") as f:
        data = f.read()
    rep = import_tflite(data)
    return rep.model, list(rep.warnings), list(rep.unsupported_ops)


def executable_model(path):
    model, warnings, unsupported = load_model(path)
    for w in warnings:
        _warn(w)
    if any(t.dtype.is_integer for t in model.tensors.values()):
        model = build_proxy(model)
    return model


def default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _pair(text, name):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{name} expects two comma-separated numbers, got {text!r}") from None
    if not lo < hi:
        raise UsageError(f"{name}: lower bound must be below upper bound")
    return lo, hi


# -- commands ---------------------------------------------------------------------


def cmd_scan(args):
    report = scan_path(args.path, recursive=args.recursive, descend_archives=args.archives)
    _emit(args, report.to_json(), format_report(report))


def cmd_info(args):
    model, warnings, unsupported = load_model(args.model)
    summary = summarize(model)
    arch = probe_architecture(model)
    payload = {
        "model_path": args.model,
        "summary": summary,
        "architecture": [e.to_json() for e in arch],
        "warnings": warnings,
        "unsupported_ops": [{"op": op, "index": i} for op, i in unsupported],
    }
    lines = [format_summary(summary)] + [f"  {e}" for e in arch] + [f"warning: {w}" for w in warnings]
    _emit(args, payload, "\n".join(lines))


def cmd_dequant(args):
    model, warnings, _ = load_model(args.model)
    for w in warnings:
        _warn(w)
    converted = sum(t.dtype.is_integer for t in model.tensors.values())
    proxy = build_proxy(model)
    save_graph(proxy, args.output)
    payload = {"model_path": args.model, "output": args.output, "tensors_dequantized": converted,
               "executable": proxy.executable}
    _emit(args, payload, f"wrote float proxy to {args.output} ({converted} tensors dequantized)")


def cmd_probe(args):
    model = executable_model(args.model)
    seed = default_seed() if args.seed is None else args.seed
    io = []
    if model.executable:
        io = probe_io(model, args.samples, seed)
    else:
        _warn("model is not executable; output probing skipped")
    hyp = infer_task(model, io)
    payload = dict(hyp.to_json(), model_path=args.model, seed=seed, samples=args.samples)
    text = [f"task {hyp.task.value}, loss {hyp.suggested_loss.value} ({hyp.confidence.value} confidence)"]
    text += [f"  {e}" for e in hyp.evidence]
    _emit(args, payload, "\n".join(text))


def _parse_target(text, loss_kind):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--target expects comma-separated numbers, got {text!r}") from None
    if loss_kind is LossKind.CE and len(vals) == 1:
        return np.array([int(vals[0])])
    return np.array(vals, dtype=np.float32)


def _decision(model):
    final = model.final_activation()
    if final is OpKind.LOGISTIC:
        return "threshold"
    if final is OpKind.SOFTMAX:
        return "argmax"
    return "none"


def _flipped(decision, initial, other, threshold):
    if decision == "threshold":
        flips = threshold_flips(initial, other, threshold)
        return [f.to_json() for f in flips], bool(flips)
    if decision == "argmax":
        a = np.argmax(np.asarray(initial).reshape(-1, np.shape(initial)[-1]), axis=-1)
        b = np.argmax(np.asarray(other).reshape(-1, np.shape(other)[-1]), axis=-1)
        changes = [{"row": int(i), "initial_class": int(a[i]), "final_class": int(b[i])}
                   for i in range(len(a)) if a[i] != b[i]]
        return changes, bool(changes)
    return [], False


def cmd_attack(args):
    if os.path.splitext(args.out)[1].lower() in JPEG_EXTENSIONS:
        raise UsageError(f"{args.out}: refusing to write JPEG; lossy compression would discard "
                         "the perturbation, use .png")
    model = executable_model(args.model)
    seed = default_seed() if args.seed is None else args.seed
    lo, hi = _pair(args.input_range, "--input-range")
    if args.loss is None:
        loss_kind = infer_task(model).suggested_loss
    else:
        loss_kind = LossKind.parse(args.loss)
    target = _parse_target(args.target, loss_kind) if args.target else None
    if target is not None and target.dtype == np.float32 and target.size == np.prod(model.output_shape):
        target = target.reshape(model.output_shape)
    pixels, warnings = load_image(args.image)
    for w in warnings:
        _warn(w)
    x = to_model_input(pixels, model.input_shape, (lo, hi), args.channel_order)
    cfg = AttackConfig(
        epsilon=args.eps, alpha=args.alpha, num_iter=args.iters, mode=Mode(args.mode), target=target,
        loss=loss_kind, random_start=not args.no_random_start, clip_min=lo, clip_max=hi, seed=seed,
        last_iterate=args.last_iterate,
    )
    result = (fgsm if args.method == "fgsm" else pgd)(model, x, cfg)
    save_png(args.out, from_model_input(result.adversarial, (lo, hi), args.channel_order))

    reloaded_pixels, _ = load_image(args.out)
    reloaded = to_model_input(reloaded_pixels, model.input_shape, (lo, hi), args.channel_order)
    y_saved = forward(model, reloaded)
    decision = _decision(model)
    flips, _ = _flipped(decision, result.initial_output, result.final_output, args.threshold)
    saved_flips, still = _flipped(decision, result.initial_output, y_saved, args.threshold)
    if cfg.mode is Mode.TARGETED and decision == "threshold":
        reached = np.array_equal(np.asarray(y_saved).reshape(-1) > args.threshold,
                                 np.asarray(target).reshape(-1) > args.threshold)
    else:
        reached = None
    result.post_save_verified = still
    report = {
        "model_path": args.model,
        "image_path": args.image,
        "output_path": args.out,
        "method": args.method,
        "config": cfg.to_json(),
        "input_range": [lo, hi],
        "channel_order": args.channel_order.upper(),
        "decision_rule": decision,
        "threshold": args.threshold,
        "initial_outputs": result.initial_output,
        "final_outputs": result.final_output,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "loss_trajectory": list(result.loss_trajectory),
        "best_iteration": result.best_iteration,
        "iterations_run": result.iterations_run,
        "linf": result.linf,
        "flips": flips,
        "post_save": {
            "reloaded_outputs": y_saved,
            "reloaded_loss": loss(y_saved, result.labels, loss_kind),
            "linf": float(np.max(np.abs(reloaded - x))),
            "flips": saved_flips,
            "still_flipped": still,
            "target_reached": reached,
        },
        "success": still if cfg.mode is Mode.UNTARGETED else bool(reached),
        "seed": seed,
        "tool_version": __version__,
    }
    if args.report:
        with open(args.report, "w") as f:
            f.write(dumps(report) + "\n")
    text = [
        f"{args.method} {cfg.mode.value}, loss {loss_kind.value}: "
        f"{result.initial_loss:.6g} -> {result.final_loss:.6g}, linf {result.linf:.6g}",
        f"initial outputs {_fmt(result.initial_output)}",
        f"final outputs   {_fmt(result.final_output)}",
        f"after PNG save  {_fmt(y_saved)}",
    ]
    for fl in saved_flips:
        text.append(f"  flipped: {fl}")
    text.append(f"wrote {args.out}; flip survives PNG round trip: {'yes' if still else 'no'}")
    _emit(args, report, "\n".join(text))


def _fmt(y):
    return "[" + ", ".join(f"{v:.4f}" for v in np.asarray(y).reshape(-1)) + "]"


def cmd_invert(args):
    if os.path.splitext(args.out)[1].lower() in JPEG_EXTENSIONS:
        raise UsageError(f"{args.out}: refusing to write JPEG, use .png")
    model = executable_model(args.model)
    seed = default_seed() if args.seed is None else args.seed
    lo, hi = _pair(args.input_range, "--input-range")
    res = invert(model, args.class_index, args.iters, args.lr, seed, args.l2, lo, hi)
    save_png(args.out, from_model_input(res.input, (lo, hi), args.channel_order))
    payload = {
        "model_path": args.model,
        "output_path": args.out,
        "class_index": res.class_index,
        "config": res.config,
        "initial_confidence": res.initial_confidence,
        "best_confidence": res.best_confidence,
        "best_iteration": res.best_iteration,
        "trajectory": list(res.trajectory),
        "seed": seed,
        "tool_version": __version__,
    }
    _emit(args, payload,
          f"class {res.class_index}: confidence {res.initial_confidence:.4f} -> {res.best_confidence:.4f} "
          f"(iteration {res.best_iteration}); wrote {args.out}")


# -- parser -----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="modelbreak", description="Find, lift and attack on-device models.")
    p.add_argument("--version", action="version", version=f"modelbreak {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        return sp

    sp = command("scan", cmd_scan, "locate serialized models in files, directories and archives")
    sp.add_argument("path")
    sp.add_argument("--recursive", action="store_true")
    sp.add_argument("--archives", action="store_true", help="descend into ZIP-based archives")

    sp = command("info", cmd_info, "architecture summary")
    sp.add_argument("model")

    sp = command("dequant", cmd_dequant, "write the float proxy in the interchange format")
    sp.add_argument("model")
    sp.add_argument("-o", "--output", required=True)

    sp = command("probe", cmd_probe, "infer task and training loss")
    sp.add_argument("model")
    sp.add_argument("--samples", type=int, default=32)
    sp.add_argument("--seed", type=int)

    def image_flags(sp):
        sp.add_argument("--input-range", default="0,1", help="model input range for pixel values 0..1 (lo,hi)")
        sp.add_argument("--channel-order", default="RGB", choices=["RGB", "BGR", "rgb", "bgr"])

    sp = command("attack", cmd_attack, "adversarial example with PGD or FGSM")
    sp.add_argument("model")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=["untargeted", "targeted"], default="untargeted")
    sp.add_argument("--method", choices=["pgd", "fgsm"], default="pgd")
    sp.add_argument("--target", help="comma-separated target outputs (or a class index with --loss ce)")
    sp.add_argument("--eps", type=float, default=0.01)
    sp.add_argument("--alpha", type=float, default=0.005)
    sp.add_argument("--iters", type=int, default=100)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--loss", choices=["bce", "ce", "mse"], help="default: inferred from the output layer")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--report")
    sp.add_argument("--last-iterate", action="store_true", help="return the final iterate, not the best")
    sp.add_argument("--no-random-start", action="store_true")
    image_flags(sp)

    sp = command("invert", cmd_invert, "model inversion by confidence ascent")
    sp.add_argument("model")
    sp.add_argument("--class", dest="class_index", type=int, required=True)
    sp.add_argument("--iters", type=int, default=200)
    sp.add_argument("--lr", type=float, default=0.01)
    sp.add_argument("--l2", type=float, default=1e-4)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    image_flags(sp)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on bad flags; 2 is reserved for malformed files
        return 1 if e.code == 2 else e.code
    try:
        args.func(args)
    except MalformedBufferError as e:
        return _fail(args, e, 2)
    except (ModelBreakError, OSError) as e:
        return _fail(args, e, 1)
    return 0


def _fail(args, exc, code):
    msg = str(exc)
    if isinstance(exc, OSError) and exc.filename is not None:
        msg = f"{exc.filename}: {exc.strerror or exc}"
    if getattr(args, "json", False):
        print(json.dumps({"error": type(exc).__name__, "message": msg, "exit_code": code}), file=sys.stderr)
    else:
        print(f"modelbreak: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
