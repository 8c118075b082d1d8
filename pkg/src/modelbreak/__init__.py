"""Locate, lift, dequantize and attack serialized on-device models."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, fgsm, flip_check, invert, pgd  # noqa: E402
from .engine import LossKind, forward, grad_input, loss  # noqa: E402
from .errors import ModelBreakError  # noqa: E402
from .flatbuf import FlatBufferView  # noqa: E402
from .ir import ModelGraph, load_graph, save_graph  # noqa: E402
from .probe import TaskHypothesis, infer_task, probe_architecture, probe_io  # noqa: E402
from .quant import build_proxy, dequantize, quantize  # noqa: E402
from .scanner import FormatMatch, ScanReport, identify_buffer, scan_path  # noqa: E402
from .tflite import import_tflite, summarize  # noqa: E402

__all__ = [
    "AttackConfig", "AttackResult", "FlatBufferView", "FormatMatch", "LossKind", "ModelBreakError",
    "ModelGraph", "ScanReport", "TaskHypothesis", "build_proxy", "dequantize", "fgsm", "flip_check",
    "forward", "grad_input", "identify_buffer", "import_tflite", "infer_task", "invert", "load_graph",
    "loss", "pgd", "probe_architecture", "probe_io", "quantize", "save_graph", "scan_path", "summarize",
]
