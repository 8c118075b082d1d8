"""Task and training-loss inference from a model's structure and behaviour."""

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .engine import LossKind, check_executable, forward
from .ir import ModelGraph, OpKind
from .tflite import residual_adds

SUM_TOLERANCE = 1e-5


class Evidence(NamedTuple):
    probe: str
    observation: str
    # machine-readable facts behind the observation, read by infer_task
    facts: dict = {}

    def __str__(self):
        return f"{self.probe}: {self.observation}"

    def to_json(self):
        return {"probe": self.probe, "observation": self.observation}


class TaskKind(enum.Enum):
    MULTI_CLASS = "MultiClassClassification"
    MULTI_LABEL = "MultiLabelClassification"
    REGRESSION = "Regression"
    UNKNOWN = "Unknown"


class Confidence(enum.Enum):
    HIGH = "High"
    LOW = "Low"


@dataclass(frozen=True)
class TaskHypothesis:
    task: TaskKind
    suggested_loss: LossKind
    evidence: tuple
    confidence: Confidence

    def __post_init__(self):
        if not self.evidence:
            raise ValueError("a hypothesis needs at least one piece of evidence")

    def to_json(self):
        return {
            "task": self.task.value,
            "suggested_loss": self.suggested_loss.value,
            "confidence": self.confidence.value,
            "evidence": [e.to_json() for e in self.evidence],
        }


_HEADS = {OpKind.LOGISTIC: "sigmoid", OpKind.SOFTMAX: "softmax"}


def probe_architecture(model: ModelGraph) -> list:
    """Static observations about input/output layout and the layer stack."""
    ev = []
    for tid in model.inputs:
        shape = model.tensors[tid].shape
        if len(shape) == 4 and shape[-1] in (1, 3, 4):
            ev.append(Evidence("architecture", f"input {list(shape)}: rank-4 NHWC, likely image",
                               {"image_input": True}))
        else:
            ev.append(Evidence("architecture", f"input {list(shape)}: rank-{len(shape)}",
                               {"image_input": False}))
    for tid in model.outputs:
        ev.append(Evidence("architecture", f"output {list(model.tensors[tid].shape)}"))
    convs = sum(n.kind is OpKind.CONV2D for n in model.nodes)
    if convs:
        ev.append(Evidence("architecture", f"convolutional stack of {convs} Conv2D layer{'s' if convs > 1 else ''}",
                           {"conv_layers": convs}))
    res = len(residual_adds(model))
    if res:
        ev.append(Evidence("architecture",
                           f"{res} residual connection{'s' if res > 1 else ''} (ResNet-style image classifier)",
                           {"residual_connections": res}))
    if any(n.kind is OpKind.UNSUPPORTED for n in model.nodes):
        ops = sorted({n.attrs.get("op", "?") for n in model.nodes if n.kind is OpKind.UNSUPPORTED})
        ev.append(Evidence("architecture", f"unsupported operators: {', '.join(ops)}"))
    final = model.final_activation()
    if model.outputs:
        width = model.output_shape[-1] if model.output_shape else 1
        if final in _HEADS:
            ev.append(Evidence("output_layer", f"{_HEADS[final]} head, {width} outputs",
                               {"final": final.value, "outputs": width}))
        elif final is None:
            ev.append(Evidence("output_layer", "no operator before the output", {"final": None}))
        else:
            ev.append(Evidence("output_layer", f"linear head ({final.value}), {width} outputs",
                               {"final": final.value, "outputs": width}))
    return ev


def probe_io(model: ModelGraph, n_samples=32, seed=0) -> list:
    """Run seeded uniform [0, 1] inputs and describe the output distribution."""
    check_executable(model)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    outs = np.stack([
        np.asarray(forward(model, rng.random(model.input_shape, dtype=np.float32)))
        for _ in range(n_samples)
    ])
    width = outs.shape[-1] if outs.ndim > 1 else 1
    rows = outs.reshape(n_samples, -1, width)
    sums = rows.sum(axis=-1)
    lo, hi = rows.min(axis=(0, 1)), rows.max(axis=(0, 1))
    facts = {
        "samples": n_samples,
        "min": [float(v) for v in lo],
        "max": [float(v) for v in hi],
        "sums_to_one": bool(np.all(np.abs(sums - 1) <= SUM_TOLERANCE)),
        "open_unit_interval": bool(np.all((rows > 0) & (rows < 1))),
        "unit_interval": bool(np.all((rows >= 0) & (rows <= 1))),
    }
    ev = [Evidence("io", f"{n_samples} seeded samples (seed {seed}); per-output min "
                         f"{_fmt(lo)}, max {_fmt(hi)}", facts)]
    if facts["sums_to_one"]:
        ev.append(Evidence("io", f"outputs sum to 1.0 ± {SUM_TOLERANCE:g}", facts))
    elif facts["open_unit_interval"]:
        ev.append(Evidence("io", "each output in (0,1); sums vary", facts))
    elif not facts["unit_interval"]:
        ev.append(Evidence("io", "outputs unbounded in sample (observed range outside [0,1])", facts))
    else:
        ev.append(Evidence("io", "outputs within [0,1] but touch the bounds", facts))
    return ev


def _fmt(values):
    return "[" + ", ".join(f"{v:.4g}" for v in values) + "]"


def infer_task(model: ModelGraph, io_evidence=()) -> TaskHypothesis:
    """Apply the output-layer rules, cross-checked against observed outputs.

    Softmax head: multi-class, cross-entropy.  Sigmoid head: multi-label,
    binary cross-entropy.  Anything else: regression with mean squared error,
    low confidence.  If the observed outputs contradict the head, the task is
    Unknown and the head's loss is kept as a low-confidence suggestion.
    """
    evidence = probe_architecture(model)
    io_facts = next((e.facts for e in io_evidence if e.facts), None)
    evidence += list(io_evidence)
    final = model.final_activation()
    if final is OpKind.SOFTMAX:
        task, lossk, conf = TaskKind.MULTI_CLASS, LossKind.CE, Confidence.HIGH
        conflict = io_facts is not None and not io_facts["sums_to_one"]
        why = "softmax head but sampled outputs do not sum to 1"
    elif final is OpKind.LOGISTIC:
        task, lossk, conf = TaskKind.MULTI_LABEL, LossKind.BCE, Confidence.HIGH
        width = model.output_shape[-1] if model.output_shape else 1
        conflict = io_facts is not None and (
            not io_facts["unit_interval"] or (width > 1 and io_facts["sums_to_one"]))
        why = "sigmoid head but sampled outputs behave like a normalised distribution or leave [0,1]"
    else:
        task, lossk, conf = TaskKind.REGRESSION, LossKind.MSE, Confidence.LOW
        conflict = io_facts is not None and io_facts["sums_to_one"] and \
            (model.output_shape[-1] if model.output_shape else 1) > 1
        why = "no probability head but sampled outputs sum to 1"
    if conflict:
        evidence.append(Evidence("inference", f"conflict: {why}"))
        task, conf = TaskKind.UNKNOWN, Confidence.LOW
    else:
        head = final.value if final is not None else "none"
        evidence.append(Evidence("inference", f"final node {head} -> {task.value}, {lossk.value}"))
    return TaskHypothesis(task, lossk, tuple(evidence), conf)
