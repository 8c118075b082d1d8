"""Lift a TFLite FlatBuffers container into a :class:`ModelGraph`.

Schema slot indices are pinned to the TensorFlow Lite ``schema.fbs`` as of
TF 2.18 (schema version 3).  Only subgraph 0 is imported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, MalformedBufferError, ModelImportError
from .flatbuf import FlatBufferView, TableRef
from .ir import DType, ModelGraph, Node, OpKind, QuantizationParams, Tensor

FILE_IDENTIFIER = "TFL3"
SCHEMA_VERSION = 3

# table Model
MODEL_VERSION, MODEL_OPERATOR_CODES, MODEL_SUBGRAPHS, MODEL_DESCRIPTION, MODEL_BUFFERS = 0, 1, 2, 3, 4
# table OperatorCode
OPCODE_DEPRECATED_BUILTIN, OPCODE_CUSTOM_CODE, OPCODE_VERSION, OPCODE_BUILTIN = 0, 1, 2, 3
# table SubGraph
SUBGRAPH_TENSORS, SUBGRAPH_INPUTS, SUBGRAPH_OUTPUTS, SUBGRAPH_OPERATORS, SUBGRAPH_NAME = 0, 1, 2, 3, 4
# table Tensor
TENSOR_SHAPE, TENSOR_TYPE, TENSOR_BUFFER, TENSOR_NAME, TENSOR_QUANTIZATION = 0, 1, 2, 3, 4
# table QuantizationParameters
QUANT_MIN, QUANT_MAX, QUANT_SCALE, QUANT_ZERO_POINT, QUANT_QUANTIZED_DIMENSION = 0, 1, 2, 3, 6
# table Operator
OP_OPCODE_INDEX, OP_INPUTS, OP_OUTPUTS, OP_OPTIONS_TYPE, OP_OPTIONS = 0, 1, 2, 3, 4
# table Buffer
BUFFER_DATA, BUFFER_OFFSET, BUFFER_SIZE = 0, 1, 2

# options tables (slot indices)
CONV_PADDING, CONV_STRIDE_W, CONV_STRIDE_H, CONV_ACTIVATION, CONV_DILATION_W, CONV_DILATION_H = range(6)
POOL_PADDING, POOL_STRIDE_W, POOL_STRIDE_H, POOL_FILTER_W, POOL_FILTER_H, POOL_ACTIVATION = range(6)
FC_ACTIVATION, FC_WEIGHTS_FORMAT, FC_KEEP_NUM_DIMS = 0, 1, 2
SOFTMAX_BETA = 0
ADD_ACTIVATION = 0
REDUCER_KEEP_DIMS = 0

# enum BuiltinOperator (subset)
BUILTIN_NAMES = {
    0: "ADD", 1: "AVERAGE_POOL_2D", 2: "CONCATENATION", 3: "CONV_2D", 4: "DEPTHWISE_CONV_2D",
    6: "DEQUANTIZE", 9: "FULLY_CONNECTED", 14: "LOGISTIC", 17: "MAX_POOL_2D", 18: "MUL",
    19: "RELU", 21: "RELU6", 22: "RESHAPE", 25: "SOFTMAX", 28: "TANH", 32: "CUSTOM", 34: "PAD",
    39: "TRANSPOSE", 40: "MEAN", 114: "QUANTIZE",
}
ADD, AVERAGE_POOL_2D, CONV_2D, FULLY_CONNECTED = 0, 1, 3, 9
LOGISTIC, MAX_POOL_2D, RELU, RESHAPE, SOFTMAX, CUSTOM, MEAN = 14, 17, 19, 22, 25, 32, 40

# enum TensorType
TENSOR_TYPES = {0: DType.F32, 2: DType.I32, 9: DType.I8}
TENSOR_TYPE_NAMES = {0: "FLOAT32", 1: "FLOAT16", 2: "INT32", 3: "UINT8", 4: "INT64", 7: "INT16", 9: "INT8"}

# enum ActivationFunctionType
ACT_NONE, ACT_RELU = 0, 1
ACT_NAMES = {0: "NONE", 1: "RELU", 2: "RELU_N1_TO_1", 3: "RELU6", 4: "TANH", 5: "SIGN_BIT"}

PADDINGS = {0: "SAME", 1: "VALID"}

_INT_LIMITS = {DType.I8: (-128, 127), DType.I32: (-(2**31), 2**31 - 1)}


@dataclass
class ImportReport:
    model: ModelGraph
    unsupported_ops: list = field(default_factory=list)  # (operator name, operator index)
    warnings: list = field(default_factory=list)


class _Importer:
    def __init__(self, view: FlatBufferView):
        self.view = view
        self.warnings = []
        self.unsupported = []

    # -- helpers -----------------------------------------------------------

    def ints(self, table, slot):
        vec = self.view.get_vector(table, slot, 4)
        return [] if vec is None else [int(v) for v in vec.array("i")]

    def buffer_bytes(self, buffers, index):
        if buffers is None or not 0 <= index < len(buffers):
            raise ModelImportError(f"tensor refers to buffer {index}, file has "
                                   f"{0 if buffers is None else len(buffers)}")
        buf = buffers.table(index)
        data = self.view.get_vector(buf, BUFFER_DATA, 1)
        if data is not None and len(data):
            return data.raw()
        offset = self.view.get_scalar(buf, BUFFER_OFFSET, "Q", 0)
        size = self.view.get_scalar(buf, BUFFER_SIZE, "Q", 0)
        if offset > 1 and size:
            # large-model layout: payload stored after the flatbuffer
            if offset + size > len(self.view.data):
                raise MalformedBufferError(f"external buffer {index} ends past end of file", offset)
            return bytes(self.view.data[offset:offset + size])
        return None

    def quantization(self, table: TableRef, dtype, tid):
        q = self.view.get_table(table, TENSOR_QUANTIZATION)
        if q is None:
            return None
        scale = self.view.get_vector(q, QUANT_SCALE, 4)
        if scale is None or len(scale) == 0:
            return None
        scales = [float(s) for s in scale.array("f")]
        zp_vec = self.view.get_vector(q, QUANT_ZERO_POINT, 8)
        zps = [0] if zp_vec is None or len(zp_vec) == 0 else [int(z) for z in zp_vec.array("q")]
        axis = self.view.get_scalar(q, QUANT_QUANTIZED_DIMENSION, "i", 0)
        if dtype is DType.F32:
            self.warnings.append(f"tensor {tid}: float tensor carries quantization parameters; ignored")
            return None
        lo, hi = _INT_LIMITS[dtype]
        try:
            return QuantizationParams(tuple(scales), tuple(zps), lo, hi,
                                      axis if len(scales) > 1 else None)
        except ValueError as e:
            raise ModelImportError(f"tensor {tid}: invalid quantization parameters ({e})") from None

    # -- main --------------------------------------------------------------

    def run(self) -> ImportReport:
        v = self.view
        if v.file_identifier != FILE_IDENTIFIER:
            raise ModelImportError(
                f"not a TFLite model: file identifier is {v.file_identifier!r}, expected 'TFL3'"
            )
        root = v.root()
        version = v.get_scalar(root, MODEL_VERSION, "I", 0)
        if version != SCHEMA_VERSION:
            self.warnings.append(f"schema version {version}, importer targets {SCHEMA_VERSION}")
        opcodes = []
        codes = v.get_vector(root, MODEL_OPERATOR_CODES)
        for i in range(len(codes) if codes is not None else 0):
            oc = codes.table(i)
            builtin = max(v.get_scalar(oc, OPCODE_DEPRECATED_BUILTIN, "b", 0),
                          v.get_scalar(oc, OPCODE_BUILTIN, "i", 0))
            custom = v.get_string(oc, OPCODE_CUSTOM_CODE)
            opcodes.append((builtin, custom))

        subgraphs = v.get_vector(root, MODEL_SUBGRAPHS)
        if subgraphs is None or len(subgraphs) == 0:
            raise ModelImportError("model has no subgraphs")
        if len(subgraphs) > 1:
            self.warnings.append(f"model has {len(subgraphs)} subgraphs; only subgraph 0 imported")
        sg = subgraphs.table(0)
        name = v.get_string(sg, SUBGRAPH_NAME) or ""
        buffers = v.get_vector(root, MODEL_BUFFERS)

        tensors = {}
        tvec = v.get_vector(sg, SUBGRAPH_TENSORS)
        for tid in range(len(tvec) if tvec is not None else 0):
            tensors[tid] = self.tensor(tvec.table(tid), tid, buffers)

        inputs = self.ints(sg, SUBGRAPH_INPUTS)
        outputs = self.ints(sg, SUBGRAPH_OUTPUTS)
        for tid in inputs + outputs:
            if tid not in tensors:
                raise ModelImportError(f"graph input/output {tid} is not a tensor of subgraph 0")

        self.next_id = len(tensors)
        nodes = []
        ops = v.get_vector(sg, SUBGRAPH_OPERATORS)
        for index in range(len(ops) if ops is not None else 0):
            try:
                nodes.extend(self.operator(ops.table(index), index, opcodes, tensors))
            except GraphError as e:
                raise ModelImportError(f"operator {index}: {e}") from None

        used = set(inputs) | set(outputs)
        for n in nodes:
            used.update(n.inputs)
            used.update(n.outputs)
        tensors = {tid: t for tid, t in tensors.items() if tid in used}
        try:
            model = ModelGraph(tensors, nodes, inputs, outputs,
                               executable=not self.unsupported, name=name)
            model.check_shapes()
        except GraphError as e:
            raise ModelImportError(str(e)) from None
        return ImportReport(model, self.unsupported, self.warnings)

    def tensor(self, table, tid, buffers) -> Tensor:
        v = self.view
        shape = tuple(self.ints(table, TENSOR_SHAPE))
        code = v.get_scalar(table, TENSOR_TYPE, "b", 0)
        if code not in TENSOR_TYPES:
            raise ModelImportError(
                f"tensor {tid}: unsupported type {TENSOR_TYPE_NAMES.get(code, code)}"
            )
        dtype = TENSOR_TYPES[code]
        tname = v.get_string(table, TENSOR_NAME) or ""
        quant = self.quantization(table, dtype, tid)
        if quant is not None and quant.per_channel:
            self.warnings.append(
                f"tensor {tid} ({tname}): per-channel quantization along axis {quant.axis}"
            )
        data = self.buffer_bytes(buffers, v.get_scalar(table, TENSOR_BUFFER, "I", 0))
        try:
            return Tensor(tid, shape, dtype, data, quant, tname)
        except GraphError as e:
            raise ModelImportError(str(e)) from None

    def fresh_like(self, tensors, tid):
        t = tensors[tid]
        new = Tensor(self.next_id, t.shape, t.dtype, None, t.quant, f"{t.name}/pre_activation")
        tensors[new.id] = new
        self.next_id += 1
        return new.id

    def operator(self, table, index, opcodes, tensors):
        v = self.view
        opcode_index = v.get_scalar(table, OP_OPCODE_INDEX, "I", 0)
        if opcode_index >= len(opcodes):
            raise ModelImportError(f"operator {index}: opcode index {opcode_index} out of range")
        code, custom = opcodes[opcode_index]
        op_name = (custom or "CUSTOM") if code == CUSTOM else BUILTIN_NAMES.get(code, f"BUILTIN_{code}")
        inputs = [t for t in self.ints(table, OP_INPUTS) if t != -1]
        outputs = self.ints(table, OP_OUTPUTS)
        for t in inputs + outputs:
            if t not in tensors:
                raise ModelImportError(f"operator {index} ({op_name}) refers to missing tensor {t}")
        opts = v.get_table(table, OP_OPTIONS)

        def opt(slot, fmt, default):
            return default if opts is None else v.get_scalar(opts, slot, fmt, default)

        def unsupported(reason=None):
            self.unsupported.append((op_name if reason is None else f"{op_name} ({reason})", index))
            return [Node(OpKind.UNSUPPORTED, inputs, outputs, {"op": op_name, "index": index})]

        if len(outputs) != 1:
            return unsupported(f"{len(outputs)} outputs")
        out = outputs[0]
        act = ACT_NONE
        if code == CONV_2D:
            if len(inputs) not in (2, 3):
                raise ModelImportError(f"operator {index} (CONV_2D) has {len(inputs)} inputs")
            pad = opt(CONV_PADDING, "b", 0)
            if pad not in PADDINGS:
                raise ModelImportError(f"operator {index}: unknown padding {pad}")
            attrs = {
                "padding": PADDINGS[pad],
                "stride": (opt(CONV_STRIDE_H, "i", 1), opt(CONV_STRIDE_W, "i", 1)),
                "dilation": (opt(CONV_DILATION_H, "i", 1), opt(CONV_DILATION_W, "i", 1)),
            }
            kind, act = OpKind.CONV2D, opt(CONV_ACTIVATION, "b", 0)
        elif code in (MAX_POOL_2D, AVERAGE_POOL_2D):
            pad = opt(POOL_PADDING, "b", 0)
            if pad not in PADDINGS:
                raise ModelImportError(f"operator {index}: unknown padding {pad}")
            attrs = {
                "padding": PADDINGS[pad],
                "stride": (opt(POOL_STRIDE_H, "i", 1), opt(POOL_STRIDE_W, "i", 1)),
                "window": (opt(POOL_FILTER_H, "i", 1), opt(POOL_FILTER_W, "i", 1)),
            }
            kind = OpKind.MAX_POOL2D if code == MAX_POOL_2D else OpKind.AVG_POOL2D
            act = opt(POOL_ACTIVATION, "b", 0)
            inputs = inputs[:1]
        elif code == FULLY_CONNECTED:
            if opt(FC_WEIGHTS_FORMAT, "b", 0) != 0:
                return unsupported("shuffled weights format")
            kind, act = OpKind.FULLY_CONNECTED, opt(FC_ACTIVATION, "b", 0)
            attrs = {"keep_num_dims": bool(opt(FC_KEEP_NUM_DIMS, "?", False))}
        elif code == ADD:
            kind, act, attrs = OpKind.ADD, opt(ADD_ACTIVATION, "b", 0), {}
        elif code in (RELU, LOGISTIC):
            kind, attrs = (OpKind.RELU if code == RELU else OpKind.LOGISTIC), {}
            inputs = inputs[:1]
        elif code == SOFTMAX:
            beta = opt(SOFTMAX_BETA, "f", 0.0)
            if not beta > 0:
                # schema default is 0.0; converters always write beta explicitly
                self.warnings.append(f"operator {index}: SOFTMAX beta {beta} treated as 1.0")
                beta = 1.0
            kind, attrs = OpKind.SOFTMAX, {"beta": float(beta)}
            inputs = inputs[:1]
        elif code == MEAN:
            if len(inputs) != 2 or tensors[inputs[1]].data is None:
                return unsupported("axes not constant")
            axes_t = tensors[inputs[1]]
            if axes_t.dtype is not DType.I32:
                return unsupported("axes tensor not int32")
            rank = len(tensors[inputs[0]].shape)
            axes = tuple(sorted(int(a) % rank if rank else int(a) for a in axes_t.array().reshape(-1)))
            if axes != (1, 2) or rank != 4:
                return unsupported(f"reduction over axes {axes}")
            keep = bool(opt(REDUCER_KEEP_DIMS, "?", False))
            kind, attrs = OpKind.MEAN, {"axes": axes, "keep_dims": keep}
            inputs = inputs[:1]
        elif code == RESHAPE:
            kind, attrs = OpKind.RESHAPE, {"shape": tensors[out].shape}
            inputs = inputs[:1]
        else:
            return unsupported()

        if act not in (ACT_NONE, ACT_RELU):
            return unsupported(f"fused {ACT_NAMES.get(act, act)}")
        try:
            if act == ACT_RELU:
                mid = self.fresh_like(tensors, out)
                return [Node(kind, inputs, [mid], attrs),
                        Node(OpKind.RELU, [mid], [out], {"fused": True})]
            return [Node(kind, inputs, [out], attrs)]
        except GraphError as e:
            raise ModelImportError(f"operator {index} ({op_name}): {e}") from None


def import_tflite(view) -> ImportReport:
    """Import subgraph 0 of a TFLite model.  ``view`` may be raw bytes."""
    if not isinstance(view, FlatBufferView):
        view = FlatBufferView.open(view)
    return _Importer(view).run()


# -- architecture summary --------------------------------------------------


def _depths(model: ModelGraph):
    """Longest-path depth (in nodes) of every activation tensor from the graph inputs."""
    depth = {t: 0 for t in model.inputs}
    for node in model.nodes:
        d = 1 + max((depth.get(t, 0) for t in node.inputs if t in depth), default=0)
        for t in node.outputs:
            depth[t] = d
    return depth


def residual_adds(model: ModelGraph):
    """Indices of Add nodes whose operands come from different depths."""
    depth = _depths(model)
    out = []
    for i, node in enumerate(model.nodes):
        if node.kind is OpKind.ADD:
            a, b = (depth.get(t) for t in node.inputs)
            if a is not None and b is not None and a != b:
                out.append(i)
    return out


def summarize(model: ModelGraph) -> dict:
    """JSON-ready architecture summary.

    Activations expanded from a fused TFLite activation are folded into the
    entry of the operator they came from, so entries match source operators.
    """
    residual = set(residual_adds(model))
    entries = []
    for i, node in enumerate(model.nodes):
        params = sum(model.tensors[t].size for t in node.inputs if model.tensors[t].is_constant)
        in_shapes = [list(model.tensors[t].shape) for t in node.inputs if not model.tensors[t].is_constant]
        out_shape = list(model.tensors[node.outputs[0]].shape)
        if node.attrs.get("fused") and entries:
            prev = entries[-1]
            prev["fused_activation"] = node.kind.value
            prev["output_shape"] = out_shape
            prev["nodes"].append(i)
            continue
        entry = {
            "kind": node.kind.value,
            "nodes": [i],
            "input_shapes": in_shapes,
            "output_shape": out_shape,
            "parameters": params,
        }
        if node.kind is OpKind.UNSUPPORTED:
            entry["op"] = node.attrs.get("op")
        if i in residual:
            entry["residual_connection"] = True
        entries.append(entry)
    final = model.final_activation()
    return {
        "name": model.name,
        "node_count": len(entries),
        "ir_node_count": len(model.nodes),
        "input_shapes": [list(model.tensors[t].shape) for t in model.inputs],
        "output_shapes": [list(model.tensors[t].shape) for t in model.outputs],
        "nodes": entries,
        "residual_connections": len(residual),
        "final_activation": final.value if final in (OpKind.RELU, OpKind.LOGISTIC, OpKind.SOFTMAX) else None,
        "total_parameters": sum(t.size for t in model.tensors.values() if t.is_constant),
        "quantized": any(t.dtype.is_integer for t in model.tensors.values()),
        "executable": model.executable,
        "proxy": model.proxy,
    }


def format_summary(summary: dict) -> str:
    lines = [f"model {summary['name'] or '(unnamed)'}: {summary['node_count']} nodes, "
             f"{summary['total_parameters']} parameters"
             + (" [quantized]" if summary["quantized"] else "")
             + ("" if summary["executable"] else " [NOT EXECUTABLE]")]
    lines.append(f"  inputs  {summary['input_shapes']}")
    for e in summary["nodes"]:
        kind = e["kind"] + (f"+{e['fused_activation']}" if "fused_activation" in e else "")
        if "op" in e:
            kind += f" ({e['op']})"
        tag = "  <- residual connection" if e.get("residual_connection") else ""
        lines.append(f"  [{e['nodes'][0]:3d}] {kind:<22} {e['input_shapes']} -> {e['output_shape']}"
                     f"  params={e['parameters']}{tag}")
    lines.append(f"  outputs {summary['output_shapes']}")
    if summary["final_activation"]:
        lines.append(f"  final activation: {summary['final_activation']}")
    if summary["residual_connections"]:
        lines.append(f"  residual connections: {summary['residual_connections']}")
    return "\n".join(lines)
