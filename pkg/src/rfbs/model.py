"""RFBSNet as a declarative layer graph: the desk-scale builder, shape
inference, forward/backward execution, parameter init, and checkpoints.

The desk topology instantiates the four-module design at fixed widths:

  downsampler   conv k3 s2 (in -> 16-in) || maxpool 2x2, concatenated to 16
                channels at H/2, then ReLU
  shallow       one conv k3 s1 16->16 + ReLU on the downsampler output
  deep encoder  three stages of [conv s2, ReLU, conv s1, ReLU] widening
                16->32->64->128 down to H/16 (total downsampling m = 16)
  decoder       transposed-conv 2x stages with additive skips from the
                encoder stages back up to 16 channels at H/2
  fusion        decoder output + shallow output + downsampler output
  classifier    2x upsample (nearest by default, learnable tconv optional),
                pointwise conv to the class count, per-pixel softmax

Spatial extents must be multiples of 16 so the additive skips line up.
"""

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .data import Prng
from .errors import FormatError, NumericsError, ShapeError
from .tensor import decode_rft1, encode_rft1

BASE_WIDTH = 16  # fused channel width after the input downsampler


@dataclass(frozen=True)
class LayerNode:
    name: str
    kind: str  # conv | tconv | maxpool | relu | concat | add | upsample_nearest | softmax
    inputs: tuple
    cin: int = 0
    cout: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ArchitectureSpec:
    arch_id: str
    input_name: str
    output_name: str
    in_channels: int
    num_classes: int
    total_downsampling_factor: int
    nodes: tuple

    def node(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)


def _validate_graph(spec):
    seen = {spec.input_name}
    for node in spec.nodes:
        if node.name in seen:
            raise ShapeError(f"duplicate node name {node.name!r}")
        for src in node.inputs:
            if src not in seen:
                raise ShapeError(f"node {node.name!r} consumes unknown/later node {src!r}")
        seen.add(node.name)
    if spec.output_name not in seen:
        raise ShapeError(f"output node {spec.output_name!r} does not exist")


def config_hash(spec):
    """CRC32 over a canonical description; pins checkpoints to a topology."""
    parts = [
        spec.arch_id,
        spec.input_name,
        spec.output_name,
        str(spec.in_channels),
        str(spec.num_classes),
        str(spec.total_downsampling_factor),
    ]
    for n in spec.nodes:
        parts.append(
            f"{n.name}|{n.kind}|{','.join(n.inputs)}|{n.cin}|{n.cout}|{n.kernel}"
            f"|{n.stride}|{n.padding}"
        )
    return zlib.crc32("\n".join(parts).encode("utf-8")) & 0xFFFFFFFF


def build_rfbsnet_desk(in_channels=1, num_classes=2, learnable_upsample=False):
    """Desk-scale RFBSNet graph; (N, in, H, W) -> (N, classes, H, W) softmax maps."""
    if not 1 <= in_channels <= BASE_WIDTH - 1:
        raise ShapeError(f"in_channels must be in 1..{BASE_WIDTH - 1}, got {in_channels}")
    if num_classes < 2:
        raise ShapeError(f"num_classes must be >= 2, got {num_classes}")
    conv_path = BASE_WIDTH - in_channels  # pool path carries the raw input channels
    nodes = [
        LayerNode("ds_conv", "conv", ("image",), in_channels, conv_path, 3, 2, 1),
        LayerNode("ds_pool", "maxpool", ("image",)),
        LayerNode("ds_cat", "concat", ("ds_conv", "ds_pool")),
        LayerNode("ds_relu", "relu", ("ds_cat",)),
        # shallow branch: detail at H/2
        LayerNode("sh_conv", "conv", ("ds_relu",), 16, 16, 3, 1, 1),
        LayerNode("sh_relu", "relu", ("sh_conv",)),
    ]
    # deep branch: three downsampling stages, 16 -> 32 -> 64 -> 128
    widths = [16, 32, 64, 128]
    src = "ds_relu"
    for i in range(3):
        cin, cout = widths[i], widths[i + 1]
        nodes += [
            LayerNode(f"e{i+1}_conv_a", "conv", (src,), cin, cout, 3, 2, 1),
            LayerNode(f"e{i+1}_relu_a", "relu", (f"e{i+1}_conv_a",)),
            LayerNode(f"e{i+1}_conv_b", "conv", (f"e{i+1}_relu_a",), cout, cout, 3, 1, 1),
            LayerNode(f"e{i+1}_relu_b", "relu", (f"e{i+1}_conv_b",)),
        ]
        src = f"e{i+1}_relu_b"
    # decoder with additive encoder skips
    nodes += [
        LayerNode("d1_up", "tconv", ("e3_relu_b",), 128, 64, 2, 2, 0),
        LayerNode("d1_add", "add", ("d1_up", "e2_relu_b")),
        LayerNode("d1_conv", "conv", ("d1_add",), 64, 64, 3, 1, 1),
        LayerNode("d1_relu", "relu", ("d1_conv",)),
        LayerNode("d2_up", "tconv", ("d1_relu",), 64, 32, 2, 2, 0),
        LayerNode("d2_add", "add", ("d2_up", "e1_relu_b")),
        LayerNode("d2_conv", "conv", ("d2_add",), 32, 32, 3, 1, 1),
        LayerNode("d2_relu", "relu", ("d2_conv",)),
        LayerNode("d3_up", "tconv", ("d2_relu",), 32, 16, 2, 2, 0),
        # fuse decoder, shallow branch, and downsampler output by addition
        LayerNode("fuse_a", "add", ("d3_up", "sh_relu")),
        LayerNode("fuse_b", "add", ("fuse_a", "ds_relu")),
    ]
    if learnable_upsample:
        nodes.append(LayerNode("head_up", "tconv", ("fuse_b",), 16, 16, 2, 2, 0))
    else:
        nodes.append(LayerNode("head_up", "upsample_nearest", ("fuse_b",)))
    nodes += [
        LayerNode("head_conv", "conv", ("head_up",), 16, num_classes, 1, 1, 0),
        LayerNode("probs", "softmax", ("head_conv",)),
    ]
    spec = ArchitectureSpec(
        arch_id="rfbsnet-desk",
        input_name="image",
        output_name="probs",
        in_channels=in_channels,
        num_classes=num_classes,
        total_downsampling_factor=16,
        nodes=tuple(nodes),
    )
    _validate_graph(spec)
    return spec


def infer_shapes(spec, input_shape):
    """Per-node output shapes for the given NCHW input shape.

    Raises ShapeError naming the first inconsistent node.
    """
    if len(input_shape) != 4:
        raise ShapeError(f"input shape must be NCHW, got {input_shape}")
    n, c, h, w = (int(v) for v in input_shape)
    if c != spec.in_channels:
        raise ShapeError(
            f"input has {c} channels, {spec.arch_id} expects {spec.in_channels}"
        )
    shapes = {spec.input_name: (n, c, h, w)}
    for node in spec.nodes:
        ins = [shapes[s] for s in node.inputs]
        try:
            shapes[node.name] = _node_shape(node, ins)
        except ShapeError as e:
            raise ShapeError(f"node {node.name!r}: {e}") from None
    return shapes


def _node_shape(node, ins):
    if node.kind == "conv":
        n, c, h, w = ins[0]
        if c != node.cin:
            raise ShapeError(f"expects {node.cin} input channels, got {c}")
        ho = ops.conv_out_extent(h, node.kernel, node.stride, node.padding)
        wo = ops.conv_out_extent(w, node.kernel, node.stride, node.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"non-positive output extent from {h}x{w}")
        return (n, node.cout, ho, wo)
    if node.kind == "tconv":
        n, c, h, w = ins[0]
        if c != node.cin:
            raise ShapeError(f"expects {node.cin} input channels, got {c}")
        return (n, node.cout, 2 * h, 2 * w)
    if node.kind == "maxpool":
        n, c, h, w = ins[0]
        if h % 2 or w % 2:
            raise ShapeError(f"odd extents {h}x{w}")
        return (n, c, h // 2, w // 2)
    if node.kind == "concat":
        a, b = ins
        if a[0] != b[0] or a[2:] != b[2:]:
            raise ShapeError(f"batch/spatial mismatch {a} vs {b}")
        return (a[0], a[1] + b[1], a[2], a[3])
    if node.kind == "add":
        a, b = ins
        if a != b:
            raise ShapeError(f"operand shapes differ: {a} vs {b}")
        return a
    if node.kind in ("relu", "softmax"):
        return ins[0]
    if node.kind == "upsample_nearest":
        n, c, h, w = ins[0]
        return (n, c, 2 * h, 2 * w)
    raise ShapeError(f"unknown node kind {node.kind!r}")


class ParameterStore:
    """Insertion-ordered mapping of parameter name -> array."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise ShapeError(f"duplicate parameter {name!r}")
        self._params[name] = value

    def __getitem__(self, name):
        return self._params[name]

    def __setitem__(self, name, value):
        if name not in self._params:
            raise KeyError(name)
        self._params[name] = value

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_elements(self):
        return sum(int(v.size) for v in self._params.values())

    def copy(self):
        out = ParameterStore()
        for name, value in self._params.items():
            out.add(name, value.copy())
        return out

    def astype(self, dtype):
        out = ParameterStore()
        for name, value in self._params.items():
            out.add(name, value.astype(dtype))
        return out


def _param_nodes(spec):
    return [n for n in spec.nodes if n.kind in ("conv", "tconv")]


def init_params(spec, seed, dtype=np.float32):
    """He-uniform weights U(-b, b) with b = sqrt(6 / (Cin*Kh*Kw)); zero biases.

    Draws come from the SplitMix64 stream, so one seed gives bit-identical
    parameters everywhere.
    """
    prng = Prng(seed)
    params = ParameterStore()
    for node in _param_nodes(spec):
        k = node.kernel
        fan_in = node.cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        n = node.cout * node.cin * k * k
        draws = prng.fill_f64(n) * 2.0 - 1.0
        weight = (draws * bound).reshape(node.cout, node.cin, k, k).astype(dtype)
        params.add(f"{node.name}.weight", weight)
        params.add(f"{node.name}.bias", np.zeros(node.cout, dtype=dtype))
    return params


def _conv_params(node, params):
    return ops.Conv2dParams(
        weight=params[f"{node.name}.weight"],
        bias=params[f"{node.name}.bias"],
        stride=node.stride,
        padding=node.padding,
    )


@dataclass
class Tape:
    """Per-node activations and pooling argmax maps retained by forward."""

    spec: ArchitectureSpec
    params: ParameterStore
    activations: dict
    pool_argmax: dict
    output_name: str


def forward(spec, params, x, keep_intermediates=False):
    """Run the graph; returns (probability map, tape).

    The tape is None unless keep_intermediates is set. Activations are
    scanned for non-finite values after every node and reported by name.
    """
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError("forward input must be a rank-4 NCHW array")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, {spec.arch_id} expects {spec.in_channels}"
        )
    m = spec.total_downsampling_factor
    if x.shape[2] % m or x.shape[3] % m:
        raise ShapeError(
            f"input H and W must be multiples of {m}, got {x.shape[2]}x{x.shape[3]}"
        )
    values = {spec.input_name: x}
    pool_argmax = {}
    for node in spec.nodes:
        ins = [values[s] for s in node.inputs]
        if node.kind == "conv":
            out = ops.conv2d(ins[0], _conv_params(node, params))
        elif node.kind == "tconv":
            out = ops.transposed_conv2d(ins[0], _conv_params(node, params))
        elif node.kind == "maxpool":
            out, argmax = ops.maxpool2x2(ins[0])
            pool_argmax[node.name] = argmax
        elif node.kind == "relu":
            out = ops.relu(ins[0])
        elif node.kind == "concat":
            if ins[0].shape[0] != ins[1].shape[0] or ins[0].shape[2:] != ins[1].shape[2:]:
                raise ShapeError(f"node {node.name!r}: concat operand mismatch")
            out = np.concatenate(ins, axis=1)
        elif node.kind == "add":
            if ins[0].shape != ins[1].shape:
                raise ShapeError(f"node {node.name!r}: add operand mismatch")
            out = ins[0] + ins[1]
        elif node.kind == "upsample_nearest":
            out = ops.nearest_upsample2x(ins[0])
        elif node.kind == "softmax":
            out = ops.softmax_channels(ins[0])
        else:
            raise ShapeError(f"unknown node kind {node.kind!r}")
        if not np.isfinite(out).all():
            raise NumericsError(f"non-finite activation in node {node.name!r}")
        values[node.name] = out
    y = values[spec.output_name]
    if keep_intermediates:
        return y, Tape(spec, params, values, pool_argmax, spec.output_name)
    return y, None


def backward(tape, loss_grad):
    """Gradients for every parameter given d(loss)/d(output).

    Skip connections accumulate gradients from all consumers; concat splits
    the upstream back onto its operands.
    """
    if tape is None:
        raise ShapeError("backward needs a tape from forward(keep_intermediates=True)")
    spec, params, values = tape.spec, tape.params, tape.activations
    out = values[tape.output_name]
    if loss_grad.shape != out.shape:
        raise ShapeError(
            f"loss_grad shape {loss_grad.shape} != output shape {out.shape}"
        )
    upstream = {tape.output_name: loss_grad}
    param_grads = {}
    for node in reversed(spec.nodes):
        up = upstream.pop(node.name, None)
        if up is None:
            continue

        def send(target, grad):
            if target in upstream:
                upstream[target] = upstream[target] + grad
            else:
                upstream[target] = grad

        if node.kind == "conv":
            dx, dw, db = ops.conv2d_vjp(
                values[node.inputs[0]], _conv_params(node, params), up
            )
            param_grads[f"{node.name}.weight"] = dw
            param_grads[f"{node.name}.bias"] = db
            send(node.inputs[0], dx)
        elif node.kind == "tconv":
            dx, dw, db = ops.transposed_conv2d_vjp(
                values[node.inputs[0]], _conv_params(node, params), up
            )
            param_grads[f"{node.name}.weight"] = dw
            param_grads[f"{node.name}.bias"] = db
            send(node.inputs[0], dx)
        elif node.kind == "maxpool":
            send(node.inputs[0], ops.maxpool2x2_vjp(tape.pool_argmax[node.name], up))
        elif node.kind == "relu":
            send(node.inputs[0], ops.relu_vjp(values[node.inputs[0]], up))
        elif node.kind == "concat":
            ca = values[node.inputs[0]].shape[1]
            send(node.inputs[0], np.ascontiguousarray(up[:, :ca]))
            send(node.inputs[1], np.ascontiguousarray(up[:, ca:]))
        elif node.kind == "add":
            send(node.inputs[0], up)
            send(node.inputs[1], up)
        elif node.kind == "upsample_nearest":
            send(node.inputs[0], ops.nearest_upsample2x_vjp(up))
        elif node.kind == "softmax":
            send(node.inputs[0], ops.softmax_channels_vjp(values[node.name], up))
    grads = {}
    for name, value in params.items():
        got = param_grads.get(name)
        grads[name] = got if got is not None else np.zeros_like(value)
    return grads


# -- checkpoints ("RFBC") ------------------------------------------------------

_CKPT_MAGIC = b"RFBC"
_CKPT_VERSION = 1


def save_checkpoint(path, spec, params):
    """Magic RFBC, u16 version, u32 config hash, u32 entry count, then
    (u16 name length, name, RFT1 blob) per parameter (all little-endian)."""
    out = bytearray(_CKPT_MAGIC)
    out += struct.pack("<H", _CKPT_VERSION)
    out += struct.pack("<I", config_hash(spec))
    out += struct.pack("<I", len(params))
    for name, value in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw))
        out += raw
        out += encode_rft1(value)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path, expected_spec=None):
    """Returns (config hash, ParameterStore); validates the hash and every
    parameter name/shape when expected_spec is given."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 14:
        raise FormatError("checkpoint: truncated header")
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError("checkpoint: bad magic")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != _CKPT_VERSION:
        raise FormatError(f"checkpoint: unsupported version {version}")
    (cfg_hash,) = struct.unpack_from("<I", buf, 6)
    (count,) = struct.unpack_from("<I", buf, 10)
    pos = 14
    params = ParameterStore()
    for _ in range(count):
        if len(buf) < pos + 2:
            raise FormatError("checkpoint: truncated entry header")
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if len(buf) < pos + name_len:
            raise FormatError("checkpoint: truncated entry name")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        value, pos = decode_rft1(buf, pos)
        params.add(name, value)
    if pos != len(buf):
        raise FormatError(f"checkpoint: {len(buf) - pos} trailing bytes")
    if expected_spec is not None:
        expected = config_hash(expected_spec)
        if cfg_hash != expected:
            raise FormatError(
                f"checkpoint architecture hash {cfg_hash:#010x} does not match "
                f"{expected_spec.arch_id} ({expected:#010x})"
            )
        shapes = parameter_shapes(expected_spec)
        if params.names() != list(shapes):
            raise FormatError("checkpoint: parameter names do not match architecture")
        for name, value in params.items():
            if value.shape != shapes[name]:
                raise FormatError(
                    f"checkpoint: parameter {name} has shape {value.shape}, "
                    f"expected {shapes[name]}"
                )
    return cfg_hash, params


def parameter_shapes(spec):
    """Expected name -> shape map, in parameter order."""
    shapes = {}
    for node in _param_nodes(spec):
        k = node.kernel
        shapes[f"{node.name}.weight"] = (node.cout, node.cin, k, k)
        shapes[f"{node.name}.bias"] = (node.cout,)
    return shapes
