"""Layer primitives for RFBSNet: forwards, vector-Jacobian products, and a
finite-difference gradient checker.

Conventions: tensors are NCHW, convolution is cross-correlation (no kernel
flip), output extents follow Hout = floor((H + 2*padH - Kh)/strideH) + 1.
Only the hyperparameter combinations the network needs are supported:
conv k3 s{1,2} p{0,1}, conv k1 s1 p0, max-pool 2x2 s2, transposed conv k2 s2.
Every forward is deterministic (bit-identical for identical inputs), ReLU's
gradient at exactly 0 is 0, and pooling ties break to the first element in
row-major window order.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import Prng
from .errors import NumericsError, ShapeError, UnsupportedConfigError

# (kernel, stride, pad) triples accepted per spatial axis; k2 s2 exists for
# the adjoint pairing with transposed_conv2d.
_CONV_CONFIGS = {(3, 1, 1), (3, 2, 1), (3, 1, 0), (3, 2, 0), (1, 1, 0), (2, 2, 0)}


def _pair(v, name):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ShapeError(f"{name} must be an int or a pair, got {v}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class Conv2dParams:
    """Weights for conv2d / transposed_conv2d.

    weight is (Cout, Cin, Kh, Kw) for both ops; for the transposed direction
    Cin is the *input* channel count of the op.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride, "stride")
        self.padding = _pair(self.padding, "padding")
        if self.weight.ndim != 4:
            raise ShapeError(f"weight must be (Cout, Cin, Kh, Kw), got {self.weight.shape}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match Cout {self.weight.shape[0]}"
            )
        if self.weight.dtype != self.bias.dtype:
            raise ShapeError("weight/bias dtype mismatch")
        if min(self.weight.shape[2:]) < 1:
            raise ShapeError("kernel extents must be >= 1")
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def cout(self):
        return self.weight.shape[0]

    @property
    def cin(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]


def _check_conv_config(p):
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    if (kh, sh, ph) not in _CONV_CONFIGS or (kw, sw, pw) not in _CONV_CONFIGS:
        raise UnsupportedConfigError(
            f"conv k{kh}x{kw} s{sh}x{sw} p{ph}x{pw} is outside the supported set "
            "(k3 s1/s2 p0/p1, k1 s1 p0)"
        )


def _check_input(x, p, op):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{op} input must be a rank-4 NCHW array")
    if x.dtype != p.weight.dtype:
        raise ShapeError(f"{op}: input dtype {x.dtype} != weight dtype {p.weight.dtype}")
    if x.shape[1] != p.cin:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels, weights expect {p.cin}")


def conv_out_extent(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _im2col(x, kh, kw, sh, sw, ph, pw):
    """Patch matrix (N*Hout*Wout, Cin*Kh*Kw) of the zero-padded input."""
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    n, c = x.shape[:2]
    hout = (x.shape[2] - kh) // sh + 1
    wout = (x.shape[3] - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # (n, c, hout, wout, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * hout * wout, c * kh * kw), hout, wout


def _col2im(dcols, xshape, kh, kw, sh, sw, ph, pw, hout, wout):
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    dwin = dcols.reshape(n, hout, wout, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for a in range(kh):
        for b in range(kw):
            dxp[:, :, a : a + sh * hout : sh, b : b + sw * wout : sw] += dwin[
                :, :, :, :, a, b
            ]
    if ph or pw:
        return np.ascontiguousarray(dxp[:, :, ph : ph + h, pw : pw + w])
    return dxp


def conv2d(x, p):
    """Cross-correlation plus bias; output (N, Cout, Hout, Wout)."""
    _check_conv_config(p)
    _check_input(x, p, "conv2d")
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    n, _, h, w = x.shape
    hout = conv_out_extent(h, kh, sh, ph)
    wout = conv_out_extent(w, kw, sw, pw)
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d: non-positive output extent for input {x.shape}")
    cols, hout, wout = _im2col(x, kh, kw, sh, sw, ph, pw)
    w2 = p.weight.reshape(p.cout, -1)
    y = cols @ w2.T
    y += p.bias[None, :]
    return np.ascontiguousarray(
        y.reshape(n, hout, wout, p.cout).transpose(0, 3, 1, 2)
    )


def conv2d_vjp(x, p, upstream):
    """Gradients of sum(upstream * conv2d(x, p)) w.r.t. (x, weight, bias)."""
    _check_conv_config(p)
    _check_input(x, p, "conv2d_vjp")
    kh, kw = p.kernel
    sh, sw = p.stride
    ph, pw = p.padding
    n, _, h, w = x.shape
    hout = conv_out_extent(h, kh, sh, ph)
    wout = conv_out_extent(w, kw, sw, pw)
    expect = (n, p.cout, hout, wout)
    if upstream.shape != expect or upstream.dtype != x.dtype:
        raise ShapeError(f"conv2d_vjp: upstream must be {expect} {x.dtype}, got "
                         f"{upstream.shape} {upstream.dtype}")
    cols, _, _ = _im2col(x, kh, kw, sh, sw, ph, pw)
    up2 = np.ascontiguousarray(upstream.transpose(0, 2, 3, 1)).reshape(-1, p.cout)
    dbias = up2.sum(axis=0)
    dweight = (up2.T @ cols).reshape(p.weight.shape)
    dcols = up2 @ p.weight.reshape(p.cout, -1)
    dx = _col2im(dcols, x.shape, kh, kw, sh, sw, ph, pw, hout, wout)
    return dx, dweight, dbias


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling; also returns the winners' flat indices.

    argmax holds, per output element, the flat index of the winning input
    element within the whole NCHW array (ties go to the first element in
    row-major window order).
    """
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError("maxpool2x2 input must be a rank-4 NCHW array")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 requires even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = np.ascontiguousarray(
        x.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, h2, w2, 4)
    local = win.argmax(axis=-1)  # first max wins ties
    y = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    ni, ci, ii, ji = np.ogrid[0:n, 0:c, 0:h2, 0:w2]
    rows = 2 * ii + local // 2
    cols = 2 * ji + local % 2
    argmax = ((ni * c + ci) * h + rows) * w + cols
    return np.ascontiguousarray(y), argmax


def maxpool2x2_vjp(argmax, upstream):
    """Route upstream values to the recorded argmax positions, zeros elsewhere."""
    if argmax.shape != upstream.shape:
        raise ShapeError(
            f"maxpool2x2_vjp: argmax {argmax.shape} vs upstream {upstream.shape}"
        )
    n, c, h2, w2 = argmax.shape
    dx = np.zeros((n, c, 2 * h2, 2 * w2), dtype=upstream.dtype)
    # winners are unique per window, so plain assignment suffices
    dx.ravel()[argmax.ravel()] = upstream.ravel()
    return dx


def _check_tconv_config(p):
    if p.kernel != (2, 2) or p.stride != (2, 2) or p.padding != (0, 0):
        raise UnsupportedConfigError(
            f"transposed conv supports only k2 s2 p0, got k{p.kernel} s{p.stride} "
            f"p{p.padding}"
        )


def transposed_conv2d(x, p):
    """Learnable 2x upsampling: each input pixel scatters weight*x into a 2x2
    block (non-overlapping because k = s = 2), then bias is added."""
    _check_tconv_config(p)
    _check_input(x, p, "transposed_conv2d")
    n, _, h, w = x.shape
    x2 = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, p.cin)
    w2 = np.ascontiguousarray(p.weight.transpose(1, 0, 2, 3)).reshape(p.cin, -1)
    o2 = x2 @ w2  # (n*h*w, cout*4)
    out = np.ascontiguousarray(
        o2.reshape(n, h, w, p.cout, 2, 2).transpose(0, 3, 1, 4, 2, 5)
    ).reshape(n, p.cout, 2 * h, 2 * w)
    out += p.bias[None, :, None, None]
    return out


def transposed_conv2d_vjp(x, p, upstream):
    """Gradients of sum(upstream * transposed_conv2d(x, p))."""
    _check_tconv_config(p)
    _check_input(x, p, "transposed_conv2d_vjp")
    n, _, h, w = x.shape
    expect = (n, p.cout, 2 * h, 2 * w)
    if upstream.shape != expect or upstream.dtype != x.dtype:
        raise ShapeError(
            f"transposed_conv2d_vjp: upstream must be {expect} {x.dtype}, got "
            f"{upstream.shape} {upstream.dtype}"
        )
    dbias = upstream.sum(axis=(0, 2, 3))
    up2 = np.ascontiguousarray(
        upstream.reshape(n, p.cout, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)
    ).reshape(n * h * w, p.cout * 4)
    w2 = np.ascontiguousarray(p.weight.transpose(1, 0, 2, 3)).reshape(p.cin, -1)
    dx = np.ascontiguousarray(
        (up2 @ w2.T).reshape(n, h, w, p.cin).transpose(0, 3, 1, 2)
    )
    x2 = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(n * h * w, p.cin)
    dweight = np.ascontiguousarray(
        (x2.T @ up2).reshape(p.cin, p.cout, 2, 2).transpose(1, 0, 2, 3)
    )
    return dx, dweight, dbias


def nearest_upsample2x(x):
    """Replicate every pixel into a 2x2 block."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError("nearest_upsample2x input must be a rank-4 NCHW array")
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def nearest_upsample2x_vjp(upstream):
    """Adjoint of replication: each 2x2 upstream block sums to one gradient."""
    if not isinstance(upstream, np.ndarray) or upstream.ndim != 4:
        raise ShapeError("nearest_upsample2x_vjp upstream must be rank-4")
    n, c, h, w = upstream.shape
    if h % 2 or w % 2:
        raise ShapeError(f"nearest_upsample2x_vjp: odd upstream extents {h}x{w}")
    return upstream.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def relu(x):
    return np.maximum(x, 0)


def relu_vjp(x, upstream):
    """Mask upstream where x <= 0 (gradient at exactly 0 is defined as 0)."""
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_vjp: shape mismatch {x.shape} vs {upstream.shape}")
    return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))


def softmax_channels(x):
    """Per-pixel softmax over the channel axis with max-subtraction."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError("softmax_channels input must be a rank-4 NCHW array")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_vjp(y, upstream):
    """VJP expressed through the softmax output y."""
    if y.shape != upstream.shape:
        raise ShapeError(f"softmax vjp: shape mismatch {y.shape} vs {upstream.shape}")
    dot = (upstream * y).sum(axis=1, keepdims=True)
    return y * (upstream - dot)


# -- finite-difference gradient checking --------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of one finite-difference check."""

    op: str
    tolerance: float
    max_rel_error: float = 0.0
    per_input: dict = field(default_factory=dict)
    coords_checked: int = 0

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _sample_coords(size, max_coords, prng):
    if max_coords is None or size <= max_coords:
        return range(size)
    picked = set()
    while len(picked) < max_coords:
        picked.add(prng.next_u64() % size)
    return sorted(picked)


def grad_check(
    op,
    f,
    vjp,
    inputs,
    input_names=None,
    upstream=None,
    tol=1e-6,
    h=1e-5,
    max_coords=None,
    seed=0,
):
    """Compare vjp-reported gradients of sum(upstream * f(*inputs)) against
    central finite differences, coordinate by coordinate.

    All inputs must be float64. `f(*inputs)` returns an array; `vjp(*inputs,
    upstream)` returns one gradient array per input (None entries are
    skipped). With max_coords set, a seeded subset of coordinates per input
    is checked instead of every coordinate.
    """
    inputs = [np.asarray(v) for v in inputs]
    for v in inputs:
        if v.dtype != np.float64:
            raise ShapeError("grad_check requires float64 inputs")
    if input_names is None:
        input_names = [f"input{i}" for i in range(len(inputs))]
    y = f(*inputs)
    if not np.isfinite(y).all():
        raise NumericsError(f"grad_check({op}): non-finite forward output")
    prng = Prng(seed)
    if upstream is None:
        upstream = (prng.fill_f64(y.size).reshape(y.shape) * 2.0 - 1.0).astype(
            np.float64
        )
    analytic = vjp(*inputs, upstream)
    report = GradCheckReport(op=op, tolerance=tol)

    def scalar(args):
        return float(np.sum(upstream * f(*args), dtype=np.float64))

    for name, value, grad in zip(input_names, inputs, analytic):
        if grad is None:
            continue
        if not np.isfinite(grad).all():
            raise NumericsError(f"grad_check({op}): non-finite gradient for {name}")
        worst = 0.0
        work = [v.copy() for v in inputs]
        idx = next(i for i, v in enumerate(inputs) if v is value)
        for k in _sample_coords(value.size, max_coords, prng):
            orig = work[idx].flat[k]
            work[idx].flat[k] = orig + h
            plus = scalar(work)
            work[idx].flat[k] = orig - h
            minus = scalar(work)
            work[idx].flat[k] = orig
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, _rel_err(float(grad.flat[k]), numeric))
            report.coords_checked += 1
        report.per_input[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
