"""A small reverse-mode autodiff engine over numpy arrays.

Only the operators the detector network needs are provided. Tensors are
laid out ``(N, C, H, W)`` for the image ops. Every op records a closure
that maps the output gradient to input gradients; :func:`backward` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, NumericError

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "get_default_dtype",
    "precision",
    "no_grad",
    "debug_checks",
    "topological_order",
    "backward",
    "add",
    "mul",
    "scale",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "concat",
    "reshape",
    "transpose",
    "sum",
    "conv2d",
    "maxpool2d",
    "bilinear_resize",
    "resize_matrix",
    "unfold_window",
    "binary_cross_entropy",
    "OptimState",
    "optim_step",
    "Adam",
    "save_bundle",
    "load_bundle",
    "bundle_paths",
]

_DEFAULT_DTYPE = np.float32
_DEBUG = False
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def debug_checks(enabled=True):
    """Raise :class:`NumericError` as soon as an op produces NaN/Inf."""
    global _DEBUG
    prev = _DEBUG
    _DEBUG = enabled
    try:
        yield
    finally:
        _DEBUG = prev


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__
    __matmul__ = lambda self, other: matmul(self, other)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    out.op = op
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise NumericError(f"op {op} produced non-finite values")
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every input before its consumer."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that requires grad.

    Gradients accumulate into leaves; intermediate gradients are released
    once consumed.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ArgumentError("loss does not depend on any tensor that requires grad")
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ArgumentError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ArgumentError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1 / (1 + e), e / (1 + e)).astype(x.data.dtype)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def softmax(x, axis=-1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), grad_fn, "softmax")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn, "matmul")


def concat(tensors, axis=1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis % len(ref)):
            raise ArgumentError(f"concat: shapes {shapes[0]} and {s} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, tensors, grad_fn, "concat")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ArgumentError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), grad_fn, "sum")


# ---------------------------------------------------------------------------
# image ops


def _same_padding(size, k, stride, dilation):
    out = -(-size // stride)
    eff = (k - 1) * dilation + 1
    total = max((out - 1) * stride + eff - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, weight, bias=None, stride=1, dilation=1, padding="same") -> Tensor:
    """2-D cross-correlation with zero "same" padding.

    ``x`` is ``(N, C, H, W)``, ``weight`` is ``(O, C, kh, kw)``; output
    spatial size is ``ceil(H / stride)``.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if padding != "same":
        raise ArgumentError(f"conv2d supports padding='same' only, got {padding!r}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ArgumentError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    if stride < 1 or dilation < 1:
        raise ArgumentError(f"conv2d: stride and dilation must be >= 1, got {stride}, {dilation}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ArgumentError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
        parents.append(bias)

    if kh == 1 and kw == 1 and stride == 1:
        wm = weight.data.reshape(o, c)
        xf = x.data.reshape(n, c, h * w)
        out = np.matmul(wm, xf).reshape(n, o, h, w)
        if bias is not None:
            out = out + bias.data[None, :, None, None]

        def grad_1x1(g):
            gf = g.reshape(n, o, h * w)
            gx = np.matmul(wm.T, gf).reshape(x.shape)
            gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2])).reshape(weight.shape)
            gb = gf.sum(axis=(0, 2)) if bias is not None else None
            return (gx, gw, gb)[: len(parents)]

        return _make(out, parents, grad_1x1, "conv2d")

    oh, pt, pb = _same_padding(h, kh, stride, dilation)
    ow, pl, pr = _same_padding(w, kw, stride, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            cols[:, :, i, j] = xp[:, :, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride]
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    wm = weight.data.reshape(o, c * kh * kw)
    out = np.matmul(wm, cols2).reshape(n, o, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def grad_fn(g):
        gf = g.reshape(n, o, oh * ow)
        gw = np.tensordot(gf, cols2, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gcols = np.matmul(wm.T, gf).reshape(n, c, kh, kw, oh, ow)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            r0 = i * dilation
            for j in range(kw):
                c0 = j * dilation
                gxp[:, :, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pt : pt + h, pl : pl + w]
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return (gx, gw, gb)[: len(parents)]

    return _make(out, parents, grad_fn, "conv2d")


def _pool_size(size, k, stride):
    if size <= k:
        return 1
    return -(-(size - k) // stride) + 1


def maxpool2d(x, k=2, stride=None) -> Tensor:
    """Max pooling in ceil mode: ``H=5, k=stride=2`` gives 3 rows."""
    x = _as_tensor(x)
    stride = stride or k
    if x.ndim != 4 or k < 1 or stride < 1:
        raise ArgumentError(f"maxpool2d: bad input {x.shape} or window {k}/{stride}")
    n, c, h, w = x.shape
    oh, ow = _pool_size(h, k, stride), _pool_size(w, k, stride)
    ph = max((oh - 1) * stride + k - h, 0)
    pw = max((ow - 1) * stride + k - w, 0)
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    windows = np.stack(
        [
            xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
            for i in range(k)
            for j in range(k)
        ]
    )
    arg = windows.argmax(axis=0)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def grad_fn(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            gxp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += np.where(
                arg == idx, g, 0
            )
        return (gxp[:, :, :h, :w],)

    return _make(out, (x,), grad_fn, "maxpool2d")


def resize_matrix(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights, half-pixel centers (align_corners=False)."""
    m = np.zeros((out_size, in_size), dtype=dtype)
    ratio = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        m[i, i0] += 1 - lam
        m[i, i1] += lam
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4 or out_h < 1 or out_w < 1:
        raise ArgumentError(f"bilinear_resize: bad input {x.shape} or size {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    ry = resize_matrix(h, out_h, x.data.dtype)
    rx = resize_matrix(w, out_w, x.data.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ry, x.data, rx)
    return _make(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ry, g, rx),), "bilinear_resize")


def unfold_window(x, kh: int, kw: int) -> Tensor:
    """Zero-padded ``kh x kw`` neighbourhoods: ``(N, C, H, W) -> (N, C, kh*kw, H, W)``."""
    x = _as_tensor(x)
    if kh % 2 == 0 or kw % 2 == 0 or kh < 1 or kw < 1:
        raise ArgumentError(f"unfold_window needs odd window sizes, got {kh}x{kw}")
    n, c, h, w = x.shape
    rh, rw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (rh, rh), (rw, rw)))
    out = np.stack([xp[:, :, i : i + h, j : j + w] for i in range(kh) for j in range(kw)], axis=2)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        for idx in range(kh * kw):
            i, j = divmod(idx, kw)
            gxp[:, :, i : i + h, j : j + w] += g[:, :, idx]
        return (gxp[:, :, rh : rh + h, rw : rw + w],)

    return _make(out, (x,), grad_fn, "unfold_window")


def binary_cross_entropy(prob, target, eps=1e-7) -> Tensor:
    """Mean cross-entropy of probabilities clamped to ``[eps, 1 - eps]``."""
    prob = _as_tensor(prob)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=prob.data.dtype)
    if t.shape != prob.shape:
        raise ArgumentError(f"binary_cross_entropy: prediction {prob.shape} vs target {t.shape}")
    p = np.clip(prob.data, eps, 1 - eps)
    count = p.size
    loss = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))
    inside = (prob.data >= eps) & (prob.data <= 1 - eps)

    def grad_fn(g):
        d = (p - t) / (p * (1 - p)) / count
        return (g * np.where(inside, d, 0).astype(prob.data.dtype),)

    return _make(np.asarray(loss, dtype=prob.data.dtype), (prob,), grad_fn, "binary_cross_entropy")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optim_step(params: dict, grads: dict, state: OptimState) -> None:
    """One bias-corrected adaptive-moment update, in place on ``params``.

    ``params`` maps names to arrays (or tensors); ``grads`` maps the same
    names to gradients. Missing gradients count as zero.
    """
    if state.lr <= 0:
        raise ArgumentError(f"learning rate must be > 0, got {state.lr}")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        if g.shape != arr.shape:
            raise ArgumentError(f"gradient for '{name}' has shape {g.shape}, parameter has {arr.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        arr -= update.astype(arr.dtype)


class Adam:
    """Convenience wrapper pairing a parameter dict with an :class:`OptimState`."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        optim_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


# ---------------------------------------------------------------------------
# tensor bundle files


def bundle_paths(path) -> tuple[Path, Path]:
    p = str(path)
    for suffix in (".tb.json", ".tb.bin"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
    return Path(p + ".tb.json"), Path(p + ".tb.bin")


def save_bundle(arrays: dict, path) -> None:
    """Write named arrays as ``<path>.tb.json`` + ``<path>.tb.bin``.

    The manifest lists ``{name, shape, offset}`` with ``offset`` in bytes
    into the little-endian float32 payload.
    """
    manifest_path, payload_path = bundle_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest_path.write_text(json.dumps(entries) + "\n", encoding="utf-8")
    payload_path.write_bytes(b"".join(chunks))


def load_bundle(path) -> dict:
    manifest_path, payload_path = bundle_paths(path)
    try:
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
        payload = payload_path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing tensor bundle file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"bundle manifest {manifest_path} is not valid JSON: {exc}") from None
    arrays = {}
    for entry in entries:
        for key in ("name", "shape", "offset"):
            if key not in entry:
                raise FormatError(f"bundle entry is missing field '{key}'")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise FormatError(f"bundle entry '{entry['name']}' runs past the end of {payload_path}")
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
            .reshape(entry["shape"])
            .astype(np.float32)
        )
    return arrays
