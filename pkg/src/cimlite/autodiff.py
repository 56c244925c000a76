"""Dense NCHW tensors with reverse-mode differentiation.

Only the primitives needed by the CIM encoder, the early-fusion baseline and
the SSL / supervised objectives are provided. Every op records a closure that
maps the output gradient to one gradient per parent; ``Tensor.backward`` walks
the graph once in reverse topological order.

Elementwise ops require equal shapes (python scalars are allowed as
constants). Broadcasting is explicit through :func:`expand`; the only implicit
broadcast is bias addition inside :func:`conv2d_grouped` and :func:`linear`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericalError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                if not np.all(np.isfinite(node.grad)):
                    raise NumericalError(f"non-finite gradient reached a leaf of shape {node.shape}")
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each after all of its parents."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (use expand())")


def _binary_operands(a, b):
    a_scalar = not isinstance(a, Tensor)
    b_scalar = not isinstance(b, Tensor)
    if a_scalar and b_scalar:
        raise DimensionError("at least one operand must be a Tensor")
    if a_scalar:
        a = Tensor(np.full(b.shape, a, dtype=b.dtype))
    if b_scalar:
        b = Tensor(np.full(a.shape, b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "scale")
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return mul(b, a)
    a, b = _binary_operands(a, b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return mul(a, 1.0 / float(b))
    a, b = _binary_operands(a, b)
    _same_shape(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (g / b.data, -g * out / b.data), "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _node(out, (a,), lambda g: (g * (out > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# --------------------------------------------------------------- shape / reduce


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` to ``shape``; size-1 axes (and missing leading axes) repeat."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)
    red = tuple(range(lead)) + tuple(
        lead + i for i, (s, t) in enumerate(zip(src, shape[lead:])) if s == 1 and t != 1
    )

    def back(g):
        r = g.sum(axis=red, keepdims=True) if red else g
        return (r.reshape(src),)

    return _node(np.ascontiguousarray(out), (a,), back, "expand")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return _node(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    if a.ndim != 2 or len(index) != a.shape[0]:
        raise DimensionError(f"pick: need a 2-D tensor and one index per row, got {a.shape}")
    rows = np.arange(a.shape[0])
    index = np.asarray(index)

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _node(a.data[rows, index], (a,), back, "pick")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along one axis (e.g. a row slice of a 2-D tensor)."""
    indices = np.asarray(indices)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * (axis % a.ndim) + (indices,), g)
        return (full,)

    return _node(np.take(a.data, indices, axis=axis), (a,), back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


# ------------------------------------------------------------------ nn layers


def _resolve_padding(padding, kh: int, kw: int) -> int:
    if padding == "same":
        if kh != kw or kh % 2 == 0:
            raise ConfigurationError("padding='same' needs an odd square kernel")
        return (kh - 1) // 2
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ConfigurationError(f"padding must be a non-negative int or 'same', got {padding!r}")
    return int(padding)


def conv2d_grouped(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    groups: int = 1,
    stride: int = 1,
    padding: int | str = 0,
) -> Tensor:
    """2-D cross-correlation with ``groups`` independent channel groups.

    ``weight`` has shape ``(Cout, Cin // groups, kh, kw)``. Output channels
    ``[gi * Cout/g, (gi+1) * Cout/g)`` only read input channels of group ``gi``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and weight, got {x.shape}, {weight.shape}")
    n, cin, h, w = x.shape
    cout, cpg, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigurationError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cin // groups != cpg:
        raise DimensionError(f"conv2d: weight expects {cpg * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ConfigurationError("stride must be >= 1")
    p = _resolve_padding(padding, kh, kw)
    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {p}")
    g = groups
    opg = cout // g
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weight.data

    if cpg == 1 and opg == 1:
        # depthwise: shift-and-accumulate, never materializes patches
        out = np.zeros((n, cout, ho, wo), dtype=np.result_type(x.data, wd))
        wv = wd[:, 0]
        for i in range(kh):
            for j in range(kw):
                sl = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                out += sl * wv[None, :, i, j, None, None]

        def grads(gout):
            gx = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for i in range(kh):
                for j in range(kw):
                    sl = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gout, sl)
                    gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gout * wv[None, :, i, j, None, None]
                    )
            return gx, gw

    else:
        if kh == 1 and kw == 1 and stride == 1:
            # pointwise: per-group contraction over the cpg input channels
            xg = xp.reshape(n, g, cpg, ho, wo)
            wg = wd.reshape(g, opg, cpg)
            out = np.einsum("ngchw,goc->ngohw", xg, wg, optimize=False).reshape(n, cout, ho, wo)

            def grads(gout):
                gg = gout.reshape(n, g, opg, ho, wo)
                gw = np.einsum("ngohw,ngchw->goc", gg, xg, optimize=False).reshape(wd.shape)
                gx = np.einsum("ngohw,goc->ngchw", gg, wg, optimize=False).reshape(xp.shape)
                return gx, gw

        else:
            if kh == 1 and kw == 1:
                src = xp[:, :, ::stride, ::stride]
                cols = src.reshape(n, g, cpg, ho * wo).transpose(1, 0, 3, 2).reshape(g, n * ho * wo, cpg)
            else:
                win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
                cols = (
                    win.reshape(n, g, cpg, ho, wo, kh, kw)
                    .transpose(1, 0, 3, 4, 2, 5, 6)
                    .reshape(g, n * ho * wo, cpg * kh * kw)
                )
            wmat = wd.reshape(g, opg, cpg * kh * kw).transpose(0, 2, 1)
            prod = np.matmul(cols, wmat)
            out = prod.reshape(g, n, ho, wo, opg).transpose(1, 0, 4, 2, 3).reshape(n, cout, ho, wo)

            def grads(gout):
                gmat = gout.reshape(n, g, opg, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, opg)
                gw = np.matmul(cols.transpose(0, 2, 1), gmat).transpose(0, 2, 1).reshape(wd.shape)
                gcols = np.matmul(gmat, wmat.transpose(0, 2, 1))
                gcols = gcols.reshape(g, n, ho, wo, cpg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
                gcols = gcols.reshape(n, cin, ho, wo, kh, kw)
                gx = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j]
                return gx, gw

    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(gout):
        gx, gw = grads(gout)
        if p:
            gx = gx[:, :, p : p + h, p : p + w]
        gb = gout.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, back, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int | str = "same") -> Tensor:
    """Per-channel spatial filtering; ``conv2d_grouped`` with ``groups == channels``."""
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise DimensionError(f"depthwise weight must be (C, 1, kh, kw), got {weight.shape}")
    return conv2d_grouped(x, weight, bias, groups=x.shape[1], stride=1, padding=padding)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like PyTorch).
    In eval mode the running statistics are read but never written.
    """
    if eps <= 0:
        raise ConfigurationError(f"batchnorm eps must be positive, got {eps}")
    if x.ndim != 4:
        raise DimensionError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise DimensionError(f"batchnorm2d: {name} has shape {arr.shape}, expected ({c},)")
    gam = gamma.data[None, :, None, None]

    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = gam * xhat + beta.data[None, :, None, None]

        def back_eval(g):
            return (g * gam * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return _node(out, (x, gamma, beta), back_eval, "batchnorm_eval")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None, None]
    out = gam * xhat + beta.data[None, :, None, None]
    unbiased = var * m / max(m - 1, 1)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def back_train(g):
        dxhat = g * gam
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _node(out, (x, gamma, beta), back_train, "batchnorm_train")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def back(g):
        return (np.broadcast_to(g[:, :, None, None] * scale, (n, c, h, w)).copy(),)

    return _node(x.data.mean(axis=(2, 3)), (x,), back, "gap")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, Din) and ``weight`` (Dout, Din)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw, g.sum(axis=0)) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, back, "linear")


# --------------------------------------------------------------- verification


def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``function`` maps a Tensor to a scalar Tensor and must be built from the
    primitives in this module. The check runs in float64.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    t = Tensor(x0.copy(), requires_grad=True)
    out = function(t)
    if out.data.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = t.grad if t.grad is not None else np.zeros_like(x0)
    if not np.all(np.isfinite(analytic)):
        raise NumericalError("grad_check: analytic gradient is not finite")
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = function(Tensor(xp.reshape(x0.shape))).item()
        fm = function(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NumericalError("grad_check: finite-difference gradient is not finite")
    if x0.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check_many(function: Callable[[dict[str, Tensor]], Tensor], arrays: dict[str, np.ndarray], eps: float = 1e-5) -> dict[str, float]:
    """Run :func:`grad_check` on each named input of a multi-input function.

    The other inputs are held fixed at their given values while one is
    perturbed.
    """
    fixed = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    errors = {}
    for name in fixed:

        def f(t, name=name):
            inputs = {k: (t if k == name else Tensor(v)) for k, v in fixed.items()}
            return function(inputs)

        errors[name] = grad_check(f, fixed[name], eps)
    return errors
