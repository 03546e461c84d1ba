"""Small dense-tensor engine with reverse-mode autodiff.

Only the operations needed by the detector network and its loss are
provided. Every tensor wraps a numpy array; operations record a closure
that pushes the upstream gradient back to their inputs, and
:func:`backward` replays those closures in reverse topological order.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_DTYPE = np.float32
# Non-finite checking after every op; release runs may switch it off.
CHECK_FINITE = True
# When a list, relu/clip append their active-region masks (kink detection).
_MASK_LOG: Optional[list] = None


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors.

    >>> with precision(np.float64):
    ...     t = Tensor([1.0, 2.0])
    >>> t.data.dtype
    dtype('float64')
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def record_masks():
    """Collect the piecewise-linear region masks of every relu/clip evaluated inside."""
    global _MASK_LOG
    prev, log = _MASK_LOG, []
    _MASK_LOG = log
    try:
        yield log
    finally:
        _MASK_LOG = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global CHECK_FINITE
    prev = CHECK_FINITE
    CHECK_FINITE = enabled
    try:
        yield
    finally:
        CHECK_FINITE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __float__(self):
        if self.data.size != 1:
            raise ContractError(f"cannot convert tensor of shape {self.shape} to float")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, op={self._op or 'leaf'})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.size != 1 and a.data.size != 1:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum()).reshape(shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, 2 * g * a.data)

    return _make(a.data * a.data, (a,), backward, "square")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the value was inside."""
    inside = (a.data >= lo) & (a.data <= hi)
    if _MASK_LOG is not None:
        _MASK_LOG.append(inside)

    def backward(g):
        _accumulate(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward, "sqrt")


def divide(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"divide: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, (a, b), backward, "divide")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), backward, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ContractError("mean of empty tensor")

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.sum() / n, dtype=a.data.dtype), (a,), backward, "mean")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _MASK_LOG is not None:
        _MASK_LOG.append(mask)

    def backward(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward, "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * s * (1 - s))

    return _make(s, (a,), backward, "sigmoid")


def activation(a: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ContractError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (N, C_in, H, W) batch with a (C_out, C_in, kH, kW) kernel.

    A (C_in, H, W) input is treated as a batch of one and returned unbatched.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} / kernel {kernel.shape} must be rank 4")
    n, c_in, h, w = xd.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise DimensionError(f"conv2d: input {x.shape} has {c_in} channels, kernel {kernel.shape} expects {k_in}")
    if stride < 1:
        raise ContractError("conv2d: stride must be >= 1")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {x.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    kd = kernel.data
    out = np.zeros((n, c_out, ho, wo), dtype=np.result_type(xd, kd))
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + he:stride, j:j + we:stride]
            out += np.einsum("nchw,oc->nohw", patch, kd[:, :, i, j], optimize=True)

    def backward(g):
        g4 = g[None] if squeeze else g
        if kernel.requires_grad:
            gk = np.zeros_like(kd)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i:i + he:stride, j:j + we:stride]
                    gk[:, :, i, j] = np.einsum("nohw,nchw->oc", g4, patch, optimize=True)
            _accumulate(kernel, gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + he:stride, j:j + we:stride] += np.einsum(
                        "nohw,oc->nchw", g4, kd[:, :, i, j], optimize=True)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, (x, kernel), backward, "conv2d")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``weight @ x (+ bias)`` for a vector ``x`` of length n or a batch (N, n)."""
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            gw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
            _accumulate(weight, gw)
        if bias is not None:
            _accumulate(bias, g if x.ndim == 1 else g.sum(axis=0))

    return _make(out, parents, backward, "dense")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: (C,H,W)->(C) or (N,C,H,W)->(N,C)."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool: expected rank 3 or 4, got {x.shape}")
    h, w = x.shape[-2:]

    def backward(g):
        _accumulate(x, np.broadcast_to(g[..., None, None] / (h * w), x.shape))

    return _make(x.data.mean(axis=(-2, -1)), (x,), backward, "global_avg_pool")


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis; ranks must agree (rank 1 per sample, rank 2 batched)."""
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    p = a.shape[-1]

    def backward(g):
        ga, gb = np.split(g, [p], axis=-1)
        _accumulate(a, ga)
        _accumulate(b, gb)

    data = np.concatenate([a.data, b.data], axis=-1)
    return _make(data, (a, b), backward, "concat")


def inner_product(a: Tensor, b: Tensor) -> Tensor:
    """Dot product over the last axis; batched inputs (N, d) give shape (N,)."""
    if a.shape != b.shape:
        raise DimensionError(f"inner_product: lengths differ ({a.shape} vs {b.shape})")

    def backward(g):
        gg = np.asarray(g)[..., None]
        _accumulate(a, gg * b.data)
        _accumulate(b, gg * a.data)

    return _make(np.asarray((a.data * b.data).sum(axis=-1)), (a, b), backward, "inner_product")


def pad_channels(x: Tensor, channels: int) -> Tensor:
    """Zero-extend the channel axis (axis 1 of an NCHW batch) up to ``channels``."""
    c = x.shape[1]
    if channels < c:
        raise DimensionError(f"pad_channels: cannot shrink {c} channels to {channels}")
    widths = [(0, 0)] * x.ndim
    widths[1] = (0, channels - c)

    def backward(g):
        _accumulate(x, g[:, :c])

    return _make(np.pad(x.data, widths), (x,), backward, "pad_channels")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    orig = x.shape

    def backward(g):
        _accumulate(x, g.reshape(orig))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


# ---------------------------------------------------------------------------
# backward pass


GradMap = Dict[str, np.ndarray]


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Dict[str, Tensor]] = None) -> GradMap:
    """Differentiate a scalar ``loss``.

    Every reachable tensor that requires gradients gets a fresh ``.grad``
    (previous values are discarded). The returned map holds one entry per entry of ``params``
    (zeros for parameters the loss does not depend on), or, without
    ``params``, one entry per named leaf reached.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    grads: GradMap = {}
    if params is None:
        for node in order:
            if node.name is not None and node._backward is None and node.requires_grad:
                grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.data)
    else:
        for name, p in params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return grads


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    checked: int
    tolerance: float
    worst: Optional[tuple] = None  # (name, flat index)
    failures: List[tuple] = field(default_factory=list)  # (name, index, analytic, numeric, rel)
    skipped_kinks: int = 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = (f"{status}: max relative error {self.max_rel_error:.3e} over "
                f"{self.checked} elements (tolerance {self.tolerance:g})")
        if self.skipped_kinks:
            line += f", {self.skipped_kinks} kink-crossing elements replaced"
        if self.failures:
            name, idx = self.failures[0][:2]
            line += f"; first failure {name}[{idx}]"
        return line


def _same_masks(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(f: Callable[[Dict[str, Tensor]], Tensor],
                      params: Dict[str, np.ndarray],
                      step: float = 1e-5,
                      tolerance: float = 1e-4,
                      n_samples: Optional[int] = 200,
                      seed: int = 0,
                      grad_fn: Optional[Callable[[Dict[str, Tensor]], GradMap]] = None,
                      skip_kinks: bool = True,
                      ) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps a dict of leaf tensors to a scalar loss; everything runs in
    float64. The error per element is ``|g_a - g_n| / max(1, |g_a|, |g_n|)``.

    With ``n_samples`` set, elements are visited in a seeded random order
    until that many have been checked; ``None`` checks every element. With
    ``skip_kinks``, an element whose +/- step moves any relu or clip across
    its breakpoint is not counted (the central difference is meaningless
    there) and the next element in the order takes its place.
    ``grad_fn`` replaces the default analytic route (used to inject faults).
    """
    if step <= 0:
        raise ContractError("step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(arrays):
        leaves = {k: Tensor(v, requires_grad=True, name=k, dtype=np.float64) for k, v in arrays.items()}
        with precision(np.float64), record_masks() as masks:
            value = float(f(leaves))
        return value, masks

    with precision(np.float64):
        leaves = {k: Tensor(v.copy(), requires_grad=True, name=k, dtype=np.float64) for k, v in base.items()}
        analytic = backward(f(leaves), leaves) if grad_fn is None else grad_fn(leaves)
    _, base_masks = evaluate(base)

    index = [(k, i) for k in base for i in range(base[k].size)]
    target = len(index)
    if n_samples is not None and n_samples < len(index):
        order = np.random.default_rng(seed).permutation(len(index))
        index = [index[i] for i in order]
        target = n_samples

    max_err, worst, failures = 0.0, None, []
    checked = skipped = 0
    for name, i in index:
        if checked >= target:
            break
        arr = base[name].reshape(-1)
        orig = arr[i]
        arr[i] = orig + step
        up, up_masks = evaluate(base)
        arr[i] = orig - step
        down, down_masks = evaluate(base)
        arr[i] = orig
        if skip_kinks and not (_same_masks(up_masks, base_masks) and _same_masks(down_masks, base_masks)):
            skipped += 1
            continue
        numeric = (up - down) / (2 * step)
        a = float(analytic[name].reshape(-1)[i])
        if not (np.isfinite(numeric) and np.isfinite(a)):
            raise NumericError(f"non-finite gradient estimate for {name}[{i}]")
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        checked += 1
        if worst is None or rel > max_err:
            max_err, worst = rel, (name, i)
        if not rel < tolerance:
            failures.append((name, i, a, numeric, rel))
    return GradCheckReport(passed=not failures and checked > 0, max_rel_error=max_err,
                           checked=checked, tolerance=tolerance, worst=worst,
                           failures=failures, skipped_kinks=skipped)
