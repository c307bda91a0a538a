"""Dense float tensors with reverse-mode automatic differentiation.

The engine is a small tape of closures over numpy arrays. Each operation
records its parents and one vector-Jacobian closure per parent; ``backward``
walks the graph in reverse topological order from a scalar loss and
accumulates gradients into the ``grad`` buffer of every ``requires_grad``
leaf. Nodes whose inputs do not require gradients are constant-folded: they
keep no parents, so frozen submodels build no graph at all.

Training arithmetic is float32. ``grad_check`` promotes a computation to
float64 and compares analytic gradients against central finite differences,
which is the only sanctioned accuracy oracle for new primitives.

Nothing here is thread-safe: tensors and optimizer states are meant to be
owned by a single training loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, DomainError, ShapeError

Array = np.ndarray
_FLOAT_DTYPES = (np.float32, np.float64)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """N-d float array plus the bookkeeping needed for reverse mode.

    Tensors are immutable once created; the one sanctioned exception is the
    optimizer, which updates ``data`` in place between graph constructions.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[Array], Array] | None, ...] = ()
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError("item", self.shape, detail="expected a single element")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must hold exactly one element; the seed gradient is 1.
        """
        if self.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be scalar")
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, post = stack.pop()
            if post:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad or vjp is None:
                    continue
                pg = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op}{flag})"


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: Array, parents: Sequence[Tensor], vjps: Sequence, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjps = tuple(vjps)
    else:
        out._parents = ()
        out._vjps = ()
    out._op = op
    return out


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


# -- elementwise arithmetic ---------------------------------------------


def _broadcast_op(a, b, op: str, fwd, vjp_a, vjp_b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = b if isinstance(b, Tensor) else _wrap(b, a.dtype)
    try:
        out = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None
    return _make(
        out,
        (a, b),
        (lambda g: _unbroadcast(vjp_a(g, a.data, b.data), a.shape),
         lambda g: _unbroadcast(vjp_b(g, a.data, b.data), b.shape)),
        op,
    )


def add(a, b) -> Tensor:
    return _broadcast_op(a, b, "add", lambda x, y: x + y,
                         lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _broadcast_op(a, b, "sub", lambda x, y: x - y,
                         lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _broadcast_op(a, b, "mul", lambda x, y: x * y,
                         lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    b_arr = b.data if isinstance(b, Tensor) else np.asarray(b)
    if np.any(b_arr == 0):
        raise DomainError("div", "zero divisor")
    return _broadcast_op(a, b, "div", lambda x, y: x / y,
                         lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a scalar exponent."""
    if isinstance(p, Tensor):
        raise DomainError("pow", "exponent must be a plain scalar")
    p = float(p)
    if p != round(p) and np.any(a.data <= 0):
        raise DomainError("pow", f"fractional exponent {p} needs strictly positive base")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("pow", "negative exponent with zero base")
    out = a.data ** p
    x = a.data
    return _make(out, (a,), (lambda g: g * p * x ** (p - 1.0),), "pow")


# -- matmul and structural ops -------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch-broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands must be at least 2-d")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    a_data, b_data = a.data, b.data

    def vjp_a(g: Array) -> Array:
        return _unbroadcast(g @ np.swapaxes(b_data, -1, -2), a_data.shape)

    def vjp_b(g: Array) -> Array:
        return _unbroadcast(np.swapaxes(a_data, -1, -2) @ g, b_data.shape)

    return _make(out, (a, b), (vjp_a, vjp_b), "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes_t = tuple(axes) if axes is not None else tuple(range(a.ndim - 1, -1, -1))
    inv = tuple(int(i) for i in np.argsort(axes_t))
    out = np.transpose(a.data, axes_t)
    return _make(out, (a,), (lambda g: np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make(out, (a,), (lambda g: g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along a named axis; gradients slice back apart."""
    if not tensors:
        raise ShapeError("concat", (), detail="need at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            i != axis and t.shape[i] != tensors[0].shape[i] for i in range(ndim)
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i: int):
        sl = [slice(None)] * ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl_t = tuple(sl)
        return lambda g: g[sl_t]

    return _make(out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))), "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along an axis into pieces of the given sizes."""
    axis = axis % a.ndim
    if sum(sizes) != a.shape[axis]:
        raise ShapeError("split", a.shape, detail=f"sizes {list(sizes)} do not cover axis {axis}")
    outs = []
    off = 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(off, off + s)
        sl_t = tuple(sl)

        def vjp(g: Array, sl_t=sl_t) -> Array:
            z = np.zeros_like(a.data)
            z[sl_t] = g
            return z

        outs.append(_make(a.data[sl_t].copy(), (a,), (vjp,), "split"))
        off += s
    return outs


def take_rows(table: Tensor, indices) -> Tensor:
    """Row lookup along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DomainError("take_rows", "indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError("take_rows", f"index out of range for {table.shape[0]} rows")
    out = table.data[idx]

    def vjp(g: Array) -> Array:
        z = np.zeros_like(table.data)
        np.add.at(z, idx, g)
        return z

    return _make(out, (table,), (vjp,), "take_rows")


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g: Array) -> Array:
        gg = g if keepdims else np.expand_dims(g, axes)
        return np.broadcast_to(gg, shape).copy()

    return _make(out, (a,), (vjp,), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g: Array) -> Array:
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, shape) / count).astype(g.dtype, copy=False)

    return _make(out, (a,), (vjp,), "mean")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements; shapes must match exactly."""
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.dtype)

    def vjp_pred(g: Array) -> Array:
        return g * (2.0 / n) * diff

    def vjp_target(g: Array) -> Array:
        return g * (-2.0 / n) * diff

    return _make(out, (pred, target), (vjp_pred, vjp_target), "mse")


# -- nonlinearities --------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype, copy=False),
                 (a,), (lambda g: g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g: Array) -> Array:
        return g * out * (1.0 - out)

    return _make(out, (a,), (vjp,), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),), "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), (lambda g: g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log", "operand must be strictly positive")
    x = a.data
    return _make(np.log(x), (a,), (lambda g: g / x,), "log")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis."""
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g: Array) -> Array:
        return out * (g - (g * out).sum(axis=ax, keepdims=True))

    return _make(out, (a,), (vjp,), "softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g: Array) -> Array:
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gym)

    return _make(y.astype(a.dtype, copy=False), (a,), (vjp,), "layer_norm")


# -- evaluation and checking ----------------------------------------------


def evaluate_with_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor]):
    """Run ``fn`` on the inputs and return (scalar output, per-input grads).

    Input grad buffers are cleared first; entries for inputs that do not
    require gradients come back as None.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if not isinstance(out, Tensor):
        raise DomainError("evaluate_with_gradients", "fn must return a Tensor")
    if out.size != 1:
        raise ShapeError("evaluate_with_gradients", out.shape, detail="output must be scalar")
    out.backward()
    grads = []
    for t in inputs:
        if t.requires_grad:
            grads.append(t.grad if t.grad is not None else np.zeros_like(t.data))
        else:
            grads.append(None)
    return out, grads


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-4) -> float:
    """Max relative error between backward grads and central differences.

    The whole computation is promoted to float64, so ``fn`` must build its
    graph from the tensors it is handed (closing over float32 parameters
    would reintroduce rounding and defeat the check). Keep inputs away from
    relu kinks by more than ~10*step.
    """
    work = [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad) for t in inputs]
    out = fn(*work)
    if out.size != 1:
        raise ShapeError("grad_check", out.shape, detail="fn must return a scalar")
    if not np.isfinite(out.data).all():
        raise DomainError("grad_check", "non-finite forward value")
    out.backward()

    worst = 0.0
    for t in work:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        ana = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn(*work).data)
            flat[i] = orig - step
            f_minus = float(fn(*work).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(ana[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    """Adam with decoupled weight decay.

    Decay multiplies parameters by (1 - lr*weight_decay) before the moment
    update, so it never enters the m/v statistics.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)


def adam_init(params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params: Sequence[Tensor], grads: Sequence[Array], state: AdamState) -> None:
    """One in-place update. ``grads[i]`` must match ``params[i]`` in shape."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step", (len(params),), (len(grads),), detail="param/grad/state mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", p.data.shape, g.shape)
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- checkpoint I/O ---------------------------------------------------------


def save_checkpoint(path, params: Mapping[str, "Tensor | Array"]) -> None:
    """Write header.json plus weights.bin (little-endian float32, byte offsets)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    header = []
    blobs = []
    offset = 0
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header.append({
            "name": name,
            "shape": [int(s) for s in arr.shape],
            "dtype": "f32",
            "offset": offset,
            "length": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    (out / "weights.bin").write_bytes(b"".join(blobs))
    (out / "header.json").write_text(json.dumps(header, indent=1) + "\n")


def load_checkpoint(path) -> dict[str, Array]:
    """Read a checkpoint directory back into name -> float32 array."""
    root = Path(path)
    header_path = root / "header.json"
    weights_path = root / "weights.bin"
    if not header_path.is_file() or not weights_path.is_file():
        raise DataError(f"checkpoint at {root} is missing header.json or weights.bin")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt checkpoint header: {e}") from None
    blob = weights_path.read_bytes()

    params: dict[str, Array] = {}
    expected = 0
    for entry in header:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        if entry.get("dtype") != "f32":
            raise DataError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        offset, length = int(entry["offset"]), int(entry["length"])
        if offset != expected:
            raise DataError(f"{name}: offset {offset} is not contiguous (expected {expected})")
        count = int(np.prod(shape)) if shape else 1
        if length != 4 * count:
            raise DataError(f"{name}: length {length} does not match shape {shape}")
        expected = offset + length
        params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    if expected != len(blob):
        raise DataError(f"weights.bin holds {len(blob)} bytes but header describes {expected}")
    return params
