"""Small reverse-mode autodiff layer over numpy arrays.

Every model in the package is composed from the operations defined here.
A :class:`Tensor` records the operation that produced it; calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates gradients into the leaves that require them.

Training runs in float32. Gradient verification (:func:`check_gradients`)
expects the computation to have been built in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    EmptySequenceError,
    LabelError,
    ParameterError,
)

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5
MASK_FILL = -1e9


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array with an optional gradient and a link to its producer."""

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff -----------------------------------------------------------
    def _topo(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self._topo()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------
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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Parameter(Tensor):
    """Trainable leaf tensor. ``name`` is filled in by the owning module."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _coerce(a, b):
    """Wrap raw operands, matching a raw scalar/array to the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    active = x.data > 0
    out = np.where(active, x.data, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * active,)

    return _result(out, (x,), backward)


# -- reductions and reshaping -------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        return (np.swapaxes(g, a, b),)

    return _result(np.swapaxes(x.data, a, b), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Join tensors along ``axis``; the gradient is split back into slices."""
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
                x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in xs]} differ outside axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, backward)


def stack_mean(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    total = xs[0]
    for x in xs[1:]:
        total = total + x
    return total * (1.0 / len(xs))


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _coerce(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` applied over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"affine: input shape {x.shape} does not match weight shape {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, W.shape[1])
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _result(out, parents, backward)


# -- normalisation and probabilities -----------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    x = as_tensor(x)
    D = x.shape[-1]
    if D < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {D}")
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape}/bias {bias.shape} do not match features {D}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, D).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, D).sum(axis=0)
        return gx, ggain, gbias

    return _result(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def dropout(x: Tensor, p: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. In eval mode the input object itself is returned."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    keep = keep.astype(x.dtype, copy=False)

    def backward(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), backward)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Average ``x[..., K, D]`` over positions where ``mask[..., K]`` is True."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"masked_mean: mask {mask.shape} vs input {x.shape}")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptySequenceError("masked_mean over a sequence with no unmasked positions")
    w = (mask / counts[..., None]).astype(x.dtype)[..., None]
    out = (x.data * w).sum(axis=-2)

    def backward(g):
        return (np.expand_dims(g, -2) * w,)

    return _result(out, (x,), backward)


def attention_bias(mask: np.ndarray, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Additive key bias: 0 for kept positions, a large negative for masked ones."""
    return np.where(np.asarray(mask, dtype=bool), 0.0, MASK_FILL).astype(dtype)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    C = logits.shape[1]
    bad = (targets < 0) | (targets >= C)
    if np.any(bad):
        raise LabelError(f"target {int(targets[bad][0])} outside [0, {C})")
    lp = log_softmax(logits)
    B = logits.shape[0]
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(B), targets] = 1.0
    return tsum(lp * onehot) * (-1.0 / B)


# -- modules ------------------------------------------------------------------
class Module:
    """Container that discovers Parameters and sub-Modules among its attributes.

    Attribute order fixes parameter order, which in turn fixes checkpoint
    layout, so subclasses should assign attributes deterministically.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import LoadError
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise LoadError(f"parameter names differ: missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise LoadError(f"{name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _walk(value, name):
    if isinstance(value, Parameter):
        value.name = name
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


# -- gradient verification ----------------------------------------------------
@dataclass
class GradCheck:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float
    worst: str

    def __repr__(self):
        return f"GradCheck(max_rel_error={self.max_rel_error:.3e}, worst={self.worst!r})"


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries sane."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], *,
                    h: float = 1e-5, max_entries: int | None = None,
                    seed: int = 0, names: Sequence[str] | None = None) -> GradCheck:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``fn`` must rebuild the graph on every call and return a float64 scalar.
    The step for entry θ is ``h * max(1, |θ|)``. With ``max_entries`` set,
    at most that many randomly chosen entries of each parameter are probed.
    """
    params = list(params)
    names = list(names) if names is not None else [
        getattr(p, "name", "") or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ContractError(f"gradient check needs a scalar output, got shape {out.shape}")
    if out.dtype != np.float64:
        raise ContractError("gradient check runs in float64; build the computation in double")
    out.backward()
    rng = np.random.default_rng(seed)
    analytic, numeric = {}, {}
    worst, worst_name = 0.0, ""
    for name, p in zip(names, params):
        p.data = np.ascontiguousarray(p.data)
        ga = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        gn = np.full(flat.size, np.nan)
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = fn().data.item()
            flat[i] = orig - step
            fm = fn().data.item()
            flat[i] = orig
            gn[i] = (fp - fm) / (2 * step)
        err = relative_error(ga.reshape(-1)[idx], gn[idx])
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), name
        analytic[name] = ga
        numeric[name] = gn.reshape(p.shape)
    return GradCheck(analytic, numeric, worst, worst_name)
