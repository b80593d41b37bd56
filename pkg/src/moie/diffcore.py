"""Dense reverse-mode differentiation on float64 numpy arrays.

Every model in the package (blackbox, projection, selectors, experts,
residual heads) is built from the primitives here. A forward pass records
a tape of :class:`Tensor` nodes; :func:`backward` walks it once in reverse
topological order and writes gradients onto the parameter leaves.

Supported layer kinds: affine, ReLU, sigmoid, softmax, log-softmax,
elementwise multiply and concatenation, plus the scalar arithmetic needed
to assemble losses.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

__all__ = [
    "DiffcoreError",
    "ShapeError",
    "NumericError",
    "GraphError",
    "Tensor",
    "Graph",
    "no_grad",
    "parameter",
    "constant",
    "affine",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "mul",
    "concat",
    "exp",
    "log",
    "bce_with_logits",
    "cross_entropy",
    "kd_kl",
    "mse",
    "backward",
    "Module",
    "Linear",
    "MLP",
    "SGD",
    "Adam",
    "GradCheckResult",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_dict",
    "load_checkpoint_dict",
    "param_hash",
    "minibatches",
]


class DiffcoreError(Exception):
    """Base class for engine errors."""


class ShapeError(DiffcoreError, ValueError):
    def __init__(self, node: str, message: str):
        self.node = node
        super().__init__(f"[{node}] {message}")


class NumericError(DiffcoreError, FloatingPointError):
    def __init__(self, node: str, message: str = "non-finite value"):
        self.node = node
        super().__init__(f"[{node}] {message}")


class GraphError(DiffcoreError, RuntimeError):
    pass


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node of the tape: a float64 array plus how it was produced."""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward",
                 "_consumed", "_aux")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = (), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = parents
        self._backward = backward_fn
        self._consumed = False
        self._aux = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def label(self) -> str:
        return f"{self.op}:{self.name}" if self.name else self.op

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, name={self.name!r})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: tuple, backward_fn, op: str, name: str | None = None) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}:{name}" if name else op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out, op=op, name=name)
    return Tensor(out, requires_grad=True, op=op, name=name, parents=parents,
                  backward_fn=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str, name) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}:{name}" if name else op,
                         f"cannot broadcast {a.shape} with {b.shape}") from None


# primitive ops ---------------------------------------------------------------

def add(a, b, name: str | None = None) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add", name)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add", name)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b, name: str | None = None) -> Tensor:
    """Elementwise (broadcasting) product; used for attention masking."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul", name)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul", name)


def div(a, b, name: str | None = None) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div", name)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b), bw, "div", name)


def power(a: Tensor, p: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def matmul(a, b, name: str | None = None) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul:{name}" if name else "matmul",
                         f"incompatible operands {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul", name)


def affine(x, W: Tensor, b: Tensor, name: str | None = None) -> Tensor:
    """``x @ W + b`` with ``W`` of shape (d_in, d_out)."""
    x = _wrap(x)
    label = f"affine:{name}" if name else "affine"
    if x.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(label, f"input {x.shape} does not match weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(label, f"bias {b.shape} does not match weight {W.shape}")
    return _make(x.data @ W.data + b.data, (x, W, b),
                 lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)), "affine", name)


def relu(x: Tensor, name: str | None = None) -> Tensor:
    mask = x.data > 0
    out = _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu", name)
    # sign pattern, read by grad_check to detect kink crossings
    out._aux = x.data
    return out


def sigmoid(x: Tensor, name: str | None = None) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid", name)


def softmax(x: Tensor, axis: int = -1, name: str | None = None) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),),
                 "softmax", name)


def log_softmax(x: Tensor, axis: int = -1, name: str | None = None) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),),
                 "log_softmax", name)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def concat(tensors: list, axis: int = -1, name: str | None = None) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat:{name}" if name else "concat", str(exc)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)),
                 "concat", name)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


# losses ----------------------------------------------------------------------

def bce_with_logits(z: Tensor, target, name: str | None = None) -> Tensor:
    """Elementwise binary cross-entropy on logits (no reduction)."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if np.broadcast_shapes(z.shape, t.shape) != z.shape:
        raise ShapeError("bce_with_logits", f"target {t.shape} vs logits {z.shape}")
    zd = z.data
    out = np.maximum(zd, 0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    e = np.exp(-np.abs(zd))
    s = np.where(zd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (z,), lambda g: (g * (s - t),), "bce_with_logits", name)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy for integer ``labels``; returns shape (N,)."""
    labels = np.asarray(labels, dtype=int)
    onehot = np.eye(logits.shape[1])[labels]
    return -(log_softmax(logits) * onehot).sum(axis=1)


def kd_kl(student: Tensor, teacher, temperature: float) -> Tensor:
    """Per-sample KL(softmax(teacher/T) || softmax(student/T)), shape (N,)."""
    t = np.asarray(teacher.data if isinstance(teacher, Tensor) else teacher) / temperature
    t = t - t.max(axis=1, keepdims=True)
    log_p = t - np.log(np.exp(t).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    log_q = log_softmax(student * (1.0 / temperature))
    return (constant(p) * (constant(log_p) - log_q)).sum(axis=1)


def mse(pred: Tensor, target) -> Tensor:
    """Per-sample mean squared error over the last axis, shape (N,)."""
    diff = pred - _wrap(target)
    return (diff * diff).mean(axis=1)


# backward --------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every parameter leaf reachable from ``loss``.

    Gradients are assigned, not accumulated. A tape can be differentiated
    once; call the forward pass again before the next backward.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this tape; re-run forward first")
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class Graph:
    """A differentiable computation: ``fn(**inputs)`` returns a Tensor or a dict of them.

    Wraps a function so forward/backward ordering is enforced.
    """

    def __init__(self, fn: Callable[..., Tensor | dict]):
        self.fn = fn
        self.outputs: Tensor | dict | None = None
        self._fresh = False

    def forward(self, **inputs):
        self.outputs = self.fn(**inputs)
        self._fresh = True
        return self.outputs

    def nodes(self) -> list[Tensor]:
        if self.outputs is None:
            return []
        roots = self.outputs.values() if isinstance(self.outputs, dict) else [self.outputs]
        order, seen = [], set()
        for r in roots:
            for n in _toposort(r):
                if id(n) not in seen:
                    seen.add(id(n))
                    order.append(n)
        return order

    def backward(self, loss: Tensor | str | None = None) -> None:
        if self.outputs is None:
            raise GraphError("backward called before forward")
        if not self._fresh:
            raise GraphError("backward already ran; run forward again")
        if loss is None:
            loss = self.outputs
        elif isinstance(loss, str):
            loss = self.outputs[loss]
        self._fresh = False
        backward(loss)


# modules ---------------------------------------------------------------------

class Module:
    """Container that registers Tensor parameters and child modules in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.is_leaf and (value.requires_grad or key in self._params):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(k, f"checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, name: str = "linear"):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.d_in, self.d_out = d_in, d_out
        self.label = name
        self.W = parameter(rng.uniform(-bound, bound, size=(d_in, d_out)), f"{name}.W")
        self.b = parameter(rng.uniform(-bound, bound, size=d_out), f"{name}.b")

    def __call__(self, x) -> Tensor:
        return affine(x, self.W, self.b, name=self.label)


class MLP(Module):
    """Stack of affine layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: Iterable[int], rng: np.random.Generator, name: str = "mlp",
                 final_relu: bool = False):
        super().__init__()
        sizes = list(sizes)
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = sizes
        self.final_relu = final_relu
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layer = Linear(a, b, rng, name=f"{name}.{i}")
            setattr(self, f"l{i}", layer)
            self.layers.append(layer)

    def __call__(self, x) -> Tensor:
        h = _wrap(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < last or self.final_relu:
                h = relu(h, name=f"{layer.label}.act")
        return h

    def affine_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.sizes[:-1], self.sizes[1:]))


# optimizers ------------------------------------------------------------------

def _check_grads(params: list[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(p.name or "param", f"gradient {p.grad.shape} vs parameter {p.data.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(p.name or "param", "non-finite gradient")


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.01, momentum: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        _check_grads(self.params)
        self.step_count += 1
        for p, v in zip(self.params, self.velocity):
            if p.grad is None or not p.requires_grad:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 0.01, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        _check_grads(self.params)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    skipped: list[tuple[str, int]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_rel_error


def _relu_signs(loss: Tensor) -> list[np.ndarray]:
    return [n._aux > 0 for n in _toposort(loss) if n.op == "relu"]


def grad_check(fn: Callable[..., Tensor], params: list[Tensor], eps: float = 1e-5,
               inputs: dict | None = None) -> GradCheckResult:
    """Compare analytic gradients of scalar ``fn(**inputs)`` with central differences.

    Coordinates whose perturbation flips any ReLU pre-activation sign are
    skipped (subgradient points) and listed in ``skipped``.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError("eps must lie in (0, 1e-2]")
    inputs = inputs or {}
    graph = Graph(fn)
    loss = graph.forward(**inputs)
    graph.backward(loss)
    base_signs = _relu_signs(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst, checked, skipped = 0.0, 0, []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = fn(**inputs)
            sp = _relu_signs(lp)
            flat[j] = orig - eps
            lm = fn(**inputs)
            sm = _relu_signs(lm)
            flat[j] = orig
            if any((a != b).any() for a, b in zip(base_signs, sp)) or \
                    any((a != b).any() for a, b in zip(base_signs, sm)):
                skipped.append((p.name or f"param{pi}", j))
                continue
            num = (lp.item() - lm.item()) / (2 * eps)
            ana = analytic[pi].reshape(-1)[j]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)


# checkpoints -----------------------------------------------------------------

def checkpoint_dict(module: Module) -> dict:
    return {k: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for k, p in module.named_parameters()}


def load_checkpoint_dict(module: Module, payload: dict) -> None:
    state = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
             for k, v in payload.items()}
    module.load_state_dict(state)


def save_checkpoint(module: Module, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(module)))


def load_checkpoint(module: Module, path: str | Path) -> None:
    load_checkpoint_dict(module, json.loads(Path(path).read_text()))


def param_hash(module: Module) -> str:
    h = hashlib.sha256()
    for k, p in module.named_parameters():
        h.update(k.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]
