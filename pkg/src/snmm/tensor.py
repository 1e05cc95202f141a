"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every differentiable operation appends a node
to an implicit tape by linking the output tensor to its parents together
with a closure that maps the output gradient to parent gradients. The tape
is rebuilt on every forward pass, which is what makes the two-pass
pseudo-target construction in the blip trainer cheap to express: the second
pass is simply materialised through :func:`detach`, whose output has no
parents and therefore contributes exactly zero to every backward path.

Only the operations needed by the recurrent encoders, prediction heads and
moment losses are provided. Broadcasting is deliberately restricted to
bias-row addition; everything else requires exact shape agreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "parameter",
    "detach",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "reshape",
    "slice_cols",
    "slice_rows",
    "sigmoid",
    "tanh",
    "relu",
    "elu",
    "square",
    "mean",
    "tsum",
    "bce",
    "logistic_loss",
    "forward_op",
    "OP_TABLE",
    "backward",
    "OptimConfig",
    "make_optimizer",
    "SGD",
    "Adam",
    "global_grad_norm",
    "clip_gradients",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: non-conforming shapes {' vs '.join(map(str, shapes))}")


class Tensor:
    """A dense float64 array that may participate in the autodiff graph.

    ``parents`` is empty for leaves (parameters, constants and anything
    produced by :func:`detach`); for op outputs it holds the input tensors
    in construction order, so parents always precede their children.
    """

    __slots__ = ("values", "parents", "_vjp", "requires_grad", "grad", "_track")

    def __init__(self, values, parents=(), vjp=None, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.parents: tuple[Tensor, ...] = tuple(parents)
        self._vjp = vjp
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._track = requires_grad or any(p._track for p in self.parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def on_graph(self) -> bool:
        """True when a backward pass could propagate through this tensor."""
        return self._track

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, on_graph={self.on_graph})"

    # Operator sugar; scalars are handled without joining the graph.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values) -> Tensor:
    """Wrap raw values as a constant (non-differentiable) tensor."""
    return Tensor(values)


def parameter(values) -> Tensor:
    """Wrap raw values as a trainable leaf."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def detach(x: Tensor) -> Tensor:
    """Copy ``x`` out of the graph: identical values, zero parents.

    Gradients never flow through the result, which is asserted by the
    moment-loss construction that uses detached coefficients as fixed
    pseudo-targets.
    """
    return Tensor(x.values.copy())


def _track(*inputs: Tensor) -> bool:
    return any(t._track for t in inputs)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise addition; ``b`` may be a bias row against a matrix ``a``."""
    bias_row = False
    if a.shape != b.shape:
        if a.values.ndim == 2 and b.values.ndim in (1, 2) and b.values.shape[-1] == a.shape[1] and b.values.size == a.shape[1]:
            bias_row = True
        else:
            raise ShapeError("add", a.shape, b.shape)
    out_vals = a.values + b.values
    if not _track(a, b):
        return Tensor(out_vals)

    def vjp(g):
        gb = g.sum(axis=0).reshape(b.shape) if bias_row else g
        return (g, gb)

    return Tensor(out_vals, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    out_vals = a.values - b.values
    if not _track(a, b):
        return Tensor(out_vals)
    return Tensor(out_vals, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    out_vals = a.values * b.values
    if not _track(a, b):
        return Tensor(out_vals)
    return Tensor(out_vals, (a, b), lambda g: (g * b.values, g * a.values))


def scale(a: Tensor, c: float) -> Tensor:
    out_vals = a.values * c
    if not a._track:
        return Tensor(out_vals)
    return Tensor(out_vals, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_vals = a.values @ b.values
    if not _track(a, b):
        return Tensor(out_vals)
    return Tensor(out_vals, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat")
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    if not _track(*tensors):
        return Tensor(out_vals)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out_vals, tuple(tensors), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a matrix."""
    if x.values.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError("slice_cols", x.shape, (start, stop))
    out_vals = x.values[:, start:stop]
    if not x._track:
        return Tensor(out_vals.copy())

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[:, start:stop] = g
        return (gx,)

    return Tensor(out_vals.copy(), (x,), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_vals = x.values.reshape(shape)
    if not x._track:
        return Tensor(out_vals)
    return Tensor(out_vals, (x,), lambda g: (g.reshape(x.shape),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice."""
    if x.values.ndim < 1 or not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError("slice_rows", x.shape, (start, stop))
    out_vals = x.values[start:stop]
    if not x._track:
        return Tensor(out_vals.copy())

    def vjp(g):
        gx = np.zeros_like(x.values)
        gx[start:stop] = g
        return (gx,)

    return Tensor(out_vals.copy(), (x,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails.
    v = x.values
    out_vals = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    if not x._track:
        return Tensor(out_vals)
    return Tensor(out_vals, (x,), lambda g: (g * out_vals * (1.0 - out_vals),))


def tanh(x: Tensor) -> Tensor:
    out_vals = np.tanh(x.values)
    if not x._track:
        return Tensor(out_vals)
    return Tensor(out_vals, (x,), lambda g: (g * (1.0 - out_vals * out_vals),))


def relu(x: Tensor) -> Tensor:
    out_vals = np.maximum(x.values, 0.0)
    if not x._track:
        return Tensor(out_vals)
    return Tensor(out_vals, (x,), lambda g: (g * (x.values > 0.0),))


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    v = x.values
    neg = alpha * np.expm1(np.minimum(v, 0.0))
    out_vals = np.where(v > 0.0, v, neg)
    if not x._track:
        return Tensor(out_vals)
    return Tensor(out_vals, (x,), lambda g: (g * np.where(v > 0.0, 1.0, neg + alpha),))


def square(x: Tensor) -> Tensor:
    out_vals = x.values * x.values
    if not x._track:
        return Tensor(out_vals)
    return Tensor(out_vals, (x,), lambda g: (g * 2.0 * x.values,))


# ---------------------------------------------------------------------------
# reductions and losses


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    out_vals = x.values.sum(axis=axis)
    if not x._track:
        return Tensor(out_vals)

    def vjp(g):
        if axis is None:
            return (np.full_like(x.values, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor(out_vals, (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.values.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis), 1.0 / n)


def bce(p: Tensor, target: Tensor, eps: float = 1e-12) -> Tensor:
    """Elementwise binary cross-entropy against probabilities in (0, 1)."""
    if p.shape != target.shape:
        raise ShapeError("bce", p.shape, target.shape)
    pv = np.clip(p.values, eps, 1.0 - eps)
    tv = target.values
    out_vals = -(tv * np.log(pv) + (1.0 - tv) * np.log1p(-pv))
    if not _track(p, target):
        return Tensor(out_vals)

    def vjp(g):
        gp = g * (pv - tv) / (pv * (1.0 - pv))
        gt = g * (np.log1p(-pv) - np.log(pv))
        return (gp, gt)

    return Tensor(out_vals, (p, target), vjp)


def logistic_loss(logits: Tensor, target: Tensor) -> Tensor:
    """Elementwise cross-entropy on raw logits: softplus(z) - t*z."""
    if logits.shape != target.shape:
        raise ShapeError("logistic_loss", logits.shape, target.shape)
    z = logits.values
    tv = target.values
    # log(1 + e^z) computed without overflow.
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    out_vals = softplus - tv * z
    if not _track(logits, target):
        return Tensor(out_vals)
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def vjp(g):
        return (g * (sig - tv), g * (-z))

    return Tensor(out_vals, (logits, target), vjp)


# ---------------------------------------------------------------------------
# generic dispatch over the supported op kinds

OP_TABLE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "concat": lambda *ts, axis=0: concat(list(ts), axis=axis),
    "slice": slice_cols,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "elu": elu,
    "square": square,
    "mean": mean,
    "sum": tsum,
    "bce": bce,
    "logistic_loss": logistic_loss,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a named operation; unknown kinds and bad shapes raise ShapeError."""
    fn = OP_TABLE.get(kind)
    if fn is None:
        raise ShapeError(kind)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode accumulation from a scalar loss.

    Returns the gradient for every reachable leaf with ``requires_grad``
    and stores it on ``leaf.grad`` (accumulating if already set, so call
    sites zero grads between steps via the optimizer).
    """
    if loss.values.size != 1:
        raise ShapeError("backward", loss.shape)

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node._track:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
            leaf_grads[node] = node.grad
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p._track:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaf_grads


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimConfig:
    rule: str = "adam"
    lr: float = 1e-2
    clip_norm: float | None = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.rule not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")


def global_grad_norm(params: list[Tensor]) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(sq))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


class SGD:
    def __init__(self, params: list[Tensor], config: OptimConfig):
        self.params = list(params)
        self.config = config

    def step(self):
        if self.config.clip_norm is not None:
            clip_gradients(self.params, self.config.clip_norm)
        for p in self.params:
            if p.grad is not None:
                p.values -= self.config.lr * p.grad

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], config: OptimConfig):
        self.params = list(params)
        self.config = config
        self._m = [np.zeros_like(p.values) for p in self.params]
        self._v = [np.zeros_like(p.values) for p in self.params]
        self._t = 0

    def step(self):
        cfg = self.config
        if cfg.clip_norm is not None:
            clip_gradients(self.params, cfg.clip_norm)
        self._t += 1
        b1t = 1.0 - cfg.beta1**self._t
        b2t = 1.0 - cfg.beta2**self._t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self._m[i] = cfg.beta1 * self._m[i] + (1.0 - cfg.beta1) * p.grad
            self._v[i] = cfg.beta2 * self._v[i] + (1.0 - cfg.beta2) * (p.grad * p.grad)
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.values -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def make_optimizer(params: list[Tensor], config: OptimConfig):
    return Adam(params, config) if config.rule == "adam" else SGD(params, config)
