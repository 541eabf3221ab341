"""Dense float64 tensor with tape-based reverse-mode automatic differentiation.

The tape is implicit: every operation records its parents and a backward
closure on the result tensor. Calling ``backward()`` on a scalar result
topologically sorts the graph and accumulates gradients additively, so
shared subexpressions are handled correctly. Everything is float64; the
pipeline is small enough that precision is cheaper than debugging drift.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        raise TypeError("expected raw array-like, got Tensor")
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 ndarray plus an optional gradient and tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_tape(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


# -- elementwise and structural ops -----------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, _parents=(a, b) if _needs_tape(a, b) else ())
    if out._parents:
        def bwd(g):
            a._accumulate(_unbroadcast(g, a.data.shape))
            b._accumulate(_unbroadcast(g, b.data.shape))
        out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, _parents=(a, b) if _needs_tape(a, b) else ())
    if out._parents:
        def bwd(g):
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))
        out._backward = bwd
    return out


def scale(a, s: float) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data * s, _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        out._backward = lambda g: a._accumulate(g * s)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b) if _needs_tape(a, b) else ())
    if out._parents:
        def bwd(g):
            a._accumulate(g @ b.data.T)
            b._accumulate(a.data.T @ g)
        out._backward = bwd
    return out


def relu(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        mask = a.data > 0.0
        out._backward = lambda g: a._accumulate(g * mask)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.reshape(shape), _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        out._backward = lambda g: a._accumulate(g.reshape(a.data.shape))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    parents = tuple(tensors) if any(_needs_tape(t) for t in tensors) else ()
    out = Tensor(out_data, _parents=parents)
    if parents:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                t._accumulate(piece)
        out._backward = bwd
    return out


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis), _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        def bwd(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape))
            else:
                a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))
        out._backward = bwd
    return out


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis), 1.0 / n)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by integer index; idx may be 1-D (rows) or 2-D (grouped rows)."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        def bwd(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, *a.data.shape[1:]))
            a._accumulate(acc)
        out._backward = bwd
    return out


# -- reductions with routing backward ---------------------------------------

def max_pool_set(a: Tensor) -> Tensor:
    """Per-channel max over the rows of an n x d tensor; gradient goes to the
    first (lowest-index) argmax row of each channel."""
    a = _wrap(a)
    if a.data.ndim != 2 or a.data.shape[0] == 0:
        raise ShapeError(f"max_pool_set needs a nonempty n x d tensor, got {a.data.shape}")
    arg = np.argmax(a.data, axis=0)
    out = Tensor(a.data[arg, np.arange(a.data.shape[1])],
                 _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        def bwd(g):
            acc = np.zeros_like(a.data)
            acc[arg, np.arange(a.data.shape[1])] = g
            a._accumulate(acc)
        out._backward = bwd
    return out


def masked_max(a: Tensor, mask: np.ndarray) -> Tensor:
    """Max over axis 1 of an (m, cap, d) tensor, ignoring entries where
    ``mask`` (m, cap) is False. Every row must have at least one valid entry.
    Ties route gradient to the lowest valid index."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if a.data.ndim != 3 or mask.shape != a.data.shape[:2]:
        raise ShapeError(f"masked_max: data {a.data.shape} vs mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise ShapeError("masked_max: some group has no valid members")
    filled = np.where(mask[:, :, None], a.data, -np.inf)
    arg = np.argmax(filled, axis=1)  # (m, d)
    m, _, d = a.data.shape
    mi, di = np.meshgrid(np.arange(m), np.arange(d), indexing="ij")
    out = Tensor(a.data[mi, arg, di], _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        def bwd(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, (mi, arg, di), g)
            a._accumulate(acc)
        out._backward = bwd
    return out


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of an (m, cap, d) tensor restricted to valid entries."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if a.data.ndim != 3 or mask.shape != a.data.shape[:2]:
        raise ShapeError(f"masked_mean: data {a.data.shape} vs mask {mask.shape}")
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ShapeError("masked_mean: some group has no valid members")
    w = mask[:, :, None] / counts[:, None, None]
    out = Tensor((a.data * w).sum(axis=1), _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        out._backward = lambda g: a._accumulate(g[:, None, :] * w)
    return out


# -- softmax family ----------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    _check_finite(a.data, "softmax input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        def bwd(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            a._accumulate(s * (g - dot))
        out._backward = bwd
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _wrap(a)
    _check_finite(a.data, "log_softmax input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    ls = shifted - lse
    out = Tensor(ls, _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        sm = np.exp(ls)

        def bwd(g):
            a._accumulate(g - sm * g.sum(axis=axis, keepdims=True))
        out._backward = bwd
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over rows; ``targets`` are integer class indices."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.intp)
    if logits.data.ndim != 2 or targets.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs targets {targets.shape}")
    ls = log_softmax(logits, axis=1)
    picked = gather_nd(ls, np.arange(targets.size), targets)
    return scale(sum_(picked), -1.0 / targets.size)


def gather_nd(a: Tensor, rows, cols) -> Tensor:
    """Pick a[rows[i], cols[i]] for each i from a 2-D tensor."""
    a = _wrap(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = Tensor(a.data[rows, cols], _parents=(a,) if _needs_tape(a) else ())
    if out._parents:
        def bwd(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, (rows, cols), g)
            a._accumulate(acc)
        out._backward = bwd
    return out


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (Huber) against a constant target."""
    pred = _wrap(pred)
    target = np.asarray(target, dtype=np.float64)
    diff = pred.data - target
    absd = np.abs(diff)
    close = absd < beta
    vals = np.where(close, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    out = Tensor(vals, _parents=(pred,) if _needs_tape(pred) else ())
    if out._parents:
        dloc = np.where(close, diff / beta, np.sign(diff))
        out._backward = lambda g: pred._accumulate(g * dloc)
    return out


# -- optimizer ---------------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay applied independently of the
    adaptive step (theta <- theta - lr*wd*theta, then the Adam update)."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {p.name or i}")
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        self.m = [np.asarray(m, dtype=np.float64).reshape(p.data.shape)
                  for m, p in zip(state["m"], self.params)]
        self.v = [np.asarray(v, dtype=np.float64).reshape(p.data.shape)
                  for v, p in zip(state["v"], self.params)]


# -- verification ------------------------------------------------------------

def grad_check(f, params: list[Tensor], h: float = 1e-5, tol: float = 1e-5,
               coords_per_param: int | None = None, rng: np.random.Generator | None = None):
    """Compare tape gradients of scalar ``f()`` against central differences.

    Returns a dict with per-parameter max relative error and an overall
    ``passed`` flag. ``coords_per_param`` limits the check to a random
    subset of coordinates (all coordinates when None).
    """
    if not (1e-6 <= h <= 1e-4):
        raise ValueError(f"step size {h} outside [1e-6, 1e-4]")
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    report = {"per_param": [], "passed": True}
    rng = rng or np.random.default_rng(0)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        if coords_per_param is not None and coords_per_param < n:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        max_rel = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[pi].reshape(-1)[c]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            max_rel = max(max_rel, rel)
        ok = max_rel <= tol
        report["per_param"].append({"name": p.name or f"param{pi}",
                                    "max_rel_err": max_rel, "passed": ok})
        report["passed"] = report["passed"] and ok
    return report
