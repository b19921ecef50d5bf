"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable operation appends one record to the tape of its inputs,
so the tape is topologically ordered by construction and ``backward`` is a
single reverse sweep.  Values computed from constants only (no tape) are
returned as constant ``Var``s and cost nothing to differentiate; this is how
the same model code runs in inference mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instances import make_rng


class Tape:
    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple] = []
        self.vjps: list = []
        self.leaves: dict[str, "Var"] = {}

    def __len__(self):
        return len(self.kinds)

    def _push(self, kind, parents, vjp):
        idx = len(self.kinds)
        for p in parents:
            if p.tape is self and p.idx >= idx:
                raise RuntimeError("tape order violated")
        self.kinds.append(kind)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return idx

    def leaf(self, value, name: str | None = None) -> "Var":
        v = Var(np.asarray(value, dtype=float), self, self._push("leaf", (), None))
        if name is not None:
            self.leaves[name] = v
        return v

    def watch(self, params: dict) -> dict:
        """Register every array in ``params`` as a named leaf."""
        return {k: self.leaf(v, k) for k, v in params.items()}


class Var:
    __slots__ = ("value", "tape", "idx")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, idx: int = -1):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.shape}, tracked={self.tape is not None})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=float))


def _record(kind, value, parents, vjp) -> Var:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Var(value)
    return Var(value, tape, tape._push(kind, parents, vjp))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def scale(a, c: float) -> Var:
    a = as_var(a)
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def tanh(a) -> Var:
    a = as_var(a)
    y = np.tanh(a.value)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Var:
    a = as_var(a)
    pos = a.value > 0
    return _record("relu", np.where(pos, a.value, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Var:
    a = as_var(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def log_sigmoid(a) -> Var:
    """log(sigmoid(a)) without overflow for large |a|."""
    a = as_var(a)
    x = a.value
    y = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = 0.5 * (1.0 - np.tanh(0.5 * x))  # sigmoid(-x)
    return _record("log", y, (a,), lambda g: (g * s,))


def log(a) -> Var:
    a = as_var(a)
    x = a.value
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Var:
    a = as_var(a)
    y = np.exp(a.value)
    return _record("exp", y, (a,), lambda g: (g * y,))


def rsqrt(a) -> Var:
    a = as_var(a)
    y = 1.0 / np.sqrt(a.value)
    return _record("rsqrt", y, (a,), lambda g: (-0.5 * g * y / a.value,))


# -- linear algebra and shape ------------------------------------------------

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands need at least two dimensions")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record("matmul", av @ bv, (a, b), vjp)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _record("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Var:
    a = as_var(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(parts, axis=-1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record("concat", np.concatenate([p.value for p in parts], axis=axis), tuple(parts), vjp)


def index(a, key) -> Var:
    """Basic or fancy indexing; repeated indices accumulate in backward."""
    a = as_var(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _record("index", a.value[key], (a,), vjp)


# -- reductions ------------------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001
    a = as_var(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("reduce-sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    shape = a.shape
    count = a.value.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _record("reduce-mean", a.value.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def var(a, axis=None, keepdims=False) -> Var:
    """Biased variance (divides by the count)."""
    a = as_var(a)
    x = a.value
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    centered = x - x.mean(axis=axis, keepdims=True)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * centered * (2.0 / count),)

    return _record("reduce-var", x.var(axis=axis, keepdims=keepdims), (a,), vjp)


# -- masked softmax --------------------------------------------------------

def softmax(a, mask=None, axis=-1) -> Var:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    a = as_var(a)
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax-with-mask", y, (a,), vjp)


def log_softmax(a, mask=None, axis=-1) -> Var:
    """Log-probabilities; masked entries are -inf and receive no gradient."""
    a = as_var(a)
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def vjp(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("softmax-with-mask", y, (a,), vjp)


# -- backward --------------------------------------------------------------

def backward(tape: Tape, output: Var) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to every named leaf."""
    if output.tape is not tape:
        raise ValueError("output was not recorded on this tape")
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    adj: list = [None] * len(tape)
    adj[output.idx] = np.ones_like(output.value)
    for i in range(output.idx, -1, -1):
        g = adj[i]
        if g is None or tape.vjps[i] is None:
            continue
        grads = tape.vjps[i](g)
        for p, pg in zip(tape.parents[i], grads):
            if p.tape is not tape or pg is None:
                continue
            j = p.idx
            adj[j] = pg if adj[j] is None else adj[j] + pg
    out = {}
    for name, leaf in tape.leaves.items():
        g = adj[leaf.idx]
        out[name] = np.zeros_like(leaf.value) if g is None else np.array(g, dtype=float).reshape(leaf.shape)
    return out


def value_and_grad(fn, params: dict):
    """Evaluate ``fn(watched params)`` and its gradient map."""
    tape = Tape()
    out = fn(tape.watch(params))
    return float(out.value), backward(tape, out)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "ok" if self.ok else "FAIL"
        return (f"gradcheck {status}: max relative error {self.max_rel_error:.3e} "
                f"at {self.worst_param}{list(self.worst_index)} over {self.n_checked} coordinates "
                f"(tolerance {self.tolerance:g})")


def finite_diff_check(loss_fn, params: dict, h: float = 1e-5, tolerance: float = 1e-4,
                      n_coords: int = 200, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``loss_fn`` maps a dict of Vars to a scalar Var and must be deterministic.
    Coordinates are drawn without replacement across all parameters; when
    fewer than ``n_coords`` exist every coordinate is checked.
    """
    _, grads = value_and_grad(loss_fn, params)
    names = list(params)
    sizes = [np.asarray(params[k]).size for k in names]
    total = int(np.sum(sizes))
    rng = make_rng(seed)
    picks = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    offsets = np.cumsum([0] + sizes)

    def f(p):
        v = float(loss_fn({k: Var(a) for k, a in p.items()}).value)
        if not np.isfinite(v):
            raise FloatingPointError("non-finite loss at a perturbed point")
        return v

    worst = None
    for flat in picks:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[pi]
        base = np.asarray(params[name], dtype=float)
        idx = np.unravel_index(int(flat - offsets[pi]), base.shape)
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        fp = f({**params, name: plus})
        fm = f({**params, name: minus})
        g_fd = (fp - fm) / (2 * h)
        g_ad = float(grads[name][idx])
        err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
        if worst is None or err > worst[0]:
            worst = (err, name, tuple(int(i) for i in idx))
    return GradCheckReport(worst[0], worst[1], worst[2], len(picks), tolerance)
