"""Minimal reverse-mode differentiation over numpy arrays.

Values may be real or complex. For a real scalar loss ``L`` and a complex
value ``z = x + jy`` the stored gradient is ``dL/dx + j dL/dy``; with this
convention the vector-Jacobian product of a holomorphic map ``w = f(z)`` is
``conj(f'(z)) * g_w``. Learnable complex arrays are stored as real arrays with
a trailing axis of length 2 and converted with :func:`as_complex`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "UsageError",
    "Param",
    "Var",
    "Tape",
    "AdamState",
    "backward",
    "adam_step",
    "const",
    "add",
    "sub",
    "mul",
    "neg",
    "einsum",
    "absval",
    "softmax_all",
    "sum_",
    "gelu",
    "affine",
    "conv2d",
    "expj",
    "sin",
    "exp",
    "cpow",
    "as_complex",
    "complex_from",
    "real",
    "imag",
    "conj",
    "reshape",
    "concat",
    "take",
    "projection_residual",
]


class UsageError(RuntimeError):
    pass


@dataclass
class Param:
    """Named learnable real array."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0.0


class Var:
    __slots__ = ("data", "grad", "parents", "vjp", "param")

    def __init__(self, data, parents=(), vjp=None, param=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.param = param

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"

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

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)


_ACTIVE: list["Tape"] = []


class Tape:
    """Append-only record of the operations of one forward pass.

    Nodes are stored in creation order, which is a topological order, so the
    backward sweep simply walks the list in reverse.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self._leaves: dict[str, Var] = {}
        self.done = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def watch(self, param: Param) -> Var:
        leaf = self._leaves.get(param.name)
        if leaf is None:
            leaf = Var(param.value, param=param)
            self._leaves[param.name] = leaf
            self.nodes.append(leaf)
        return leaf

    def params(self) -> list[Param]:
        return [v.param for v in self._leaves.values()]


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def param_var(param: Param):
    """Leaf for ``param`` on the active tape, or its raw value when not recording."""
    tape = _tape()
    return tape.watch(param) if tape is not None else param.value


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def _data(x):
    return x.data if isinstance(x, Var) else np.asarray(x)


def _node(data, inputs, vjp):
    """Create a result; record it only when a tape is active and an input is tracked."""
    tape = _tape()
    tracked = tuple(x for x in inputs if isinstance(x, Var) and (x.vjp is not None or x.param is not None))
    if tape is None or not tracked:
        return Var(data)
    out = Var(data, parents=tuple(inputs), vjp=vjp)
    tape.nodes.append(out)
    return out


def _fit(g, like):
    """Reduce broadcast gradient ``g`` to the shape/dtype of input ``like``."""
    shape = like.shape
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = np.broadcast_to(g, shape)
    if not np.iscomplexobj(like) and np.iscomplexobj(g):
        g = g.real
    return g


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) into every watched ``Param.grad``.

    Returns the map name -> gradient for this tape. Parameters that the loss
    does not reach get exact zeros.
    """
    if not isinstance(loss, Var) or loss not in tape.nodes and loss.param is None:
        raise UsageError("loss was not produced on this tape; run the forward pass first")
    if loss.data.size != 1:
        raise UsageError(f"loss must be scalar, got shape {loss.data.shape}")
    if np.iscomplexobj(loss.data):
        raise UsageError("loss must be real")
    if tape.done:
        raise UsageError("backward already ran on this tape")
    tape.done = True
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node.vjp is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not isinstance(parent, Var):
                continue
            if parent.vjp is None and parent.param is None:
                continue
            g = _fit(np.asarray(g), parent.data)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    out = {}
    for name, leaf in tape._leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        leaf.param.grad += g
        out[name] = g
    return out


# --------------------------------------------------------------------------
# elementwise algebra


def add(a, b) -> Var:
    return _node(_data(a) + _data(b), (a, b), lambda g: (g, g))


def sub(a, b) -> Var:
    return _node(_data(a) - _data(b), (a, b), lambda g: (g, -g))


def neg(a) -> Var:
    return _node(-_data(a), (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    da, db = _data(a), _data(b)
    return _node(da * db, (a, b), lambda g: (g * np.conj(db), g * np.conj(da)))


def conj(a) -> Var:
    return _node(np.conj(_data(a)), (a,), lambda g: (np.conj(g),))


def real(a) -> Var:
    return _node(np.real(_data(a)).copy(), (a,), lambda g: (g + 0j,))


def imag(a) -> Var:
    return _node(np.imag(_data(a)).copy(), (a,), lambda g: (1j * g,))


def as_complex(a) -> Var:
    """Real array ``(..., 2)`` -> complex array ``(...)``."""
    d = _data(a)
    return _node(d[..., 0] + 1j * d[..., 1], (a,), lambda g: (np.stack([g.real, g.imag], axis=-1),))


def complex_from(re, im) -> Var:
    return _node(_data(re) + 1j * _data(im), (re, im), lambda g: (g.real, g.imag))


def absval(a) -> Var:
    """``|a|``; complex inputs give the modulus. Subgradient 0 at 0."""
    d = _data(a)
    out = np.abs(d)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * d / safe, 0.0),)

    return _node(out, (a,), vjp)


def sin(a) -> Var:
    d = _data(a)
    return _node(np.sin(d), (a,), lambda g: (g * np.cos(d),))


def exp(a) -> Var:
    out = np.exp(_data(a))
    return _node(out, (a,), lambda g: (g * np.conj(out),))


def expj(a) -> Var:
    """``exp(j * a)`` for real ``a``."""
    out = np.exp(1j * _data(a))
    return _node(out, (a,), lambda g: (np.real(np.conj(g) * 1j * out),))


def cpow(w, p) -> Var:
    """Principal-branch power ``|w|^p exp(j p arg w)`` with a real exponent."""
    dw, dp = _data(w), _data(p)
    mod = np.abs(dw)
    safe = np.where(mod > 0, mod, 1.0)
    logw = np.log(safe) + 1j * np.angle(dw)
    out = np.where(mod > 0, np.exp(dp * logw), 0.0)

    def vjp(g):
        dout_dw = np.where(mod > 0, dp * out / np.where(mod > 0, dw, 1.0), 0.0)
        gw = g * np.conj(dout_dw)
        gp = np.real(np.conj(g) * logw * out)
        return gw, gp

    return _node(out, (w, p), vjp)


def gelu(a) -> Var:
    """Exact GELU ``x * Phi(x)``."""
    x = _data(a)
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


# --------------------------------------------------------------------------
# reductions and reshaping


def sum_(a, axis=None) -> Var:
    d = _data(a)
    out = d.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, d.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), d.shape),)

    return _node(out, (a,), vjp)


def softmax_all(a) -> Var:
    """Softmax over every entry of a real array."""
    x = _data(a)
    e = np.exp(x - x.max())
    s = e / e.sum()
    return _node(s, (a,), lambda g: (s * (g - np.sum(g * s)),))


def reshape(a, shape) -> Var:
    d = _data(a)
    return _node(d.reshape(shape), (a,), lambda g: (g.reshape(d.shape),))


def concat(parts: Sequence, axis: int = 0) -> Var:
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(datas)))

    return _node(out, tuple(parts), vjp)


def take(a, idx) -> Var:
    d = _data(a)

    def vjp(g):
        full = np.zeros(d.shape, dtype=np.result_type(d, g))
        np.add.at(full, idx, g)
        return (full,)

    return _node(d[idx], (a,), vjp)


# --------------------------------------------------------------------------
# linear maps


def _parse(spec: str):
    lhs, out = spec.replace(" ", "").split("->")
    return lhs.split(","), out


def einsum(spec: str, *operands) -> Var:
    """Multilinear contraction. Every index of an operand must appear in the
    output or in another operand (no standalone reductions)."""
    ins, out = _parse(spec)
    datas = [_data(o) for o in operands]
    result = np.einsum(spec, *datas, optimize=True)

    def vjp(g):
        grads = []
        for n, sub in enumerate(ins):
            others = [(ins[m], np.conj(datas[m])) for m in range(len(ins)) if m != n]
            avail = set(out).union(*[set(s) for s, _ in others]) if others else set(out)
            missing = [c for c in sub if c not in avail]
            if missing:
                raise UsageError(f"einsum '{spec}': index {missing} is reduced inside a single operand")
            sub_spec = ",".join([out] + [s for s, _ in others]) + "->" + sub
            grads.append(np.einsum(sub_spec, g, *[d for _, d in others], optimize=True))
        return tuple(grads)

    return _node(result, tuple(operands), vjp)


def affine(x, W, b) -> Var:
    """Fully-connected layer ``x @ W + b`` for a vector ``x``."""
    return add(einsum("i,io->o", x, W), b)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # x: (C, H, W) already padded -> (C, kh, kw, H', W')
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2))


def conv2d(x, w, b) -> Var:
    """Zero-padded 'same' convolution (cross-correlation) of a ``(C, H, W)`` image.

    ``w`` has shape ``(C_out, C_in, kh, kw)`` with odd kernel sizes.
    """
    dx, dw = _data(x), _data(w)
    co, ci, kh, kw = dw.shape
    if dx.shape[0] != ci:
        raise UsageError(f"conv2d: {dx.shape[0]} input channels, kernel expects {ci}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(dx, ((0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw)
    out = np.einsum("oikl,iklhw->ohw", dw, cols, optimize=True) + _data(b)[:, None, None]

    def vjp(g):
        gw = np.einsum("ohw,iklhw->oikl", g, cols, optimize=True)
        gb = g.sum(axis=(1, 2))
        gcols = np.einsum("oikl,ohw->iklhw", dw, g, optimize=True)
        gxp = np.zeros_like(xp)
        H, W = dx.shape[1], dx.shape[2]
        for a in range(kh):
            for c in range(kw):
                gxp[:, a : a + H, c : c + W] += gcols[:, a, c]
        return gxp[:, ph : ph + H, pw : pw + W], gw, gb

    return _node(out, (x, w, b), vjp)


def projection_residual(z, M, detach: bool = False) -> Var:
    """``z - M (M^H M + eps I)^{-1} M^H z`` for vector ``z`` and matrix ``M``.

    The backward pass differentiates through the projector exactly, unless
    ``detach`` is set, in which case the projector is held constant.
    """
    dz, dM = _data(z), _data(M)
    gram = dM.conj().T @ dM
    m = gram.shape[0]
    eps = 1e-12 * np.trace(gram).real / m
    G = gram + eps * np.eye(m)
    gamma = np.linalg.solve(G, dM.conj().T @ dz)
    r = dz - dM @ gamma

    def vjp(g):
        u = np.linalg.solve(G, dM.conj().T @ g)
        gz = g - dM @ u
        if detach:
            return gz, None
        gM = -np.outer(gz, gamma.conj()) - np.outer(r, u.conj())
        return gz, gM

    return _node(r, (z, M), vjp)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)  # parameter name -> multiplier


def adam_step(params: Iterable[Param], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {p.name} shape {p.value.shape}")
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * state.lr_scale.get(p.name, 1.0) * (m / c1) / (np.sqrt(v / c2) + state.eps)
