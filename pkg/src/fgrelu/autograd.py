"""Reverse-mode differentiation over a static tape.

A :class:`Tape` is a list of :class:`Node` objects in creation order, which
is also a topological order because a node can only name parents that
already exist.  Placeholders are bound per call to :meth:`Tape.forward`;
parameter nodes read their values from the ``params`` mapping the tape was
built with, so the optimizer can update weights in place between calls.

Each primitive is a pair of functions::

    fwd(values, attrs)                     -> (value, cache)
    bwd(grad, values, value, cache, attrs) -> one gradient (or None) per parent

Gradients reaching a node along several paths are summed, so a parameter
reused in several unrolled passes receives the sum of its per-pass
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from . import activation as act
from . import tensor as T
from .errors import ContractError, DimensionError, DomainError, GraphError

PRIMITIVES: dict[str, tuple[Callable, Callable]] = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = (cls.fwd, cls.bwd)
        return cls
    return register


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    parents: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: Optional[str] = None
    value: Any = None
    grad: Any = None
    cache: Any = None
    requires_grad: bool = False

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.id}, {self.kind}{label})"


class Tape:
    """A static computation graph with a parameter registry."""

    def __init__(self, params: Optional[dict] = None):
        self.nodes: list[Node] = []
        self.params = params if params is not None else {}
        self.parameters: dict[str, Node] = {}
        self.placeholders: dict[str, Node] = {}
        self.named: dict[str, Node] = {}
        self.meta: dict = {}

    def _add(self, kind, parents=(), name=None, **attrs) -> Node:
        for p in parents:
            if not isinstance(p, Node) or p.id >= len(self.nodes) or self.nodes[p.id] is not p:
                raise GraphError(f"{kind}: parent {p!r} does not belong to this tape")
        node = Node(len(self.nodes), kind, tuple(parents), attrs, name)
        node.requires_grad = kind == "parameter" or (
            kind not in ("stop_gradient", "placeholder", "constant")
            and any(p.requires_grad for p in parents))
        self.nodes.append(node)
        if name is not None:
            self.named[name] = node
        return node

    def placeholder(self, name: str) -> Node:
        if name in self.placeholders:
            return self.placeholders[name]
        node = self._add("placeholder", name=name)
        self.placeholders[name] = node
        return node

    def parameter(self, name: str) -> Node:
        """Return the node for parameter ``name``; repeated calls share it."""
        if name in self.parameters:
            return self.parameters[name]
        if name not in self.params:
            raise GraphError(f"unknown parameter {name!r}")
        node = self._add("parameter", name=name)
        self.parameters[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        node = self._add("constant", name=name)
        node.value = value
        return node

    def apply(self, kind: str, *parents: Node, name=None, **attrs) -> Node:
        if kind not in PRIMITIVES:
            raise GraphError(f"unknown primitive {kind!r}")
        return self._add(kind, parents, name, **attrs)

    def __getitem__(self, name) -> Node:
        return self.named[name]

    @property
    def output(self) -> Node:
        return self.nodes[-1]

    def forward(self, bindings: Optional[dict] = None, output: Optional[Node] = None):
        """Evaluate every node in order and return the output's value."""
        bindings = bindings or {}
        for name in self.placeholders:
            if name not in bindings:
                raise GraphError(f"placeholder {name!r} is not bound")
        for node in self.nodes:
            node.grad = None
            if node.kind == "placeholder":
                node.value = np.asarray(bindings[node.name])
            elif node.kind == "parameter":
                node.value = self.params[node.name]
            elif node.kind == "constant":
                pass
            else:
                fwd = PRIMITIVES[node.kind][0]
                vals = [p.value for p in node.parents]
                node.value, node.cache = fwd(vals, node.attrs)
        return (output or self.output).value

    def backward(self, output: Optional[Node] = None) -> dict:
        """Backpropagate from a scalar ``output``; return gradients by parameter name."""
        out = output or self.output
        if out.value is None:
            raise ContractError("backward called before forward")
        if np.size(out.value) != 1:
            raise ContractError(f"backward needs a scalar output, got shape {np.shape(out.value)}")
        grads: dict[int, np.ndarray] = {out.id: np.ones_like(out.value)}
        for node in reversed(self.nodes[:out.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            node.grad = g
            if node.kind in ("parameter", "placeholder", "constant") or not node.requires_grad:
                continue
            bwd = PRIMITIVES[node.kind][1]
            vals = [p.value for p in node.parents]
            pgrads = bwd(g, vals, node.value, node.cache, node.attrs)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        result = {}
        for name, node in self.parameters.items():
            if node.grad is None:
                node.grad = np.zeros_like(self.params[name])
            result[name] = node.grad
        return result


def forward(tape: Tape, inputs: Optional[dict] = None):
    return tape.forward(inputs)


def backward(tape: Tape, output: Optional[Node] = None) -> dict:
    return tape.backward(output)


def finite_diff_check(tape: Tape, parameter: str, epsilon: float = 1e-6,
                      bindings: Optional[dict] = None, output: Optional[Node] = None,
                      indices=None, oracle_dtype=np.float64) -> float:
    """Compare analytic gradients with central differences.

    Returns ``max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``
    over the checked entries of ``parameter`` (all entries, or the flat
    ``indices`` given).  The numeric side runs in ``oracle_dtype`` (float64
    by default), so it is an oracle for single-precision tapes as well.  Pass
    ``oracle_dtype=np.longdouble`` where the platform has extended precision
    and the checked gradients are small enough for float64 roundoff in the
    differences to matter.
    """
    bindings = bindings or {}
    tape.forward(bindings, output)
    analytic = tape.backward(output)[parameter].ravel()

    saved = dict(tape.params)
    hi_bind = {k: np.asarray(v, dtype=oracle_dtype) if np.asarray(v).dtype.kind == "f" else v
               for k, v in bindings.items()}
    for k, v in saved.items():
        tape.params[k] = np.array(v, dtype=oracle_dtype)
    theta = tape.params[parameter]
    flat = theta.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    try:
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = flat[i]
            up = tape.forward(hi_bind, output)
            flat[i] = orig - epsilon
            lo = flat[i]
            down = tape.forward(hi_bind, output)
            flat[i] = orig
            # divide by the step actually taken, not the nominal one
            numeric = float((up - down) / (hi - lo))
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    finally:
        tape.params.update(saved)
    tape.forward(bindings, output)
    return worst


# ---------------------------------------------------------------------------
# primitives

def _same_shape(kind, a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"{kind}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


@primitive("identity")
class _Identity:
    fwd = staticmethod(lambda v, a: (v[0], None))
    bwd = staticmethod(lambda g, v, out, c, a: (g,))


@primitive("stop_gradient")
class _StopGradient:
    fwd = staticmethod(lambda v, a: (v[0], None))
    bwd = staticmethod(lambda g, v, out, c, a: (None,))


@primitive("add")
class _Add:
    @staticmethod
    def fwd(v, a):
        _same_shape("add", *v)
        return v[0] + v[1], None

    bwd = staticmethod(lambda g, v, out, c, a: (g, g))


@primitive("sub")
class _Sub:
    @staticmethod
    def fwd(v, a):
        _same_shape("sub", *v)
        return v[0] - v[1], None

    bwd = staticmethod(lambda g, v, out, c, a: (g, -g))


@primitive("mul")
class _Mul:
    @staticmethod
    def fwd(v, a):
        _same_shape("mul", *v)
        return v[0] * v[1], None

    bwd = staticmethod(lambda g, v, out, c, a: (g * v[1], g * v[0]))


@primitive("scale")
class _Scale:
    fwd = staticmethod(lambda v, a: (v[0] * a["factor"], None))
    bwd = staticmethod(lambda g, v, out, c, a: (g * a["factor"],))


@primitive("square")
class _Square:
    fwd = staticmethod(lambda v, a: (v[0] * v[0], None))
    bwd = staticmethod(lambda g, v, out, c, a: (2.0 * v[0] * g,))


@primitive("sum")
class _Sum:
    fwd = staticmethod(lambda v, a: (np.sum(v[0]), None))
    bwd = staticmethod(lambda g, v, out, c, a: (np.full_like(v[0], g),))


@primitive("mean")
class _Mean:
    fwd = staticmethod(lambda v, a: (np.mean(v[0]), None))
    bwd = staticmethod(lambda g, v, out, c, a: (np.full_like(v[0], g / v[0].size),))


@primitive("matmul")
class _Matmul:
    fwd = staticmethod(lambda v, a: (T.matmul(v[0], v[1]), None))
    bwd = staticmethod(lambda g, v, out, c, a: (g @ v[1].T, v[0].T @ g))


@primitive("matmul_t")
class _MatmulT:
    """``x @ w.T``: rows of ``x`` are samples, ``w`` is (out, in)."""

    @staticmethod
    def fwd(v, a):
        x, w = v
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise DimensionError(f"matmul_t: cannot apply weights {w.shape} to {x.shape}")
        return x @ w.T, None

    bwd = staticmethod(lambda g, v, out, c, a: (g @ v[1], g.T @ v[0]))


@primitive("add_bias")
class _AddBias:
    """Add a per-feature (dense) or per-channel (conv) bias vector."""

    @staticmethod
    def fwd(v, a):
        x, b = v
        if b.ndim != 1 or b.shape[0] != x.shape[1]:
            raise DimensionError(f"add_bias: bias {b.shape} does not match {x.shape}")
        if x.ndim == 4:
            return x + b[:, None, None], None
        return x + b, None

    @staticmethod
    def bwd(g, v, out, c, a):
        axes = (0, 2, 3) if g.ndim == 4 else (0,)
        return g, g.sum(axis=axes)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def fwd(v, a):
        x = v[0]
        return x.reshape((x.shape[0],) + tuple(a["shape"])), None

    bwd = staticmethod(lambda g, v, out, c, a: (g.reshape(v[0].shape),))


@primitive("conv2d")
class _Conv2d:
    fwd = staticmethod(lambda v, a: (T.conv2d(v[0], v[1], a["stride"], a["padding"]), None))

    @staticmethod
    def bwd(g, v, out, c, a):
        return T.conv2d_backward(g, v[0], v[1], a["stride"], a["padding"])


@primitive("conv2d_transpose")
class _Conv2dT:
    fwd = staticmethod(lambda v, a: (T.conv2d_transpose(v[0], v[1], a["stride"]), None))

    @staticmethod
    def bwd(g, v, out, c, a):
        return T.conv2d_transpose_backward(g, v[0], v[1], a["stride"])


@primitive("max_pool2d")
class _MaxPool:
    @staticmethod
    def fwd(v, a):
        return T.max_pool2d(v[0])

    bwd = staticmethod(lambda g, v, out, c, a: (T.max_pool2d_backward(g, c, v[0].shape),))


@primitive("relu")
class _Relu:
    fwd = staticmethod(lambda v, a: (np.maximum(v[0], 0.0), None))
    # relu'(0) = 0
    bwd = staticmethod(lambda g, v, out, c, a: (np.where(v[0] > 0.0, g, 0.0),))


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def fwd(v, a):
        x = v[0]
        # split by sign to avoid overflow in exp
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)), None

    bwd = staticmethod(lambda g, v, out, c, a: (g * out * (1.0 - out),))


@primitive("softmax")
class _Softmax:
    @staticmethod
    def fwd(v, a):
        x = v[0]
        e = np.exp(x - x.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True), None

    @staticmethod
    def bwd(g, v, out, c, a):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)


@primitive("fg_relu")
class _FgRelu:
    @staticmethod
    def fwd(v, a):
        _same_shape("fg_relu", *v)
        return act.fg_relu(v[0], v[1], a["params"]), None

    @staticmethod
    def bwd(g, v, out, c, a):
        d_s, d_d = act.fg_relu_grads(v[0], v[1], a["params"])
        return g * d_s, g * d_d


@primitive("fg_relu_threshold")
class _FgReluThreshold:
    """Parents: mu_s, mu_d, alpha (shape (1,))."""

    @staticmethod
    def fwd(v, a):
        _same_shape("fg_relu_threshold", v[0], v[1])
        return act.fg_relu_threshold(v[0], v[1], a["params"], alpha=v[2][0]), None

    @staticmethod
    def bwd(g, v, out, c, a):
        d_s, d_d, d_a = act.fg_relu_grads(v[0], v[1], a["params"], alpha=v[2][0])
        return g * d_s, g * d_d, np.array([np.sum(g * d_a)], dtype=v[2].dtype)


@primitive("gain_override")
class _GainOverride:
    @staticmethod
    def fwd(v, a):
        out = act.apply_gain_override(v[0], a["override"])
        return out.astype(v[0].dtype, copy=False), None

    @staticmethod
    def bwd(g, v, out, c, a):
        ov = a["override"]
        if not np.isscalar(ov):
            ov = np.asarray(ov, dtype=g.dtype)
            ov = ov[:, None, None] if g.ndim == 4 else ov
        return (np.where(v[0] > 0.0, g * ov, 0.0),)


@primitive("broadcast_filters")
class _BroadcastFilters:
    """(N, C) -> (N, C, H, W): one value shared by every position of a filter."""

    @staticmethod
    def fwd(v, a):
        x = v[0]
        h, w = a["spatial"]
        return np.ascontiguousarray(np.broadcast_to(x[:, :, None, None], x.shape + (h, w))), None

    bwd = staticmethod(lambda g, v, out, c, a: (g.sum(axis=(2, 3)),))


@primitive("global_avg_pool")
class _GlobalAvgPool:
    fwd = staticmethod(lambda v, a: (v[0].mean(axis=(2, 3)), None))

    @staticmethod
    def bwd(g, v, out, c, a):
        x = v[0]
        hw = x.shape[2] * x.shape[3]
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)


@primitive("batch_norm")
class _BatchNorm:
    """Parents: x, gamma, beta.  ``attrs['running']`` is ``(mean, var)`` for eval."""

    @staticmethod
    def fwd(v, a):
        x, gamma, beta = v
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        eps = a.get("eps", 1e-5)
        if a["training"]:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean, var = a["running"]
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        out = xhat * gamma.reshape(shape) + beta.reshape(shape)
        return out.astype(x.dtype, copy=False), (xhat, inv_std, mean, var)

    @staticmethod
    def bwd(g, v, out, c, a):
        x, gamma, _ = v
        xhat, inv_std, _, _ = c
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
        d_gamma = np.sum(g * xhat, axis=axes)
        d_beta = np.sum(g, axis=axes)
        dxhat = g * gamma.reshape(shape)
        if not a["training"]:
            return dxhat * inv_std.reshape(shape), d_gamma, d_beta
        m = x.size // x.shape[1]
        dx = (inv_std.reshape(shape) / m) * (
            m * dxhat
            - np.sum(dxhat, axis=axes).reshape(shape)
            - xhat * np.sum(dxhat * xhat, axis=axes).reshape(shape))
        return dx, d_gamma, d_beta


# ---------------------------------------------------------------------------
# losses (scalar outputs, averaged over the batch)

BCE_EPS = 1e-12


@primitive("mse")
class _Mse:
    @staticmethod
    def fwd(v, a):
        _same_shape("mse", *v)
        d = v[0] - v[1]
        return np.mean(d * d), None

    @staticmethod
    def bwd(g, v, out, c, a):
        return g * 2.0 * (v[0] - v[1]) / v[0].size, None


@primitive("bce")
class _Bce:
    @staticmethod
    def fwd(v, a):
        p, t = v
        _same_shape("bce", p, t)
        if np.any(p < 0.0) or np.any(p > 1.0) or np.any(np.isnan(p)):
            raise DomainError("bce: predictions must lie in [0, 1]")
        pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
        return -np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)), None

    @staticmethod
    def bwd(g, v, out, c, a):
        p, t = v
        denom = np.maximum(p * (1.0 - p), BCE_EPS)
        return g * (p - t) / denom / p.size, None


@primitive("softmax_cross_entropy")
class _SoftmaxXent:
    """Parents: class probabilities (N, K) and integer labels (N,)."""

    @staticmethod
    def fwd(v, a):
        p, y = v
        y = y.astype(np.intp)
        if p.ndim != 2 or y.shape != (p.shape[0],):
            raise DimensionError(f"cross-entropy: probabilities {p.shape} vs labels {y.shape}")
        picked = np.maximum(p[np.arange(p.shape[0]), y], BCE_EPS)
        return -np.mean(np.log(picked)), picked

    @staticmethod
    def bwd(g, v, out, c, a):
        p, y = v
        d = np.zeros_like(p)
        d[np.arange(p.shape[0]), y.astype(np.intp)] = -1.0 / c
        return g * d / p.shape[0], None
