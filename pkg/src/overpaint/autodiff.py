"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Tensors hold float32/float64 arrays of rank <= 3. Each operation records a
backward closure; Tensor.backward() walks the implicit graph in reverse
topological order. Every forward result is checked finite (NaN/Inf raises).
Gradients are verified against central finite differences by grad_check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(ArithmeticError):
    """A sanctioned operation produced NaN or Inf."""


_grad_enabled = True


class no_grad:
    """Context manager: skip building backward graphs inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim > 3:
            raise ValueError(f"rank {arr.ndim} tensor not supported (max 3)")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse accumulation from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- arithmetic ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _result(data, (a, b), backward, "add")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward, "multiply")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    data = a.data * factor

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * factor)

    return _result(data, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics for rank-3 operands."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have rank >= 2")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast_matmul(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast_matmul(gb, b.shape))

    return _result(data, (a, b), backward, "matmul")


def _unbroadcast_matmul(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError("transpose2d needs a rank-2 tensor")
    data = a.data.T.copy()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _result(data, (a,), backward, "transpose2d")


def swap_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ValueError("swap_last2 needs rank >= 2")
    data = np.swapaxes(a.data, -1, -2).copy()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, -1, -2))

    return _result(data, (a,), backward, "swap_last2")


def narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    data = a.data[index].copy()

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a.accumulate_grad(full)

    return _result(data, (a,), backward, "narrow")


def concat_last(tensors: list[Tensor]) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=-1)
    sizes = [t.shape[-1] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                t.accumulate_grad(g[..., offset : offset + size])
            offset += size

    return _result(data, tuple(tensors), backward, "concat_last")


# --- nonlinearities ------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return _result(data, (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation gelu; the gradient differentiates this exact formula."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            sech2 = 1.0 - t**2
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _result(data, (a,), backward, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis (numerically stabilized)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            a.accumulate_grad((g - inner) * data)

    return _result(data, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _result(data, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        if gain.requires_grad:
            gain.accumulate_grad(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias.accumulate_grad(_unbroadcast(g, bias.shape))
        if a.requires_grad:
            gx = g * gain.data
            term = gx.sum(axis=-1, keepdims=True) + xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            a.accumulate_grad(inv_std * (gx - term / n))

    return _result(data, (a, gain, bias), backward, "layer_norm")


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather: ids of rank <= 2 index the (V, D) table."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ValueError("ids must be integers")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise IndexError("ids outside embedding table")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table.accumulate_grad(gt)

    return _result(data, (table,), backward, "embedding_lookup")


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not 0 <= p < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    data = a.data * mask

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _result(data, (a,), backward, "dropout")


_MASK_VALUE = -1e9  # large-but-finite so downstream checks stay clean


def causal_mask_add(scores: Tensor) -> Tensor:
    """Add -1e9 to strictly-upper-triangle entries of the last two axes."""
    size = scores.shape[-1]
    if scores.shape[-2] != size:
        raise ValueError("causal mask needs square trailing axes")
    mask = np.triu(np.full((size, size), _MASK_VALUE, dtype=scores.data.dtype), k=1)
    data = scores.data + mask

    def backward(g):
        if scores.requires_grad:
            scores.accumulate_grad(g)

    return _result(data, (scores,), backward, "causal_mask_add")


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    ignore_index: int | None = None,
    return_elementwise: bool = False,
):
    """Mean negative log-likelihood over non-ignored targets.

    logits: (..., V); targets: matching leading shape, integer class ids.
    With return_elementwise, also returns the detached per-position losses
    (ignored positions hold 0).
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    v = logits.shape[-1]
    flat_logits = logits.data.reshape(-1, v)
    flat_targets = targets.reshape(-1)
    valid = np.ones_like(flat_targets, dtype=bool)
    if ignore_index is not None:
        valid = flat_targets != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid targets")
    safe_targets = np.where(valid, flat_targets, 0)
    if safe_targets.min() < 0 or safe_targets.max() >= v:
        raise ValueError("target id outside vocabulary")

    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(flat_logits.shape[0])
    logp = shifted[rows, safe_targets] - lse
    per_position = np.where(valid, -logp, 0.0)
    data = np.asarray(per_position.sum() / n_valid, dtype=logits.data.dtype)

    def backward(g):
        if logits.requires_grad:
            soft = np.exp(shifted - lse[:, None])
            soft[rows, safe_targets] -= 1.0
            soft[~valid] = 0.0
            grad = (float(g) / n_valid) * soft
            logits.accumulate_grad(grad.reshape(logits.shape).astype(logits.data.dtype))

    loss = _result(data, (logits,), backward, "cross_entropy")
    if return_elementwise:
        return loss, per_position.reshape(targets.shape)
    return loss


# --- finite-difference checking -------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    """Reduce every element to one scalar (used to form training/check losses)."""
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(np.asarray(g), a.shape).astype(a.data.dtype))

    return _result(data, (a,), backward, "sum_all")


def grad_check(func, tensors, seed: int = 0, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `func` maps the float64 input tensors to one Tensor and must be
    deterministic (stochastic ops take a generator rebuilt inside func). The
    output reduces to a scalar through a fixed random projection so every
    output element's gradient is exercised. Error metric per element:
    |a - n| / max(1, |a|, |n|).
    """
    rng = np.random.default_rng(seed)
    weights = None

    def scalar_value(datas) -> float:
        nonlocal weights
        probes = [Tensor(d.copy()) for d in datas]
        with no_grad():
            out = func(*probes)
        if weights is None:
            weights = rng.standard_normal(out.shape) if out.ndim else np.asarray(
                rng.standard_normal()
            )
        return float((out.data * weights).sum())

    datas = [t.data.astype(np.float64) for t in tensors]
    scalar_value(datas)  # first forward fixes the projection

    out = func(*tensors)
    loss = sum_all(multiply(out, Tensor(np.asarray(weights))))
    for t in tensors:
        t.zero_grad()
    loss.backward()

    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = datas[i].reshape(-1)
        numeric = np.zeros_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = scalar_value(datas)
            flat[j] = orig - h
            down = scalar_value(datas)
            flat[j] = orig
            numeric[j] = (up - down) / (2 * h)
        numeric = numeric.reshape(t.shape)
        err = np.abs(analytic - numeric) / np.maximum(
            1.0, np.maximum(np.abs(analytic), np.abs(numeric))
        )
        worst = max(worst, float(err.max()))
    return worst


# --- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the shared step count."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(
    params: list[Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; refuses non-finite gradients."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    grads = []
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adam_step")
        grads.append(g)
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
