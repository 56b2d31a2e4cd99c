"""Minimal reverse-mode autodiff over dense numpy arrays.

Exactly the operations the model needs: dense linear algebra, ReLU and
sigmoid, gradient reversal, row gather/concat, and three fused losses with
numerically stable forms and hand-derived gradients. Loss targets and masks
are treated as constants; gradients flow through predictions only (and
through both sides of the squared error when both are differentiable).

No general broadcasting: ops accept the shapes used here and raise
otherwise. A computation graph belongs to one worker; tensors that do not
require gradients may be shared read-only.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from typing import Iterable, Mapping, Sequence

import numpy as np


class CheckpointError(RuntimeError):
    """Unreadable or malformed checkpoint file."""


class Tensor:
    """A dense array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, parents=(), backward=None):
        self.values = np.asarray(values)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named trainable tensor carrying its Adam state."""

    def __init__(self, values, name: str):
        self.tensor = Tensor(np.asarray(values), requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.tensor.values)
        self.v = np.zeros_like(self.tensor.values)
        self.step = 0

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @values.setter
    def values(self, new: np.ndarray) -> None:
        if new.shape != self.tensor.values.shape:
            raise ValueError(f"shape mismatch assigning parameter {self.name}")
        self.tensor.values = new
        self.m = np.zeros_like(new)
        self.v = np.zeros_like(new)
        self.step = 0

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.values.shape})"


def as_tensor(x) -> Tensor:
    """Coerce a Tensor, Parameter, or array-like into a Tensor."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(np.asarray(x))


def _node(values: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward=backward)
    return Tensor(values)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _check_2d(name: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.values.ndim != 2:
            raise ValueError(f"{name} expects 2-d tensors, got shape {t.values.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    """Elementwise sum of two same-shape tensors (scalars included)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ValueError(f"add shape mismatch: {a.values.shape} vs {b.values.shape}")
    out = a.values + b.values

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(out, (a, b), backward)


def scale(x, c: float) -> Tensor:
    """Multiply a tensor by a python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    out = x.values * np.asarray(c, dtype=x.values.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * np.asarray(c, dtype=g.dtype))

    return _node(out, (x,), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; shapes equal or one side a broadcastable column."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    out = av * bv
    if out.shape not in (av.shape, bv.shape):
        raise ValueError(f"mul shape mismatch: {av.shape} vs {bv.shape}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _sum_to_shape(g * bv, av.shape))
        _accumulate(b, _sum_to_shape(g * av, bv.shape))

    return _node(out, (a, b), backward)


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting by summing g down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_2d("matmul", a, b)
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.values.shape} @ {b.values.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ bv.T)
        _accumulate(b, av.T @ g)

    return _node(out, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """Affine map x @ w + b with the bias broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_2d("linear", x, w)
    if x.values.shape[1] != w.values.shape[0] or b.values.shape != (w.values.shape[1],):
        raise ValueError(
            f"linear shape mismatch: x{x.values.shape} w{w.values.shape} b{b.values.shape}"
        )
    xv, wv = x.values, w.values
    out = xv @ wv + b.values

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g @ wv.T)
        _accumulate(w, xv.T @ g)
        _accumulate(b, g.sum(axis=0))

    return _node(out, (x, w, b), backward)


def relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.values > 0
    out = np.where(mask, x.values, np.asarray(0, dtype=x.values.dtype))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * mask)

    return _node(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_values(x.values)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * s * (1.0 - s))

    return _node(s, (x,), backward)


def _sigmoid_values(z: np.ndarray) -> np.ndarray:
    # branch per sign so exp never overflows
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    ez = np.exp(z[~positive])
    out[~positive] = ez / (1.0 + ez)
    return out


def gradient_reversal(x, mu: float) -> Tensor:
    """Identity on the forward pass; multiplies the gradient by -mu going back."""
    x = as_tensor(x)
    mu = float(mu)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * np.asarray(-mu, dtype=g.dtype))

    return _node(x.values, (x,), backward)


def concat_rows(parts: Iterable) -> Tensor:
    """Stack 2-d tensors along axis 0."""
    tensors = [as_tensor(p) for p in parts]
    if not tensors:
        raise ValueError("concat_rows needs at least one tensor")
    _check_2d("concat_rows", *tensors)
    out = np.concatenate([t.values for t in tensors], axis=0)
    sizes = [t.values.shape[0] for t in tensors]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for t, size in zip(tensors, sizes):
            _accumulate(t, g[offset : offset + size])
            offset += size

    return _node(out, tensors, backward)


def concat_cols(parts: Iterable) -> Tensor:
    """Stack 2-d tensors along axis 1."""
    tensors = [as_tensor(p) for p in parts]
    if not tensors:
        raise ValueError("concat_cols needs at least one tensor")
    _check_2d("concat_cols", *tensors)
    out = np.concatenate([t.values for t in tensors], axis=1)
    sizes = [t.values.shape[1] for t in tensors]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for t, size in zip(tensors, sizes):
            _accumulate(t, g[:, offset : offset + size])
            offset += size

    return _node(out, tensors, backward)


def gather_rows(x, index) -> Tensor:
    """Select rows by index; repeated rows accumulate gradient additively."""
    x = as_tensor(x)
    _check_2d("gather_rows", x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather_rows index must be 1-d")
    out = x.values[idx]

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _node(out, (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.values.reshape(shape)
    original = x.values.shape

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(original))

    return _node(out, (x,), backward)


def tsum(x) -> Tensor:
    """Sum all entries into a scalar tensor."""
    x = as_tensor(x)
    out = x.values.sum()

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.values.shape).astype(x.values.dtype, copy=False))

    return _node(np.asarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# fused losses


def _as_mask(mask, length: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 1 or (length >= 0 and m.shape[0] != length):
        raise ValueError(f"mask must be a length-{length} vector, got shape {m.shape}")
    return m != 0


def softmax_cross_entropy(logits, target, mask) -> Tensor:
    """Mean cross-entropy between row softmaxes and soft target rows.

    Rows with mask 0 are excluded; each unmasked target row must be a
    probability distribution (nonnegative, summing to 1 within 1e-6). If
    every row is masked the loss is exactly 0 and carries no gradient.
    """
    logits = as_tensor(logits)
    z = logits.values
    t = np.asarray(target.values if isinstance(target, Tensor) else target)
    m = _as_mask(mask, z.shape[0] if z.ndim == 2 else -1)
    if z.ndim != 2 or t.shape != z.shape:
        raise ValueError(f"softmax_cross_entropy shapes: logits {z.shape}, target {t.shape}")
    active = t[m]
    if active.size:
        sums = active.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(active < -1e-9):
            raise ValueError("unmasked target rows must be probability distributions")
    n = int(m.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=z.dtype))

    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    per_row = lse - (t * z).sum(axis=1)
    out = np.asarray(per_row[m].mean(), dtype=z.dtype)

    def backward(g: np.ndarray) -> None:
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        grad = (soft - t) * (m[:, None].astype(z.dtype) / n) * g
        _accumulate(logits, grad.astype(z.dtype, copy=False))

    return _node(out, (logits,), backward)


def mse(pred, target, mask) -> Tensor:
    """Mean squared error over unmasked entries; 0 if everything is masked."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    p, t = pred.values, target.values
    if p.shape != t.shape:
        raise ValueError(f"mse shape mismatch: {p.shape} vs {t.shape}")
    m = _as_mask(mask, p.shape[0] if p.ndim == 1 else -1)
    if m.shape != p.shape:
        raise ValueError("mse expects 1-d pred/target/mask of equal length")
    n = int(m.sum())
    if n == 0:
        return Tensor(np.zeros((), dtype=p.dtype))
    diff = p - t
    out = np.asarray((diff[m] ** 2).mean(), dtype=p.dtype)

    def backward(g: np.ndarray) -> None:
        base = 2.0 * diff * (m.astype(p.dtype) / n) * g
        _accumulate(pred, base.astype(p.dtype, copy=False))
        _accumulate(target, (-base).astype(t.dtype, copy=False))

    return _node(out, (pred, target), backward)


def binary_cross_entropy_logits(logits, domain_target) -> Tensor:
    """Mean binary cross-entropy on raw logits, log-sum-exp stabilized."""
    logits = as_tensor(logits)
    z = logits.values.reshape(-1)
    y = np.asarray(domain_target, dtype=z.dtype).reshape(-1)
    if y.shape != z.shape:
        raise ValueError(f"binary_cross_entropy_logits: {logits.values.shape} logits vs {y.shape} targets")
    if z.size == 0:
        raise ValueError("binary_cross_entropy_logits on an empty batch")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype)
    shape = logits.values.shape

    def backward(g: np.ndarray) -> None:
        grad = (_sigmoid_values(z) - y) / z.size * g
        _accumulate(logits, grad.reshape(shape).astype(z.dtype, copy=False))

    return _node(out, (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass and optimizer


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from a scalar loss."""
    loss = as_tensor(loss)
    if loss.values.size != 1:
        raise ValueError("backward requires a scalar loss")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; clears gradients afterwards."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise ValueError(f"parameter {p.name} has no gradient")
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.tensor.values = p.tensor.values - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.grad = None


# ---------------------------------------------------------------------------
# checkpoint container

_META_MEMBER = "__meta__.json"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays (plus an optional JSON meta block) to one file.

    The container is a stored zip of .npy members with fixed timestamps, so
    identical content produces identical bytes and values round-trip exactly.
    Written atomically via a temp file and rename.
    """
    path = str(path)
    tmp = path + ".tmp"
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())
        if meta is not None:
            info = zipfile.ZipInfo(_META_MEMBER, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, json.dumps(meta, sort_keys=True).encode("utf-8"))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back a checkpoint; returns (name -> array, meta dict)."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    try:
        with zipfile.ZipFile(path, "r") as zf:
            for member in zf.namelist():
                data = zf.read(member)
                if member == _META_MEMBER:
                    meta = json.loads(data.decode("utf-8"))
                elif member.endswith(".npy"):
                    arrays[member[: -len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(data), allow_pickle=False
                    )
                else:
                    raise CheckpointError(f"unexpected member {member!r} in {path}")
    except (OSError, zipfile.BadZipFile, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return arrays, meta
