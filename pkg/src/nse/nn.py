"""Dense-tensor reverse-mode autodiff, normalization, losses, optimizers.

Small on purpose: float64 numpy arrays, a handful of ops, and a tape that is
implicit in the graph (each tensor keeps its parents and a backward closure).
Every op validates shapes and rejects non-finite outputs immediately, which
keeps failures close to their cause in long training loops.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from typing import Iterable, Mapping, Sequence

import numpy as np

EPS_NORM = 1e-5


class NotFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NotFiniteError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1; scalar only."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def clear_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Ops


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("affine expects x:(B,I) w:(I,O) b:(O,)")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}"
        )
    data = x.data @ w.data + b.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g @ w.data.T)
        if w.requires_grad:
            _accumulate(w, x.data.T @ g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _node(data, (x, w, b), backward, "affine")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _node(x.data * mask, (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * (1.0 - t * t))

    return _node(t, (x,), backward, "tanh")


def add(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ShapeError("add needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("add requires identical shapes")
    data = tensors[0].data.copy()
    for t in tensors[1:]:
        data += t.data

    def backward(g: np.ndarray) -> None:
        for t in tensors:
            if t.requires_grad:
                _accumulate(t, g)

    return _node(data, tensors, backward, "add")


def scale(x: Tensor, alpha: float) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * alpha)

    return _node(x.data * alpha, (x,), backward, "scale")


def mean_over(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    data = np.mean(x.data, axis=axes)
    count = x.data.size if axes is None else math.prod(x.data.shape[a] for a in axes)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            if axes is None:
                _accumulate(x, np.full_like(x.data, float(g) / count))
            else:
                _accumulate(x, np.broadcast_to(np.expand_dims(g, axes), x.data.shape) / count)

    return _node(data, (x,), backward, "mean_over")


class NormStats:
    """Per-feature running statistics with train/eval/recalibrate modes.

    Train mode normalizes with batch statistics and folds them into the
    running values with ``momentum``.  Eval mode uses the stored running
    values and never mutates.  Recalibrate mode accumulates raw sums so that
    finishing recalibration leaves the exact aggregate mean and population
    variance of everything forwarded since it began.
    """

    def __init__(self, width: int, momentum: float = 0.1):
        if not 0.0 < momentum <= 1.0:
            raise ValueError("momentum must be in (0, 1]")
        self.width = width
        self.momentum = momentum
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.mode = "train"
        self._sum = np.zeros(width)
        self._sumsq = np.zeros(width)
        self._count = 0

    def copy(self) -> "NormStats":
        dup = NormStats(self.width, self.momentum)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        dup.mode = self.mode
        return dup

    def begin_recalibration(self) -> None:
        self._sum = np.zeros(self.width)
        self._sumsq = np.zeros(self.width)
        self._count = 0
        self.mode = "recalibrate"

    def finish_recalibration(self) -> None:
        if self._count == 0:
            raise ValueError("no batches forwarded during recalibration")
        mean = self._sum / self._count
        self.running_mean = mean
        self.running_var = np.maximum(self._sumsq / self._count - mean * mean, 0.0)
        self.mode = "eval"


def normalize(x: Tensor, stats: NormStats) -> Tensor:
    if x.data.ndim != 2 or x.data.shape[1] != stats.width:
        raise ShapeError(f"normalize expects (B,{stats.width}), got {x.shape}")
    if stats.mode == "eval":
        inv = 1.0 / np.sqrt(stats.running_var + EPS_NORM)
        data = (x.data - stats.running_mean) * inv

        def backward(g: np.ndarray) -> None:
            if x.requires_grad:
                _accumulate(x, g * inv)

        return _node(data, (x,), backward, "normalize")

    batch = x.data.shape[0]
    bm = x.data.mean(axis=0)
    bv = x.data.var(axis=0)
    if stats.mode == "train":
        m = stats.momentum
        stats.running_mean = (1.0 - m) * stats.running_mean + m * bm
        stats.running_var = (1.0 - m) * stats.running_var + m * bv
    elif stats.mode == "recalibrate":
        stats._sum += x.data.sum(axis=0)
        stats._sumsq += (x.data * x.data).sum(axis=0)
        stats._count += batch
    else:
        raise ValueError(f"unknown NormStats mode {stats.mode!r}")
    inv = 1.0 / np.sqrt(bv + EPS_NORM)
    centered = x.data - bm
    data = centered * inv

    def backward(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dvar = np.sum(g * centered, axis=0) * (-0.5) * inv**3
        dmean = np.sum(-g * inv, axis=0) + dvar * (-2.0 / batch) * centered.sum(axis=0)
        dx = g * inv + dvar * 2.0 * centered / batch + dmean / batch
        _accumulate(x, dx)

    return _node(data, (x,), backward, "normalize")


def recalibrate(stats: NormStats, batches: Sequence[np.ndarray]) -> NormStats:
    """Replace running statistics with the exact aggregate over ``batches``."""
    if len(batches) == 0:
        raise ValueError("recalibrate needs at least one batch")
    stats.begin_recalibration()
    for batch in batches:
        normalize(Tensor(batch), stats)
    stats.finish_recalibration()
    return stats


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    if logits.data.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (B, C) logits")
    labels = np.asarray(labels)
    batch = logits.data.shape[0]
    if labels.shape != (batch,):
        raise ShapeError("labels must be a (B,) integer vector")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(batch), labels].mean()

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            probs = np.exp(log_probs)
            probs[np.arange(batch), labels] -= 1.0
            _accumulate(logits, probs * (float(g) / batch))

    return _node(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# Optimizers


class SGD:
    """SGD with optional Nesterov momentum and decoupled-from-nothing weight
    decay folded into the gradient, matching the common deep-learning form."""

    def __init__(
        self,
        lr: float,
        momentum: float = 0.0,
        nesterov: bool = False,
        weight_decay: float = 0.0,
    ):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self._velocity.get(name)
                buf = g if buf is None else self.momentum * buf + g
                self._velocity[name] = buf
                g = g + self.momentum * buf if self.nesterov else buf
            p.data = p.data - self.lr * g


class Adam:
    def __init__(
        self,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: Mapping[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            t = self._t.get(name, 0) + 1
            m = self.b1 * self._m.get(name, np.zeros_like(g)) + (1 - self.b1) * g
            v = self.b2 * self._v.get(name, np.zeros_like(g)) + (1 - self.b2) * g * g
            self._t[name], self._m[name], self._v[name] = t, m, v
            m_hat = m / (1 - self.b1**t)
            v_hat = v / (1 - self.b2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warm-up into a cosine decay that reaches 0 at the last step."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"NSECKPT1"


def save_checkpoint(path: str, params: Mapping[str, Tensor]) -> None:
    """Shape manifest (JSON) followed by raw little-endian float64 data."""
    names = sorted(params)
    manifest = {"params": [{"name": n, "shape": list(params[n].shape)} for n in names]}
    header = json.dumps(manifest).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for n in names:
            fh.write(params[n].data.astype("<f8").tobytes())


def load_checkpoint(path: str) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(header_len).decode())
        params = {}
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = math.prod(shape) if shape else 1
            raw = fh.read(8 * count)
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            params[entry["name"]] = Tensor(data, requires_grad=True)
    return params


def state_hash(params: Mapping[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(str(params[name].shape).encode())
        h.update(params[name].data.astype("<f8").tobytes())
    return h.hexdigest()
