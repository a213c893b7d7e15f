"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the forecasting network needs are provided. Every op
records its parents and a closure that pushes the output gradient back to
them; :meth:`Tensor.backward` replays those closures in reverse
topological order.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


_kink_log: list | None = None


@contextmanager
def record_kinks():
    """Collect the on/off pattern of every piecewise-linear unit evaluated inside the block."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def note_kinks(active: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.array(active, dtype=bool, copy=True))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every tensor that requires it.

        Gradients accumulate additively, so call :meth:`zero_grad` on the
        leaves between independent backward passes.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with broadcasting."""
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` semantics, including batch broadcasting."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} and {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


# shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and x != y for i, (x, y) in enumerate(zip(t.shape, ref))
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, splits, axis=ax)))


# nonlinearities

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    note_kinks(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    note_kinks(mask)
    return _make(np.where(mask, a.data, slope * a.data), (a,),
                 lambda g: (np.where(mask, g, slope * g),))


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    Masked positions are treated as ``-inf`` logits. Every slice along
    ``axis`` must keep at least one unmasked entry.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax: a slice is fully masked")
        x = np.where(mask, a.data, -np.inf)
    else:
        x = a.data.copy()
    x -= x.max(axis=axis, keepdims=True)
    out = np.exp(x, out=x)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        gy = g * out
        gy -= out * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _make(out, (a,), backward)


# reductions

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# layers

def conv1d_same(x: Tensor, w: Tensor) -> Tensor:
    """Length-preserving 1-D cross-correlation along axis -2.

    ``x`` is ``(..., length, c_in)``, ``w`` is ``(K, c_in, c_out)`` with odd
    ``K``; the sequence is zero-padded by ``(K - 1) // 2`` on both ends.
    """
    if w.ndim != 3 or x.ndim < 2:
        raise ShapeError(f"conv1d_same: bad shapes {x.shape} and {w.shape}")
    K, cin, _ = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d_same: channel mismatch {x.shape} and {w.shape}")
    if K % 2 == 0:
        raise ShapeError(f"conv1d_same: kernel size must be odd, got {K}")
    pad = (K - 1) // 2
    length = x.shape[-2]
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    out = xp[..., 0:length, :] @ w.data[0]
    for k in range(1, K):
        out = out + xp[..., k:k + length, :] @ w.data[k]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + length, :] += g @ w.data[k].T
            gx = gxp[..., pad:pad + length, :]
        if w.requires_grad:
            gw = np.empty_like(w.data)
            lead = int(np.prod(g.shape[:-2]))
            g2 = g.reshape(lead, length, -1)
            for k in range(K):
                xs = xp[..., k:k + length, :].reshape(lead, length, cin)
                gw[k] = np.einsum("blc,bld->cd", xs, g2)
        return gx, gw

    return _make(out, (x, w), backward)


@dataclass
class BatchNormState:
    """Running statistics for :func:`batchnorm` (eval mode reads them)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, eps: float = 1e-5) -> Tensor:
    """Normalize each channel (last axis) over all other axes, then apply the affine map."""
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[-1]
        m = state.momentum
        state.mean = (1 - m) * state.mean + m * mu
        unbiased = var * n / max(n - 1, 1)
        state.var = (1 - m) * state.var + m * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv

        def backward(g):
            gg = g * gamma.data
            gx = inv * (gg - gg.mean(axis=axes) - xhat * (gg * xhat).mean(axis=axes))
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (x.data - state.mean) * inv

        def backward(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def custom(inputs: Sequence[Tensor], value: np.ndarray,
           backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Register an op computed outside this module (``backward`` maps the
    output gradient to one gradient per input)."""
    return _make(np.asarray(value, dtype=np.float64), tuple(inputs), backward)


# gradient checking

def _pattern(f: Callable[[], float]) -> tuple[float, list[np.ndarray]]:
    with record_kinks() as log:
        value = float(f())
    return value, log


def _same(p: list[np.ndarray], q: list[np.ndarray]) -> bool:
    return len(p) == len(q) and all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(p, q))


def numerical_grad(f: Callable[[], float], x: Tensor, h: float = 1e-5,
                   return_crossings: bool = False):
    """Central differences of the scalar ``f()`` with respect to ``x.data`` (perturbed in place).

    With ``return_crossings`` also returns a boolean array marking
    coordinates whose probes flipped a relu/leaky_relu unit, where the
    difference quotient straddles a kink.
    """
    flat = x.data.reshape(-1)
    out = np.empty(flat.size)
    crossed = np.zeros(flat.size, dtype=bool)
    base = _pattern(f)[1] if return_crossings else None
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp, pp = _pattern(f)
        flat[i] = orig - h
        fm, pm = _pattern(f)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
        if return_crossings:
            crossed[i] = not (_same(base, pp) and _same(base, pm))
    if return_crossings:
        return out.reshape(x.shape), crossed.reshape(x.shape)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, where: np.ndarray | None = None) -> float:
    """``max |a - n| / max(|a|, |n|, 1e-8)`` over the selected coordinates."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if where is not None:
        keep = np.asarray(where, dtype=bool).ravel()
        a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               skip_kinks: bool = True, detail: bool = False):
    """Max relative error between backprop and central differences for ``f(x)``.

    ``f`` must build a fresh scalar graph from ``x`` on every call.
    Coordinates whose probes cross a relu kink are left out when
    ``skip_kinks`` is set; ``detail`` returns a :class:`GradCheckResult`
    with the counts.
    """
    x.requires_grad = True
    x.zero_grad()
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric, crossed = numerical_grad(lambda: f(x).data, x, h, return_crossings=True)
    keep = ~crossed if skip_kinks else np.ones_like(crossed)
    err = relative_error(analytic, numeric, keep)
    if detail:
        return GradCheckResult(err, int(keep.sum()), int((~keep).sum()))
    return err


# optimizer

@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor],
              grads: Sequence[np.ndarray | None] | None = None) -> None:
    """Bias-corrected Adam update, applied in place to ``params``.

    ``grads`` defaults to each parameter's ``grad``; a missing gradient is
    treated as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# checkpoints

_CKPT_MAGIC = b"VGNNCKP1"


def save_archive(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays plus a ``<path>.manifest.txt`` listing."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    lines = [f"{name}\t{'x'.join(map(str, np.shape(tensors[name]))) or 'scalar'}"
             for name in sorted(tensors)]
    Path(str(path) + ".manifest.txt").write_text("\n".join(lines) + "\n")


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint archive")
    pos = 8
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    return out
