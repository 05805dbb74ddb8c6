"""Dense float64 tensors with a tape-free reverse-mode autodiff.

Every op builds its output with :meth:`Tensor.from_op`, which records the
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from . import kernels
from .errors import ConfigError, DegenerateMaskError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # --- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor.from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor.from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor.from_op(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor.from_op(self.data[idx], (self,), back)

    # --- shape ops --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.shape
        return Tensor.from_op(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may broadcast over leading dims of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def back(g):
        if B.ndim == 1:
            ga = g[..., None] * B
            gb = np.tensordot(g, A, axes=(tuple(range(g.ndim)), tuple(range(A.ndim - 1))))
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape) if A.ndim > 1 else np.outer(A, g)
        return ga, gb

    return Tensor.from_op(A @ B, (a, b), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]

    def back(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"id out of range for table with {n} rows")
    return Tensor.from_op(table.data[ids], (table,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with biased variance, then scale and shift."""
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty feature axis")
    if eps < 0:
        raise ConfigError(f"layer_norm eps must be >= 0, got {eps}")
    X = x.data
    d = X.shape[-1]
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    G = gamma.data

    def back(g):
        dxhat = g * G
        dx = rstd / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, G.shape), _unbroadcast(g, beta.shape)

    return Tensor.from_op(xhat * G + beta.data, (x, gamma, beta), back)


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    X = x.data
    cdf = ndtr(X)

    def back(g):
        return (g * (cdf + X * _INV_SQRT_2PI * np.exp(-0.5 * X * X)),)

    return Tensor.from_op(X * cdf, (x,), back)


def softmax_masked(scores: Tensor, mask) -> Tensor:
    """Softmax along the last axis restricted to positions where ``mask`` is 1.

    ``mask`` broadcasts against ``scores``. Masked positions get exactly 0.
    """
    scores = _as_tensor(scores)
    S = scores.data
    M = np.broadcast_to(np.asarray(mask, dtype=bool), S.shape)
    if S.ndim == 0:
        raise ShapeError("softmax_masked needs at least one axis")
    if not M.any(axis=-1).all():
        raise DegenerateMaskError("softmax_masked: a row has every position masked")
    n = S.shape[-1]
    flat_s = np.ascontiguousarray(S.reshape(-1, n))
    flat_m = np.ascontiguousarray(M.reshape(-1, n), dtype=np.uint8)
    out = np.empty_like(flat_s)
    kernels.masked_softmax(flat_s, flat_m, out)
    P = out.reshape(S.shape)

    def back(g):
        return (P * (g - (g * P).sum(-1, keepdims=True)),)

    return Tensor.from_op(P, (scores,), back)


def dropout(x: Tensor, rate: float, rng: "Rng | None", training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an Rng")
    keep = rng.uniform(x.shape) >= rate
    scale = keep / (1.0 - rate)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,))


def ordered_sum(x: Tensor, axis: int) -> Tensor:
    """Sum along ``axis`` accumulating strictly left to right.

    Pooling relies on this: appending exact zeros (masked padding) then leaves
    the result bit-identical, which a pairwise reduction does not guarantee.
    """
    X = x.data
    axis = axis % X.ndim
    moved = np.moveaxis(X, axis, 0)
    acc = np.zeros(moved.shape[1:])
    for row in moved:
        acc = acc + row
    shape = X.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor.from_op(acc, (x,), back)


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


@dataclass(frozen=True)
class RngState:
    seed: int
    position: int


class Rng:
    """xoshiro256** seeded through splitmix64.

    Every draw consumes one 64-bit output; ``position`` counts them, so
    ``Rng.from_state(rng.state)`` resumes the exact same stream.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self.position = 0
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._s = np.array(words, dtype=np.uint64)

    @property
    def state(self) -> RngState:
        return RngState(self.seed, self.position)

    @classmethod
    def from_state(cls, state: RngState) -> "Rng":
        rng = cls(state.seed)
        if state.position:
            rng.next_u64(state.position)
        return rng

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream keyed by (seed, stream)."""
        _, z = splitmix64(self.seed ^ ((stream + 1) * 0xD1B54A32D192ED03 & _MASK64))
        return Rng(z)

    def next_u64(self, n: int = 1) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        kernels.fill_u64(self._s, out)
        self.position += n
        return out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        out = np.empty(n, dtype=np.float64)
        kernels.fill_uniform(self._s, out)
        self.position += n
        return out.reshape(shape) if shape != () else out[0]

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals; consumes two uniforms per pair."""
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u = self.uniform((2, m))
        r = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (z * std).reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, weights: Sequence[float]) -> int:
        """Index drawn with probability proportional to ``weights``."""
        cum = np.cumsum(np.asarray(weights, dtype=np.float64))
        u = self.uniform() * cum[-1]
        return int(min(np.searchsorted(cum, u, side="right"), len(cum) - 1))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def relative_error(analytic, numeric) -> float:
    """|a - n| / max(|a|, |n|, 1e-8); for arrays |.| is the Euclidean norm."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    diff = float(np.linalg.norm((a - n).ravel()))
    return diff / max(float(np.linalg.norm(a.ravel())), float(np.linalg.norm(n.ravel())), 1e-8)


@dataclass
class GradCheckEntry:
    rel_error: float  # norm-wise over the probed coordinates of this tensor
    max_coord_error: float  # worst single coordinate, same formula elementwise
    probed: int
    size: int


def grad_check_report(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> dict[str, GradCheckEntry]:
    """Compare backward() against central differences for every parameter tensor.

    ``fn`` recomputes the scalar loss from the current parameter values. With
    ``max_entries`` set, at most that many coordinates per tensor are probed
    (chosen with ``rng``); otherwise every coordinate is.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss")
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    rng = rng or Rng(0)
    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.permutation(flat.size)[:max_entries])
        else:
            idx = np.arange(flat.size)
        ga = analytic[name].reshape(-1)[idx]
        gn = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"grad_check: non-finite loss perturbing {name}[{i}]")
            gn[k] = (up - down) / (2 * eps)
        worst = max((relative_error(a, n) for a, n in zip(ga, gn)), default=0.0)
        report[name] = GradCheckEntry(relative_error(ga, gn), worst, len(idx), flat.size)
    return report


def grad_check(fn, params, eps: float = 1e-5, max_entries: int | None = None, rng: Rng | None = None) -> float:
    """Max over parameter tensors of the norm-wise relative error."""
    report = grad_check_report(fn, params, eps=eps, max_entries=max_entries, rng=rng)
    return max((e.rel_error for e in report.values()), default=0.0)
