"""Pure-Python/numpy fallback for the compiled kernels in ``_kernels.pyx``."""

import numpy as np

BACKEND = "python"

_MASK64 = (1 << 64) - 1
_TWO_M53 = 1.0 / 9007199254740992.0


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _draw(state, n):
    s0, s1, s2, s3 = (int(v) for v in state)
    out = [0] * n
    for i in range(n):
        out[i] = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3
    return out


def fill_uniform(state, out):
    raw = _draw(state, out.shape[0])
    out[:] = [(r >> 11) * _TWO_M53 for r in raw]


def fill_u64(state, out):
    out[:] = np.array(_draw(state, out.shape[0]), dtype=np.uint64)


def masked_softmax(scores, mask, out):
    keep = mask.astype(bool)
    filled = np.where(keep, scores, -np.inf)
    m = filled.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(np.where(keep, scores - m, 0.0)), 0.0)
    # left-to-right accumulation, matching the compiled kernel's ordering
    total = np.zeros(scores.shape[0])
    for j in range(scores.shape[1]):
        total = total + e[:, j]
    seen = keep.any(axis=1)
    out[:] = np.where(seen[:, None], e / np.where(seen, total, 1.0)[:, None], 0.0)
