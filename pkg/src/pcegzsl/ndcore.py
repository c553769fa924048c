"""Dense float64 primitives with hand-written backward passes.

Matrices are plain 2-D ``numpy.float64`` arrays. Everything that reduces
over an axis does so in a fixed order so a given seed always reproduces the
same bits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.2
NORM_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


@numba.njit(cache=True)
def _ordered_matmul(a, b, out):
    n, k = a.shape
    m = b.shape[1]
    for i in range(n):
        for t in range(k):
            av = a[i, t]
            for j in range(m):
                out[i, j] += av * b[t, j]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed left-to-right summation per output entry.

    Each output element is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    exactly what a naive triple loop computes, so results do not depend on
    the BLAS build or thread count. The kernel is compiled without fast-math,
    so no reassociation or fused multiply-add.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    _ordered_matmul(np.ascontiguousarray(a, dtype=DTYPE), np.ascontiguousarray(b, dtype=DTYPE), out)
    return out


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad_mask(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    # tie at exactly 0 takes the slope branch
    return np.where(x > 0, 1.0, slope)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return grad_out * leaky_relu_grad_mask(x, slope)


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x / ||x||, norms)``; norms are kept for the backward pass."""
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if x.size and np.min(norms) <= NORM_FLOOR:
        row = int(np.argmin(norms[:, 0]))
        raise DegenerateInputError(f"row {row} has norm {norms[row, 0]:.3g}, cannot normalize")
    return x / norms, norms


def l2_normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # (I - u u^T) g / ||x|| per row
    proj = np.sum(unit * grad_out, axis=1, keepdims=True)
    return (grad_out - unit * proj) / norms


def logsumexp_stable(terms, axis=None):
    """log(sum(exp(terms))) with the max shifted out.

    ``-inf`` entries are allowed and act as absent terms. With ``axis`` the
    reduction runs along that axis and keeps it (like ``keepdims=True``).
    """
    t = np.asarray(terms, dtype=DTYPE)
    if t.size == 0:
        raise ValueError("logsumexp of an empty sequence")
    if axis is None:
        t = t.ravel()
        mx = np.max(t)
        if np.isneginf(mx):
            return -np.inf
        return float(mx + np.log(np.sum(np.exp(t - mx))))
    mx = np.max(t, axis=axis, keepdims=True)
    safe = np.where(np.isneginf(mx), 0.0, mx)
    s = np.sum(np.exp(t - safe), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        return safe + np.log(s)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = as_matrix(self.value).copy()
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def adam_step(p: Param, lr: float, beta1: float = 0.5, beta2: float = 0.99, eps: float = 1e-8) -> Param:
    """One bias-corrected Adam update, in place."""
    p.step_count += 1
    t = p.step_count
    g = p.grad
    p.adam_m *= beta1
    p.adam_m += (1.0 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1.0 - beta2) * (g * g)
    m_hat = p.adam_m / (1.0 - beta1**t)
    v_hat = p.adam_v / (1.0 - beta2**t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based generator: draw ``i`` is ``splitmix64(key + i * golden)``.

    The stream is a pure function of ``(seed, counter)`` so it is identical
    on every platform and can be checkpointed as two integers.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)
        self._key = _splitmix64(np.array([self.seed], dtype=np.uint64))[0]

    def child(self, offset: int) -> "Rng":
        return Rng((self.seed + int(offset)) & 0xFFFFFFFFFFFFFFFF)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _splitmix64(self._key + idx * _GOLDEN)

    def uniform(self, size) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        u = (self.next_u64(n) >> np.uint64(11)).astype(DTYPE) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, size, std: float = 1.0) -> np.ndarray:
        """Box-Muller; every pair of uniforms yields two Gaussians."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=DTYPE)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return (std * z[:n]).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def state(self) -> tuple[int, int]:
        return self.seed, self.counter
