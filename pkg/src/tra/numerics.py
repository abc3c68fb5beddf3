"""Small numerical toolkit shared by every other module.

Matrices are plain float64 numpy arrays; randomness is a numpy ``Generator``
backed by PCG64 so draws are reproducible across platforms.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

EPS = np.finfo(np.float64).eps


class NumericalError(ArithmeticError):
    """Raised when a computation produces non-finite values."""

    def __init__(self, message: str, payload: dict | None = None):
        super().__init__(message)
        self.payload = payload or {}


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def spawn_rngs(seed: int, names: list[str]) -> dict[str, np.random.Generator]:
    """Independent named streams derived from one seed.

    Streams are keyed by position in ``names`` so adding a consumer never
    perturbs the draws seen by another.
    """
    children = np.random.SeedSequence(int(seed)).spawn(len(names))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(names, children)}


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite values")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def gumbel_from_uniform(z) -> np.ndarray:
    z = np.clip(np.asarray(z, dtype=np.float64), EPS, 1.0 - EPS)
    return -np.log(-np.log(z))


def gumbel_sample(rng: np.random.Generator, n) -> np.ndarray:
    """Gumbel(0, 1) draws via the double-log transform of clamped uniforms."""
    return gumbel_from_uniform(rng.random(n))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f(x)
        flat[j] = orig - step
        fm = f(x)
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value at coordinate {j}")
        grad[j] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(a, b) -> np.ndarray:
    """Elementwise |a-b| / max(1, |a|, |b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"zero-dimensional layer ({fan_out}x{fan_in})")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def activate(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation given pre-activation and output."""
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    raise ValueError(f"unknown activation {kind!r}")


def flatten_params(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[k].reshape(-1) for k in sorted(params)]) if params else np.zeros(0)


def unflatten_params(template: dict[str, np.ndarray], flat: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for k in sorted(template):
        n = template[k].size
        out[k] = flat[pos : pos + n].reshape(template[k].shape).copy()
        pos += n
    return out
