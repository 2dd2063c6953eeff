"""Dense float64 linear algebra with hand-written backward rules.

Matrices are plain 2-D ``numpy.float64`` arrays in C (row-major) order.  The
module also provides the parameter container, the SGD optimizer, a central
difference gradient checker and the text checkpoint format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from .errors import DimensionError, FileFormatError, LabelError, NumericError, StateError

LN_EPS = 1e-5

CHECKPOINT_MAGIC = "refl-ckpt"
CHECKPOINT_VERSION = "v1"


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {a.shape[0]}x{a.shape[1] if a.ndim > 1 else '?'} "
            f"by {b.shape[0]}x{b.shape[1] if b.ndim > 1 else '?'}: shapes {a.shape} and {b.shape}"
        )
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilised by the row maximum."""
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


def cross_entropy_mean(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its exact gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {c})")
    if n == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


# -- elementary layers -------------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
    y = matmul(x, w)
    if b is not None:
        y = y + b
    return y


def linear_backward(x, w, grad_y, grad_w, grad_b=None) -> np.ndarray:
    """Accumulate weight/bias gradients in place and return the input gradient."""
    grad_w += x.T @ grad_y
    if grad_b is not None:
        grad_b += grad_y.sum(axis=0, keepdims=True)
    return grad_y @ w.T


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(cache, gain, grad_y, grad_gain, grad_bias) -> np.ndarray:
    xhat, inv = cache
    grad_gain += (grad_y * xhat).sum(axis=0, keepdims=True)
    grad_bias += grad_y.sum(axis=0, keepdims=True)
    g = grad_y * gain
    return inv * (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True))


# -- parameters and optimisation ---------------------------------------------

class ParamStore:
    """Named 2-D parameters with same-shape gradient and momentum slots."""

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.velocity: Dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise StateError(f"duplicate parameter name {name!r}")
        if " " in name or not name:
            raise StateError(f"invalid parameter name {name!r}")
        m = as_matrix(value, name).copy()
        if not np.all(np.isfinite(m)):
            raise NumericError(f"parameter {name!r} has non-finite entries")
        self.params[name] = m
        self.grads[name] = np.zeros_like(m)
        return m

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list:
        return [n for n in self.params if n.startswith(prefix)]

    def grad(self, name: str) -> np.ndarray:
        return self.grads[name]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def update(self, other: "ParamStore") -> None:
        for n in other:
            self.add(n, other[n])

    def num_values(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class SgdConfig:
    learning_rate: float
    weight_decay: float = 0.0
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0.0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(
    params: ParamStore,
    cfg: SgdConfig,
    names: Optional[Iterable[str]] = None,
    lr_scale: float = 1.0,
) -> None:
    """Momentum SGD with L2 weight decay; zeroes the stepped gradients.

    ``v <- momentum*v + (g + weight_decay*w)`` then ``w <- w - lr*v``.
    ``names`` restricts the step to a parameter group and ``lr_scale``
    carries an external schedule such as warmup.
    """
    lr = cfg.learning_rate * lr_scale
    for name in (params.names() if names is None else names):
        w = params.params[name]
        g = params.grads[name]
        step = g + cfg.weight_decay * w if cfg.weight_decay else g.copy()
        if cfg.momentum:
            v = params.velocity.setdefault(name, np.zeros_like(w))
            v *= cfg.momentum
            v += step
            step = v
        w -= lr * step
        g[...] = 0.0


def finite_diff_check(
    f: Callable[[ParamStore], float],
    params: ParamStore,
    analytic: Dict[str, np.ndarray],
    eps: float = 1e-5,
    names: Optional[Iterable[str]] = None,
) -> float:
    """Max ``|analytic - numeric| / max(1, |numeric|)`` over every parameter entry.

    Entries are perturbed in place and restored afterwards.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    worst = 0.0
    for name in (params.names() if names is None else names):
        w = params[name]
        a = analytic[name]
        flat = w.reshape(-1)
        aflat = np.asarray(a, dtype=np.float64).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params)
            flat[i] = orig - eps
            fm = f(params)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"objective not finite while perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(aflat[i] - num) / max(1.0, abs(num)))
    return worst


# -- checkpoint file ---------------------------------------------------------

def format_checkpoint(params: ParamStore) -> str:
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {len(params)}"]
    for name in params:
        w = params[name]
        lines.append(f"{name} {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str, source: str = "<string>") -> ParamStore:
    lines = text.splitlines()
    try:
        magic, version, count = lines[0].split()
        if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
            raise ValueError("bad header")
        store = ParamStore()
        pos = 1
        for _ in range(int(count)):
            name, rows, cols = lines[pos].split()
            rows, cols = int(rows), int(cols)
            data = np.array(
                [[float(v) for v in lines[pos + 1 + r].split()] for r in range(rows)],
                dtype=np.float64,
            ).reshape(rows, cols)
            store.add(name, data)
            pos += 1 + rows
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"{source}: malformed checkpoint ({exc})") from exc
    return store


def save_checkpoint(params: ParamStore, path) -> None:
    from ._io import write_text_atomic

    write_text_atomic(Path(path), format_checkpoint(params))


def load_checkpoint(path) -> ParamStore:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(text, str(path))
