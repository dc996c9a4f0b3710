"""Feed-forward network primitives: ReLU MLP, MSE, backprop and AdamW."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MlpSpec",
    "TrainConfig",
    "AdamState",
    "init_params",
    "forward",
    "backward",
    "mse_loss",
    "mse_grad",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "qpflab-checkpoint/1"


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(input, hidden..., output)``.

    Hidden layers use ReLU, the output layer is affine. A spec with no hidden
    layers is plain linear regression.
    """

    widths: tuple[int, ...]
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if min(self.widths) < 1:
            raise ValueError("layer widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 2

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    @classmethod
    def stacked(cls, n_in: int, n_out: int, n_hidden: int, base: int | None = None, dropout: float = 0.0):
        """Depth-``n_hidden`` net whose first and last hidden layers have ``base``
        units and whose inner hidden layers have ``2 * base`` (``base`` defaults
        to ``n_in``)."""
        base = n_in if base is None else base
        if n_hidden < 0:
            raise ValueError("n_hidden must be >= 0")
        if n_hidden == 0:
            hidden = []
        elif n_hidden == 1:
            hidden = [base]
        else:
            hidden = [base] + [2 * base] * (n_hidden - 2) + [base]
        return cls((n_in, *hidden, n_out), dropout)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.5e-4
    weight_decay: float = 3e-3
    dropout: float = 0.0
    batch_size: int = 16
    epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def init_params(spec: MlpSpec, rng) -> list[np.ndarray]:
    """``[W1, b1, W2, b2, ...]`` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(rng)
    params = []
    for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / np.sqrt(n_in)
        params.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        params.append(rng.uniform(-bound, bound, size=n_out))
    return params


def _check_params(spec: MlpSpec, params) -> None:
    if len(params) != 2 * (len(spec.widths) - 1):
        raise ValueError("parameter list does not match the layer spec")


def forward(spec: MlpSpec, params, x, train_mode: bool = False, rng=None):
    """Return ``(output, cache)``; ``x`` is ``(N, n_in)`` or a single vector.

    Dropout masks are drawn from ``rng`` only when ``train_mode`` is set.
    """
    _check_params(spec, params)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != spec.n_in:
        raise ValueError(f"expected {spec.n_in} input features, got {h.shape[1]}")
    drop = spec.dropout if train_mode else 0.0
    if drop:
        rng = np.random.default_rng(rng)
    acts = [h]
    pre = []
    masks = []
    n_layers = len(params) // 2
    for k in range(n_layers):
        z = h @ params[2 * k] + params[2 * k + 1]
        pre.append(z)
        if k == n_layers - 1:
            h = z
            break
        h = np.maximum(z, 0.0)
        if drop:
            mask = (rng.random(h.shape) >= drop) / (1.0 - drop)
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
        acts.append(h)
    cache = {"acts": acts, "pre": pre, "masks": masks}
    return (h[0] if single else h), cache


def backward(spec: MlpSpec, params, cache, grad_out):
    """Reverse-mode pass. Returns ``(param_grads, grad_input)``."""
    acts, pre, masks = cache["acts"], cache["pre"], cache["masks"]
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    n_layers = len(params) // 2
    grads = [None] * len(params)
    for k in range(n_layers - 1, -1, -1):
        grads[2 * k] = acts[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ params[2 * k].T
        if k > 0:
            if masks[k - 1] is not None:
                g = g * masks[k - 1]
            g = g * (pre[k - 1] > 0)
    return grads, g


def mse_loss(pred, target) -> float:
    """Mean over records of the summed squared component error."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.shape[0] == 0:
        raise ValueError("empty batch")
    return float(np.sum((pred - target) ** 2) / pred.shape[0])


def mse_grad(pred, target) -> np.ndarray:
    pred = np.atleast_2d(pred)
    return 2.0 * (pred - target) / pred.shape[0]


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, learning_rate: float, weight_decay: float = 0.0):
    """One AdamW update; returns the new parameter list and advances ``state``.

    Decay is decoupled: parameters are scaled by ``1 - lr * decay`` before
    the bias-corrected Adam step.
    """
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p = p * (1 - learning_rate * weight_decay)
        out.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def save_checkpoint(path, blocks: dict[str, dict]) -> None:
    """Write named parameter blocks as JSON.

    Each block is ``{"shapes": [...], "values": [[...], ...]}`` plus any extra
    metadata; floats are written with ``repr`` precision so reloads are exact.
    """
    Path(path).write_text(json.dumps({"format": CHECKPOINT_FORMAT, "blocks": blocks}, indent=1), encoding="utf-8")


def load_checkpoint(path) -> dict[str, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    return doc["blocks"]


def pack(arrays) -> dict:
    return {"shapes": [list(a.shape) for a in arrays], "values": [a.ravel().tolist() for a in arrays]}


def unpack(block) -> list[np.ndarray]:
    return [np.array(v, dtype=float).reshape(s) for s, v in zip(block["shapes"], block["values"])]
