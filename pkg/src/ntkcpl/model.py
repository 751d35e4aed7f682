"""Two-layer ReLU MLP: the only network that is trained or kernelized.

Parameters are flattened in the fixed order W1 (row-major, d x h), b1,
W2 (row-major, h x C), b2. The ReLU derivative at exactly 0 is 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from .errors import FormatError, PreconditionError


@dataclass(frozen=True)
class MLPParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    init_scheme: str = "standard"
    zero_output_init: bool = False

    @property
    def d(self) -> int:
        return self.W1.shape[0]

    @property
    def h(self) -> int:
        return self.W1.shape[1]

    @property
    def num_outputs(self) -> int:
        return self.W2.shape[1]

    @property
    def num_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def gradient_scale(self) -> np.ndarray:
        """Per-parameter factor d(stored weight)/d(trained parameter), flat order.

        Under ``ntk_parameterization`` the trained parameters are unit
        Gaussians and a weight matrix is that parameter times 1/sqrt(fan_in),
        so weight gradients pick up the same factor. Biases are unscaled.
        """
        if self.init_scheme != "ntk_parameterization":
            return np.ones(self.num_params)
        d, h, C = self.d, self.h, self.num_outputs
        return np.concatenate([np.full(d * h, d ** -0.5), np.ones(h), np.full(h * C, h ** -0.5), np.ones(C)])

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    @classmethod
    def from_flat(cls, theta, d, h, C, **kw) -> "MLPParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != d * h + h + h * C + C:
            raise ValueError("flat parameter vector has the wrong length")
        i = 0
        W1 = theta[i:i + d * h].reshape(d, h); i += d * h
        b1 = theta[i:i + h]; i += h
        W2 = theta[i:i + h * C].reshape(h, C); i += h * C
        b2 = theta[i:i + C]
        return cls(W1.copy(), b1.copy(), W2.copy(), b2.copy(), **kw)


class TrainConfig(BaseModel):
    learning_rate: float = Field(0.3, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(3e-4, ge=0)
    batch_size: int = Field(100, ge=1)
    epochs: int = Field(100, ge=1)
    loss: Literal["cross_entropy", "mse"] = "cross_entropy"
    seed: int = 0


def init_mlp(d: int, h: int, C: int, scheme: str = "standard",
             zero_output_init: bool = False, rng: np.random.Generator | None = None) -> MLPParams:
    """Draw fresh MLP parameters.

    ``ntk_parameterization`` draws every weight from N(0, 1/fan_in) and
    biases from N(0, 1), i.e. unit Gaussians pre-multiplied by the NTK
    scale factor; Jacobians are then taken w.r.t. the unit Gaussians. ``standard`` follows the usual uniform
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) rule for weights and biases.
    """
    if min(d, h, C) < 1:
        raise PreconditionError("d, h and C must all be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    if scheme == "ntk_parameterization":
        W1 = rng.standard_normal((d, h)) / np.sqrt(d)
        b1 = rng.standard_normal(h)
        W2 = rng.standard_normal((h, C)) / np.sqrt(h)
        b2 = rng.standard_normal(C)
    elif scheme == "standard":
        a1, a2 = 1.0 / np.sqrt(d), 1.0 / np.sqrt(h)
        W1 = rng.uniform(-a1, a1, (d, h))
        b1 = rng.uniform(-a1, a1, h)
        W2 = rng.uniform(-a2, a2, (h, C))
        b2 = rng.uniform(-a2, a2, C)
    else:
        raise PreconditionError(f"unknown init scheme {scheme!r}")
    if zero_output_init:
        W2 = np.zeros((h, C))
        b2 = np.zeros(C)
    return MLPParams(W1, b1, W2, b2, scheme, zero_output_init)


def _check_input(params: MLPParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != params.d:
        raise PreconditionError(f"input has {X.shape[1]} columns, network expects {params.d}")
    return X


def penultimate(params: MLPParams, X) -> np.ndarray:
    """Hidden ReLU activations, shape (m, h). Used as the active-learning feature."""
    X = _check_input(params, X)
    return np.maximum(X @ params.W1 + params.b1, 0.0)


def forward(params: MLPParams, X) -> np.ndarray:
    return penultimate(params, X) @ params.W2 + params.b2


def predict_classes(params: MLPParams, X) -> np.ndarray:
    return np.argmax(forward(params, X), axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _loss_and_output_grad(logits, onehot, loss):
    m = logits.shape[0]
    if loss == "cross_entropy":
        p = softmax(logits)
        value = -np.mean(np.log(np.clip((p * onehot).sum(axis=1), 1e-300, None)))
        return value, (p - onehot) / m
    diff = logits - onehot
    return 0.5 * np.mean((diff ** 2).sum(axis=1)), diff / m


def _grads(params: MLPParams, X, onehot, loss):
    pre = X @ params.W1 + params.b1
    act = np.maximum(pre, 0.0)
    logits = act @ params.W2 + params.b2
    value, g_out = _loss_and_output_grad(logits, onehot, loss)
    g_W2 = act.T @ g_out
    g_b2 = g_out.sum(axis=0)
    g_act = (g_out @ params.W2.T) * (pre > 0)
    g_W1 = X.T @ g_act
    g_b1 = g_act.sum(axis=0)
    return value, [g_W1, g_b1, g_W2, g_b2]


def loss_value(params: MLPParams, X, labels, loss="cross_entropy") -> float:
    X = _check_input(params, X)
    onehot = np.eye(params.num_outputs)[np.asarray(labels)]
    return _loss_and_output_grad(forward(params, X), onehot, loss)[0]


def train_classifier(params: MLPParams, features, labels, cfg: TrainConfig,
                     return_history: bool = False):
    """Minibatch SGD with momentum and L2 weight decay.

    The update matches the common framework convention:
    ``v = momentum * v + (grad + wd * theta)``; ``theta -= lr * v``.
    Batch order comes from ``cfg.seed`` only, so two calls with equal
    inputs give bitwise-identical parameters. ``return_history`` adds
    the full-data loss recorded after every epoch.
    """
    X = _check_input(params, features)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise PreconditionError("cannot train on an empty labeled set")
    if len(labels) != X.shape[0]:
        raise PreconditionError("labels and features disagree in length")
    C = params.num_outputs
    if labels.min() < 0 or labels.max() >= C:
        raise PreconditionError(f"labels must lie in [0, {C})")
    if cfg.epochs < 1:
        raise PreconditionError("epochs must be >= 1")

    onehot = np.eye(C)[labels]
    theta = [params.W1.copy(), params.b1.copy(), params.W2.copy(), params.b2.copy()]
    velocity = [np.zeros_like(t) for t in theta]
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    history = []
    # the step below mutates theta in place, so cur always sees current values
    cur = MLPParams(*theta, params.init_scheme, params.zero_output_init)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            _, grads = _grads(cur, X[idx], onehot[idx], cfg.loss)
            for t, v, g in zip(theta, velocity, grads):
                g = g + cfg.weight_decay * t
                v *= cfg.momentum
                v += g
                t -= cfg.learning_rate * v
        if return_history:
            history.append(loss_value(cur, X, labels, cfg.loss))
    out = MLPParams(*(t.copy() for t in theta), init_scheme=params.init_scheme,
                    zero_output_init=params.zero_output_init)
    return (out, history) if return_history else out


def jacobian(params: MLPParams, x) -> np.ndarray:
    """Exact Jacobian of all logits w.r.t. the flattened parameters, shape (C, P).

    Derivatives are taken w.r.t. the parameters of the init scheme, i.e.
    the stored weights times ``gradient_scale``.
    """
    x = _check_input(params, x)[0]
    pre = x @ params.W1 + params.b1
    act = np.maximum(pre, 0.0)
    mask = (pre > 0).astype(np.float64)
    d, h, C = params.d, params.h, params.num_outputs
    J = np.zeros((C, params.num_params))
    for c in range(C):
        gate = params.W2[:, c] * mask
        J[c, : d * h] = np.outer(x, gate).ravel()
        J[c, d * h: d * h + h] = gate
        w2 = np.zeros((h, C))
        w2[:, c] = act
        J[c, d * h + h: d * h + h + h * C] = w2.ravel()
        J[c, d * h + h + h * C + c] = 1.0
    return J * params.gradient_scale()


def jacobian_row(params: MLPParams, x, head: int = 0) -> np.ndarray:
    """Gradient of the single logit ``head`` w.r.t. all parameters (length P)."""
    return jacobian(params, x)[head]


def jacobian_matrix(params: MLPParams, X, head: int = 0) -> np.ndarray:
    X = _check_input(params, X)
    return np.stack([jacobian_row(params, x, head) for x in X])


def grad_embedding(params: MLPParams, X) -> np.ndarray:
    """BADGE embeddings: last-layer cross-entropy gradient at the hallucinated label.

    Row i is ``outer(penultimate_i, softmax_i - onehot(argmax_i))`` flattened
    in W2 order (h-major), shape (m, h*C).
    """
    act = penultimate(params, X)
    logits = act @ params.W2 + params.b2
    p = softmax(logits)
    p[np.arange(len(p)), np.argmax(logits, axis=1)] -= 1.0
    return (act[:, :, None] * p[:, None, :]).reshape(len(act), -1)


# ---------------------------------------------------------------------------
# Checkpoints: FEATv1-style header ("MLPC", version, d, h, C, flags), float64 payload

_CKPT = struct.Struct("<4sIIIII")
_SCHEMES = ["standard", "ntk_parameterization"]


def save_params(params: MLPParams, path) -> None:
    flags = int(params.zero_output_init) | (_SCHEMES.index(params.init_scheme) << 1)
    with open(path, "wb") as fh:
        fh.write(_CKPT.pack(b"MLPC", 1, params.d, params.h, params.num_outputs, flags))
        fh.write(params.flat().astype("<f8").tobytes())


def load_params(path) -> MLPParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, d, h, C, flags = _CKPT.unpack_from(raw)
    if magic != b"MLPC" or version != 1:
        raise FormatError(f"{path}: not an MLP checkpoint")
    P = d * h + h + h * C + C
    if len(raw) != _CKPT.size + 8 * P:
        raise FormatError(f"{path}: payload size mismatch")
    theta = np.frombuffer(raw, dtype="<f8", offset=_CKPT.size)
    return MLPParams.from_flat(theta, d, h, C, init_scheme=_SCHEMES[flags >> 1],
                               zero_output_init=bool(flags & 1))
