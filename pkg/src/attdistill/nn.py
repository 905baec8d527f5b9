"""Small classifiers over flat float64 parameter vectors.

Parameter layout is fixed per layer, in layer order: the weight block of
shape ``(fan_in, fan_out)`` in row-major order followed by that layer's
bias. For ``MLP1H`` this is ``W1, b1, W2, b2``; for ``Linear`` just ``W, b``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LINEAR = "linear"
MLP1H = "mlp1h"
KINDS = (LINEAR, MLP1H)

# Kaiming-uniform bound for ReLU gain: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
INIT_GAIN = 6.0


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.kind == MLP1H:
            if self.hidden_dim < 1:
                raise ValueError("hidden_dim must be >= 1 for mlp1h")
            if self.activation != "relu":
                raise ValueError("only relu activation is supported")
        elif self.hidden_dim != 0:
            raise ValueError("hidden_dim must be 0 for linear")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.kind == LINEAR:
            return [(self.input_dim, self.num_classes)]
        return [(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)]

    @property
    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "input_dim": self.input_dim, "num_classes": self.num_classes}
        if self.kind == MLP1H:
            d["hidden_dim"] = self.hidden_dim
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            kind=str(d["kind"]).lower(),
            input_dim=int(d["input_dim"]),
            num_classes=int(d["num_classes"]),
            hidden_dim=int(d.get("hidden_dim", 0)),
        )

    def __str__(self):
        if self.kind == LINEAR:
            return f"linear-{self.input_dim}x{self.num_classes}"
        return f"mlp1h-{self.input_dim}x{self.hidden_dim}x{self.num_classes}"


@dataclass(frozen=True)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise DimensionError(f"features must be a non-empty 2-d array, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DimensionError(f"labels shape {y.shape} does not match {x.shape[0]} rows")
        if np.isnan(x).any():
            raise ValueError("features contain NaN")
        if y.size and (y.min() < 0 or not np.issubdtype(y.dtype, np.integer)):
            raise ValueError("labels must be non-negative integers")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.features.shape[0]

    def check(self, arch: Architecture) -> None:
        if self.features.shape[1] != arch.input_dim:
            raise DimensionError(
                f"batch has {self.features.shape[1]} features, {arch} expects {arch.input_dim}"
            )
        if self.labels.max() >= arch.num_classes:
            raise ValueError(f"label {self.labels.max()} out of range for {arch.num_classes} classes")


def _check_params(arch: Architecture, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.param_count,):
        raise DimensionError(f"{arch} needs {arch.param_count} parameters, got shape {params.shape}")
    return params


def unflatten(arch: Architecture, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``[(W, b), ...]`` views, one pair per layer."""
    params = _check_params(arch, params)
    layers = []
    pos = 0
    for fan_in, fan_out in arch.layer_shapes:
        w = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])


def init_params(arch: Architecture, seed: int) -> np.ndarray:
    """Fan-in scaled uniform weights, zero biases. Deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in arch.layer_shapes:
        bound = np.sqrt(INIT_GAIN / fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return flatten(layers)


def forward(arch: Architecture, params: np.ndarray, batch: LabeledBatch) -> np.ndarray:
    batch.check(arch)
    return _forward(arch, unflatten(arch, params), batch.features)[-1]


def _forward(arch, layers, x):
    # returns [z1, a1, logits] for mlp1h, [logits] for linear
    if arch.kind == LINEAR:
        w, b = layers[0]
        return [x @ w + b]
    (w1, b1), (w2, b2) = layers
    z1 = x @ w1 + b1
    a1 = np.maximum(z1, 0.0)
    return [z1, a1, a1 @ w2 + b2]


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy with max-shifted log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} do not match")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


def _onehot(labels, k):
    y = np.zeros((len(labels), k))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def _backward(arch, layers, x, labels):
    acts = _forward(arch, layers, x)
    n = x.shape[0]
    p = _softmax(acts[-1])
    d_logits = (p - _onehot(labels, arch.num_classes)) / n
    if arch.kind == LINEAR:
        grads = [(x.T @ d_logits, d_logits.sum(axis=0))]
    else:
        z1, a1, _ = acts
        w2 = layers[1][0]
        mask = (z1 > 0).astype(np.float64)
        d_z1 = (d_logits @ w2.T) * mask
        grads = [(x.T @ d_z1, d_z1.sum(axis=0)), (a1.T @ d_logits, d_logits.sum(axis=0))]
    return grads, acts, p, d_logits


def grad(arch: Architecture, params: np.ndarray, batch: LabeledBatch) -> np.ndarray:
    """Exact gradient of ``ce_loss(forward(...))`` with respect to ``params``."""
    batch.check(arch)
    grads, *_ = _backward(arch, unflatten(arch, params), batch.features, batch.labels)
    return flatten(grads)


def batch_grad(arch: Architecture, params: np.ndarray, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    # unchecked fast path for inner loops; callers validate shapes once
    grads, *_ = _backward(arch, unflatten(arch, params), x, labels)
    return flatten(grads)


def grad_vjp(arch, params, x, labels, v):
    """Second-order products of the loss gradient ``g(params, x)`` with ``v``.

    Returns ``(H @ v, d<g, v>/dx)`` where ``H`` is the parameter Hessian of
    the mean cross-entropy. Both come from one directional derivative of the
    backward pass along ``v``; the input term uses symmetry of the joint
    Hessian, ``(dg/dx)^T v = d/de grad_x L(params + e v, x)``.
    ReLU masks are treated as locally constant.
    """
    layers = unflatten(arch, params)
    vlayers = unflatten(arch, v)
    n = x.shape[0]
    _, acts, p, d_logits = _backward(arch, layers, x, labels)
    if arch.kind == LINEAR:
        (w, _), (vw, vb) = layers[0], vlayers[0]
        r_logits = x @ vw + vb
        r_p = p * (r_logits - (p * r_logits).sum(axis=1, keepdims=True))
        r_dl = r_p / n
        hv = [(x.T @ r_dl, r_dl.sum(axis=0))]
        dx = r_dl @ w.T + d_logits @ vw.T
        return flatten(hv), dx

    (w1, _), (w2, _) = layers
    (vw1, vb1), (vw2, vb2) = vlayers
    z1, a1, _ = acts
    mask = (z1 > 0).astype(np.float64)
    r_z1 = x @ vw1 + vb1
    r_a1 = mask * r_z1
    r_logits = r_a1 @ w2 + a1 @ vw2 + vb2
    r_p = p * (r_logits - (p * r_logits).sum(axis=1, keepdims=True))
    r_dl = r_p / n
    d_z1 = (d_logits @ w2.T) * mask
    r_dz1 = (r_dl @ w2.T + d_logits @ vw2.T) * mask
    hv = [(x.T @ r_dz1, r_dz1.sum(axis=0)), (r_a1.T @ d_logits + a1.T @ r_dl, r_dl.sum(axis=0))]
    dx = r_dz1 @ w1.T + d_z1 @ vw1.T
    return flatten(hv), dx


def sgd_step(params: np.ndarray, g: np.ndarray, step_size: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if params.shape != g.shape:
        raise DimensionError(f"params {params.shape} and gradient {g.shape} differ")
    return params - step_size * g


def predict(arch: Architecture, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Argmax class; ties go to the lowest index."""
    logits = _forward(arch, unflatten(arch, params), np.asarray(features, dtype=np.float64))[-1]
    return np.argmax(logits, axis=1)


def accuracy(arch: Architecture, params: np.ndarray, batch: LabeledBatch) -> float:
    batch.check(arch)
    return float(np.mean(predict(arch, params, batch.features) == batch.labels))


def min_abs_preactivation(arch: Architecture, params: np.ndarray, features: np.ndarray) -> float:
    """Distance of the nearest hidden pre-activation to the ReLU kink (inf for linear)."""
    if arch.kind == LINEAR:
        return float("inf")
    z1 = _forward(arch, unflatten(arch, params), np.asarray(features, dtype=np.float64))[0]
    return float(np.abs(z1).min())
