"""Dense float64 building blocks: cosine geometry, MLPs with analytic backprop,
softmax cross-entropy, plain SGD and a central-difference gradient checker.

Arrays are plain ``numpy.ndarray`` objects of dtype float64. Models store one
``(out, in)`` weight matrix and one bias vector per layer; inputs may be a
single sample ``(D,)`` or a batch ``(n, D)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CacheError, LabelError, NumericsError, ShapeError, ZeroNormError


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def l2_normalize(v) -> np.ndarray:
    """Project ``v`` onto the unit sphere. Rows are normalized for 2-D input."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ZeroNormError("cannot normalize a zero vector")
    return v / norms


# ----------------------------------------------------------------------------
# models
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[D, h1, ..., K]`` of a feature extractor plus a linear
    classifier ``K -> n_classes``. Hidden layers use ReLU, the feature layer is
    linear."""

    widths: tuple[int, ...]
    n_classes: int

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ShapeError("an extractor needs at least one layer (two widths)")
        if any(w < 1 for w in self.widths) or self.n_classes < 1:
            raise ShapeError(f"non-positive width in {self.widths} / {self.n_classes}")

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            shapes.append((fan_out, fan_in))
            shapes.append((fan_out,))
        shapes.append((self.n_classes, self.feature_dim))
        shapes.append((self.n_classes,))
        return shapes


@dataclass
class ModelState:
    """Trainable state of one client: extractor layers followed by the
    classifier. ``params`` is ordered ``[W0, b0, ..., W_last, b_last, W_head, b_head]``."""

    spec: MlpSpec
    params: list[np.ndarray]
    version: int = 0

    def __post_init__(self):
        expected = self.spec.param_shapes()
        if len(self.params) != len(expected):
            raise ShapeError(f"expected {len(expected)} tensors, got {len(self.params)}")
        for p, shape in zip(self.params, expected):
            if p.shape != shape:
                raise ShapeError(f"parameter shape {p.shape} != {shape}")

    @property
    def n_extractor_tensors(self) -> int:
        return 2 * self.spec.n_layers

    @property
    def classifier(self) -> tuple[np.ndarray, np.ndarray]:
        return self.params[-2], self.params[-1]

    def copy(self) -> "ModelState":
        return ModelState(self.spec, [p.copy() for p in self.params], self.version)

    def bump(self) -> None:
        self.version += 1


@dataclass
class GradState:
    tensors: list[np.ndarray]

    def norm_sq(self) -> float:
        return float(sum(np.vdot(t, t) for t in self.tensors))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors])

    def scaled(self, alpha: float) -> "GradState":
        return GradState([alpha * t for t in self.tensors])

    def __add__(self, other: "GradState") -> "GradState":
        if len(self.tensors) != len(other.tensors):
            raise ShapeError("gradient states are not congruent")
        return GradState([a + b for a, b in zip(self.tensors, other.tensors)])


def zeros_like_model(model: ModelState) -> GradState:
    return GradState([np.zeros_like(p) for p in model.params])


def init_model(spec: MlpSpec, rng: np.random.Generator) -> ModelState:
    """He-normal weights on ReLU-fed layers, LeCun-normal on the feature and
    classifier layers, zero biases."""
    params: list[np.ndarray] = []
    n = spec.n_layers
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        gain = 2.0 if i < n - 1 else 1.0
        params.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(gain / fan_in))
        params.append(np.zeros(fan_out))
    params.append(rng.standard_normal((spec.n_classes, spec.feature_dim)) / np.sqrt(spec.feature_dim))
    params.append(np.zeros(spec.n_classes))
    return ModelState(spec, params)


@dataclass
class ForwardCache:
    activations: list[np.ndarray]   # input to each extractor layer, then features
    preacts: list[np.ndarray]        # pre-activation of each extractor layer
    single: bool
    model_id: int
    version: int
    spec: MlpSpec = field(repr=False)


def forward(model: ModelState, x):
    """Return ``(features, logits, cache)`` for one sample or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.spec.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match input_dim {model.spec.input_dim}")
    activations = [X]
    preacts = []
    a = X
    n = model.spec.n_layers
    for i in range(n):
        W, b = model.params[2 * i], model.params[2 * i + 1]
        z = a @ W.T + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if i < n - 1 else z
        activations.append(a)
    W_h, b_h = model.classifier
    logits = a @ W_h.T + b_h
    cache = ForwardCache(activations, preacts, single, id(model), model.version, model.spec)
    if single:
        return a[0], logits[0], cache
    return a, logits, cache


def backward(model: ModelState, cache: ForwardCache, grad_logits, grad_features_extra=None) -> GradState:
    """Reverse pass. ``grad_logits`` (and the optional extra feature gradient)
    are per-row upstream gradients; parameter gradients are summed over rows."""
    if cache.model_id != id(model) or cache.version != model.version or cache.spec != model.spec:
        raise CacheError("forward cache does not belong to the current model parameters")
    g = np.asarray(grad_logits, dtype=np.float64)
    if cache.single:
        g = g[None, :]
    feats = cache.activations[-1]
    if g.shape != (feats.shape[0], model.spec.n_classes):
        raise ShapeError(f"grad_logits shape {g.shape} does not match logits")
    W_h, _ = model.classifier
    grads: list[np.ndarray] = [None] * len(model.params)  # type: ignore[list-item]
    grads[-2] = g.T @ feats
    grads[-1] = g.sum(axis=0)
    gf = g @ W_h
    if grad_features_extra is not None:
        extra = np.asarray(grad_features_extra, dtype=np.float64)
        if cache.single:
            extra = extra[None, :]
        if extra.shape != gf.shape:
            raise ShapeError(f"grad_features_extra shape {extra.shape} != {gf.shape}")
        gf = gf + extra
    n = model.spec.n_layers
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            gf = gf * (cache.preacts[i] > 0.0)
        W = model.params[2 * i]
        grads[2 * i] = gf.T @ cache.activations[i]
        grads[2 * i + 1] = gf.sum(axis=0)
        if i > 0:
            gf = gf @ W
    return GradState(grads)


def softmax_cross_entropy(logits, label):
    """Cross-entropy of softmax(logits) against integer labels.

    For 1-D ``logits`` returns ``(loss, grad)``; for a batch returns per-row
    losses and per-row gradients (softmax minus one-hot)."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    y = np.atleast_1d(np.asarray(label))
    n, C = Z.shape
    if y.shape != (n,):
        raise ShapeError(f"{y.shape[0]} labels for {n} rows")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError("labels must be integers")
        y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= C):
        raise LabelError(f"label out of range [0, {C})")
    shifted = Z - Z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    denom = expz.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = np.log(denom[:, 0]) - shifted[rows, y]
    grad = expz / denom
    grad[rows, y] -= 1.0
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def sgd_step(params, grads, lr: float):
    """In-place ``p <- p - lr * g``. Accepts a ModelState (or anything with
    ``params``/``bump``) or a plain list of arrays; returns it."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    tensors = params.params if hasattr(params, "params") else params
    gts = grads.tensors if isinstance(grads, GradState) else grads
    if len(tensors) != len(gts):
        raise ShapeError("parameter and gradient lists differ in length")
    for p, g in zip(tensors, gts):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    for p, g in zip(tensors, gts):
        p -= lr * g
    if hasattr(params, "bump"):
        params.bump()
    return params


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic,
    eps: float = 1e-6,
) -> float:
    """Max over coordinates of ``|fd - an| / max(1, |fd|, |an|)``.

    ``loss_fn`` takes no arguments and reads ``params`` by reference; each
    coordinate is perturbed in place and restored exactly.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    tensors = params.params if hasattr(params, "params") else params
    an = analytic.tensors if isinstance(analytic, GradState) else analytic
    worst = 0.0
    for p, g in zip(tensors, an):
        flat = p.reshape(-1)
        gflat = np.asarray(g, dtype=np.float64).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_fn()
            flat[j] = orig - eps
            lm = loss_fn()
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericsError("loss is not finite under perturbation")
            fd = (lp - lm) / (2.0 * eps)
            err = abs(fd - gflat[j]) / max(1.0, abs(fd), abs(gflat[j]))
            worst = max(worst, err)
    return worst
