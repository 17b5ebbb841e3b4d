"""One client's round: local training against the published prototypes,
prototype extraction and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyTestSetError, ShapeError
from .numeric import (
    ModelState,
    backward,
    forward,
    sgd_step,
    softmax_cross_entropy,
)
from .prototypes import ClientPrototypeSet


def alignment_loss(r, proto):
    """``1 - cos(r, proto)`` for a unit ``proto``; returns ``(loss, grad_r)``."""
    r = np.asarray(r, dtype=np.float64)
    proto = np.asarray(proto, dtype=np.float64)
    if r.shape != proto.shape or r.ndim != 1:
        raise ShapeError("feature and prototype must be equal-length vectors")
    losses, grad = kernels.alignment_grad(r[None, :], proto[None, :])
    return float(losses[0]), grad[0]


@dataclass
class ClientState:
    client_id: int
    model: ModelState
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    lambda_c: float = 100.0
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.01
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr >= 0 or self.lambda_c < 0:
            raise ConfigError("lr and lambda_c must be non-negative")
        if len(self.y_train) == 0:
            raise ConfigError(f"client {self.client_id} has no training data")

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y_train))

    @property
    def n_train(self) -> int:
        return len(self.y_train)


@dataclass
class LocalTrace:
    ce: list[float] = field(default_factory=list)
    alignment: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_sq: list[float] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)
    skipped_alignment: int = 0

    @property
    def steps(self) -> int:
        return len(self.loss)

    @property
    def grad_sq_sum(self) -> float:
        return float(sum(self.grad_sq))


def _targets(published, y, dim):
    """Per-row target prototype and a mask of rows whose class was published."""
    P = np.zeros((len(y), dim))
    mask = np.zeros(len(y), dtype=bool)
    for i, c in enumerate(y):
        p = published.get(int(c))
        if p is not None:
            P[i] = p
            mask[i] = True
    return P, mask


def batch_objective(model: ModelState, x, y, published, lambda_c: float, with_grad: bool = True):
    """Batch loss ``mean CE + lambda_c * mean alignment`` and its gradient.

    The alignment mean divides by the full batch size; rows whose class has no
    published prototype, or whose feature vector is exactly zero, contribute
    zero to it. Returns
    ``(loss, ce, align, grads, skipped)`` with ``grads`` None when not requested.
    """
    feats, logits, cache = forward(model, x)
    n = len(y)
    ce_rows, g_logits = softmax_cross_entropy(logits, y)
    ce = float(ce_rows.mean())
    P, mask = _targets(published or {}, y, model.spec.feature_dim)
    # cos(0, p) is undefined: a row whose features vanish (all ReLUs off and
    # zero output bias) skips alignment like a row without a prototype
    mask &= np.einsum("ij,ij->i", feats, feats) > 0.0
    skipped = int(n - mask.sum())
    align, g_feat = 0.0, None
    if mask.any():
        al_rows, g_al = kernels.alignment_grad(feats, P, mask)
        align = float(al_rows.sum() / n)
        if lambda_c > 0:
            g_feat = g_al * (lambda_c / n)
    loss = ce + lambda_c * align
    grads = backward(model, cache, g_logits / n, g_feat) if with_grad else None
    return loss, ce, align, grads, skipped


def full_objective(state: ClientState, published, with_grad: bool = False):
    """Local objective over the whole training set; ``(loss, grads)``."""
    loss, _, _, grads, _ = batch_objective(state.model, state.x_train, state.y_train, published,
                                           state.lambda_c, with_grad)
    return loss, grads


def local_train(state: ClientState, published) -> tuple[ClientState, LocalTrace]:
    """``epochs`` passes of shuffled mini-batches (last partial batch kept)."""
    trace = LocalTrace()
    n = state.n_train
    for _ in range(state.epochs):
        order = state.rng.permutation(n)
        for start in range(0, n, state.batch_size):
            idx = order[start:start + state.batch_size]
            loss, ce, align, grads, skipped = batch_objective(
                state.model, state.x_train[idx], state.y_train[idx], published, state.lambda_c)
            trace.loss.append(loss)
            trace.ce.append(ce)
            trace.alignment.append(align)
            trace.grad_sq.append(grads.norm_sq())
            trace.batch_sizes.append(len(idx))
            trace.skipped_alignment += skipped
            sgd_step(state.model, grads, state.lr)
    return state, trace


def extract_prototypes(state: ClientState) -> ClientPrototypeSet:
    """Per-class mean of raw extractor outputs over the training set, reduced
    in sample-index order."""
    feats, _, _ = forward(state.model, state.x_train)
    protos, counts = {}, {}
    for c in state.classes:
        rows = np.flatnonzero(state.y_train == c)
        acc = np.zeros(feats.shape[1])
        for i in rows:
            acc += feats[i]
        protos[c] = acc / len(rows)
        counts[c] = len(rows)
    return ClientPrototypeSet(state.client_id, protos, counts)


def predict(model: ModelState, x) -> np.ndarray:
    """Argmax of logits; ``np.argmax`` already returns the lowest index on ties."""
    _, logits, _ = forward(model, np.atleast_2d(x))
    return np.argmax(logits, axis=1)


def evaluate(state: ClientState) -> float:
    if len(state.y_test) == 0:
        raise EmptyTestSetError(f"client {state.client_id} has no test samples")
    return float(np.mean(predict(state.model, state.x_test) == state.y_test))


def embed(model: ModelState, x) -> np.ndarray:
    feats, _, _ = forward(model, np.atleast_2d(x))
    return feats
