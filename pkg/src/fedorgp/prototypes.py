"""Server-side prototype machinery.

The global bank holds one trainable embedding per class and a two-layer
transform network (FC -> ReLU -> FC, hidden width K). Its outputs are trained
against the uploaded client prototypes with an intra-class cosine term and an
inter-class absolute-cosine term, and are l2-normalized only when published.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    ConfigError,
    DegeneratePrototypeError,
    EmptyServerDataError,
    MissingClassError,
    ZeroNormError,
)
from .numeric import l2_normalize, sgd_step


@dataclass
class ClientPrototypeSet:
    """Mean feature vector and sample count per class present on one client."""

    client_id: int
    prototypes: dict[int, np.ndarray]
    counts: dict[int, int]

    def __post_init__(self):
        if set(self.prototypes) != set(self.counts):
            raise ValueError("prototype and count keys differ")
        for c, n in self.counts.items():
            if n < 1:
                raise ValueError(f"class {c} has sample count {n}")
            if not np.all(np.isfinite(self.prototypes[c])):
                raise ValueError(f"class {c} prototype is not finite")

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def items(self):
        for c in self.classes:
            yield c, self.prototypes[c]


@dataclass(frozen=True)
class OrLossConfig:
    lambda_s: float = 1.0
    gamma: float = 10.0
    batch_size: int = 32
    epochs: int = 1
    lr: float = 0.01

    def __post_init__(self):
        if self.lambda_s < 0 or self.gamma < 0:
            raise ConfigError("lambda_s and gamma must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("server batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("server epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("server lr must be non-negative")


@dataclass
class GlobalPrototypeBank:
    """``params`` is ``[embeddings (C,K), W1 (K,K), b1 (K,), W2 (K,K), b2 (K,)]``."""

    params: list[np.ndarray]
    version: int = 0

    @classmethod
    def initialize(cls, n_classes: int, dim: int, rng: np.random.Generator) -> "GlobalPrototypeBank":
        # Identity weights; the output bias removes the expected ReLU mean
        # (sigma / sqrt(2 pi)) so untrained prototypes stay near-orthogonal
        # instead of sharing a positive common component.
        emb = rng.standard_normal((n_classes, dim)) / np.sqrt(dim)
        relu_mean = 1.0 / np.sqrt(2.0 * np.pi * dim)
        eye = np.eye(dim)
        return cls([emb, eye.copy(), np.zeros(dim), eye.copy(), np.full(dim, -relu_mean)])

    @property
    def embeddings(self) -> np.ndarray:
        return self.params[0]

    @property
    def n_classes(self) -> int:
        return self.params[0].shape[0]

    @property
    def dim(self) -> int:
        return self.params[0].shape[1]

    def copy(self) -> "GlobalPrototypeBank":
        return GlobalPrototypeBank([p.copy() for p in self.params], self.version)

    def bump(self) -> None:
        self.version += 1

    def _forward(self):
        E, W1, b1, W2, b2 = self.params
        Z = E @ W1.T + b1
        H = np.maximum(Z, 0.0)
        return Z, H, H @ W2.T + b2

    def forward_matrix(self) -> np.ndarray:
        return self._forward()[2]

    def backward(self, grad_out: np.ndarray) -> list[np.ndarray]:
        E, W1, _, W2, _ = self.params
        Z, H, _ = self._forward()
        dW2 = grad_out.T @ H
        db2 = grad_out.sum(axis=0)
        dZ = (grad_out @ W2) * (Z > 0.0)
        dW1 = dZ.T @ E
        db1 = dZ.sum(axis=0)
        dE = dZ @ W1
        return [dE, dW1, db1, dW2, db2]


def bank_forward(bank: GlobalPrototypeBank) -> dict[int, np.ndarray]:
    out = bank.forward_matrix()
    return {c: out[c] for c in range(bank.n_classes)}


def publish(bank: GlobalPrototypeBank) -> dict[int, np.ndarray]:
    """Unit-norm prototypes as broadcast to clients."""
    out = bank.forward_matrix()
    if np.any(np.linalg.norm(out, axis=1) == 0.0):
        raise DegeneratePrototypeError("a global prototype collapsed to the zero vector")
    unit = l2_normalize(out)
    return {c: unit[c] for c in range(bank.n_classes)}


def _batch_arrays(batch):
    labels = np.array([c for c, _ in batch], dtype=np.int64)
    A = np.array([np.asarray(v, dtype=np.float64) for _, v in batch])
    return labels, A


def _proto_matrix(protos, n_classes):
    missing = [c for c in range(n_classes) if c not in protos]
    if missing:
        raise MissingClassError(f"no global prototype for classes {missing}")
    return np.array([protos[c] for c in range(n_classes)], dtype=np.float64)


def intra_similarity(batch, protos) -> float:
    """Mean cosine between each batch prototype and its own class prototype."""
    if not batch:
        raise ValueError("empty batch")
    for c, _ in batch:
        if c not in protos:
            raise MissingClassError(f"no global prototype for class {c}")
    labels, A = _batch_arrays(batch)
    P = np.array([protos[c] for c in labels], dtype=np.float64)
    cos = np.einsum("ij,ij->i", l2_normalize(A), l2_normalize(P))
    return float(cos.sum() / len(batch))


def inter_similarity(batch, protos, n_classes: int) -> float:
    """Mean absolute cosine to every other class prototype, normalized by
    ``len(batch) * (C - 1)``."""
    if n_classes < 2:
        raise ConfigError("inter-class similarity needs at least two classes")
    if not batch:
        raise ValueError("empty batch")
    labels, A = _batch_arrays(batch)
    S = kernels.cosine_matrix(A, _proto_matrix(protos, n_classes))
    S = np.abs(S)
    S[np.arange(len(labels)), labels] = 0.0
    return float(S.sum() / (len(labels) * (n_classes - 1)))


def or_loss_and_grads(batch, bank: GlobalPrototypeBank, cfg: OrLossConfig):
    """Loss ``lambda_s * (1 - s) + gamma * d`` on one batch with gradients for
    every bank parameter. Returns ``(loss, grads, s, d)``."""
    if not batch:
        raise ValueError("empty batch")
    labels, A = _batch_arrays(batch)
    if np.any(labels < 0) or np.any(labels >= bank.n_classes):
        raise MissingClassError("batch class outside the bank")
    if bank.n_classes < 2:
        raise ConfigError("need at least two classes")
    P = bank.forward_matrix()
    loss, s, d, grad_P = kernels.or_loss_grad(A, labels, P, cfg.lambda_s, cfg.gamma)
    return loss, bank.backward(grad_P), s, d


@dataclass
class ServerTrace:
    losses: list[float] = field(default_factory=list)
    s: list[float] = field(default_factory=list)
    d: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    batch_sizes: list[int] = field(default_factory=list)

    def extend(self, other: "ServerTrace") -> None:
        self.losses += other.losses
        self.s += other.s
        self.d += other.d
        self.grad_norms += other.grad_norms
        self.batch_sizes += other.batch_sizes


def flatten_sets(sets) -> list[tuple[int, np.ndarray]]:
    return [(c, v) for ps in sets for c, v in ps.items()]


def train_global_prototypes(bank: GlobalPrototypeBank, sets, cfg: OrLossConfig,
                            rng: np.random.Generator):
    """SGD on the bank over ``cfg.epochs`` shuffled passes of the uploaded
    client prototypes. The bank is updated in place and returned with a trace."""
    pairs = flatten_sets(sets)
    if not pairs:
        raise EmptyServerDataError("no client prototypes to train on")
    trace = ServerTrace()
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(pairs), cfg.batch_size):
            batch = [pairs[i] for i in order[start:start + cfg.batch_size]]
            loss, grads, s, d = or_loss_and_grads(batch, bank, cfg)
            trace.losses.append(loss)
            trace.s.append(s)
            trace.d.append(d)
            trace.grad_norms.append(float(np.sqrt(sum(np.vdot(g, g) for g in grads))))
            trace.batch_sizes.append(len(batch))
            sgd_step(bank, grads, cfg.lr)
    return bank, trace


def weighted_average_raw(sets) -> dict[int, np.ndarray]:
    """Count-weighted mean of client prototypes per class, before normalization.

    Clients are reduced in client-id order so the result does not depend on the
    order of ``sets``.
    """
    sums: dict[int, np.ndarray] = {}
    totals: dict[int, int] = {}
    for ps in sorted(sets, key=lambda p: p.client_id):
        for c, v in ps.items():
            n = ps.counts[c]
            weighted = n * np.asarray(v, dtype=np.float64)
            sums[c] = sums[c] + weighted if c in sums else weighted
            totals[c] = totals.get(c, 0) + n
    return {c: sums[c] / totals[c] for c in sorted(sums)}


def weighted_average_aggregate(sets) -> dict[int, np.ndarray]:
    """Unit-normalized :func:`weighted_average_raw`. Classes that no client
    reported are left out."""
    out = {}
    for c, mean in weighted_average_raw(sets).items():
        try:
            out[c] = l2_normalize(mean)
        except ZeroNormError as exc:
            raise DegeneratePrototypeError(f"averaged prototype of class {c} is zero") from exc
    return out
