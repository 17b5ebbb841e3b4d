"""Cosine-geometry kernels behind the server and client losses.

Two interchangeable backends implement the same three functions: a compiled
Cython module (``_geometry``) and a numpy reference (``_reference``). The
compiled one is picked at import when it was built; :func:`use_backend` switches
explicitly, e.g. for benchmarks or cross-checks.

The public wrappers here validate shapes and norms, then dispatch.
"""
from __future__ import annotations

import numpy as np

from ..errors import DegeneratePrototypeError, ShapeError, ZeroNormError
from . import _reference

try:
    from . import _geometry as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _reference}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _reference


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend() -> str:
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def use_backend(name: str) -> str:
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    prev = backend()
    _active = _BACKENDS[name]
    return prev


def _matrix(x, name):
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _row_norms_positive(a, err, what):
    if a.shape[0] and np.any(np.einsum("ij,ij->i", a, a) == 0.0):
        raise err(f"zero-norm row in {what}")


def cosine_matrix(A, B) -> np.ndarray:
    A = _matrix(A, "A")
    B = _matrix(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"width mismatch {A.shape[1]} vs {B.shape[1]}")
    _row_norms_positive(A, ZeroNormError, "A")
    _row_norms_positive(B, ZeroNormError, "B")
    return _active.cosine_matrix(A, B)


def or_loss_grad(A, labels, P, lam_s: float, gamma: float):
    """Orthogonality-regularized prototype loss on one mini-batch.

    ``A`` holds client prototypes (rows, constants), ``labels`` their classes,
    ``P`` the raw (unnormalized) global prototypes, one row per class. Returns
    ``(loss, s, d, dloss/dP)``.
    """
    A = _matrix(A, "A")
    P = _matrix(P, "P")
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if A.shape[0] == 0:
        raise ShapeError("empty prototype batch")
    if labels.shape != (A.shape[0],) or A.shape[1] != P.shape[1]:
        raise ShapeError("batch, labels and prototypes are not congruent")
    if P.shape[0] < 2:
        raise ShapeError("need at least two classes")
    _row_norms_positive(A, ZeroNormError, "client prototypes")
    _row_norms_positive(P, DegeneratePrototypeError, "global prototypes")
    return _active.or_loss_grad(A, labels, P, float(lam_s), float(gamma))


def alignment_grad(R, P, mask=None):
    """Per-row ``1 - cos(r, p)`` against unit targets ``P`` and its gradient in
    ``R``. Rows where ``mask`` is False contribute zero loss and gradient."""
    R = _matrix(R, "R")
    P = _matrix(P, "P")
    if R.shape != P.shape:
        raise ShapeError(f"features {R.shape} vs targets {P.shape}")
    mask = np.ones(R.shape[0], dtype=bool) if mask is None else np.ascontiguousarray(mask, dtype=bool)
    if mask.shape != (R.shape[0],):
        raise ShapeError("mask length differs from batch")
    if np.any(np.einsum("ij,ij->i", R, R)[mask] == 0.0):
        raise ZeroNormError("zero-norm feature vector")
    return _active.alignment_grad(R, P, mask.view(np.uint8))
