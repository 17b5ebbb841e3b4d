"""Empirical checks of the convergence analysis plus report writers.

Constants are estimated from the running system: a smoothness lower bound from
sampled parameter pairs, mini-batch gradient variance, and the largest server
gradient norm. The per-round descent inequality and the learning-rate bound are
evaluated with those estimates and reported as pass ratios.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .client import ClientState, batch_objective, embed
from .errors import ConfigError, EmptyTraceError, MissingTraceError
from .federation import ExperimentReport, ProbeData, RoundRecord
from .numeric import softmax_cross_entropy
from .prototypes import ServerTrace, flatten_sets


@dataclass
class TheoryEstimates:
    L1: float
    sigma2: float
    G: float
    epsilon: float = 1.0
    n_pairs: int = 0
    n_draws: int = 0
    n_server_grads: int = 0

    def __post_init__(self):
        for name in ("L1", "sigma2", "G"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} estimate must be finite and >= 0, got {v}")


@dataclass
class BoundReport:
    rounds: list[int]
    lhs: list[float]
    rhs: list[float]
    residuals: list[float]
    eta: float
    eta_max: float
    lambda_c_max: float
    lambda_c: float

    @property
    def eta_valid(self) -> bool:
        return self.eta_max > 0 and self.eta < self.eta_max

    @property
    def pass_ratio(self) -> float:
        if not self.residuals:
            return float("nan")
        return float(np.mean([r >= 0 for r in self.residuals]))


# ----------------------------------------------------------------------------
# flat-parameter helpers
# ----------------------------------------------------------------------------

def _flat(tensors) -> np.ndarray:
    return np.concatenate([t.ravel() for t in tensors])


def _assign(tensors, flat) -> None:
    pos = 0
    for t in tensors:
        t[...] = flat[pos:pos + t.size].reshape(t.shape)
        pos += t.size


def client_grad_fn(state: ClientState, published) -> Callable[[np.ndarray], np.ndarray]:
    """Mean local-objective gradient over the given training indices."""
    def grad(idx):
        _, _, _, g, _ = batch_objective(state.model, state.x_train[idx], state.y_train[idx],
                                        published, state.lambda_c)
        return g.flat()
    return grad


# ----------------------------------------------------------------------------
# constant estimators
# ----------------------------------------------------------------------------

def gradient_variance(grad_fn, n: int, batch_size: int, n_draws: int, rng: np.random.Generator) -> float:
    """Mean squared distance between mini-batch and full-data gradients."""
    if n_draws < 2:
        raise ConfigError("n_draws must be >= 2")
    if batch_size >= n:
        return 0.0
    full = grad_fn(np.arange(n))
    acc = 0.0
    for _ in range(n_draws):
        idx = np.sort(rng.choice(n, size=batch_size, replace=False))
        diff = grad_fn(idx) - full
        acc += float(diff @ diff)
    return acc / n_draws


def estimate_gradient_variance(state: ClientState, batch_size: int, n_draws: int,
                               rng: np.random.Generator, published=None) -> float:
    return gradient_variance(client_grad_fn(state, published), state.n_train, batch_size, n_draws, rng)


def smoothness(grad_at: Callable[[np.ndarray], np.ndarray], center: np.ndarray, n_pairs: int,
               radius: float, rng: np.random.Generator, running: bool = False):
    """Largest ``|grad(w1) - grad(w2)| / |w1 - w2|`` over pairs drawn uniformly
    from the ball of ``radius`` around ``center``. This is a lower bound on the
    true Lipschitz constant. With ``running=True`` the running maxima are
    returned instead."""
    if not radius > 0:
        raise ConfigError("radius must be positive")
    dim = center.size
    best, history = 0.0, []
    for _ in range(n_pairs):
        pts = []
        for _ in range(2):
            u = rng.standard_normal(dim)
            u *= radius * rng.random() ** (1.0 / dim) / np.linalg.norm(u)
            pts.append(center + u)
        gap = np.linalg.norm(pts[0] - pts[1])
        if gap > 0:
            best = max(best, float(np.linalg.norm(grad_at(pts[0]) - grad_at(pts[1])) / gap))
        history.append(best)
    return history if running else best


def estimate_smoothness(state: ClientState, n_pairs: int, radius: float,
                        rng: np.random.Generator, published=None) -> float:
    params = state.model.params
    center = _flat(params)
    full = client_grad_fn(state, published)
    idx = np.arange(state.n_train)

    def grad_at(w):
        _assign(params, w)
        return full(idx)

    try:
        return smoothness(grad_at, center, n_pairs, radius, rng)
    finally:
        _assign(params, center)


def estimate_server_grad_bound(trace) -> float:
    norms = trace.grad_norms if isinstance(trace, ServerTrace) else list(trace)
    if not norms:
        raise EmptyTraceError("no server gradient norms recorded")
    return float(max(norms))


def estimate_constants(report: ExperimentReport, n_pairs: int = 20, radius: float = 1e-2,
                       n_draws: int = 20, seed: int = 0) -> TheoryEstimates:
    """Constants for the probe client at the end of an experiment."""
    world = report.world
    if world is None:
        raise MissingTraceError("report was produced without keep_world")
    cfg = report.config
    state = world.clients[cfg.probe_client]
    rng = np.random.default_rng(seed)
    L1 = estimate_smoothness(state, n_pairs, radius, rng, world.published)
    sigma2 = estimate_gradient_variance(state, cfg.batch_size, n_draws, rng, world.published)
    norms = [g for r in report.records if r.server is not None for g in r.server.grad_norms]
    G = estimate_server_grad_bound(norms) if norms else 0.0
    return TheoryEstimates(L1, sigma2, G, cfg.epsilon, n_pairs, n_draws, len(norms))


# ----------------------------------------------------------------------------
# bounds
# ----------------------------------------------------------------------------

def theorem2_lr_bound(epsilon: float, lambda_c: float, G: float, L1: float, E: int, sigma2: float):
    """Largest admissible learning rate and lambda_c for target ``epsilon``.

    ``eta_max = 2 (eps - lambda_c G) / (L1 (eps + E sigma2))`` and
    ``lambda_c_max = eps / G`` (infinite when G = 0). A non-positive eta_max
    means no learning rate satisfies the bound."""
    if not (epsilon > 0 and L1 > 0 and G >= 0 and sigma2 >= 0 and E >= 1 and lambda_c >= 0):
        raise ConfigError("need epsilon > 0, L1 > 0, G >= 0, sigma2 >= 0, E >= 1, lambda_c >= 0")
    eta_max = 2.0 * (epsilon - lambda_c * G) / (L1 * (epsilon + E * sigma2))
    lambda_c_max = epsilon / G if G > 0 else math.inf
    return eta_max, lambda_c_max


def descent_rhs(probe: ProbeData, eta: float, est: TheoryEstimates, lambda_c: float) -> float:
    steps = probe.steps
    return (probe.start_loss
            - (eta - est.L1 * eta ** 2 / 2.0) * probe.grad_sq_sum
            + eta ** 2 * est.L1 * steps * est.sigma2 / 2.0
            + lambda_c * eta * est.G)


def theorem1_residual(record: RoundRecord, eta: float, est: TheoryEstimates, lambda_c: float) -> float:
    """Right-hand side of the one-round descent bound minus the observed
    end-of-round loss; non-negative means the bound held."""
    probe = record.probe if isinstance(record, RoundRecord) else record
    if probe is None:
        raise MissingTraceError(f"round {getattr(record, 'round', '?')} has no probe data")
    return descent_rhs(probe, eta, est, lambda_c) - probe.end_loss


def bound_report(records: Sequence[RoundRecord], eta: float, est: TheoryEstimates,
                 lambda_c: float, local_steps: Optional[int] = None) -> BoundReport:
    rows = [r for r in records if r.probe is not None]
    if local_steps is None:
        local_steps = rows[0].probe.steps if rows else 1
    try:
        eta_max, lc_max = theorem2_lr_bound(est.epsilon, lambda_c, est.G, max(est.L1, 1e-300),
                                            max(local_steps, 1), est.sigma2)
    except ConfigError:
        eta_max, lc_max = float("nan"), float("nan")
    return BoundReport(
        rounds=[r.round for r in rows],
        lhs=[r.probe.end_loss for r in rows],
        rhs=[descent_rhs(r.probe, eta, est, lambda_c) for r in rows],
        residuals=[theorem1_residual(r, eta, est, lambda_c) for r in rows],
        eta=eta, eta_max=eta_max, lambda_c_max=lc_max, lambda_c=lambda_c,
    )


def windowed_trend(values: Sequence[float], window: int = 5):
    """Means of consecutive non-overlapping windows and the fraction of
    adjacent window pairs that do not increase."""
    values = list(values)
    means = [float(np.mean(values[i:i + window])) for i in range(0, len(values) - window + 1, window)]
    if len(means) < 2:
        return means, float("nan")
    ok = [b <= a for a, b in zip(means[:-1], means[1:])]
    return means, float(np.mean(ok))


# ----------------------------------------------------------------------------
# convex fixture with a known smoothness constant
# ----------------------------------------------------------------------------

def softmax_regression_L1(X: np.ndarray) -> float:
    """Upper bound on the Hessian norm of mean softmax cross-entropy in
    ``(W, b)``: half the top eigenvalue of the bias-augmented second moment."""
    Xa = np.hstack([X, np.ones((X.shape[0], 1))])
    return 0.5 * float(np.linalg.eigvalsh(Xa.T @ Xa / X.shape[0])[-1])


def convex_probe_records(X: np.ndarray, y: np.ndarray, n_classes: int, eta: float, rounds: int,
                         steps_per_round: int, seed: int = 0) -> list[RoundRecord]:
    """Full-batch gradient descent on softmax regression, packaged as
    round records with probe data (no prototype coupling, noise-free).

    Separable labels keep the loss decreasing without reaching a minimizer;
    near an exact optimum the per-round loss change drops to rounding level
    and the residual is dominated by float noise."""
    rng = np.random.default_rng(seed)
    n, D = X.shape
    W = rng.standard_normal((n_classes, D)) * 0.1
    b = np.zeros(n_classes)

    def loss_grad():
        losses, g = softmax_cross_entropy(X @ W.T + b, y)
        g = g / n
        return float(losses.mean()), g.T @ X, g.sum(axis=0)

    records = []
    for t in range(rounds):
        start, _, _ = loss_grad()
        gsq = 0.0
        for _ in range(steps_per_round):
            _, gW, gb = loss_grad()
            gsq += float(np.vdot(gW, gW) + gb @ gb)
            W -= eta * gW
            b -= eta * gb
        end, _, _ = loss_grad()
        records.append(RoundRecord(
            round=t + 1, sampled=[0], train_loss={0: end}, grad_sq_sum={0: gsq},
            steps={0: steps_per_round}, skipped_alignment={0: 0}, test_acc=[0.0],
            global_objective=end, server=None,
            probe=ProbeData(0, start, end, gsq, steps_per_round)))
    return records


# ----------------------------------------------------------------------------
# geometry
# ----------------------------------------------------------------------------

@dataclass
class GeometryReport:
    s_bar: float
    d_bar: float
    classes: list[int]
    abs_cos: np.ndarray

    @property
    def off_diagonal_mean(self) -> float:
        m = len(self.classes)
        if m < 2:
            return float("nan")
        return float((self.abs_cos.sum() - np.trace(self.abs_cos)) / (m * (m - 1)))


def geometry_report(published, sets) -> GeometryReport:
    """Intra/inter similarity of all client prototypes against the published
    set, plus the published |cos| matrix. Client prototypes of classes that
    were not published are skipped."""
    classes = sorted(published)
    if not classes:
        raise ValueError("nothing published")
    pos = {c: i for i, c in enumerate(classes)}
    P = np.array([published[c] for c in classes], dtype=np.float64)
    pairs = [(c, v) for c, v in flatten_sets(sets) if c in pos]
    if not pairs:
        raise ValueError("no client prototype matches a published class")
    A = np.array([v for _, v in pairs], dtype=np.float64)
    own = np.array([pos[c] for c, _ in pairs])
    S = kernels.cosine_matrix(A, P)
    rows = np.arange(len(pairs))
    s_bar = float(S[rows, own].sum() / len(pairs))
    absS = np.abs(S)
    absS[rows, own] = 0.0
    d_bar = float(absS.sum() / (len(pairs) * (len(classes) - 1))) if len(classes) > 1 else 0.0
    return GeometryReport(s_bar, d_bar, classes, np.abs(kernels.cosine_matrix(P, P)))


# ----------------------------------------------------------------------------
# writers
# ----------------------------------------------------------------------------

REPORT_COLUMNS = [
    "round", "n_sampled", "sampled", "mean_test_acc", "mean_train_loss", "global_objective",
    "mean_grad_sq_sum", "skipped_alignment", "server_batches", "server_loss_first", "server_loss_last",
    "server_s_mean", "server_d_mean", "server_grad_max", "probe_client", "probe_start_loss",
    "probe_end_loss", "probe_grad_sq_sum", "probe_steps", "manifest",
]


def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def report_rows(report: ExperimentReport, manifest_hash: str = "") -> list[dict]:
    rows = []
    for r in report.records:
        srv, pr = r.server, r.probe
        rows.append({
            "round": r.round,
            "n_sampled": len(r.sampled),
            "sampled": ";".join(str(k) for k in r.sampled),
            "mean_test_acc": r.mean_test_acc,
            "mean_train_loss": r.mean_train_loss,
            "global_objective": r.global_objective,
            "mean_grad_sq_sum": r.mean_grad_sq_sum,
            "skipped_alignment": int(sum(r.skipped_alignment.values())),
            "server_batches": len(srv.losses) if srv else 0,
            "server_loss_first": srv.losses[0] if srv else None,
            "server_loss_last": srv.losses[-1] if srv else None,
            "server_s_mean": float(np.mean(srv.s)) if srv else None,
            "server_d_mean": float(np.mean(srv.d)) if srv else None,
            "server_grad_max": max(srv.grad_norms) if srv else None,
            "probe_client": pr.client_id if pr else None,
            "probe_start_loss": pr.start_loss if pr else None,
            "probe_end_loss": pr.end_loss if pr else None,
            "probe_grad_sq_sum": pr.grad_sq_sum if pr else None,
            "probe_steps": pr.steps if pr else None,
            "manifest": manifest_hash,
        })
    return rows


def write_report(report: ExperimentReport, path, fmt: str = "csv", manifest_hash: str = "") -> Path:
    """One line per round; floats carry 17 significant digits, missing values
    are empty (CSV) or null (JSONL)."""
    path = Path(path)
    rows = report_rows(report, manifest_hash)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow(["" if row[c] is None else _fmt(row[c]) for c in REPORT_COLUMNS])
        text = buf.getvalue()
    elif fmt == "jsonl":
        lines = []
        for row in rows:
            # json emits the shortest repr, which round-trips float64 exactly
            lines.append(json.dumps({c: row[c] for c in REPORT_COLUMNS}, allow_nan=True))
        text = "".join(line + "\n" for line in lines)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text, encoding="utf-8")
    return path


def read_report(path, fmt: str = "csv") -> list[dict]:
    """Parse a report written by :func:`write_report` back into typed rows."""
    text = Path(path).read_text(encoding="utf-8")
    if fmt == "jsonl":
        return [json.loads(line) for line in text.splitlines() if line]
    ints = {"round", "n_sampled", "skipped_alignment", "server_batches", "probe_client", "probe_steps"}
    strs = {"sampled", "manifest"}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        typed = {}
        for c in REPORT_COLUMNS:
            v = row[c]
            if c in strs:
                typed[c] = v
            elif v == "":
                typed[c] = None
            else:
                typed[c] = int(v) if c in ints else float(v)
        out.append(typed)
    return out


def dump_embeddings(state: ClientState, n_per_class: int, path, published=None) -> int:
    """Write up to ``n_per_class`` test embeddings per class followed by the
    published prototypes. Returns the number of data rows written."""
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    K = state.model.spec.feature_dim
    picks = []
    for c in sorted(int(c) for c in np.unique(state.y_test)):
        picks.extend(np.flatnonzero(state.y_test == c)[:n_per_class].tolist())
    feats = embed(state.model, state.x_test[picks]) if picks else np.zeros((0, K))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "client_id", "class"] + [f"f{i}" for i in range(K)])
    for i, f in zip(picks, feats):
        w.writerow(["sample", state.client_id, int(state.y_test[i])] + [_fmt(float(v)) for v in f])
    published = published or {}
    for c in sorted(published):
        w.writerow(["proto", state.client_id, c] + [_fmt(float(v)) for v in published[c]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")
    return len(picks) + len(published)
