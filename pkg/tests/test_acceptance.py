"""The nine acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""
import time

import numpy as np
import pytest

import oracles
from _fixtures import random_mlp, random_unit_protos
from conftest import ACCEPTANCE_LINES
from fedorgp import cli
from fedorgp import diagnostics as dg
from fedorgp.client import ClientState, batch_objective, evaluate
from fedorgp.data import generate_synthetic, label_entropy, partition_dirichlet, partition_pathological, split_train_test
from fedorgp.federation import ExperimentConfig, run_experiment
from fedorgp.numeric import backward, finite_difference_check, forward, softmax_cross_entropy
from fedorgp.prototypes import (
    ClientPrototypeSet,
    GlobalPrototypeBank,
    OrLossConfig,
    inter_similarity,
    intra_similarity,
    or_loss_and_grads,
    weighted_average_raw,
)

SEEDS = (0, 1, 2)


def record(n, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


@pytest.fixture(scope="module")
def ablation():
    """Desk-scale benchmark: both strategies over three seeds."""
    t0 = time.perf_counter()
    runs = {s: {seed: run_experiment(ExperimentConfig(clients=8, rounds=30, seed=seed, strategy=s))
                for seed in SEEDS} for s in ("orgp", "weighted_average")}
    return runs, time.perf_counter() - t0


def test_c1_gradient_correctness():
    rng = np.random.default_rng(2024)
    worst = {"server": 0.0, "client": 0.0, "ce": 0.0}
    t0 = time.perf_counter()
    for _ in range(200):
        model, x, y = random_mlp(rng, max_k=16, max_c=5, max_d=20)
        C, K = model.spec.n_classes, model.spec.feature_dim
        # server loss over every bank parameter
        bank = GlobalPrototypeBank.initialize(C, K, rng)
        for p in bank.params[1:]:
            p += 0.1 * rng.standard_normal(p.shape)
        batch = [(int(rng.integers(0, C)), rng.standard_normal(K)) for _ in range(int(rng.integers(1, 8)))]
        cfg = OrLossConfig(float(rng.uniform(0.1, 2)), float(rng.uniform(0.1, 10)))
        _, g, _, _ = or_loss_and_grads(batch, bank, cfg)
        worst["server"] = max(worst["server"], finite_difference_check(
            lambda: or_loss_and_grads(batch, bank, cfg)[0], bank.params, g))
        # client objective, CE plus alignment
        pub = random_unit_protos(rng, C, K)
        lam = float(rng.uniform(0.1, 100))
        _, _, _, g, _ = batch_objective(model, x, y, pub, lam)
        worst["client"] = max(worst["client"], finite_difference_check(
            lambda: batch_objective(model, x, y, pub, lam, with_grad=False)[0], model, g))
        # CE alone through backward
        _, logits, cache = forward(model, x[0])
        _, gl = softmax_cross_entropy(logits, int(y[0]))
        worst["ce"] = max(worst["ce"], finite_difference_check(
            lambda: softmax_cross_entropy(forward(model, x[0])[1], int(y[0]))[0], model,
            backward(model, cache, gl)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed <= 60
    record(1, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + f" (<= 1e-4); {elapsed:.1f} s (<= 60 s)")


def test_c2_exact_optimum():
    rng = np.random.default_rng(0)
    C, K = 5, 8
    Q, _ = np.linalg.qr(rng.standard_normal((K, K)))
    E = Q[:C]
    # shift through the hidden layer so ReLU is inactive and F is the identity map
    bank = GlobalPrototypeBank([E.copy(), np.eye(K), np.full(K, 4.0), np.eye(K), np.full(K, -4.0)])
    batch = [(c, E[c] * s) for c in range(C) for s in (0.5, 2.0, 7.0)]
    loss, _, s, d = or_loss_and_grads(batch, bank, OrLossConfig(1.0, 10.0))
    ok = abs(loss) <= 1e-12 and abs(s - 1) <= 1e-12 and abs(d) <= 1e-12
    record(2, ok, f"L_OR={loss:.1e}, s={s:.15f}, d={d:.1e}")


def test_c3_oracle_equivalence():
    rng = np.random.default_rng(3)
    worst = {"s": 0.0, "d": 0.0, "wa": 0.0, "acc": 0.0}
    for _ in range(50):
        C, K = int(rng.integers(2, 6)), int(rng.integers(2, 12))
        protos = {c: rng.standard_normal(K) for c in range(C)}
        batch = [(int(rng.integers(0, C)), rng.standard_normal(K)) for _ in range(int(rng.integers(1, 30)))]
        worst["s"] = max(worst["s"], abs(intra_similarity(batch, protos) - oracles.intra(batch, protos)))
        worst["d"] = max(worst["d"], abs(inter_similarity(batch, protos, C) - oracles.inter(batch, protos, C)))

    for _ in range(50):
        C, K = int(rng.integers(2, 6)), int(rng.integers(2, 12))
        sets = []
        for k in range(int(rng.integers(1, 6))):
            cl = rng.choice(C, size=int(rng.integers(1, C + 1)), replace=False)
            sets.append(ClientPrototypeSet(k, {int(c): rng.standard_normal(K) for c in cl},
                                           {int(c): int(rng.integers(1, 100)) for c in cl}))
        got = weighted_average_raw(sets)
        want = oracles.weighted_average([(s.prototypes, s.counts) for s in sets])
        assert sorted(got) == sorted(want)
        worst["wa"] = max(worst["wa"], max(np.max(np.abs(got[c] - np.array(want[c]))) for c in got))

    for _ in range(50):
        model, _, _ = random_mlp(rng)
        n = int(rng.integers(1, 40))
        x = rng.standard_normal((n, model.spec.input_dim))
        y = rng.integers(0, model.spec.n_classes, n)
        state = ClientState(0, model, x, y, x, y)
        logits = forward(model, x)[1].tolist()
        worst["acc"] = max(worst["acc"], abs(evaluate(state) - oracles.accuracy(logits, y.tolist())))
    ok = max(worst.values()) <= 1e-12
    record(3, ok, "max |vectorized - loop| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (<= 1e-12)")


def test_c4_ablation(ablation):
    runs, elapsed = ablation
    best = {s: [runs[s][seed].best_accuracy for seed in SEEDS] for s in runs}
    gap = 100 * (np.mean(best["orgp"]) - np.mean(best["weighted_average"]))
    ok = gap >= 2.0 and elapsed <= 600
    record(4, ok, f"mean best acc ORGP {100 * np.mean(best['orgp']):.2f}% vs WA "
           f"{100 * np.mean(best['weighted_average']):.2f}%, gap {gap:.2f} pp (>= 2); {elapsed:.1f} s (<= 600 s)")


def test_c5_geometry(ablation):
    runs, _ = ablation
    off, intra = [], []
    for seed in SEEDS:
        w = runs["orgp"][seed].world
        g = dg.geometry_report(w.published, w.last_sets)
        off.append(g.off_diagonal_mean)
        intra.append(g.s_bar)
    ok = np.mean(off) <= 0.15 and np.mean(intra) >= 0.85
    record(5, ok, f"ORGP mean off-diagonal |cos| {np.mean(off):.3f} (<= 0.15), "
           f"mean intra s {np.mean(intra):.3f} (>= 0.85)")


def test_c6_theory(ablation):
    eta_max, _ = dg.theorem2_lr_bound(1.0, 0.5, 1.0, 1.0, 1, 1.0)
    hand_ok = eta_max == 0.5

    rng = np.random.default_rng(6)
    X = rng.standard_normal((120, 5))
    # separable labels: no finite minimizer, so gradients stay well above the
    # float noise floor and the check measures the inequality, not rounding
    y = np.argmax(X @ rng.standard_normal((5, 3)), axis=1)
    L1 = dg.softmax_regression_L1(X)
    E = 4
    bound, _ = dg.theorem2_lr_bound(1.0, 0.0, 0.0, L1, E, 0.0)
    convex = []
    for frac in (0.2, 0.5, 0.9, 0.99):
        recs = dg.convex_probe_records(X, y, 3, frac * bound, rounds=30, steps_per_round=E)
        convex.append(dg.bound_report(recs, frac * bound, dg.TheoryEstimates(L1, 0.0, 0.0), 0.0).pass_ratio)
    convex_ok = all(r == 1.0 for r in convex)

    runs, _ = ablation
    ratios = []
    for seed in SEEDS:
        rep = runs["orgp"][seed]
        est = dg.estimate_constants(rep, seed=seed)
        ratios.append(dg.bound_report(rep.records, rep.config.lr, est, rep.config.lambda_c).pass_ratio)
    empirical = float(np.mean(ratios))
    record(6, hand_ok and convex_ok,
           f"eta_max hand example {eta_max!r} (== 0.5); convex fixture residual >= 0 in "
           f"{100 * min(convex):.0f}% of rounds (== 100%); benchmark residual >= 0 in {100 * empirical:.0f}% "
           f"of rounds (target 90%, reported only)")


def test_c7_partitioners():
    ds = generate_synthetic(10, 4, 60, 0.3, 0)
    failures = []
    for seed in range(10):
        for M, cpc in ((5, 2), (20, 2), (10, 3), (1, 10), (4, 5)):
            plan = split_train_test(partition_pathological(ds, M, cpc, seed), ds.labels, 0.75, seed)
            cover = np.sort(np.concatenate(plan.assigned))
            if not np.array_equal(cover, np.arange(ds.n_samples)):
                failures.append(("pathological cover", M, cpc, seed))
            if any(len(np.unique(ds.labels[i])) != cpc for i in plan.assigned):
                failures.append(("cardinality", M, cpc, seed))
            if any(len(np.intersect1d(a, b)) or len(a) + len(b) != len(c)
                   for a, b, c in zip(plan.train, plan.test, plan.assigned)):
                failures.append(("split", M, cpc, seed))
        for M, alpha in ((5, 0.05), (20, 0.5), (10, 10.0)):
            plan = partition_dirichlet(ds, M, alpha, seed)
            if not np.array_equal(np.sort(np.concatenate(plan.assigned)), np.arange(ds.n_samples)):
                failures.append(("dirichlet cover", M, alpha, seed))
    ent = {a: [] for a in (0.05, 10.0)}
    for seed in range(20):
        for a in ent:
            plan = partition_dirichlet(ds, 10, a, seed)
            ent[a].append(np.mean([label_entropy(ds.labels[i], 10) for i in plan.assigned if len(i)]))
    if not np.mean(ent[10.0]) > np.mean(ent[0.05]):
        failures.append(("entropy", np.mean(ent[10.0]), np.mean(ent[0.05])))
    record(7, not failures, f"conservation and cardinality over 200 plans; mean entropy alpha=10 "
           f"{np.mean(ent[10.0]):.3f} > alpha=0.05 {np.mean(ent[0.05]):.3f}; {len(failures)} violations")


def test_c8_determinism(tmp_path):
    smoke = ["--set", "clients=3", "--set", "rounds=3", "--set", "n_classes=4", "--set", "n_per_class=40"]
    same = True
    for fmt in ("csv", "jsonl"):
        a, b = tmp_path / f"a_{fmt}", tmp_path / f"b_{fmt}"
        assert cli.main(["run", *smoke, "--format", fmt, "--out", str(a), "--dump-embeddings", "4"]) == 0
        assert cli.main(["run", "--manifest", str(a / "manifest.json"), "--format", fmt, "--out", str(b),
                         "--dump-embeddings", "4"]) == 0
        for f in a.iterdir():
            if f.name != "manifest.json":
                same &= f.read_bytes() == (b / f.name).read_bytes()
    record(8, same, "report.csv, report.jsonl and embedding dumps byte-identical on manifest rerun")


def test_c9_trend(ablation):
    runs, _ = ablation
    fracs = []
    for seed in SEEDS:
        sums = [r.mean_grad_sq_sum for r in runs["orgp"][seed].records]
        fracs.append(dg.windowed_trend(sums, 5)[1])
    ok = min(fracs) >= 0.8
    record(9, ok, "5-round windows of sum ||g||^2 non-increasing in "
           + ", ".join(f"{100 * f:.0f}%" for f in fracs) + " of window pairs per seed (>= 80%)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
