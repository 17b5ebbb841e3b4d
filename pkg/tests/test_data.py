import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from fedorgp.data import (
    Dataset,
    generate_synthetic,
    label_entropy,
    largest_remainder,
    load_idx,
    partition_dirichlet,
    partition_pathological,
    split_train_test,
    write_dataset_idx,
    write_idx,
)
from fedorgp.errors import ConfigError, DatasetError, FormatError, IdxIOError


def balanced(C=10, n=40, D=3, seed=0):
    return generate_synthetic(C, D, n, 0.3, seed)


def assert_disjoint_cover(parts, N):
    allidx = np.concatenate(parts)
    assert len(allidx) == N
    assert np.array_equal(np.sort(allidx), np.arange(N))


# synthetic -------------------------------------------------------------------

def test_synthetic_counts_determinism_and_tiny_spread():
    ds = generate_synthetic(4, 6, 25, 1e-12, seed=3)
    assert ds.n_samples == 100 and ds.n_classes == 4 and ds.dim == 6
    for c in range(4):
        rows = ds.features[ds.labels == c]
        assert np.max(np.abs(rows - rows[0])) <= 1e-9
        assert np.linalg.norm(rows[0]) == pytest.approx(1.0, abs=1e-9)
    again = generate_synthetic(4, 6, 25, 1e-12, seed=3)
    assert ds.features.tobytes() == again.features.tobytes()


def test_synthetic_errors():
    with pytest.raises(ConfigError):
        generate_synthetic(1, 4, 10, 0.1, 0)
    with pytest.raises(ConfigError):
        generate_synthetic(3, 4, 10, 0.0, 0)


def test_dataset_requires_every_class():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]))


# IDX ---------------------------------------------------------------------------

def _raw_idx(tmp_path, images, labels, name="a"):
    ip, lp = tmp_path / f"{name}-images", tmp_path / f"{name}-labels"
    write_idx(ip, lp, images, labels)
    return ip, lp


def test_idx_endpoint_bytes(tmp_path):
    ip, lp = _raw_idx(tmp_path, np.array([[[0, 255], [0, 255]]], dtype=np.uint8), np.array([0]))
    # a single-class file is legal: the class set is {0}
    ds = load_idx(ip, lp)
    np.testing.assert_array_equal(ds.features, [[0.0, 1.0, 0.0, 1.0]])


def test_idx_header_is_big_endian(tmp_path):
    ip, _ = _raw_idx(tmp_path, np.zeros((2, 3, 4), dtype=np.uint8), np.array([0, 1]))
    head = ip.read_bytes()[:16]
    assert struct.unpack(">IIII", head) == (0x803, 2, 3, 4)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (12, 4, 5), dtype=np.uint8)
    labels = np.arange(12) % 3
    ip, lp = _raw_idx(tmp_path, imgs, labels)
    ds = load_idx(ip, lp)
    np.testing.assert_array_equal(np.rint(ds.features * 255).astype(np.uint8).reshape(12, 4, 5), imgs)
    np.testing.assert_array_equal(ds.labels, labels)
    gz_i, gz_l = tmp_path / "g-images.gz", tmp_path / "g-labels.gz"
    write_idx(gz_i, gz_l, imgs, labels)
    assert load_idx(gz_i, gz_l).features.tobytes() == ds.features.tobytes()


def test_dataset_idx_export(tmp_path):
    ds = generate_synthetic(3, 8, 5, 0.2, 1)
    write_dataset_idx(tmp_path / "i", tmp_path / "l", ds, rows=2)
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert back.features.shape == (15, 8)
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_idx_errors(tmp_path):
    ip, lp = _raw_idx(tmp_path, np.zeros((3, 2, 2), dtype=np.uint8), np.array([0, 1, 0]))
    _, lp2 = _raw_idx(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), np.array([0, 1]), name="b")
    with pytest.raises(FormatError):
        load_idx(ip, lp2)
    with pytest.raises(FormatError):
        load_idx(lp, lp)
    trunc = tmp_path / "trunc"
    trunc.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(IdxIOError):
        load_idx(trunc, lp)
    extra = tmp_path / "extra"
    extra.write_bytes(ip.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_idx(extra, lp)
    with pytest.raises(OSError):
        load_idx(tmp_path / "missing", lp)


@settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.binary(max_size=40), st.sampled_from(["images", "labels"]))
def test_idx_fuzz_rejects_cleanly(tmp_path, blob, which):
    good_i, good_l = _raw_idx(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), np.array([0, 1]), name="good")
    bad = tmp_path / "fuzz"
    bad.write_bytes(blob)
    args = (bad, good_l) if which == "images" else (good_i, bad)
    try:
        load_idx(*args)
    except (FormatError, IdxIOError, DatasetError):
        pass


# partitioning ---------------------------------------------------------------------

@pytest.mark.parametrize("M,cpc", [(5, 2), (20, 2), (3, 4), (10, 1), (1, 10)])
def test_pathological_cardinality_and_cover(M, cpc):
    ds = balanced()
    plan = partition_pathological(ds, M, cpc, seed=4)
    assert_disjoint_cover(plan.assigned, ds.n_samples)
    for idx in plan.assigned:
        assert len(np.unique(ds.labels[idx])) == cpc


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(1, 12), st.data(), st.integers(0, 2**31))
def test_pathological_property(C, M, data, seed):
    cpc = data.draw(st.integers(1, C))
    ds = generate_synthetic(C, 2, 30, 0.1, 0)
    if M * cpc < C:
        with pytest.raises(ConfigError):
            partition_pathological(ds, M, cpc, seed)
        return
    plan = partition_pathological(ds, M, cpc, seed)
    assert_disjoint_cover(plan.assigned, ds.n_samples)
    assert all(len(np.unique(ds.labels[i])) == cpc for i in plan.assigned)


def test_pathological_infeasible():
    with pytest.raises(ConfigError):
        partition_pathological(balanced(), 2, 2, 0)
    with pytest.raises(ConfigError):
        partition_pathological(balanced(), 5, 11, 0)


def test_pathological_shards_are_unbalanced():
    plan = partition_pathological(balanced(n=200), 20, 2, seed=0)
    sizes = plan.sizes()
    assert max(sizes) > 1.5 * min(sizes)


def test_largest_remainder():
    np.testing.assert_array_equal(largest_remainder(np.array([0.5, 0.5]), 3), [2, 1])
    p = np.random.default_rng(0).dirichlet(np.ones(7))
    assert largest_remainder(p, 101).sum() == 101


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.floats(0.01, 100), st.integers(0, 2**31))
def test_dirichlet_conservation(M, alpha, seed):
    ds = balanced(C=4, n=25)
    plan = partition_dirichlet(ds, M, alpha, seed)
    assert_disjoint_cover(plan.assigned, ds.n_samples)


def test_dirichlet_large_alpha_near_uniform():
    ds = balanced(C=10, n=400)
    plan = partition_dirichlet(ds, 4, 1e6, seed=1)
    for idx in plan.assigned:
        hist = np.bincount(ds.labels[idx], minlength=10)
        np.testing.assert_allclose(hist, 100, rtol=0.1)


def test_dirichlet_deterministic():
    ds = balanced()
    a, b = partition_dirichlet(ds, 6, 0.5, 9), partition_dirichlet(ds, 6, 0.5, 9)
    assert all(np.array_equal(x, y) for x, y in zip(a.assigned, b.assigned))


def test_dirichlet_entropy_monotone_in_alpha():
    ds = balanced(C=10, n=100)
    skewed, flat = [], []
    for seed in range(20):
        for alpha, out in ((0.05, skewed), (10.0, flat)):
            plan = partition_dirichlet(ds, 10, alpha, seed)
            out.append(np.mean([label_entropy(ds.labels[i], 10) for i in plan.assigned]))
    assert np.mean(flat) > np.mean(skewed)
    assert all(f > s for f, s in zip(flat, skewed))


def test_dirichlet_min_samples():
    ds = balanced()
    plan = partition_dirichlet(ds, 8, 0.1, 0, min_samples=5)
    assert min(plan.sizes()) >= 5
    with pytest.raises(ConfigError):
        partition_dirichlet(ds, 8, 0.01, 0, min_samples=50, max_tries=3)
    with pytest.raises(ConfigError):
        partition_dirichlet(ds, 8, 0.0, 0)


# splitting ----------------------------------------------------------------------

def test_split_arithmetic():
    labels = np.zeros(8, dtype=int)
    from fedorgp.data import PartitionPlan
    plan = split_train_test(PartitionPlan([np.arange(8)]), labels, 0.75, 0)
    assert (len(plan.train[0]), len(plan.test[0])) == (6, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.floats(0.05, 5), st.integers(0, 2**31))
def test_split_properties(M, alpha, seed):
    ds = balanced(C=5, n=20)
    try:
        plan = partition_dirichlet(ds, M, alpha, seed, min_samples=4, max_tries=20)
    except ConfigError:
        assume(False)
    split = split_train_test(plan, ds.labels, 0.75, seed)
    for a, tr, te in zip(split.assigned, split.train, split.test):
        assert len(np.intersect1d(tr, te)) == 0
        assert np.array_equal(np.sort(np.concatenate([tr, te])), a)
        assert len(te) > 0
        assert set(ds.labels[te]) <= set(ds.labels[tr])
        moved = 0
        for c in np.unique(ds.labels[a]):
            m = int(np.sum(ds.labels[a] == c))
            want = m - int(np.floor(0.75 * m)) if m >= 2 else 0
            got = int(np.sum(ds.labels[te] == c))
            moved += got - want
            assert got - want in (0, 1)
        assert moved <= 1


def test_split_errors():
    from fedorgp.data import PartitionPlan
    with pytest.raises(ConfigError):
        split_train_test(PartitionPlan([np.array([0])]), np.array([0]), 0.75, 0)
    with pytest.raises(ConfigError):
        split_train_test(PartitionPlan([np.arange(4)]), np.zeros(4, dtype=int), 1.0, 0)


def test_label_entropy():
    assert label_entropy(np.array([0, 0, 0]), 3) == 0.0
    assert label_entropy(np.array([0, 1]), 2) == pytest.approx(np.log(2))
