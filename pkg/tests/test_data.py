import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerpar.data import (ORIGINAL, AugmentPolicy, augment, augment_sample, batches, epoch_pool, gen_dataset,
                           load_csv, train_test_split)
from layerpar.tensor import SeededRng


def test_blobs_zero_noise_linearly_separable():
    ds = gen_dataset("blobs", 40, 2, 0.0, seed=3)
    # the two centres sit at (3, 0) and (-3, 0); the sign of x separates them
    pred = (ds.features[:, 0] < 0).astype(int)
    assert np.array_equal(pred, ds.labels)


def test_regeneration_identical():
    a = gen_dataset("rings", 50, 3, 0.1, seed=9)
    b = gen_dataset("rings", 50, 3, 0.1, seed=9)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_spirals_class_counts():
    ds = gen_dataset("spirals", 3000, 3, 0.05, seed=0)
    assert np.bincount(ds.labels).tolist() == [1000, 1000, 1000]


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["blobs", "spirals", "rings"]), st.integers(2, 7), st.integers(0, 60))
def test_classes_balanced(kind, C, extra):
    N = C + extra
    counts = np.bincount(gen_dataset(kind, N, C, 0.1, 1).labels, minlength=C)
    assert np.all(np.abs(counts - N / C) <= 1)


def test_invalid_sizes():
    with pytest.raises(ValueError):
        gen_dataset("blobs", 1, 2, 0.0, 0)
    with pytest.raises(ValueError):
        gen_dataset("blobs", 10, 1, 0.0, 0)
    with pytest.raises(ValueError):
        gen_dataset("moons", 10, 2, 0.0, 0)


def test_split_is_deterministic_and_disjoint():
    ds = gen_dataset("spirals", 100, 3, 0.05, 0)
    tr, te = train_test_split(ds, 4)
    tr2, _ = train_test_split(ds, 4)
    assert len(tr) == 80 and len(te) == 20
    assert np.array_equal(tr.features, tr2.features)
    rows = {tuple(r) for r in tr.features} | {tuple(r) for r in te.features}
    assert len(rows) == 100


def test_augment_none_and_zero_jitter_are_identity():
    x = SeededRng(0).normal((3, 2))
    assert np.array_equal(augment(x, AugmentPolicy(), SeededRng(1)), x)
    assert np.array_equal(augment(x, AugmentPolicy("gaussian_jitter", sigma=0.0), SeededRng(1)), x)


def test_finite_ratio_two_variants_over_ten_epochs():
    policy = AugmentPolicy("gaussian_jitter", sigma=0.1, ratio=2, seed=3)
    x = np.array([0.5, -1.0])
    seen = {augment_sample(x, 7, policy, epoch)[0].tobytes() for epoch in range(10)}
    assert len(seen) == 2


def test_unbounded_ratio_fresh_each_epoch():
    policy = AugmentPolicy("random_shift", max_offset=0.5, seed=3)
    x = np.array([0.5, -1.0])
    assert len({augment_sample(x, 0, policy, e)[0].tobytes() for e in range(10)}) == 10


@pytest.mark.parametrize("policy", [AugmentPolicy("gaussian_jitter", sigma=0.2),
                                    AugmentPolicy("random_shift", max_offset=0.3),
                                    AugmentPolicy("flip_sign", p=0.5)])
def test_augmentation_keeps_labels_and_finiteness(policy):
    ds = gen_dataset("blobs", 30, 3, 0.1, 0)
    pool, keys = epoch_pool(ds, policy, epoch=2)
    assert len(pool) == 60 and len(keys) == 60
    assert np.array_equal(pool.labels, np.concatenate([ds.labels, ds.labels]))
    assert np.all(np.isfinite(pool.features))
    assert keys[0] == (0, ORIGINAL) and keys[30][0] == 0


def test_augment_policy_validation():
    with pytest.raises(ValueError):
        AugmentPolicy("gaussian_jitter", sigma=-1)
    with pytest.raises(ValueError):
        AugmentPolicy("flip_sign", p=1.5)
    with pytest.raises(ValueError):
        AugmentPolicy("none", ratio=0)


def test_batches_full_batch_and_partition():
    ds = gen_dataset("blobs", 23, 2, 0.1, 0)
    assert len(list(batches(ds, 23, 0))) == 1
    bs = list(batches(ds, 5, 1))
    assert [len(b.labels) for b in bs] == [5, 5, 5, 5, 3]
    ids = sorted(k[0] for b in bs for k in b.keys)
    assert ids == list(range(23))


def test_batch_order_depends_on_seed_only():
    ds = gen_dataset("blobs", 30, 2, 0.1, 0)

    def order(s):
        return [k[0] for b in batches(ds, 4, s) for k in b.keys]

    assert order(1) == order(1)
    assert order(1) != order(2)


def test_batches_rejects_zero_size():
    with pytest.raises(ValueError):
        next(batches(gen_dataset("blobs", 4, 2, 0.0, 0), 0, 0))


def test_load_csv(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x1,x2,label\n0.5,1.0,0\n-1,2,1\n3,3,2\n")
    ds = load_csv(p)
    assert ds.features.shape == (3, 2) and ds.labels.tolist() == [0, 1, 2] and ds.n_classes == 3


def test_load_csv_empty(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("x1,label\n")
    with pytest.raises(ValueError):
        load_csv(p)
