"""Tests for synthetic dataset generation, CSV round trips, and splits."""

import math

import numpy as np
import pytest

from ttemb import data as dd


def tiny_dataset():
    """Hand-built three-sample dataset with known values."""
    return dd.Dataset(
        labels=np.array([1.0, 0.0, 1.0]),
        dense=np.array([[0.5, -1.25], [2.0, 0.0], [-3.5, 4.0]]),
        bags=[
            [[3, 7], [0], [1, 1, 2]],
            [[0], [4], [2]],
        ],
        rows_per_field=(8, 5),
    )


def attacked_hits(ds, attack_row_fraction):
    """Per-sample count of planted-range indices, recomputed independently."""
    hits = np.zeros(ds.n)
    for f, rows in enumerate(ds.rows_per_field):
        cut = max(1, math.ceil(rows * attack_row_fraction))
        for i, bag in enumerate(ds.bags[f]):
            hits[i] += sum(1 for idx in bag if idx < cut)
    return hits


_DEFAULT_CACHE = {}


def default_dataset():
    if "ds" not in _DEFAULT_CACHE:
        _DEFAULT_CACHE["ds"] = dd.gen_synthetic(dd.DatasetSpec())
    return _DEFAULT_CACHE["ds"]


# ---------------------------------------------------------------- sampling


def test_zipf_probs_hand_values():
    # s=1, n=3: weights 1, 1/2, 1/3 over H = 11/6
    p = dd.zipf_probs(3, 1.0)
    expect = np.array([1.0, 0.5, 1.0 / 3.0]) / (11.0 / 6.0)
    assert np.allclose(p, expect, rtol=0, atol=1e-15)
    assert abs(p.sum() - 1.0) < 1e-12
    # s=0 is uniform
    assert np.allclose(dd.zipf_probs(5, 0.0), np.full(5, 0.2), atol=1e-15)
    # monotone non-increasing for s > 0
    p = dd.zipf_probs(50, 1.3)
    assert np.all(np.diff(p) < 0)
    with pytest.raises(ValueError):
        dd.zipf_probs(0, 1.0)


def test_uniform_draws_pass_chi_square():
    # s=0 bags should be uniform over the field; chi-square with 7 dof
    # stays far below the 0.999 quantile (24.3) for these fixed seeds.
    spec = dd.DatasetSpec(
        n_samples=4000, n_dense=1, rows_per_field=(8,), zipf_s=0.0,
        attack_fraction=0.25, min_bag=2, max_bag=2,
    )
    for seed in range(5):
        ds = dd.gen_synthetic(dd.DatasetSpec(
            n_samples=spec.n_samples, n_dense=1, rows_per_field=(8,),
            zipf_s=0.0, attack_fraction=0.25, min_bag=2, max_bag=2, seed=seed,
        ))
        flat = np.array([i for bag in ds.bags[0] for i in bag])
        counts = np.bincount(flat, minlength=8)
        expected = flat.size / 8.0
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 24.3, f"seed {seed}: chi2 {chi2}"


def test_zipf_head_frequency_matches_law():
    spec = dd.DatasetSpec(
        n_samples=10000, n_dense=0, rows_per_field=(100,), zipf_s=1.05,
        attack_fraction=0.2, min_bag=2, max_bag=2, seed=3,
    )
    ds = dd.gen_synthetic(spec)
    flat = np.array([i for bag in ds.bags[0] for i in bag])
    p0 = dd.zipf_probs(100, 1.05)[0]
    emp = float((flat == 0).mean())
    assert abs(emp - p0) < 0.02
    # the head is visibly hotter than the tail
    assert emp > 5 * float((flat == 99).mean())


# -------------------------------------------------------------- generation


def test_default_generation_shape_and_counts():
    spec = dd.DatasetSpec()
    ds = default_dataset()
    assert ds.n == 24800
    assert ds.dense.shape == (24800, 6)
    assert ds.n_sparse == 7
    assert ds.rows_per_field == (4000, 2000, 2000, 1000, 500, 200, 118)
    # exactly the configured number of positive labels
    assert int(ds.labels.sum()) == 4800
    assert set(np.unique(ds.labels)) == {0.0, 1.0}
    # bag sizes stay in the configured range, indices in range
    for f, rows in enumerate(ds.rows_per_field):
        for bag in ds.bags[f]:
            assert spec.min_bag <= len(bag) <= spec.max_bag
            assert all(0 <= i < rows for i in bag)


def test_positive_count_exact_across_fractions():
    for n, frac in [(1000, 0.194), (777, 0.3), (2500, 0.5)]:
        spec = dd.DatasetSpec(
            n_samples=n, n_dense=2, rows_per_field=(50, 30),
            attack_fraction=frac, seed=11,
        )
        ds = dd.gen_synthetic(spec)
        assert int(ds.labels.sum()) == int(round(n * frac))


def test_labels_track_planted_attack_ranges():
    ds = default_dataset()
    hits = attacked_hits(ds, dd.DatasetSpec().attack_row_fraction)
    pos = hits[ds.labels == 1.0].mean()
    neg = hits[ds.labels == 0.0].mean()
    assert pos > neg + 0.5, (pos, neg)


def test_generation_deterministic_and_seed_sensitive():
    spec = dd.DatasetSpec(n_samples=200, rows_per_field=(40, 20), n_dense=3,
                          seed=7)
    a = dd.gen_synthetic(spec)
    b = dd.gen_synthetic(spec)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.dense, b.dense)
    assert a.bags == b.bags
    c = dd.gen_synthetic(dd.DatasetSpec(
        n_samples=200, rows_per_field=(40, 20), n_dense=3, seed=8))
    assert a.bags != c.bags


def test_dense_values_survive_9_digit_text():
    ds = default_dataset()
    sample = ds.dense[:50]
    again = np.array([float(f"{v:.8e}") for v in sample.reshape(-1)])
    assert np.array_equal(again, sample.reshape(-1))


def test_spec_validation_errors():
    bad = [
        dict(n_samples=0),
        dict(attack_fraction=0.0),
        dict(attack_fraction=1.0),
        dict(zipf_s=-0.5),
        dict(min_bag=0),
        dict(min_bag=3, max_bag=2),
        dict(rows_per_field=(10, 0)),
        dict(cooccur_clusters=-1),
        dict(cooccur_noise=1.5),
    ]
    for kwargs in bad:
        with pytest.raises(ValueError):
            dd.gen_synthetic(dd.DatasetSpec(**kwargs))


def test_cooccur_clusters_share_residue():
    # noise 0: every bag of a field draws from a single residue class mod k
    spec = dd.DatasetSpec(
        n_samples=300, n_dense=1, rows_per_field=(64, 48), zipf_s=0.8,
        attack_fraction=0.2, cooccur_clusters=4, cooccur_noise=0.0, seed=5,
    )
    ds = dd.gen_synthetic(spec)
    for fld in ds.bags:
        for bag in fld:
            assert len({i % 4 for i in bag}) == 1
    # with noise, most (not all) draws still follow the cluster
    noisy = dd.gen_synthetic(dd.DatasetSpec(
        n_samples=300, n_dense=1, rows_per_field=(64, 48), zipf_s=0.8,
        attack_fraction=0.2, cooccur_clusters=4, cooccur_noise=0.3, seed=5,
    ))
    mixed = sum(
        1 for fld in noisy.bags for bag in fld if len({i % 4 for i in bag}) > 1
    )
    total = sum(len(fld) for fld in noisy.bags)
    assert 0 < mixed < total // 2


# ------------------------------------------------------------------- CSV


def test_csv_exact_text(tmp_path):
    path = tmp_path / "tiny.csv"
    dd.write_csv(tiny_dataset(), path)
    text = path.read_text()
    expect = (
        "label,dense_0,dense_1,sparse_0,sparse_1\n"
        "1,5.00000000e-01,-1.25000000e+00,3|7,0\n"
        "0,2.00000000e+00,0.00000000e+00,0,4\n"
        "1,-3.50000000e+00,4.00000000e+00,1|1|2,2\n"
    )
    assert text == expect


def test_csv_round_trip_exact(tmp_path):
    ds = default_dataset().select(np.arange(500))
    path = tmp_path / "ds.csv"
    dd.write_csv(ds, path)
    back = dd.read_csv(path, rows_per_field=ds.rows_per_field)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.dense, ds.dense)
    assert back.bags == ds.bags
    assert back.rows_per_field == ds.rows_per_field
    # without declared ranges the field sizes are inferred from the data
    inferred = dd.read_csv(path)
    assert all(
        got <= want for got, want in zip(inferred.rows_per_field, ds.rows_per_field)
    )


def test_csv_errors_name_line_numbers(tmp_path):
    head = "label,dense_0,sparse_0\n"
    cases = [
        (head + "1,0.5,3\n0,1.0\n", "3"),          # missing field
        (head + "1,0.5,3\n0,x,1\n", "3"),          # bad dense value
        (head + "1,0.5,3|a\n", "2"),               # non-integer index
        (head + "1,0.5,-2\n", "2"),                # negative index
    ]
    for body, line in cases:
        path = tmp_path / "bad.csv"
        path.write_text(body)
        with pytest.raises(ValueError) as err:
            dd.read_csv(path)
        assert f":{line}:" in str(err.value)
    path = tmp_path / "range.csv"
    path.write_text(head + "1,0.5,3\n1,0.5,9\n")
    with pytest.raises(ValueError) as err:
        dd.read_csv(path, rows_per_field=(5,))
    assert ":3:" in str(err.value) and "range" in str(err.value)
    path.write_text("labels,dense_0\n")
    with pytest.raises(ValueError):
        dd.read_csv(path)
    path.write_text("")
    with pytest.raises(ValueError):
        dd.read_csv(path)


# ---------------------------------------------------------- normalization


def test_normalize_hand_values():
    ds = tiny_dataset()
    normed, stats = dd.normalize_dense(ds)
    assert stats == [(-3.5, 2.0), (-1.25, 4.0)]
    expect0 = (ds.dense[:, 0] + 3.5) / 5.5
    expect1 = (ds.dense[:, 1] + 1.25) / 5.25
    assert np.allclose(normed.dense[:, 0], expect0, atol=1e-15)
    assert np.allclose(normed.dense[:, 1], expect1, atol=1e-15)
    assert normed.dense.min() >= 0.0 and normed.dense.max() <= 1.0
    # labels and bags pass through untouched
    assert np.array_equal(normed.labels, ds.labels)
    assert normed.bags == ds.bags


def test_normalize_constant_feature_and_clipping():
    ds = dd.Dataset(
        labels=np.zeros(2),
        dense=np.array([[1.0, 5.0], [1.0, 7.0]]),
        bags=[[[0], [0]]],
        rows_per_field=(1,),
    )
    normed, stats = dd.normalize_dense(ds)
    assert np.array_equal(normed.dense[:, 0], [0.0, 0.0])
    # held-out data outside the training range clips into [0, 1]
    other = dd.Dataset(
        labels=np.zeros(1), dense=np.array([[2.0, 9.0]]),
        bags=[[[0]]], rows_per_field=(1,),
    )
    applied = dd.apply_normalization(other, stats)
    assert np.array_equal(applied.dense, [[0.0, 1.0]])
    with pytest.raises(ValueError):
        dd.apply_normalization(other, stats[:1])


def test_stats_sidecar_round_trip(tmp_path):
    ds = default_dataset().select(np.arange(100))
    _, stats = dd.normalize_dense(ds)
    path = tmp_path / "stats.txt"
    dd.save_stats(stats, path)
    back = dd.load_stats(path)
    assert back == stats  # repr round trip is bit exact


# ------------------------------------------------------------------ splits


def test_split_hash_frozen_values():
    # (id * 2654435761) mod 2^32 < 0.8 * 2^32; ids 3 and 8 land in the
    # held-out side among the first ten
    ds = tiny_dataset()
    big = dd.Dataset(
        labels=np.arange(10, dtype=np.float64),
        dense=np.zeros((10, 1)),
        bags=[[[0]] * 10],
        rows_per_field=(1,),
    )
    train, test = dd.train_test_split(big, 0.8)
    assert train.labels.tolist() == [0, 1, 2, 4, 5, 6, 7, 9]
    assert test.labels.tolist() == [3, 8]
    with pytest.raises(ValueError):
        dd.train_test_split(ds, 1.0)


def test_split_partition_and_fraction():
    ds = default_dataset()
    train, test = dd.train_test_split(ds, 0.8)
    assert train.n + test.n == ds.n
    assert abs(train.n / ds.n - 0.8) < 0.02
    # both sides keep both classes
    assert 0 < train.labels.sum() < train.n
    assert 0 < test.labels.sum() < test.n


def test_batch_iter_covers_all_with_final_short_batch():
    ds = default_dataset().select(np.arange(10))
    batches = list(dd.batch_iter(ds, 4))
    assert [b.n for b in batches] == [4, 4, 2]
    assert np.array_equal(
        np.concatenate([b.labels for b in batches]), ds.labels
    )
    # seeded shuffle: deterministic, a permutation, differs from order
    s1 = [b.dense for b in dd.batch_iter(ds, 4, shuffle_seed=9)]
    s2 = [b.dense for b in dd.batch_iter(ds, 4, shuffle_seed=9)]
    assert all(np.array_equal(a, b) for a, b in zip(s1, s2))
    flat = np.concatenate([d[:, 0] for d in s1])
    assert sorted(flat.tolist()) == sorted(ds.dense[:, 0].tolist())
    with pytest.raises(ValueError):
        next(dd.batch_iter(ds, 0))


def test_select_copies_bags():
    ds = tiny_dataset()
    sub = ds.select([0, 2])
    assert sub.n == 2
    assert sub.bags[0] == [[3, 7], [1, 1, 2]]
    sub.bags[0][0].append(99)
    assert ds.bags[0][0] == [3, 7]
