import numpy as np
import pytest

from cilbench.data import (
    DimensionMismatchError,
    FeatureDataset,
    FormatError,
    LabelOutOfRangeError,
    MemoryBuffer,
    NonFiniteFeatureError,
    OodEntry,
    OodSuite,
    features_by_class,
    herding_select,
    load_dataset,
    load_suite_manifest,
    memory_rows,
    ood_subset,
    rebalance_memory,
    save_dataset,
    split_tasks,
)
from cilbench.numerics import RngStream


def make_ds(n_per_class, K, d, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n_per_class * K, d))
    labels = np.repeat(np.arange(K), n_per_class)
    return FeatureDataset(feats, labels, K)


def test_binary_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    ds = FeatureDataset(
        rng.normal(size=(3, 4)).astype(np.float32), [0, 1, 0], 2
    )
    p = tmp_path / "ds.bin"
    save_dataset(ds, p)
    back = load_dataset(p, "binary", 2)
    assert back.n == 3 and back.dim == 4
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    save_dataset(back, tmp_path / "ds2.bin")
    assert (tmp_path / "ds.bin").read_bytes() == (tmp_path / "ds2.bin").read_bytes()


def test_csv_load(tmp_path):
    p = tmp_path / "ds.csv"
    p.write_text("1.0,2.0,0\n3.0,4.0,1\n")
    ds = load_dataset(p, "csv")
    assert ds.n == 2 and ds.dim == 2
    np.testing.assert_array_equal(ds.labels, [0, 1])


def test_load_errors_are_distinct(tmp_path):
    good = FeatureDataset(np.ones((2, 2)), [0, 1], 2)
    p = tmp_path / "ok.bin"
    save_dataset(good, p)

    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_dataset(bad_magic, "binary")

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_dataset(truncated, "binary")

    with pytest.raises(LabelOutOfRangeError):
        load_dataset(p, "binary", n_classes=1)  # file holds label 1

    with pytest.raises(FormatError):
        load_dataset(tmp_path / "missing.bin", "binary")

    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1.0,2.0,0\n3.0,1\n")
    with pytest.raises(DimensionMismatchError):
        load_dataset(ragged, "csv")


def test_nonfinite_feature_rejected():
    with pytest.raises(NonFiniteFeatureError):
        FeatureDataset(np.array([[1.0, np.nan]]), [0], 1)


def test_split_tasks_even():
    tr = make_ds(5, 6, 3)
    te = make_ds(2, 6, 3, seed=1)
    stream = split_tasks(tr, te, 2)
    assert stream.num_steps == 3
    assert [t.classes for t in stream.tasks] == [(0, 1), (2, 3), (4, 5)]
    for task in stream.tasks:
        assert set(np.unique(task.train.labels)) == set(task.classes)


def test_split_tasks_remainder_and_disjoint():
    tr = make_ds(4, 7, 2)
    te = make_ds(2, 7, 2, seed=1)
    stream = split_tasks(tr, te, 3)
    sizes = [len(t.classes) for t in stream.tasks]
    assert sizes == [3, 3, 1]
    all_classes = [c for t in stream.tasks for c in t.classes]
    assert sorted(all_classes) == list(range(7))
    assert len(set(all_classes)) == 7


def test_split_tasks_k_checks():
    tr = make_ds(2, 4, 2)
    te = make_ds(1, 4, 2, seed=1)
    with pytest.raises(ValueError):
        split_tasks(tr, te, 5)
    with pytest.raises(ValueError):
        split_tasks(tr, te, 1)


def test_split_tasks_seeded_order_is_deterministic():
    tr = make_ds(3, 10, 2)
    te = make_ds(1, 10, 2, seed=1)
    s1 = split_tasks(tr, te, 5, RngStream(4, "order"))
    s2 = split_tasks(tr, te, 5, RngStream(4, "order"))
    assert [t.classes for t in s1.tasks] == [t.classes for t in s2.tasks]


def test_herding_picks_point_nearest_mean():
    feats = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 0.0]])
    assert herding_select(feats, 1) == [2]  # mean is (1, 0)


def test_herding_matches_bruteforce_greedy():
    rng = np.random.default_rng(8)
    for _ in range(25):
        n = int(rng.integers(3, 8))
        feats = rng.normal(size=(n, 3))
        q = int(rng.integers(1, n + 1))
        mu = feats.mean(axis=0)
        chosen = []
        running = np.zeros(3)
        for s in range(1, q + 1):
            best, best_d = None, np.inf
            for i in range(n):
                if i in chosen:
                    continue
                d = np.linalg.norm(mu - (running + feats[i]) / s)
                if d < best_d - 0.0 and (best is None or d < best_d):
                    best, best_d = i, d
            chosen.append(best)
            running += feats[best]
        assert herding_select(feats, q) == chosen


def test_herding_full_and_errors():
    feats = np.random.default_rng(1).normal(size=(4, 2))
    assert sorted(herding_select(feats, 4)) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        herding_select(feats, 0)
    with pytest.raises(ValueError):
        herding_select(feats, 5)


def test_herding_degenerate_ties_deterministic():
    feats = np.ones((5, 3))
    assert herding_select(feats, 2) == [0, 1]


def test_rebalance_quota_and_budget():
    tr = make_ds(50, 6, 4)
    te = make_ds(5, 6, 4, seed=1)
    stream = split_tasks(tr, te, 2)
    rng = RngStream(0, "mem")
    mem = MemoryBuffer(10)
    for t in range(1, 4):
        fbc = features_by_class(stream, t)
        mem = rebalance_memory(mem, stream, t, fbc, "herding", rng)
        seen = stream.classes_through(t)
        q = 10 // len(seen)
        assert mem.total() <= 10
        assert all(len(mem.entries[c]) == q for c in seen)
    # after 3 tasks: 6 classes, quota 1
    assert mem.total() == 6


def test_rebalance_benchmark_scale_quota():
    # budget 2000 across 20 seen classes: exactly 100 exemplars each
    tr = make_ds(120, 20, 4)
    te = make_ds(2, 20, 4, seed=1)
    stream = split_tasks(tr, te, 10)
    fbc = features_by_class(stream, 2)
    mem = rebalance_memory(
        MemoryBuffer(2000), stream, 2, fbc, "random", RngStream(0, "q")
    )
    assert all(len(v) == 100 for v in mem.entries.values())
    assert mem.total() == 2000


def test_rebalance_truncation_keeps_herding_prefix():
    tr = make_ds(40, 4, 3)
    te = make_ds(4, 4, 3, seed=1)
    stream = split_tasks(tr, te, 2)
    rng = RngStream(1, "mem")
    mem = rebalance_memory(MemoryBuffer(8), stream, 1, features_by_class(stream, 1), "herding", rng)
    first = {c: list(v) for c, v in mem.entries.items()}
    mem2 = rebalance_memory(mem, stream, 2, features_by_class(stream, 2), "herding", rng)
    for c in first:
        assert mem2.entries[c] == first[c][: len(mem2.entries[c])]


def test_rebalance_random_strategy_deterministic():
    tr = make_ds(30, 4, 3)
    te = make_ds(3, 4, 3, seed=1)
    stream = split_tasks(tr, te, 2)
    fbc = features_by_class(stream, 2)
    a = rebalance_memory(MemoryBuffer(6), stream, 2, fbc, "random", RngStream(7, "m"))
    b = rebalance_memory(MemoryBuffer(6), stream, 2, fbc, "random", RngStream(7, "m"))
    assert a.entries == b.entries


def test_memory_rows_materialization():
    tr = make_ds(10, 4, 3)
    te = make_ds(2, 4, 3, seed=1)
    stream = split_tasks(tr, te, 2)
    fbc = features_by_class(stream, 2)
    mem = rebalance_memory(MemoryBuffer(8), stream, 2, fbc, "herding", RngStream(0))
    X, y = memory_rows(mem, fbc)
    assert X.shape[0] == mem.total() == len(y)
    for c in mem.entries:
        np.testing.assert_array_equal(
            X[y == c], fbc[c][np.asarray(mem.entries[c])]
        )


def test_ood_subset_sizes_and_nesting():
    ds = make_ds(120, 5, 3)  # 600 rows
    rng = RngStream(3, "ood")
    sub2 = ood_subset(ds, 2, 5, rng)
    assert sub2.n == 240
    assert ood_subset(ds, 5, 5, rng).n == 600
    sub1 = ood_subset(ds, 1, 5, rng)
    np.testing.assert_array_equal(sub1.features, sub2.features[: sub1.n])
    with pytest.raises(ValueError):
        ood_subset(ds, 0, 5, rng)
    with pytest.raises(ValueError):
        ood_subset(ds, 6, 5, rng)


def test_ood_subset_ratio_constant_when_test_sizes_equal():
    ds = make_ds(100, 5, 3)  # 500 OOD rows
    rng = RngStream(9, "ood")
    per_task_test = 40
    ratios = []
    for t in range(1, 6):
        sub = ood_subset(ds, t, 5, rng)
        ratios.append(sub.n / (t * per_task_test))
    assert max(ratios) - min(ratios) <= 1 / per_task_test  # within one sample


def test_suite_manifest_round_trip(tmp_path):
    tr = make_ds(4, 3, 2, seed=0)
    te = make_ds(2, 3, 2, seed=1)
    ood = make_ds(5, 1, 2, seed=2)
    save_dataset(tr, tmp_path / "train.bin")
    save_dataset(te, tmp_path / "test.bin")
    save_dataset(ood, tmp_path / "noise.bin")
    manifest = tmp_path / "suite.json"
    manifest.write_text(
        '{"n_classes": 3, "id_train": "train.bin", "id_test": "test.bin",'
        ' "ood": [{"name": "noise", "path": "noise.bin", "tag": "far"}]}'
    )
    train, test, suite = load_suite_manifest(manifest)
    assert train.n == 12 and test.n == 6
    assert suite.entries[0].name == "noise"
    assert suite.entries[0].tag == "far"


def test_ood_suite_validation():
    ds = make_ds(2, 1, 2)
    with pytest.raises(Exception):
        OodEntry("x", ds, "weird")
    with pytest.raises(Exception):
        OodSuite((OodEntry("a", ds, "near"), OodEntry("a", ds, "far")))
