import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fused.data import (
    ClientShard,
    Dataset,
    apply_backdoor,
    apply_label_flip,
    dirichlet_partition,
    gen_synthetic,
    gen_synthetic_split,
    load_csv,
    overlap_split,
    save_csv,
    with_trigger,
)
from fused.numcore import ConfigError, DimensionError, DomainError, make_rng


def test_dataset_validation():
    with pytest.raises(DimensionError):
        Dataset(np.zeros((3, 2)), [0, 1], 2)
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2)), [0, 2], 2)


def test_synthetic_shapes_and_balance():
    ds = gen_synthetic(5, 3, 20, 0.5, make_rng(0))
    assert ds.features.shape == (100, 3)
    np.testing.assert_array_equal(ds.histogram(), [20] * 5)
    train, test = gen_synthetic_split(4, 3, 10, 5, 0.3, make_rng(1))
    np.testing.assert_array_equal(train.histogram(), [10] * 4)
    np.testing.assert_array_equal(test.histogram(), [5] * 4)


@given(st.integers(2, 12), st.floats(0.05, 100.0), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_partition_is_a_partition(n_clients, alpha, seed):
    ds = gen_synthetic(4, 2, 15, 0.5, make_rng(seed))
    shards = dirichlet_partition(ds, n_clients, alpha, make_rng(seed, "p"))
    assert [s.client_id for s in shards] == list(range(n_clients))
    assert all(len(s) >= 1 for s in shards)
    rows = np.concatenate([s.source_indices for s in shards])
    np.testing.assert_array_equal(np.sort(rows), np.arange(len(ds)))
    total = sum(s.data.histogram() for s in shards)
    np.testing.assert_array_equal(total, ds.histogram())
    for s in shards:
        np.testing.assert_array_equal(s.data.features, ds.features[list(s.source_indices)])


def test_partition_is_deterministic():
    ds = gen_synthetic(3, 2, 10, 0.5, make_rng(0))
    a = dirichlet_partition(ds, 5, 0.5, make_rng(9))
    b = dirichlet_partition(ds, 5, 0.5, make_rng(9))
    assert [s.source_indices for s in a] == [s.source_indices for s in b]


def test_large_alpha_is_near_uniform_small_alpha_is_skewed():
    ds = gen_synthetic(10, 2, 500, 0.5, make_rng(0))
    flat = dirichlet_partition(ds, 10, 1e6, make_rng(1))
    shares = np.array([s.data.histogram() for s in flat]) / 500
    assert np.abs(shares - 0.1).max() < 0.02
    skew = dirichlet_partition(ds, 10, 0.05, make_rng(1))
    top = np.array([s.data.histogram() for s in skew]).max(axis=0) / 500
    assert np.median(top) > 0.5


def test_partition_errors():
    ds = gen_synthetic(2, 2, 2, 0.5, make_rng(0))
    with pytest.raises(ConfigError):
        dirichlet_partition(ds, 3, 0.0, make_rng(0))
    with pytest.raises(ConfigError):
        dirichlet_partition(ds, 10, 1.0, make_rng(0))


def test_label_flip():
    ds = Dataset(np.zeros((4, 1)), [0, 1, 2, 2], 3)
    shard = apply_label_flip(ClientShard(3, ds))
    np.testing.assert_array_equal(shard.data.labels, [1, 2, 0, 0])
    assert shard.is_unlearn_target and shard.attacked_indices == (0, 1, 2, 3)
    assert len(shard.clean_part()) == 0


def test_backdoor():
    ds = gen_synthetic(3, 4, 10, 0.5, make_rng(0))
    poisoned, idx = apply_backdoor(ds, 0.1, 9.0, 0, make_rng(1))
    assert len(idx) == 3 and list(idx) == sorted(idx)
    np.testing.assert_array_equal(poisoned.features[list(idx), -1], 9.0)
    np.testing.assert_array_equal(poisoned.labels[list(idx)], 0)
    untouched = np.setdiff1d(np.arange(len(ds)), idx)
    np.testing.assert_array_equal(poisoned.features[untouched], ds.features[untouched])
    np.testing.assert_array_equal(poisoned.labels[untouched], ds.labels[untouched])
    full, idx_all = apply_backdoor(ds, 1.0, 9.0, 1, make_rng(1))
    assert len(idx_all) == len(ds) and np.all(full.features[:, -1] == 9.0)
    with pytest.raises(ConfigError):
        apply_backdoor(ds, 0.0, 1.0, 0, make_rng(0))
    trig = with_trigger(ds, 7.0)
    assert np.all(trig.features[:, -1] == 7.0)
    np.testing.assert_array_equal(trig.labels, ds.labels)


def test_overlap_split():
    ds = gen_synthetic(4, 2, 20, 0.5, make_rng(0))
    shards = overlap_split(ds, 3, 1, unique_class=2, overlap_class=0, overlap_fraction=0.9, rng=make_rng(1))
    target = shards[1]
    assert target.is_unlearn_target and len(target.clean_part()) == 0
    assert target.data.histogram()[2] == 20 and target.data.histogram()[0] == 18
    others = sum(s.data.histogram() for s in shards if s.client_id != 1)
    assert others[2] == 0 and others[0] == 2
    rows = np.concatenate([s.source_indices for s in shards])
    np.testing.assert_array_equal(np.sort(rows), np.arange(len(ds)))


def test_csv_round_trip(tmp_path):
    ds = gen_synthetic(3, 4, 5, 0.5, make_rng(0))
    path = tmp_path / "d.csv"
    save_csv(ds, path)
    back = load_csv(path, 3)
    assert back.features.tobytes() == ds.features.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert path.read_text().splitlines()[0] == "f0,f1,f2,f3,label"
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        load_csv(tmp_path / "bad.csv")
