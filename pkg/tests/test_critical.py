import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fused.critical import aggregate_diffs, identify_critical_layers, layer_diff, rank_layers
from fused.data import ClientShard, gen_synthetic
from fused.model import DenseLayer, new_mlp
from fused.numcore import ConfigError, DimensionError, make_rng


def brute_layer_diff(a, b):
    total = 0.0
    for i in range(a.weights.shape[0]):
        for j in range(a.weights.shape[1]):
            total += abs(a.weights[i, j] - b.weights[i, j])
    for j in range(a.biases.shape[1]):
        total += abs(a.biases[0, j] - b.biases[0, j])
    return total


def brute_aggregate(diffs, vols):
    total = sum(vols)
    return sum(v * d for v, d in zip(vols, diffs)) / total


def test_layer_diff_hand_value():
    a = DenseLayer(np.array([[1.0, 2.0]]), np.array([[0.0, 1.0]]))
    b = DenseLayer(np.array([[0.5, 4.0]]), np.array([[-1.0, 1.0]]))
    assert layer_diff(a, b) == 0.5 + 2.0 + 1.0
    assert layer_diff(a, a) == 0.0


def test_aggregate_hand_value():
    assert aggregate_diffs([1.0, 4.0], [3, 1]) == pytest.approx(1.75)
    with pytest.raises(ConfigError):
        aggregate_diffs([1.0], [0])
    with pytest.raises(DimensionError):
        aggregate_diffs([1.0, 2.0], [1])


def test_oracles_on_random_cases():
    rng = make_rng(11)
    for _ in range(120):
        n_in, n_out = rng.integers(1, 6, 2)
        a = DenseLayer(rng.standard_normal((n_in, n_out)), rng.standard_normal((1, n_out)))
        b = DenseLayer(rng.standard_normal((n_in, n_out)), rng.standard_normal((1, n_out)))
        assert abs(layer_diff(a, b) - brute_layer_diff(a, b)) <= 1e-12 * max(1.0, brute_layer_diff(a, b))
        k = int(rng.integers(1, 8))
        diffs = list(rng.random(k) * 10)
        vols = list(rng.integers(1, 100, k).astype(float))
        assert aggregate_diffs(diffs, vols) == pytest.approx(brute_aggregate(diffs, vols), abs=1e-12)


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=10), st.data())
def test_ranking_properties(diffs, data):
    K = data.draw(st.integers(1, len(diffs)))
    ranking = rank_layers(diffs, K)
    order = ranking.order
    assert sorted(order) == list(range(1, len(diffs) + 1))
    ranked = [diffs[i - 1] for i in order]
    assert ranked == sorted(ranked, reverse=True)
    for a, b in zip(order, order[1:]):
        if diffs[a - 1] == diffs[b - 1]:
            assert a < b
    assert ranking.critical == order[:K] and ranking.remaining == order[K:]


def test_ranking_ties_and_csv():
    r = rank_layers([1.0, 3.0, 3.0, 0.5], 2)
    assert r.order == [2, 3, 1, 4]
    lines = r.to_csv().splitlines()
    assert lines[0] == "layer_index,diff,rank"
    assert lines[1] == "2,3.0,1"
    with pytest.raises(ConfigError):
        rank_layers([1.0], 2)


def test_ranking_invariant_under_monotone_transform():
    rng = make_rng(5)
    for _ in range(30):
        d = rng.random(6)
        assert rank_layers(d, 3).order == rank_layers(np.log1p(d) * 7 + 2, 3).order


def _shards(seed, n=4):
    ds = gen_synthetic(3, 5, 30, 0.8, make_rng(seed))
    rows = np.array_split(np.arange(len(ds)), n)
    return [ClientShard(k, ds.subset(r)) for k, r in enumerate(rows)]


@pytest.mark.parametrize("planted", [1, 2, 3])
def test_planted_layer_is_ranked_first(planted):
    for seed in range(5):
        model = new_mlp([5, 8, 8, 3], 0.5, make_rng(seed))
        ranking = identify_critical_layers(model, _shards(seed), 1, 0.1, 1, make_rng(seed, "cli"), batch_size=16,
                                           trainable=[planted])
        assert ranking.critical == [planted]
        assert all(e.diff == 0.0 for e in ranking.entries[1:])


def test_identify_is_deterministic_and_worker_independent():
    model = new_mlp([5, 8, 3], 0.5, make_rng(0))
    a = identify_critical_layers(model, _shards(0), 2, 0.1, 1, make_rng(1), batch_size=8)
    b = identify_critical_layers(model, _shards(0), 2, 0.1, 1, make_rng(1), batch_size=8, workers=3)
    assert a == b


def test_normalised_ranking_divides_by_size():
    model = new_mlp([5, 8, 3], 0.5, make_rng(0))
    raw = identify_critical_layers(model, _shards(0), 1, 0.1, 2, make_rng(1))
    norm = identify_critical_layers(model, _shards(0), 1, 0.1, 2, make_rng(1), normalize_by_param_count=True)
    by_layer = {e.layer_index: e.diff for e in raw.entries}
    for e in norm.entries:
        assert e.diff == pytest.approx(by_layer[e.layer_index] / model.layer(e.layer_index).size)


def test_identify_errors():
    model = new_mlp([5, 8, 3], 0.5, make_rng(0))
    with pytest.raises(ConfigError):
        identify_critical_layers(model, _shards(0), 0, 0.1, 1, make_rng(0))
    with pytest.raises(ConfigError):
        identify_critical_layers(model, _shards(0), 1, 0.1, 3, make_rng(0))
    with pytest.raises(ConfigError):
        identify_critical_layers(model, [], 1, 0.1, 1, make_rng(0))
