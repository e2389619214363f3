import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fedledger.aggregation import (AggregationError, ClientUpdate, ServerState, StrategyConfig,
                                   StrategyKind, aggregate, fed_avg, fed_avg_m_step,
                                   fed_prox_aggregate, fed_trimmed_avg, krum_select, trim_count)
from fedledger.params import ParameterSet, SchemaMismatchError


def upd(values, n=1, client_id=0):
    return ClientUpdate(client_id, 1, ParameterSet({"w": np.asarray(values, dtype=float)}), n, 0.0)


def test_fed_avg_weighted_example():
    out = fed_avg([upd([1, 3], 1, 0), upd([3, 5], 3, 1)])
    assert out["w"].tolist() == [2.5, 4.5]


def test_fed_avg_single_update_is_identity():
    u = upd([0.1, -7.25, 3.3], 4)
    assert fed_avg([u]) == u.params
    assert fed_prox_aggregate([u]) == u.params


def test_fed_avg_consensus():
    ups = [upd([0.1, 0.7], n, c) for c, n in enumerate([3, 5, 11])]
    np.testing.assert_allclose(fed_avg(ups)["w"], [0.1, 0.7], atol=1e-12, rtol=0)


def test_fed_prox_delegates_to_fed_avg():
    ups = [upd([1, 3], 1, 0), upd([3, 5], 3, 1)]
    assert fed_prox_aggregate(ups) == fed_avg(ups)


def test_errors():
    with pytest.raises(AggregationError):
        fed_avg([])
    with pytest.raises(SchemaMismatchError):
        fed_avg([upd([1.0]), upd([1.0, 2.0], client_id=1)])
    with pytest.raises(AggregationError):
        fed_avg([upd([1.0]), upd([1.0])])
    with pytest.raises(ValueError):
        upd([1.0], n=0)


def test_trimmed_mean_example():
    ups = [upd([v], 1, c) for c, v in enumerate([0, 1, 2, 3, 100])]
    assert fed_trimmed_avg(ups, 0.2)["w"].tolist() == [2.0]


def test_trimmed_zero_fraction_is_plain_mean():
    ups = [upd([1.0, 2.0], 1, 0), upd([3.0, 6.0], 1, 1), upd([5.0, 1.0], 1, 2)]
    np.testing.assert_allclose(fed_trimmed_avg(ups, 0.0)["w"], [3.0, 3.0], atol=1e-12)


def test_trimmed_ignores_example_counts():
    a = [upd([0.0], 1, 0), upd([3.0], 1, 1), upd([9.0], 1, 2)]
    b = [upd([0.0], 100, 0), upd([3.0], 1, 1), upd([9.0], 7, 2)]
    assert fed_trimmed_avg(a, 0.0) == fed_trimmed_avg(b, 0.0)


def test_trim_count_bounds():
    assert trim_count(5, 0.2) == 1
    assert trim_count(4, 0.2) == 0
    with pytest.raises(AggregationError):
        trim_count(2, 0.5)
    with pytest.raises(ValueError):
        StrategyConfig(trim_fraction=0.5)


def test_krum_example():
    # hand check of the largest score: the outlier's two nearest peers sit at 9.7 and 9.4
    ups = [upd([v], 1, c) for c, v in enumerate([0.0, 0.1, 0.3, 0.6, 10.0])]
    idx, scores = krum_select(ups, 1)
    assert idx == 1
    np.testing.assert_allclose(scores, [0.10, 0.05, 0.13, 0.34, 9.4**2 + 9.7**2], atol=1e-12)
    assert scores[4] == pytest.approx(182.45, abs=1e-9)


def test_krum_identical_updates_choose_lowest_client():
    ups = [upd([1.5, -2.0], 1, c) for c in (4, 2, 7)]
    idx, scores = krum_select(ups, 0)
    assert ups[idx].client_id == 2
    assert scores == [0.0, 0.0, 0.0]


def test_krum_precondition():
    with pytest.raises(AggregationError):
        krum_select([upd([0.0], 1, c) for c in range(3)], 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 9), st.floats(1e3, 1e6))
def test_krum_never_picks_far_outlier(seed, n, distance):
    rng = np.random.default_rng(seed)
    cloud = rng.normal(size=(n, 4))
    cloud[-1] += distance
    ups = [upd(row, 1, c) for c, row in enumerate(cloud)]
    idx, _ = krum_select(ups, 1)
    assert idx != n - 1


def test_fed_avg_m_reduces_to_fed_avg_bitwise():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        ups = [upd(rng.normal(size=7), int(rng.integers(1, 50)), c) for c in range(n)]
        glob = ParameterSet({"w": rng.normal(size=7)})
        buf = ParameterSet({"w": rng.normal(size=7)})
        state = fed_avg_m_step(ServerState(glob, buf), ups, 0.0, 1.0)
        assert state.global_params == fed_avg(ups)


def test_fed_avg_m_recursion():
    # zero average each round: buffer 0.5 then 0.5 * 0.9 + 0.5 = 0.95
    state = ServerState(ParameterSet({"w": [0.5]}))
    zero = [upd([0.0])]
    state = fed_avg_m_step(state, zero, 0.9, 0.1)
    assert state.momentum_buffer["w"][0] == pytest.approx(0.5)
    assert state.global_params["w"][0] == pytest.approx(0.45)
    state = fed_avg_m_step(state, zero, 0.9, 0.1)
    assert state.momentum_buffer["w"][0] == pytest.approx(0.45 + 0.9 * 0.5)
    assert state.global_params["w"][0] == pytest.approx(0.45 - 0.1 * (0.45 + 0.45))
    assert state.round == 2


def test_aggregate_dispatch():
    ups = [upd([1, 3], 1, 0), upd([3, 5], 3, 1)]
    state = ServerState(ParameterSet({"w": [0.0, 0.0]}))
    for kind in ("FedAvg", "fedprox"):
        out = aggregate(kind, state, ups, StrategyConfig(kind))
        assert out.global_params["w"].tolist() == [2.5, 4.5]
        assert out.round == 1
    single = aggregate(StrategyKind.KRUM, state, [upd([1.0, 2.0], 1, c) for c in range(3)],
                       StrategyConfig("Krum"))
    assert single.global_params["w"].tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        StrategyKind.parse("FedSGD")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(list(StrategyKind)))
def test_aggregation_ignores_arrival_order(seed, kind):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 7))
    ups = [upd(rng.normal(size=5), int(rng.integers(1, 20)), c) for c in range(n)]
    state = ServerState(ParameterSet({"w": rng.normal(size=5)}))
    cfg = StrategyConfig(kind, krum_f=1 if n >= 4 else 0)
    shuffled = [ups[i] for i in rng.permutation(n)]
    assert aggregate(kind, state, ups, cfg).global_params == aggregate(kind, state, shuffled, cfg).global_params


def test_oracles_on_hand_fixture():
    vectors = [[1.0, 3.0], [3.0, 5.0]]
    assert oracles.weighted_mean(vectors, [1, 3]) == [2.5, 4.5]
    assert oracles.trimmed_mean([[0.0], [1.0], [2.0], [3.0], [100.0]], 0.2) == [2.0]
