import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tndnas import tensor as T
from tndnas.objectives import (
    MetricVector,
    RewardSpec,
    evaluate_accuracy,
    reward_surface_grid,
    scalarize,
    write_reward_surface_csv,
)
from tndnas.searchspace import NORMAL_OPS, REDUCTION_OPS, CellSpec, Genotype, build_supernetwork


def test_zero_exponent_is_accuracy():
    assert scalarize(MetricVector(0.731, 12345), RewardSpec(1000.0, 0.0)) == 0.731


def test_reference_size_is_accuracy():
    assert scalarize(MetricVector(0.42, 5000), RewardSpec(5000, -0.25)) == pytest.approx(0.42, abs=1e-15)


def test_spot_value():
    # 0.9 * 2 ** -0.25, evaluated independently
    expected = 0.9 / np.sqrt(np.sqrt(2.0))
    got = scalarize(MetricVector(0.9, 2000), RewardSpec(1000, -0.25))
    assert got == pytest.approx(expected, abs=1e-15)
    assert abs(got - 0.75681) < 1e-5


def test_params_only_rewards():
    m = MetricVector(0.3, 3000)
    assert scalarize(m, RewardSpec(1000, 1.0, use_accuracy=False)) == pytest.approx(3.0)
    assert scalarize(m, RewardSpec(1000, -1.0, use_accuracy=False)) == pytest.approx(1 / 3)


def test_metric_vector_validation():
    with pytest.raises(ValueError):
        MetricVector(1.2, 10)
    with pytest.raises(ValueError):
        MetricVector(0.5, 0)
    with pytest.raises(ValueError):
        RewardSpec(0.0)


@given(st.floats(0.01, 1.0), st.integers(10, 10**7), st.integers(10, 10**7), st.floats(-2, 2))
@settings(max_examples=100)
def test_homogeneous_in_params_and_reference(acc, params, ref, beta):
    a = scalarize(MetricVector(acc, params), RewardSpec(ref, beta))
    b = scalarize(MetricVector(acc, 2 * params), RewardSpec(2 * ref, beta))
    assert a == pytest.approx(b, rel=1e-12)


@given(st.floats(0.01, 0.99), st.integers(10, 10**6), st.floats(0.1, 2))
@settings(max_examples=100)
def test_monotonicity(acc, params, mag):
    for beta, sign in ((-mag, -1), (mag, 1)):
        spec = RewardSpec(1000.0, beta)
        lo, hi = scalarize(MetricVector(acc, params), spec), scalarize(MetricVector(acc, params + 1), spec)
        assert np.sign(hi - lo) == sign
        assert scalarize(MetricVector(acc + 0.01, params), spec) > lo


def test_positive_scaling_keeps_best_sample():
    rewards = np.array([0.3, 0.8, 0.5])
    for c in (0.1, 3.0, 1e4):
        assert np.argmax(rewards * c) == np.argmax(rewards)


# ------------------------------------------------------------ reward surface


def test_grid_rows_recompute():
    spec = RewardSpec(2.5e5, -0.25)
    grid = reward_surface_grid(spec, resolution=9)
    assert grid.shape == (81, 3)
    for a, p, r in grid:
        assert r == a * (p / 2.5e5) ** -0.25


def test_grid_monotone_and_flat():
    g = reward_surface_grid(RewardSpec(100.0, -0.25), resolution=7).reshape(7, 7, 3)
    assert np.all(np.diff(g[1:, :, 2], axis=1) < 0)
    flat = reward_surface_grid(RewardSpec(100.0, 0.0), resolution=7).reshape(7, 7, 3)
    assert np.all(flat[:, :, 2] == flat[:, :1, 2])


def test_grid_csv(tmp_path):
    spec = RewardSpec(1000.0, -0.25)
    path = tmp_path / "surface.csv"
    write_reward_surface_csv(reward_surface_grid(spec), path)
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["acc", "params", "reward"]
    assert len(rows) == 1 + 21 * 21
    spot = [r for r in rows[1:] if float(r[0]) == pytest.approx(0.9) and float(r[1]) == pytest.approx(2000)]
    assert len(spot) == 1 and abs(float(spot[0][2]) - 0.75681) < 1e-5


# ---------------------------------------------------------------- accuracy


@pytest.fixture(scope="module")
def net():
    return build_supernetwork(CellSpec(), 3, 2, NORMAL_OPS, REDUCTION_OPS, seed=0, num_classes=2)


def test_constant_predictor_accuracy(net):
    net.fc_b.data[:] = [3.0, 0.0]
    x = np.random.default_rng(0).standard_normal((8, 3, 8, 8))
    empty = Genotype()
    assert evaluate_accuracy(net, empty, [(x, np.zeros(8, int))]) == 1.0
    assert evaluate_accuracy(net, empty, [(x, np.array([0, 1] * 4))]) == 0.5
    net.fc_b.data[:] = 0


def test_accuracy_matches_recount(net):
    rng = np.random.default_rng(1)
    g = Genotype({(0, 2): "conv_3x3", (1, 2): "sep_conv_3x3"}, {(0, 3): "avg_pool_3x3"})
    batches = [(rng.standard_normal((6, 3, 8, 8)), rng.integers(0, 2, 6)) for _ in range(3)]
    correct = 0
    for x, y in batches:
        with T.no_grad():
            logits = net.discrete_forward(x, g).data
        for row, label in zip(logits, y):
            correct += int(np.argmax(row) == label)
    assert evaluate_accuracy(net, g, batches) == correct / 18


def test_accuracy_requires_batches(net):
    with pytest.raises(ValueError):
        evaluate_accuracy(net, Genotype(), [])
