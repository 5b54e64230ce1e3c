import numpy as np
import pytest

from tndnas.data import generate_synthetic, split
from tndnas.engine import (
    METRIC_COLUMNS,
    CheckpointError,
    ConfigError,
    Search,
    StageConfig,
    default_stages,
    grow_layers,
    quartile_means,
    read_metrics_csv,
    run_search,
    transition_stage,
    validate_stages,
    write_metrics_csv,
)
from tndnas.objectives import RewardSpec
from tndnas.searchspace import CELL_TYPES, Genotype, NORMAL_OPS, REDUCTION_OPS
from tndnas.searchspace.genotype import top_k_indices


@pytest.fixture(scope="module")
def tiny():
    ds = generate_synthetic(classes=3, per_class=8, size=8, seed=0)
    return split(ds, 0.5, seed=0)


def tiny_stage(**kw):
    base = dict(layers=3, channels=2, epochs=2, pretrain_epochs=0, rl_interval=1, batch_size=6, samples_per_update=2)
    base.update(kw)
    return StageConfig(**base)


# ------------------------------------------------------------ configuration


def test_stage_config_invariants():
    with pytest.raises(ConfigError, match="pretrain_epochs"):
        StageConfig(layers=5, epochs=3, pretrain_epochs=3)
    with pytest.raises(ConfigError, match="rl_interval"):
        StageConfig(layers=5, rl_interval=0)
    with pytest.raises(ConfigError, match="weight_training"):
        StageConfig(layers=5, weight_training="both")


def test_default_schedule_and_growth():
    stages = default_stages()
    assert [grow_layers(stages, k) for k in range(3)] == [5, 8, 11]
    assert grow_layers(stages, 1) == 8
    channels = [s.channels for s in stages]
    assert channels == sorted(channels, reverse=True)
    validate_stages(stages)


def test_layers_must_strictly_increase():
    with pytest.raises(ConfigError, match="strictly"):
        validate_stages([StageConfig(layers=l) for l in (5, 5, 8)])


def test_keep_must_fit_candidates():
    with pytest.raises(ConfigError, match="exceeds"):
        validate_stages([StageConfig(layers=5, keep_normal=11)])
    with pytest.raises(ConfigError, match="exceeds"):
        validate_stages([StageConfig(layers=5, keep_normal=4), StageConfig(layers=8, keep_normal=6)])


def test_bad_keep_rejected_before_training(tiny):
    train, val = tiny
    with pytest.raises(ConfigError):
        Search([tiny_stage(keep_reduction=7)], train, val)


# ------------------------------------------------------------ search runs


def test_no_policy_updates_means_uniform_alpha(tiny):
    train, val = tiny
    stage = tiny_stage(epochs=2, pretrain_epochs=1, rl_interval=10_000)
    res = run_search([stage], train, val, seed=0)
    assert res.history == []
    for ct in CELL_TYPES:
        assert all(np.all(a == 0) for a in res.stage_alphas[0].values[ct])
    # uniform logits tie-break to the first candidate, "none", on every edge
    assert res.genotype == Genotype({}, {})


def test_three_stage_toy_run(tiny):
    train, val = tiny
    stages = [
        tiny_stage(layers=3, keep_normal=10, keep_reduction=6),
        tiny_stage(layers=4, keep_normal=6, keep_reduction=4),
        tiny_stage(layers=5, keep_normal=4, keep_reduction=3),
    ]
    search = Search(stages, train, val, seed=1)
    search.run()
    res = search.result()
    assert all(len(c) == 4 for c in res.candidates["normal"])
    assert all(len(c) == 3 for c in res.candidates["reduction"])
    assert res.network_config.layers == 5
    assert [r.iteration for r in res.history] == list(range(len(res.history)))
    assert sorted({r.stage for r in res.history}) == [0, 1, 2]
    for ct in CELL_TYPES:
        for op in res.genotype.cell(ct).values():
            assert op in (NORMAL_OPS if ct == "normal" else REDUCTION_OPS)
    assert 0 <= res.final_accuracy <= 1 and res.final_params > 0


def test_transition_keeps_top_alpha_in_order(tiny):
    train, val = tiny
    stages = [tiny_stage(layers=3, keep_normal=3, keep_reduction=2), tiny_stage(layers=4, keep_normal=3, keep_reduction=2)]
    search = Search(stages, train, val, seed=2)
    rng = np.random.default_rng(0)
    for ct in CELL_TYPES:
        for a in search.alpha.values[ct]:
            a[:] = rng.standard_normal(len(a))
    logged = search.alpha.copy()
    old_w = search.net.stem_conv.w.data.copy()
    search.baseline.update(0.7)
    transition_stage(search)
    assert search.stage == 1 and search.config.layers == 4
    for ct in CELL_TYPES:
        keep = stages[0].keep()[ct]
        for e, names in enumerate(logged.ops[ct]):
            expect = tuple(names[i] for i in top_k_indices(logged.values[ct][e], keep))
            assert search.candidates[ct][e] == expect
            assert list(expect) == [n for n in names if n in expect]
        assert all(np.all(a == 0) for a in search.alpha.values[ct])
    assert not search.baseline.initialized
    new_w = search.net.stem_conv.w.data
    # fresh He-normal init: distinct draw with variance near 2 / fan_in
    assert not np.allclose(new_w, old_w)
    assert abs(new_w.var() / (2 / 27) - 1) < 0.5


def test_policy_update_count_and_progress(tiny):
    train, val = tiny
    seen = []
    stage = tiny_stage(epochs=3, pretrain_epochs=1, rl_interval=1)
    search = Search([stage], train, val, seed=0, progress=seen.append)
    search.run()
    # 12 train images / batch 6 = 2 steps per epoch; updates only in epochs 1 and 2
    assert len(seen) == 4 and search.history == seen


def test_history_records_consistent(tiny):
    train, val = tiny
    res = run_search([tiny_stage(epochs=2, samples_per_update=3)], train, val, seed=3)
    for r in res.history:
        assert 0 <= r.max_sampled_accuracy <= 1 and 0 <= r.argmax_genotype_accuracy <= 1
        assert r.mean_sampled_params > 0


def test_fixed_reward_spec_params_only(tiny):
    train, val = tiny
    spec = RewardSpec(1000.0, -1.0, use_accuracy=False)
    res = run_search([tiny_stage(epochs=2)], train, val, spec, seed=0)
    for r in res.history:
        assert r.reward_mean > 0


def test_sampled_weight_training(tiny):
    train, val = tiny
    res = run_search([tiny_stage(weight_training="sampled")], train, val, seed=0)
    assert len(res.history) == 4


def test_same_seed_reproducible(tiny):
    train, val = tiny
    a = run_search([tiny_stage()], train, val, seed=5)
    b = run_search([tiny_stage()], train, val, seed=5)
    assert a.genotype == b.genotype and a.history == b.history


def test_threaded_evaluation_matches_serial(tiny):
    train, val = tiny
    a = run_search([tiny_stage()], train, val, seed=5)
    b = run_search([tiny_stage()], train, val, seed=5, workers=3)
    assert a.genotype == b.genotype and a.history == b.history


# ------------------------------------------------------------ checkpoints


@pytest.mark.parametrize("stop_after", [1, 3, 6])
def test_resume_replays_uninterrupted_run(tiny, tmp_path, stop_after):
    train, val = tiny
    stages = [tiny_stage(layers=3, keep_normal=5, keep_reduction=4), tiny_stage(layers=4, keep_normal=3, keep_reduction=2)]
    full = Search(stages, train, val, seed=7).run().result()
    part = Search(stages, train, val, seed=7).run(max_steps=stop_after)
    path = tmp_path / "ckpt.npz"
    part.save(path)
    resumed = Search.load(path, train, val).run().result()
    assert resumed.genotype == full.genotype
    assert resumed.history == full.history
    assert resumed.final_accuracy == full.final_accuracy
    assert resumed.candidates == full.candidates


def test_finished_checkpoint_reloads(tiny, tmp_path):
    train, val = tiny
    stages = [tiny_stage(layers=3, keep_normal=5, keep_reduction=4), tiny_stage(layers=4, keep_normal=3, keep_reduction=2)]
    done = Search(stages, train, val, seed=7).run()
    done.save(tmp_path / "c.npz")
    again = Search.load(tmp_path / "c.npz", train, val)
    assert again.done and again.result().genotype == done.result().genotype
    assert again.candidates == done.candidates


def test_checkpoint_rejects_other_dataset(tiny, tmp_path):
    train, val = tiny
    s = Search([tiny_stage()], train, val, seed=0)
    s.save(tmp_path / "c.npz")
    with pytest.raises(CheckpointError, match="different dataset"):
        Search.load(tmp_path / "c.npz", val, train)


def test_checkpoint_rejects_garbage(tiny, tmp_path):
    train, val = tiny
    bad = tmp_path / "c.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        Search.load(bad, train, val)


def test_checkpoint_write_is_atomic(tiny, tmp_path):
    train, val = tiny
    s = Search([tiny_stage()], train, val, seed=0)
    s.save(tmp_path / "c.npz")
    s.save(tmp_path / "c.npz")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c.npz"]


# ------------------------------------------------------------ metrics file


def test_metrics_csv_roundtrip(tiny, tmp_path):
    train, val = tiny
    res = run_search([tiny_stage()], train, val, seed=0)
    write_metrics_csv(res.history, tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header == ",".join(METRIC_COLUMNS)
    cols = read_metrics_csv(tmp_path / "m.csv")
    assert list(cols["reward_mean"]) == [r.reward_mean for r in res.history]


def test_quartile_means():
    assert quartile_means([1, 2, 3, 4, 5, 6, 7, 8]) == (1.5, 7.5)
    assert quartile_means([2.0]) == (2.0, 2.0)
