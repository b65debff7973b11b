import pytest

from tokenhorizon.engine import ConfigError, init_params
from tokenhorizon.harness.experiments import (
    empirical_horizon,
    map_samples,
    run_capacity_comparison,
    run_info_prune_curve,
    run_schedule_bench,
    run_strategy_eval,
    run_withdraw_sweep,
    sample_seed,
)
from tokenhorizon.harness.plots import result_svgs
from tokenhorizon.harness.recipes import accuracy, held_out, preset_arch
from tokenhorizon.pruning.schedule import PruneAction, PruneSchedule, load_preset


@pytest.fixture(scope="module")
def lookup(base_model):
    return held_out("lookup", 40, base_model.arch.width)


def test_map_samples_keeps_order():
    assert map_samples(abs, range(-7, 0), workers=3) == [7, 6, 5, 4, 3, 2, 1]


def test_sample_seeds_differ():
    seeds = {sample_seed(0, i, j) for i in range(5) for j in range(5)}
    assert len(seeds) == 25 and sample_seed(1, 2, 3) == sample_seed(1, 2, 3)


def test_empirical_horizon():
    assert empirical_horizon([0.3, 0.5, 0.97, 0.98], 0.98) == 2
    assert empirical_horizon([0.3, 0.3], 0.9) == 1


def test_info_prune_edges(base_model, lookup):
    depth = base_model.arch.n_layers
    res = run_info_prune_curve(base_model, lookup, ratios=[0.0, 0.75], layers=[0, depth])
    base = res.summary["baseline_accuracy"]
    assert base == pytest.approx(accuracy(base_model, lookup))
    for layer, ratio, informed, rand, b in res.rows:
        assert b == base
        if ratio == 0.0 or layer == depth:
            assert informed == base and rand == base
    with pytest.raises(ConfigError):
        run_info_prune_curve(base_model, lookup, ratios=[1.5], layers=[0])
    with pytest.raises(ConfigError):
        run_info_prune_curve(base_model, lookup, ratios=[0.5], layers=[depth + 1])


def test_strategy_eval_edges(base_model, lookup):
    small = lookup.subset(range(10))
    res = run_strategy_eval(base_model, small, ["Withdraw", "Random", "AttentionTopK"],
                            ratios=[1.0], layers=[0, 2])
    got = {(s, layer): v for s, r, layer, v in res.rows}
    assert got["Withdraw", 0] == 0.0 and got["Withdraw", 2] == 0.0
    assert ("AttentionTopK", 0) not in got and ("AttentionTopK", 2) in got
    # keeping every token retains the full (signed) row sum: same for every rule
    assert got["Random", 2] == pytest.approx(got["AttentionTopK", 2], abs=1e-12)
    assert res.summary["detected_horizon"] is None     # not every layer was profiled
    with pytest.raises(ConfigError):
        run_strategy_eval(base_model, small, ["Bogus"], [0.5], [0])


def test_withdraw_sweep_endpoints(base_model, lookup):
    depth = base_model.arch.n_layers
    res = run_withdraw_sweep(base_model, {"lookup": lookup}, n_profile=10)
    accs = res.column("withdraw_accuracy")
    base = res.summary["lookup.baseline_accuracy"]
    assert len(accs) == depth + 1 and accs[depth] == base
    # nothing visual survives at layer 0: the answer is a guess among the colours
    assert abs(accs[0] - 1 / lookup.n_colors) <= 0.15
    assert res.rows[depth][4] == 0.0


def test_schedule_bench_empty_schedule(base_model, lookup):
    res = run_schedule_bench(base_model, lookup, [PruneSchedule("empty"),
                                                  load_preset("toy-maxmin-vtw")])
    assert res.rows[0][0] == "none" and res.rows[1][2] == 1.0
    assert res.rows[2][4] < res.rows[0][4]
    with pytest.raises(ConfigError):
        run_schedule_bench(base_model, lookup, [PruneSchedule("x", (PruneAction(9, "Random", .5),))])


def test_worker_count_does_not_change_bytes(base_model, lookup):
    small = lookup.subset(range(12))
    one = run_info_prune_curve(base_model, small, [0.5], [0, 1], seed=3, workers=1)
    two = run_info_prune_curve(base_model, small, [0.5], [0, 1], seed=3, workers=2)
    assert one.to_csv("m") == two.to_csv("m")
    assert one.to_csv("m").startswith("# manifest: m\n")


def test_svgs_are_deterministic(base_model, lookup):
    small = lookup.subset(range(6))
    res = run_info_prune_curve(base_model, small, [0.5], [0, 1, 2])
    a, b = result_svgs(res), result_svgs(res)
    assert a == b and len(a) == 1
    assert next(iter(a.values())).lstrip().startswith("<?xml")


def test_capacity_comparison_shape():
    models = {name: init_params(preset_arch(name), 0) for name in ("small", "large")}
    data = {name: {"lookup": held_out("lookup", 8, models[name].arch.width)} for name in models}
    res = run_capacity_comparison(models, data, n_profile=2)
    assert [r[0] for r in res.rows] == ["small", "large"]
    assert [r[2] for r in res.rows] == [4, 8]
    assert isinstance(res.summary["deeper_with_capacity"], bool)
    with pytest.raises(ConfigError):
        run_capacity_comparison({"small": models["small"]}, data)
