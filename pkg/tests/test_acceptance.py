"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Tolerances are pinned as module constants.  Trained checkpoints come from the
on-disk cache (see conftest.trained); a cold cache trains them first.
"""

import time

import numpy as np
import pytest
from conftest import random_sequence, tiny_arch, trained
from oracles import exhaustive_maxmin, min_pairwise, naive_information, reference_probs
from test_efficiency import random_toy_case
from test_train import central_difference, small_data

from tokenhorizon.cli import main
from tokenhorizon.efficiency import (
    ARCH_PRESETS,
    LLAVA_N_TEXT,
    LLAVA_REFERENCE_FLOPS,
    calibrate_n_text,
    flops_estimate,
    relative_reduction,
)
from tokenhorizon.engine import (
    CaptureFlags,
    forward_prefill,
    init_params,
    loss_and_grads,
    resume_forward,
    save_checkpoint,
)
from tokenhorizon.engine.model import ModelCheckpoint
from tokenhorizon.harness.experiments import (
    run_info_prune_curve,
    run_schedule_bench,
    run_strategy_eval,
    withdraw_curve,
)
from tokenhorizon.harness.recipes import held_out
from tokenhorizon.information import token_information
from tokenhorizon.pruning import strategies
from tokenhorizon.pruning.apply import apply_schedule
from tokenhorizon.pruning.schedule import EMPTY, load_preset

TAU = 1e-3
METRIC_TOL = 1e-6
DROP_TOL = 1e-5
GRAD_TOL = 1e-6
GRAD_STEP = 1e-5
PRUNE_RATIO = 0.75
BASELINE_SLACK = 0.02
HORIZON_ACC_SLACK = 0.01
HORIZON_AGREEMENT = 2
HYBRID_SLACK = 0.005
LLAVA_TARGET, LLAVA_BAND = 74.4, 10.0
SEEDS = (0, 1, 2)
N_EVAL = 200
N_HYBRID = 1000


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def model():
    return trained(0)


@pytest.fixture(scope="module")
def lookup(model):
    return held_out("lookup", N_EVAL, model.arch.width)


@pytest.fixture(scope="module")
def lookup_withdraw(model, lookup):
    return withdraw_curve(model, lookup, n_profile=N_EVAL, tau=TAU)


def test_c01_metric_oracle(model, lookup, verdict):
    # the engine runs in the checkpoint's storage precision; the comparison is
    # made in double precision on the same trained weights, and the single
    # precision error is reported alongside
    start = time.perf_counter()
    wide = ModelCheckpoint(model.arch.with_precision("double"), model.cast(np.float64).params)
    rng = np.random.default_rng(101)
    depth, worst, worst_single = model.arch.n_layers, 0.0, 0.0
    for _ in range(20):
        seq = lookup[int(rng.integers(len(lookup)))]
        layer, token = int(rng.integers(0, depth + 1)), int(rng.integers(0, seq.n_visual))
        naive = naive_information(model, seq, layer, token)
        worst = max(worst, abs(token_information(wide, seq, layer, token) - naive))
        worst_single = max(worst_single, abs(token_information(model, seq, layer, token) - naive))
    last_row_zero = all(token_information(m, lookup[s], depth, k) == 0.0 for m in (model, wide)
                        for s in range(3) for k in range(lookup.n_visual))
    secs = time.perf_counter() - start
    verdict(1, "metric oracle", worst <= METRIC_TOL and last_row_zero and secs < 60,
            f"max |error| {worst:.2e} in double precision (tol {METRIC_TOL:g}; "
            f"{worst_single:.2e} in single), final row zero {last_row_zero}, {secs:.1f}s")


def test_c02_drop_oracle(model, lookup, verdict):
    rng = np.random.default_rng(102)
    depth, worst = model.arch.n_layers, 0.0
    for _ in range(50):
        seq = lookup[int(rng.integers(len(lookup)))]
        layer = int(rng.integers(0, depth + 1))
        keep = sorted(rng.choice(seq.n_visual, int(rng.integers(0, seq.n_visual + 1)),
                                 replace=False).tolist())
        state = forward_prefill(model, seq, CaptureFlags(layers=[layer])).checkpoints[layer]
        got = resume_forward(model, state, keep=tuple(keep)).probs
        ref = reference_probs(model, seq, drop_after=(layer, set(keep)))
        worst = max(worst, float(np.abs(got - ref).max()))
    verdict(2, "drop vs masked-attention oracle", worst <= DROP_TOL,
            f"max |error| {worst:.2e} over 50 cases (tol {DROP_TOL:g})")


def test_c03_gradient_check(verdict):
    ckpt = init_params(tiny_arch("double", layers=2, width=8), 11)
    ds = small_data(4)
    batch = ds.collate(np.arange(len(ds)))
    _, grads = loss_and_grads(ckpt, batch)
    rng = np.random.default_rng(103)
    worst = 0.0
    for name in ckpt.params:
        for _ in range(3):
            index = tuple(int(rng.integers(0, s)) for s in ckpt.params[name].shape)
            if name == "tok_emb":
                index = (int(batch.token_ids[0, 0]), index[1])
            numeric = central_difference(ckpt, batch, name, index, GRAD_STEP)
            analytic = grads[name][index]
            worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    verdict(3, "gradient check", worst < GRAD_TOL,
            f"max relative error {worst:.2e} (tol {GRAD_TOL:g}, step {GRAD_STEP:g})")


def test_c04_maxmin_two_approximation(verdict):
    rng = np.random.default_rng(104)
    worst, worst_angular, below = np.inf, np.inf, 0
    for _ in range(100):
        n = int(rng.integers(2, 11))
        keep = int(rng.integers(2, min(4, n) + 1))
        feats = rng.normal(size=(n, int(rng.integers(2, 6))))
        dist = strategies.cosine_distance_matrix(feats)
        chosen = strategies.maxmin_diversity(feats, range(n), keep)
        ratio = min_pairwise(dist, chosen) / exhaustive_maxmin(dist, keep)
        # angular distance is a metric with the same ordering as 1 - cos
        angle = np.arccos(np.clip(1.0 - dist, -1.0, 1.0))
        worst_angular = min(worst_angular, min_pairwise(angle, chosen) / exhaustive_maxmin(angle, keep))
        worst = min(worst, ratio)
        below += ratio < 0.5
    verdict(4, "max-min 2-approximation", worst >= 0.5,
            f"worst greedy/optimum ratio {worst:.3f} in cosine distance, {below}/100 below 0.5 "
            f"(need >= 0.5); worst ratio in angular distance {worst_angular:.3f}")


def test_c05_low_information_pruning(model, lookup, lookup_withdraw, verdict):
    horizon = lookup_withdraw["detected_horizon"]
    layers = list(range(horizon if horizon is not None else model.arch.n_layers))
    res = run_info_prune_curve(model, lookup, [PRUNE_RATIO], layers, seed=0)
    base = res.summary["baseline_accuracy"]
    bad = [(layer, acc_i, acc_r) for layer, _, acc_i, acc_r, _ in res.rows
           if acc_i < acc_r or acc_i < base - BASELINE_SLACK]
    cells = ", ".join(f"layer {layer}: {acc_i:.3f}/{acc_r:.3f}" for layer, _, acc_i, acc_r, _ in res.rows)
    verdict(5, "low-information pruning beats random", not bad,
            f"horizon {horizon}, baseline {base:.3f}, informed/random {cells}")


def test_c06_deep_layer_convergence(model, lookup, lookup_withdraw, verdict):
    horizon = lookup_withdraw["detected_horizon"]
    depth = model.arch.n_layers
    assert horizon is not None, "no horizon detected"
    res = run_strategy_eval(model, lookup, ["Random", "MaxMinDiversity", "AttentionTopK"],
                            [0.25, 0.5, 0.75], range(depth + 1), seed=0, tau=TAU)
    got = {(s, r, layer): v for s, r, layer, v in res.rows}
    limit = TAU * lookup.n_visual
    gaps = [abs(got[name, r, layer] - got["Random", r, layer])
            for name in ("MaxMinDiversity", "AttentionTopK") for r in (0.25, 0.5, 0.75)
            for layer in range(horizon, depth + 1)]
    worst = max(gaps)
    verdict(6, "informed and random retain the same information past the horizon",
            worst <= limit, f"layers {horizon}..{depth}, max gap {worst:.2e} (limit {limit:g})")


def test_c07_horizon_existence(model, lookup_withdraw, verdict):
    c = lookup_withdraw
    depth = model.arch.n_layers
    stars = [j for j in range(depth) if c["accuracy"][j] >= c["baseline"] - HORIZON_ACC_SLACK - 1e-12
             and c["stats"].mean_abs[j] <= TAU]
    star = stars[0] if stars else None
    det = c["detected_horizon"]
    ok = star is not None and det is not None and abs(det - star) <= HORIZON_AGREEMENT
    verdict(7, "horizon existence", ok,
            f"i* {star}, detected {det}, accuracy-only horizon {c['empirical_horizon']}, "
            "mean |info| " + " ".join(f"{v:.1e}" for v in c["stats"].mean_abs))


def test_c08_task_complexity_ordering(verdict):
    votes, details = 0, []
    for seed in SEEDS:
        ckpt = trained(seed)
        horizons = {task: withdraw_curve(ckpt, held_out(task, N_EVAL, ckpt.arch.width),
                                         n_profile=0)["empirical_horizon"]
                    for task in ("lookup", "majority")}
        votes += horizons["lookup"] >= horizons["majority"]
        details.append(f"seed {seed}: {horizons['lookup']} vs {horizons['majority']}")
    verdict(8, "lookup horizon >= majority horizon", votes * 2 > len(SEEDS),
            f"{votes}/{len(SEEDS)} seeds ({'; '.join(details)})")


def test_c09_hybrid_direction(verdict):
    hybrid, withdraw = load_preset("toy-maxmin-random"), load_preset("toy-maxmin-vtw")
    assert np.mean(hybrid.tokens_per_layer(16, 6)) == np.mean(withdraw.tokens_per_layer(16, 6))
    diffs, details = [], []
    for seed in SEEDS:
        ckpt = trained(seed)
        ds = held_out("lookup", N_HYBRID, ckpt.arch.width)
        res = run_schedule_bench(ckpt, ds, [hybrid, withdraw], seed=seed)
        acc = dict(zip(res.column("method"), res.column("accuracy")))
        diffs.append(acc[hybrid.name] - acc[withdraw.name])
        details.append(f"seed {seed}: {acc[hybrid.name]:.3f} vs {acc[withdraw.name]:.3f}")
    mean = float(np.mean(diffs))
    verdict(9, "max-min + random vs max-min + withdraw", mean >= -HYBRID_SLACK,
            f"mean difference {100 * mean:+.2f} pts (floor {-100 * HYBRID_SLACK:.1f}); "
            + "; ".join(details))


def test_c10_flops_equal_mac_counter(verdict):
    rng = np.random.default_rng(110)
    mismatches = 0
    for _ in range(50):
        arch, sched, n_visual = random_toy_case(rng)
        ckpt = init_params(arch, 0)
        seq = random_sequence(arch, rng, n_visual=n_visual, n_question=2)
        macs = apply_schedule(ckpt, seq, sched).result.macs
        mismatches += 2 * macs != flops_estimate(arch, sched, seq.n_text, n_visual).total_flops
    verdict(10, "FLOPs estimator equals 2 x MAC counter", mismatches == 0,
            f"{mismatches} mismatches over 50 random pairs")


def test_c11_llava_flops_ratio(verdict):
    start = time.perf_counter()
    arch = ARCH_PRESETS["llava-7b"]
    n_text = calibrate_n_text(arch, 576, LLAVA_REFERENCE_FLOPS)
    base = flops_estimate(arch, EMPTY, n_text, 576)
    pruned = flops_estimate(arch, load_preset("dart-random-64"), n_text, 576)
    reduction = 100 * relative_reduction(pruned, base)
    secs = time.perf_counter() - start
    ok = n_text == LLAVA_N_TEXT and abs(reduction - LLAVA_TARGET) <= LLAVA_BAND and secs < 1
    verdict(11, "LLaVA FLOPs reduction", ok,
            f"baseline {base.total_flops / 1e12:.3f} T at n_text {n_text}, reduction "
            f"{reduction:.2f}% (target {LLAVA_TARGET} +/- {LLAVA_BAND}), {secs * 1000:.0f} ms")


def test_c12_cli_determinism(model, tmp_path, verdict):
    ckpt = tmp_path / "base.ckpt"
    save_checkpoint(model, ckpt)
    cfg = tmp_path / "sweep.ini"
    cfg.write_text("[sweep]\nratios = 0.5\nretain_ratios = 0.5\nlayers = 0 2 4\n"
                   "n_profile = 6\nschedules = toy-maxmin-vtw toy-maxmin-random\n")

    def run_all(out, threads):
        out.mkdir()
        small = out / "small.ckpt"
        codes = [main(["train", "--preset", "small", "--steps", "5", "--n-train", "64",
                       "--batch", "8", "--eval-samples", "10", "-o", str(small)])]
        common = ["--out-dir", str(out), "--threads", str(threads)]
        codes.append(main(["profile", "--checkpoint", str(ckpt), "--samples", "6"] + common))
        for exp in ("E1", "E2", "E3", "E4"):
            codes.append(main(["sweep", exp, "--checkpoint", str(ckpt), "--config", str(cfg),
                               "--samples", "6"] + common))
        codes.append(main(["sweep", "E5", "--checkpoint", str(small), "--checkpoint", str(ckpt),
                           "--config", str(cfg), "--samples", "6"] + common))
        codes.append(main(["flops", "--schedule", "dart-random-64", "--out-dir", str(out)]))
        files = {p.name: p.read_bytes() for p in sorted(out.iterdir())
                 if p.suffix in (".csv", ".ckpt", ".svg")}
        return codes, files

    runs = [run_all(tmp_path / name, threads) for name, threads in
            (("a", 1), ("b", 1), ("c", 2))]
    codes_ok = all(code == 0 for codes, _ in runs for code in codes)
    first = runs[0][1]
    same = all(files == first for _, files in runs[1:])
    n_csv = sum(name.endswith(".csv") for name in first)
    verdict(12, "CLI determinism", codes_ok and same and n_csv >= 7,
            f"{len(first)} output files ({n_csv} CSV) identical across 3 runs "
            f"(threads 1, 1, 2): {same}; exit codes ok: {codes_ok}")
