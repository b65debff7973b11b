import math
from fractions import Fraction

import numpy as np
import pytest
from conftest import random_sequence, tiny_arch
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import naive_information, reference_probs, two_pass_variance, welford_variance

from tokenhorizon.engine import ConfigError, forward_prefill, init_params
from tokenhorizon.harness.recipes import held_out
from tokenhorizon.information import (
    InformationProfile,
    LayerStats,
    aggregate_stats,
    detect_horizon,
    information_profile,
    profile_stats,
    profiles_to_csv,
    retained_information,
    stats_to_csv,
    text_only_prob,
    token_information,
)


@pytest.fixture
def model():
    return init_params(tiny_arch(layers=3, width=8, max_len=32), 21)


@pytest.fixture
def seq(model, rng):
    return random_sequence(model.arch, rng, n_visual=5)


# -- metric ----------------------------------------------------------------------------

def test_final_layer_information_is_zero(model, seq):
    depth = model.arch.n_layers
    for k in range(seq.n_visual):
        assert token_information(model, seq, depth, k) == 0.0
    full = forward_prefill(model, seq).probs[seq.label]
    assert text_only_prob(model, seq, depth) == pytest.approx(full, abs=1e-14)


def test_uniform_output_when_unembedding_is_zero(model, seq):
    flat = model.replace(unembed=np.zeros_like(model.params["unembed"]))
    for i in range(model.arch.n_layers + 1):
        assert text_only_prob(flat, seq, i) == pytest.approx(1 / model.arch.vocab_size, abs=1e-15)


def test_text_only_matches_naive_forward(model, seq):
    for i in range(model.arch.n_layers + 1):
        naive = reference_probs(model, seq, zero_after=(i, set()))[seq.label]
        assert abs(text_only_prob(model, seq, i) - naive) < 1e-10


def test_token_information_matches_two_forward_oracle(model, seq):
    for i in range(model.arch.n_layers + 1):
        for k in range(seq.n_visual):
            assert abs(token_information(model, seq, i, k) - naive_information(model, seq, i, k)) < 1e-10


def test_profile_equals_direct_calls_exactly(model, seq, rng):
    prof = information_profile(model, seq)
    assert prof.values.shape == (model.arch.n_layers + 1, seq.n_visual)
    for _ in range(20):
        i = int(rng.integers(0, model.arch.n_layers + 1))
        k = int(rng.integers(0, seq.n_visual))
        assert prof.values[i, k] == token_information(model, seq, i, k)
        assert prof.text_baseline[i] == text_only_prob(model, seq, i)
    assert np.all(prof.values[-1] == 0.0)
    assert np.all(np.abs(prof.values) <= 1) and np.all((prof.text_baseline >= 0) & (prof.text_baseline <= 1))


def test_single_visual_token_profile(model, rng):
    seq = random_sequence(model.arch, rng, n_visual=1)
    prof = information_profile(model, seq)
    for i in range(model.arch.n_layers + 1):
        assert prof.values[i, 0] == token_information(model, seq, i, 0)


def test_profile_subset_of_layers(model, seq):
    prof = information_profile(model, seq, layers=[1])
    assert np.all(np.isnan(prof.values[0])) and np.all(np.isfinite(prof.values[1]))
    np.testing.assert_array_equal(prof.values[1], information_profile(model, seq).values[1])


def test_metric_errors(model, seq):
    with pytest.raises(ConfigError):
        token_information(model, seq, model.arch.n_layers + 1, 0)
    with pytest.raises(ConfigError):
        token_information(model, seq, 0, seq.n_visual)
    seq.label = model.arch.vocab_size
    with pytest.raises(ConfigError):
        text_only_prob(model, seq, 0)


# -- statistics ------------------------------------------------------------------------

def test_profile_stats_hand_values():
    s = profile_stats(np.array([[0.2, 0.4], [0.5, 0.5]]))
    assert s.mean[0] == pytest.approx(0.3) and s.variance[0] == pytest.approx(0.01)
    assert s.variance[1] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=40))
def test_variance_matches_streaming_and_two_pass(row):
    var = profile_stats(np.array([row])).variance[0]
    for oracle in (two_pass_variance(row), welford_variance(row)):
        assert math.isclose(var, oracle, rel_tol=1e-12, abs_tol=1e-15)


def test_aggregate_is_mean_of_per_sample_stats():
    a = InformationProfile(np.array([[0.2, 0.4], [0, 0]]), np.zeros(2), 0, 1.0, "a")
    b = InformationProfile(np.array([[0.0, 0.0], [0, 0]]), np.zeros(2), 0, 1.0, "b")
    agg = aggregate_stats([a, b])
    assert agg.mean[0] == pytest.approx(0.15) and agg.variance[0] == pytest.approx(0.005)


# -- horizon -------------------------------------------------------------------------------

def stats_of(mean, var):
    mean, var = np.asarray(mean, float), np.asarray(var, float)
    return LayerStats(mean, var, np.abs(mean))


def test_horizon_trivial_cases():
    assert detect_horizon(stats_of(np.zeros(7), np.zeros(7))) == 0
    assert detect_horizon(stats_of(np.ones(7), np.ones(7))) is None
    assert detect_horizon(stats_of([0.5, 0.1, 0, 0], [0.1, 0, 0, 0])) == 2
    # a late spike resets the horizon
    assert detect_horizon(stats_of([0.5, 0, 0.01, 0, 0], [0, 0, 0, 0, 0])) == 3
    # variance must also be small
    assert detect_horizon(stats_of([0, 0, 0], [1e-5, 0, 0])) == 1
    assert detect_horizon(stats_of([0.5, 0.5, 0.0], [0, 0, 0]), persistence=3) == 2


def test_horizon_large_tau_is_zero():
    s = stats_of([0.3, -0.2, 0.01, 0], [0.04, 0.01, 0, 0])
    assert detect_horizon(s, tau=1.0) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-0.01, 0.01), st.floats(0, 1e-4)), min_size=1, max_size=12),
       st.floats(1e-5, 1e-2), st.floats(1.0, 10.0))
def test_horizon_monotone_in_tau(rows, tau, factor):
    s = stats_of([m for m, _ in rows], [v for _, v in rows])
    loose, tight = detect_horizon(s, tau * factor), detect_horizon(s, tau)
    if tight is not None:
        assert loose is not None and loose <= tight


def test_horizon_argument_checks():
    with pytest.raises(ConfigError):
        detect_horizon(stats_of([0], [0]), tau=0)
    with pytest.raises(ConfigError):
        detect_horizon(stats_of([0], [0]), persistence=0)


# -- retained information ----------------------------------------------------------------

def test_retained_information_basics():
    values = np.array([[0.1, -0.2, 0.4], [0, 0, 0]])
    assert retained_information(values, 0, ()) == 0.0
    assert retained_information(values, 0, range(3)) == pytest.approx(values[0].sum())
    assert retained_information(values, 0, [1], clamp_negative=True) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.data())
def test_retained_information_exact_sum(row, data):
    kept = data.draw(st.sets(st.integers(0, len(row) - 1)))
    exact = float(sum((Fraction(row[k]) for k in kept), Fraction(0)))
    assert retained_information(np.array([row]), 0, kept) == exact


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30), st.data())
def test_retained_information_additive(ints, data):
    row = np.array(ints) / 1024.0       # dyadic values: sums are exact
    split = data.draw(st.sets(st.integers(0, len(row) - 1)))
    rest = set(range(len(row))) - split
    whole = retained_information(row[None], 0, range(len(row)))
    assert whole == retained_information(row[None], 0, split) + retained_information(row[None], 0, rest)


# -- export ----------------------------------------------------------------------------------

def test_csv_exports(model, seq):
    seq.meta["sample_id"] = 12
    prof = information_profile(model, seq)
    text = profiles_to_csv([prof])
    lines = text.splitlines()
    assert lines[0] == "sample_id,layer,token_index,information"
    assert len(lines) == 1 + prof.values.size
    assert lines[1].startswith("12,0,0,")
    stats = stats_to_csv(profile_stats(prof), prof.text_baseline).splitlines()
    assert stats[0] == "layer,mean,variance,p_text" and len(stats) == model.arch.n_layers + 2


# -- trained model -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lookup_profiles(base_model):
    ds = held_out("lookup", 60, base_model.arch.width)
    return ds, [information_profile(base_model, ds[i]) for i in range(len(ds))]


def test_queried_cell_carries_most_information_at_layer_zero(lookup_profiles):
    ds, profiles = lookup_profiles
    hits = [int(np.argmax(p.values[0])) == int(ds.rows[i] * ds.grid_side + ds.cols[i])
            for i, p in enumerate(profiles)]
    assert np.mean(hits) >= 0.7


def test_variance_decays_on_trained_model(lookup_profiles):
    _, profiles = lookup_profiles
    var = aggregate_stats(profiles).variance
    peak = var.max()
    assert any(var[i] < 0.1 * peak for i in range(int(np.argmax(var)) + 1, len(var) - 1))
    assert all(np.all(np.abs(p.values) <= 1) for p in profiles)
