import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from tgbfn import core
from tgbfn.denoiser import DenoiserConfig, init_denoiser
from tgbfn.errors import InvalidArgument
from tgbfn.guidance import GuidanceConfig, init_guidance
from tgbfn.sampling import (SamplerConfig, bfn_sample, calibrated_category, draw_categorical,
                            gbf_sample, lane_rng, nearest_category, run_sampler, tgbfn_sample)

D, K = 5, 6


@pytest.fixture(scope="module")
def nets():
    rng = np.random.default_rng(0)
    den = init_denoiser(DenoiserConfig(D=D, K=K, width=16, mix_rank=4, time_features=8,
                                       conditional=True), rng, zero_head=False)
    unit = init_guidance(GuidanceConfig(D=D, K=K, width=16), rng)  # zero head: constant weight
    guide = init_guidance(GuidanceConfig(D=D, K=K, width=16), rng, zero_head=False)
    return den, unit, guide


def test_nearest_category_examples():
    assert nearest_category(2.4, 5) == 2
    assert nearest_category(2.6, 5) == 3
    assert nearest_category(2.5, 5) == 2  # ties round down
    assert nearest_category(0.2, 5) == 1
    assert nearest_category(7.9, 5) == 5
    np.testing.assert_array_equal(nearest_category(np.array([1.5, 3.5, 4.51]), 5), [1, 3, 5])
    with pytest.raises(InvalidArgument):
        nearest_category(np.nan, 5)


@given(st.floats(-100, 100), st.integers(2, 50))
def test_nearest_category_is_closest(z, k):
    c = nearest_category(z, k)
    assert 1 <= c <= k
    dists = np.abs(np.arange(1, k + 1) - z)
    assert abs(c - z) == dists.min()


def test_draw_categorical_inverse_cdf():
    p = np.array([[0.2, 0.3, 0.5]] * 4)
    np.testing.assert_array_equal(draw_categorical(p, np.array([0.0, 0.19, 0.2, 0.99])),
                                  [1, 1, 2, 3])


def test_calibrated_category_h1_is_plain_draw():
    p = np.random.default_rng(1).dirichlet(np.ones(K), size=D)
    a = calibrated_category(p, 1, np.random.default_rng(2))
    b = draw_categorical(p, np.random.default_rng(2).random((1, D)))[0]
    np.testing.assert_array_equal(a, b)


def test_calibrated_category_concentrates():
    p = np.zeros((1, 10))
    p[0, 4] = 0.9
    p[0, [3, 5]] = 0.05
    rng = np.random.default_rng(3)
    hits = np.mean([calibrated_category(p, 8, rng)[0] == 5 for _ in range(2000)])
    assert hits > 0.99


def test_calibrated_category_rejects_bad_h():
    with pytest.raises(InvalidArgument):
        calibrated_category(np.full((1, 2), 0.5), 0, np.random.default_rng(0))


def test_single_step_final_draw_is_uniform(nets):
    # zero-head network: uniform outputs, so final tokens are uniform over 1..K
    den = init_denoiser(DenoiserConfig(D=D, K=K, width=16, mix_rank=4, time_features=8),
                        np.random.default_rng(4))
    res = bfn_sample(den, SamplerConfig(n=1, seed=5), count=2000)
    counts = np.bincount(res.tokens.ravel(), minlength=K + 1)[1:]
    assert chisquare(counts).pvalue > 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_degeneracy_chain_bit_identical(nets, seed):
    den, unit, _ = nets
    cond = np.random.default_rng(100 + seed).normal(size=(3, 2))
    a = bfn_sample(den, SamplerConfig(n=12, seed=seed, mode="bfn"), cond=cond)
    b = gbf_sample(den, unit, cond, SamplerConfig(n=12, seed=seed, mode="gbf"))
    c = tgbfn_sample(den, unit, cond, SamplerConfig(n=12, seed=seed, mode="tgbfn", m=1, H=1))
    for other in (b, c):
        np.testing.assert_array_equal(a.tokens, other.tokens)
        np.testing.assert_array_equal(a.theta, other.theta)


def test_m1_ignores_guidance_values(nets):
    den, unit, guide = nets
    cond = np.zeros((2, 2))
    a = tgbfn_sample(den, unit, cond, SamplerConfig(n=8, seed=1, mode="tgbfn"))
    b = tgbfn_sample(den, guide, cond, SamplerConfig(n=8, seed=1, mode="tgbfn"))
    np.testing.assert_array_equal(a.theta, b.theta)


def test_aggregate_is_convex_combination(nets):
    den, _, guide = nets
    cond = np.random.default_rng(6).normal(size=(4, 2))
    res = tgbfn_sample(den, guide, cond, SamplerConfig(n=10, seed=2, mode="tgbfn", m=4, H=2),
                       record_trace=True)
    assert np.all(res.theta >= 0)
    np.testing.assert_allclose(res.theta.sum(-1), 1.0, atol=1e-12)
    assert len(res.trace) == 10
    for step in res.trace:
        assert step.log_weights.shape == (4, 4)
        assert np.all(np.isfinite(step.log_weights))


def test_guidance_changes_trajectory(nets):
    den, unit, guide = nets
    cond = np.random.default_rng(7).normal(size=(4, 2))
    a = tgbfn_sample(den, unit, cond, SamplerConfig(n=10, seed=3, mode="tgbfn", m=4))
    b = tgbfn_sample(den, guide, cond, SamplerConfig(n=10, seed=3, mode="tgbfn", m=4))
    assert not np.array_equal(a.theta, b.theta)


def test_sampling_is_seed_deterministic(nets):
    den, _, guide = nets
    cond = np.zeros((3, 2))
    cfg = SamplerConfig(n=6, seed=11, mode="tgbfn", m=3, H=3)
    a = tgbfn_sample(den, guide, cond, cfg)
    b = tgbfn_sample(den, guide, cond, cfg)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    c = tgbfn_sample(den, guide, cond, SamplerConfig(n=6, seed=12, mode="tgbfn", m=3, H=3))
    assert not np.array_equal(a.theta, c.theta)


def test_lane_streams_are_independent():
    a = lane_rng(0, 1, 0).random(4)
    b = lane_rng(0, 1, 1).random(4)
    c = lane_rng(0, 2, 0).random(4)
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    np.testing.assert_array_equal(a, lane_rng(0, 1, 0).random(4))


def test_tokens_in_range_and_theta_on_simplex(nets):
    den, _, guide = nets
    res = run_sampler(den, SamplerConfig(n=5, mode="tgbfn", m=2, H=3), cond=np.ones((3, 2)),
                      guidance=guide)
    assert res.tokens.shape == (3, D)
    assert res.tokens.min() >= 1 and res.tokens.max() <= K
    np.testing.assert_allclose(res.theta.sum(-1), 1.0, atol=1e-12)


def test_mode_and_argument_validation(nets):
    den, unit, _ = nets
    with pytest.raises(InvalidArgument):
        SamplerConfig(mode="ddpm")
    with pytest.raises(InvalidArgument):
        SamplerConfig(m=0)
    with pytest.raises(InvalidArgument):
        run_sampler(den, SamplerConfig(mode="tgbfn"), cond=np.zeros((1, 2)))
    with pytest.raises(InvalidArgument):
        bfn_sample(den, SamplerConfig(mode="tgbfn"), cond=np.zeros((1, 2)))
    uncond = init_denoiser(DenoiserConfig(D=D, K=K, width=16, mix_rank=4), np.random.default_rng(0))
    with pytest.raises(InvalidArgument):
        bfn_sample(uncond, SamplerConfig())


def test_unconditional_skeleton_with_guidance(nets):
    _, _, guide = nets
    uncond = init_denoiser(DenoiserConfig(D=D, K=K, width=16, mix_rank=4), np.random.default_rng(8),
                           zero_head=False)
    res = tgbfn_sample(uncond, guide, np.zeros((2, 2)), SamplerConfig(n=4, mode="tgbfn", m=2))
    assert res.tokens.shape == (2, D)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_update_closure_through_sampler(seed):
    rng = np.random.default_rng(seed)
    theta = rng.dirichlet(np.ones(K), size=D)
    k = rng.integers(1, K + 1, D)
    out = core.bayesian_update(theta, core.sample_sender(k, 0.3, K, rng))
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
