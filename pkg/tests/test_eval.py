import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgbfn import shapes
from tgbfn.denoiser import DenoiserConfig, init_denoiser
from tgbfn.errors import InvalidArgument
from tgbfn.evaluate import (ablation_grid, compute_metrics, evaluate_sampler, pearson,
                            reports_to_csv)
from tgbfn.guidance import GuidanceConfig, init_guidance
from tgbfn.sampling import SamplerConfig


def test_metric_example_constant_prediction():
    r = compute_metrics([[1.0], [2.0], [3.0]], [[2.0], [2.0], [2.0]])
    assert r.mse == [pytest.approx(2 / 3, abs=1e-15)]
    assert r.mae == [pytest.approx(2 / 3, abs=1e-15)]
    assert r.pcc == [None]  # realised values have zero variance
    assert r.validity_rate == 1.0


def test_metric_perfect_and_anti_correlated():
    t = [[1.0, 5.0], [2.0, 3.0], [4.0, 1.0]]
    r = compute_metrics(t, t)
    assert r.mse == [0.0, 0.0]
    assert r.pcc == [pytest.approx(1.0), pytest.approx(1.0)]
    r = compute_metrics([[1.0], [2.0], [3.0]], [[3.0], [2.0], [1.0]])
    assert r.pcc[0] == pytest.approx(-1.0)


def test_invalid_samples_only_lower_validity():
    t = [[1.0], [2.0], [3.0], [10.0]]
    r = compute_metrics(t, [[1.5], None, [3.5], None])
    assert r.validity_rate == 0.5
    assert r.valid_count == 2 and r.count == 4
    assert r.mse == [0.25] and r.mae == [0.5]
    none = compute_metrics(t, [None] * 4)
    assert none.validity_rate == 0.0 and none.mse == [None] and none.pcc == [None]


def test_metric_argument_checks():
    with pytest.raises(InvalidArgument):
        compute_metrics([[1.0]], [])
    with pytest.raises(InvalidArgument):
        compute_metrics([], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=2, max_size=40))
def test_metrics_match_two_pass_formulas(pairs):
    t = np.array([[a] for a, _ in pairs])
    g = np.array([[b] for _, b in pairs])
    r = compute_metrics(list(t), list(g))
    err = g[:, 0] - t[:, 0]
    assert r.mse[0] == pytest.approx(np.sum(err ** 2) / len(err), rel=1e-12, abs=1e-12)
    assert r.mae[0] == pytest.approx(np.sum(np.abs(err)) / len(err), rel=1e-12, abs=1e-12)
    if r.pcc[0] is not None:
        assert -1.0 <= r.pcc[0] <= 1.0
        if np.std(t) > 1e-6 and np.std(g) > 1e-6:
            assert r.pcc[0] == pytest.approx(np.corrcoef(t[:, 0], g[:, 0])[0, 1], abs=1e-9)


def test_pearson_degenerate_inputs():
    assert pearson([1.0], [2.0]) is None
    assert pearson([1.0, 1.0], [2.0, 3.0]) is None


@pytest.fixture(scope="module")
def tiny_setup():
    splits, tr = shapes.generate_dataset(200, seed=3)
    rng = np.random.default_rng(0)
    den = init_denoiser(DenoiserConfig(D=24, K=36, width=16, conditional=True), rng,
                        zero_head=False)
    guide = init_guidance(GuidanceConfig(D=24, K=36, width=16), rng, zero_head=False)
    return splits["test"], tr, den, guide


def test_evaluate_sampler_report(tiny_setup):
    test, tr, den, guide = tiny_setup
    cfg = SamplerConfig(n=4, mode="tgbfn", m=2, H=2)
    report, tokens = evaluate_sampler(den, guide, test, tr, cfg, count=7, batch_size=3)
    assert tokens.shape == (7, 24)
    assert report.count == 7
    assert 0.0 <= report.validity_rate <= 1.0
    assert report.config["m"] == 2
    again, tokens2 = evaluate_sampler(den, guide, test, tr, cfg, count=7, batch_size=3)
    np.testing.assert_array_equal(tokens, tokens2)
    with pytest.raises(InvalidArgument):
        evaluate_sampler(den, None, test, tr, cfg, count=3)
    with pytest.raises(InvalidArgument):
        evaluate_sampler(None, guide, test, tr, cfg, count=3)


def test_ablation_grid_rows_and_csv(tiny_setup):
    test, tr, den, guide = tiny_setup
    rows = ablation_grid(den, guide, test, tr, [1, 2], [1, 3], SamplerConfig(n=3), count=4,
                         seeds=(0, 1))
    assert len(rows) == 2 * 2 * 2
    assert {(m, H) for m, H, _, _ in rows} == {(1, 1), (1, 3), (2, 1), (2, 3)}
    parsed = list(csv.DictReader(io.StringIO(reports_to_csv(rows))))
    assert len(parsed) == 8
    assert {"m", "H", "seed", "area_mse", "volume_pcc", "validity_rate"} <= set(parsed[0])
    with pytest.raises(InvalidArgument):
        ablation_grid(den, guide, test, tr, [], [1], SamplerConfig(), count=2)
