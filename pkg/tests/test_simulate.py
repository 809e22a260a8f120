"""Synthetic process generator and its closed-form truth oracle."""

import numpy as np
import pytest

from stkron.errors import CapacityError
from stkron.inference import TesdEstimate
from stkron.simulate import (SimParams, true_mean, true_tesd, generate,
                             image_demo_dataset, TruthOracle, tesd_error)


def make_estimate(times, cov):
    I = cov.shape[1]
    return TesdEstimate(times=np.asarray(times),
                        time_indices=np.arange(len(times)),
                        cov_mean=cov, corr_mean=cov.copy(), band_pairs=[],
                        band_lo=np.zeros((len(times), 0)),
                        band_hi=np.zeros((len(times), 0)), model="II")


def test_params_defaults_and_validation():
    p = SimParams()
    assert p.ell_xt == pytest.approx(np.sqrt(0.5 * 0.3), rel=1e-12)
    assert SimParams(ell_xt=0.7).ell_xt == 0.7
    for kw in ({"ell_x": 0.0}, {"sigma2_eps": -1.0}, {"K": 0},
               {"Nx": 0}):
        with pytest.raises(ValueError):
            SimParams(**kw)


def test_truth_closed_forms():
    p = SimParams()
    assert true_mean(0.0, 0.25) == pytest.approx(1.0)
    assert true_mean(1.0, 0.25) == pytest.approx(-1.0)
    assert true_mean(0.3, 0.5) == pytest.approx(0.0, abs=1e-15)
    # same point: spatial factor 1 plus nugget
    assert true_tesd(0.4, 0.4, 0.7, p) == pytest.approx(1.01)
    # unit separation at t = 0 leaves only the squared-distance factor
    assert true_tesd(0.0, 1.0, 0.0, p) == pytest.approx(np.exp(-1.0))
    # cross term decays the covariance monotonically in time
    ts = np.linspace(0.0, 1.0, 9)
    vals = true_tesd(0.2, 0.6, ts, p)
    assert np.all(np.diff(vals) < 0.0)
    # at t = 0 distinct points see no cross term at all
    assert true_tesd(0.2, 0.9, 0.0, p) == pytest.approx(
        np.exp(-0.49 / (2 * 0.5)))


def test_generate_submesh_grid():
    ds = generate(SimParams(K=3, seed=1), sub_I=5, sub_J=41)
    assert (ds.I, ds.J, ds.K) == (5, 41, 3)
    assert np.allclose(ds.space.points[:, 0], [-1.0, -0.5, 0.0, 0.5, 1.0])
    assert np.allclose(ds.time.times, np.arange(41) * 0.02)
    full = generate(SimParams(K=1, seed=1), sub_I=5, sub_J=101)
    assert np.allclose(full.time.times, np.linspace(0.0, 1.0, 101))


def test_generate_deterministic_and_trialwise_streams():
    a = generate(SimParams(K=3, seed=5), sub_I=4, sub_J=4)
    b = generate(SimParams(K=3, seed=5), sub_I=4, sub_J=4)
    assert np.array_equal(a.trials, b.trials)
    c = generate(SimParams(K=3, seed=6), sub_I=4, sub_J=4)
    assert not np.array_equal(a.trials, c.trials)
    # trial k draws from its own stream: a shorter run is a prefix
    d = generate(SimParams(K=2, seed=5), sub_I=4, sub_J=4)
    assert np.array_equal(a.trials[:2], d.trials)


def test_generate_capacity_guard():
    with pytest.raises(CapacityError):
        generate(SimParams(Nx=300, seed=0))
    with pytest.raises(ValueError):
        generate(SimParams(), sub_I=1)
    with pytest.raises(ValueError):
        generate(SimParams(), sub_I=250)


@pytest.mark.slow
def test_generate_moments_match_truth():
    # near-zero nugget so the pairwise covariance check is clean
    p = SimParams(K=5000, seed=2, sigma2_eps=1e-12)
    ds = generate(p, sub_I=3, sub_J=3)
    x = ds.space.points[:, 0]
    mean_se = 1.0 / np.sqrt(p.K)
    emp_mean = ds.trials.mean(axis=0)
    for i in range(3):
        for j in range(3):
            want = true_mean(x[i], ds.time.times[j])
            assert abs(emp_mean[i, j] - want) < 4.0 * mean_se
    centered = ds.trials - emp_mean[None, :, :]
    for j, t in enumerate(ds.time.times):
        for i in range(3):
            for ip in range(3):
                emp = np.mean(centered[:, i, j] * centered[:, ip, j])
                want = true_tesd(x[i], x[ip], t, p)
                se = np.sqrt((1.0 + want ** 2) / p.K)
                assert abs(emp - want) < 4.0 * se, (i, ip, j)


def test_image_demo_dataset_layout():
    ds = image_demo_dataset(rows=4, cols=3, J=5, K=6, seed=3)
    assert (ds.I, ds.J, ds.K) == (12, 5, 6)
    assert ds.space.grid_shape == (4, 3)
    # node r*cols + c carries normalized (row, col) coordinates
    assert np.allclose(ds.space.points[0], [0.0, 0.0])
    assert np.allclose(ds.space.points[5], [1.0 / 3.0, 1.0])
    assert np.allclose(ds.space.points[-1], [1.0, 1.0])
    again = image_demo_dataset(rows=4, cols=3, J=5, K=6, seed=3)
    assert np.array_equal(ds.trials, again.trials)
    assert not np.array_equal(
        ds.trials, image_demo_dataset(rows=4, cols=3, J=5, K=6,
                                      seed=4).trials)
    with pytest.raises(ValueError):
        image_demo_dataset(rows=1, cols=3)


def test_truth_oracle_grids():
    ds = generate(SimParams(K=1, seed=0), sub_I=4, sub_J=5)
    o = TruthOracle(SimParams(), ds.space.points, ds.time.times)
    m = o.mean_grid()
    assert m.shape == (4, 5)
    assert m[1, 2] == pytest.approx(
        true_mean(ds.space.points[1, 0], ds.time.times[2]))
    g = o.tesd_grid()
    assert g.shape == (5, 4, 4)
    assert np.allclose(g[0, 0, 0], 1.01)
    with pytest.raises(ValueError):
        TruthOracle(SimParams(), np.zeros((3, 2)), ds.time.times)


def test_tesd_error_metrics():
    ds = generate(SimParams(K=1, seed=0), sub_I=5, sub_J=41)
    o = TruthOracle(SimParams(), ds.space.points, ds.time.times)
    truth = o.tesd_grid()
    exact = tesd_error(make_estimate(ds.time.times, truth.copy()), o)
    assert exact["rmse_overall"] == 0.0
    assert exact["flatness_I"] == exact["flatness_truth"]
    # the desk-grid truth reference bar, frozen from the closed form
    assert exact["flatness_truth"] == pytest.approx(0.078167, abs=1e-5)
    flat = np.repeat(truth[:1], truth.shape[0], axis=0)
    res = tesd_error(make_estimate(ds.time.times, flat), o)
    assert res["flatness_I"] < 1e-14
    assert res["rmse_overall"] > 0.0
    with pytest.raises(ValueError):
        tesd_error(make_estimate(ds.time.times[:-1], truth[:-1]), o)


def test_empirical_vs_truth_on_shared_grid():
    # a modest-K empirical TESD estimate should land between the flat
    # baseline and the truth in rmse terms
    p = SimParams(K=400, seed=7)
    ds = generate(p, sub_I=4, sub_J=6)
    o = TruthOracle(p, ds.space.points, ds.time.times)
    emp_mean = ds.trials.mean(axis=0)
    centered = ds.trials - emp_mean[None, :, :]
    cov = np.einsum("kij,klj->jil", centered, centered) / p.K
    res = tesd_error(make_estimate(ds.time.times, cov), o)
    assert res["rmse_overall"] < 0.2
    assert res["flatness_I"] > 0.25 * res["flatness_truth"]
