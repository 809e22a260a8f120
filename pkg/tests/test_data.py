"""Dataset containers, vectorization conventions and the two file formats."""

import hashlib
import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stkron.data import (SpaceGrid, TimeGrid, SpatioTemporalDataset,
                         vec_index, vectorize_trial, sufficient_stats,
                         save_dataset, load_dataset)
from stkron.errors import ParseError


def make_dataset(rng, I=4, J=3, K=2, d=1, grid_shape=None):
    if grid_shape is not None:
        rows, cols = grid_shape
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        pts = np.column_stack([rr.ravel(), cc.ravel()]).astype(float)
        space = SpaceGrid(pts, grid_shape=grid_shape)
    elif d == 1:
        space = SpaceGrid(np.arange(I) + rng.uniform(0.0, 0.4, I))
    else:
        space = SpaceGrid(np.arange(I * d, dtype=float).reshape(I, d)
                          + rng.uniform(0.0, 0.4, (I, d)))
    times = np.cumsum(rng.uniform(0.1, 1.0, J))
    trials = rng.standard_normal((K, space.I, J))
    return SpatioTemporalDataset(space, TimeGrid(times), trials)


# ---------------------------------------------------------------------------
# grids and dataset validation
# ---------------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ValueError):
        SpaceGrid(np.array([0.0, 1.0, 0.0]))        # duplicate point
    with pytest.raises(ValueError):
        SpaceGrid(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        SpaceGrid(np.arange(6.0), grid_shape=(2, 2))  # 4 != 6
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 1.0, 1.0]))          # not increasing
    with pytest.raises(ValueError):
        TimeGrid(np.array([-0.5, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([]))


def test_dataset_shape_checks(rng):
    ds = make_dataset(rng)
    assert (ds.K, ds.I, ds.J) == (2, 4, 3)
    with pytest.raises(ValueError):
        SpatioTemporalDataset(ds.space, ds.time, ds.trials[:, :3, :])
    with pytest.raises(ValueError):
        SpatioTemporalDataset(ds.space, ds.time, np.zeros((0, 4, 3)))
    bad = ds.trials.copy()
    bad[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        SpatioTemporalDataset(ds.space, ds.time, bad)


# ---------------------------------------------------------------------------
# vectorization
# ---------------------------------------------------------------------------

def test_vec_index_corners():
    assert vec_index(0, 0, 5) == 0
    assert vec_index(4, 9, 5, 10) == 49
    # space index fastest: one step in i moves by 1, one step in j by I
    assert vec_index(1, 2, 5) == 11
    assert vec_index(2, 1, 5) == 7


def test_vec_index_bijection():
    for I, J in [(1, 1), (3, 7), (20, 20)]:
        seen = {vec_index(i, j, I, J) for j in range(J) for i in range(I)}
        assert seen == set(range(I * J))


def test_vec_index_range_checks():
    for bad in [(-1, 0), (5, 0), (0, -1), (0, 3)]:
        with pytest.raises(ValueError):
            vec_index(bad[0], bad[1], 5, 3)


def test_vectorize_trial_layout():
    Y = np.arange(6.0).reshape(2, 3)          # I=2, J=3
    v = vectorize_trial(Y)
    for i in range(2):
        for j in range(3):
            assert v[vec_index(i, j, 2)] == Y[i, j]


# ---------------------------------------------------------------------------
# sufficient statistics
# ---------------------------------------------------------------------------

def test_sufficient_stats_single_trial(rng):
    ds = make_dataset(rng, K=1)
    s = sufficient_stats(ds)
    assert np.array_equal(s.ybar, vectorize_trial(ds.trials[0]))
    assert np.allclose(s.centered, 0.0)
    assert s.ysq == pytest.approx(float(s.ybar @ s.ybar))


def test_sufficient_stats_against_loops(rng):
    ds = make_dataset(rng, I=3, J=4, K=5)
    s = sufficient_stats(ds)
    vecs = np.stack([vectorize_trial(ds.trials[k]) for k in range(5)])
    assert np.allclose(s.ybar, vecs.mean(axis=0), atol=1e-14)
    assert s.ysq == pytest.approx(np.mean(np.sum(vecs ** 2, axis=1)))
    assert np.allclose(s.centered, vecs - vecs.mean(axis=0), atol=1e-14)


def test_centered_trials_sum_to_zero():
    # exchanging trial order must not change ybar; residuals cancel exactly
    for seed in range(100):
        g = np.random.default_rng(seed)
        ds = make_dataset(g, I=int(g.integers(1, 5)),
                          J=int(g.integers(1, 5)), K=int(g.integers(1, 6)))
        s = sufficient_stats(ds)
        assert np.max(np.abs(s.centered.sum(axis=0))) < 1e-12 * max(
            1.0, np.max(np.abs(s.ybar)))
        perm = g.permutation(ds.K)
        ds2 = SpatioTemporalDataset(ds.space, ds.time, ds.trials[perm])
        s2 = sufficient_stats(ds2)
        assert np.array_equal(s.ybar, s2.ybar) or np.allclose(
            s.ybar, s2.ybar, atol=1e-15)


# ---------------------------------------------------------------------------
# serialization round trips
# ---------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), I=st.integers(1, 10),
       J=st.integers(1, 10), K=st.integers(1, 5),
       fmt=st.sampled_from(["csv", "binary"]))
def test_round_trip_property(seed, I, J, K, fmt):
    g = np.random.default_rng(seed)
    ds = make_dataset(g, I=I, J=J, K=K)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ds.csv" if fmt == "csv" else "ds.bin")
        save_dataset(ds, path, format=fmt)
        back = load_dataset(path)
    assert np.array_equal(back.trials, ds.trials)
    assert np.array_equal(back.space.points, ds.space.points)
    assert np.array_equal(back.time.times, ds.time.times)


def test_round_trip_grid_shape(tmp_path, rng):
    ds = make_dataset(rng, grid_shape=(2, 3), K=2, J=2)
    for fmt, name in [("csv", "a.csv"), ("binary", "a.bin")]:
        p = tmp_path / name
        save_dataset(ds, str(p), format=fmt)
        back = load_dataset(str(p))
        assert back.space.grid_shape == (2, 3)


def test_save_is_deterministic(tmp_path, rng):
    ds = make_dataset(rng, I=5, J=4, K=3)
    digests = {}
    for fmt, name in [("csv", "x.csv"), ("binary", "x.bin")]:
        blobs = []
        for rep in range(2):
            p = tmp_path / ("%d_%s" % (rep, name))
            save_dataset(ds, str(p), format=fmt)
            blobs.append(hashlib.sha256(p.read_bytes()).hexdigest())
        digests[fmt] = blobs
        assert blobs[0] == blobs[1]
    assert digests["csv"] != digests["binary"]


def test_csv_reports_bad_row(tmp_path, rng):
    ds = make_dataset(rng, I=3, J=3, K=2)
    p = tmp_path / "ds.csv"
    save_dataset(ds, str(p), format="csv")
    lines = p.read_text().splitlines()
    lines[6] = lines[6] + ",0.5"              # row 7 gets an extra column
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="row 7"):
        load_dataset(str(p))


def test_csv_non_numeric_and_bad_header(tmp_path, rng):
    ds = make_dataset(rng, I=2, J=2, K=1)
    p = tmp_path / "ds.csv"
    save_dataset(ds, str(p), format="csv")
    txt = p.read_text()
    p.write_text(txt.replace(txt.splitlines()[-1].split(",")[0], "abc", 1))
    with pytest.raises(ParseError):
        load_dataset(str(p))
    q = tmp_path / "empty.csv"
    q.write_text("")
    with pytest.raises(ParseError, match="row 1"):
        load_dataset(str(q))


def test_binary_corruption_detected(tmp_path, rng):
    ds = make_dataset(rng, I=3, J=2, K=2)
    p = tmp_path / "ds.bin"
    save_dataset(ds, str(p), format="binary")
    blob = p.read_bytes()
    (tmp_path / "short.bin").write_bytes(blob[:-16])
    with pytest.raises(ParseError):
        load_dataset(str(tmp_path / "short.bin"))
    bad = bytearray(blob)
    bad[0] ^= 0xFF                             # break the magic number
    (tmp_path / "magic.bin").write_bytes(bytes(bad))
    with pytest.raises(ParseError):
        load_dataset(str(tmp_path / "magic.bin"))


def test_save_missing_directory_leaves_no_file(tmp_path, rng):
    ds = make_dataset(rng)
    target = tmp_path / "nope" / "ds.csv"
    with pytest.raises(OSError, match="directory does not exist"):
        save_dataset(ds, str(target), format="csv")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_unknown_format_rejected(tmp_path, rng):
    ds = make_dataset(rng)
    with pytest.raises(ValueError):
        save_dataset(ds, str(tmp_path / "x.dat"), format="parquet")
