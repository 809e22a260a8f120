"""Synthetic spatiotemporal process with a closed-form time-varying
spatial covariance, plus the error metrics used to compare fitted TESD
estimates against that truth.

The generating process is a Gaussian random field on [-1,1] x [0,1]
with mean m(x,t) = cos(pi x) sin(2 pi t) and joint covariance

    exp(-|x-x'|^2/(2 l_x) - |t-t'|^2/(2 l_t) - |xt-x't'|/(2 l_xt))
      + sigma2_eps * delta(z=z'),

whose conditional spatial covariance at time t is

    exp(-|x-x'|^2/(2 l_x) - |x-x'| t/(2 l_xt)) + sigma2_eps * delta(x=x').

The |xt-x't'| cross term is kept exactly as written; positive
definiteness on a mesh is asserted by the Cholesky factorization rather
than proven (the nugget covers it on all meshes used here).
"""
from dataclasses import dataclass

import numpy as np

from .data import SpaceGrid, SpatioTemporalDataset, TimeGrid
from .errors import CapacityError, NumericalError
from .samplers import RngState

GENERATE_CAP = 25000


@dataclass(frozen=True)
class SimParams:
    ell_x: float = 0.5
    ell_t: float = 0.3
    ell_xt: float = None
    sigma2_eps: float = 1e-2
    Nx: int = 200
    Nt: int = 100
    K: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.ell_xt is None:
            object.__setattr__(self, "ell_xt",
                               float(np.sqrt(self.ell_x * self.ell_t)))
        for name in ("ell_x", "ell_t", "ell_xt", "sigma2_eps"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % name)
        if self.Nx < 1 or self.Nt < 1:
            raise ValueError("Nx and Nt must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")


def true_mean(x, t):
    """m(x,t) = cos(pi x) sin(2 pi t), vectorized."""
    return np.cos(np.pi * np.asarray(x)) * np.sin(2 * np.pi * np.asarray(t))


def true_tesd(x, xp, t, p):
    """Conditional spatial covariance of the generating process at time t."""
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    dx = np.abs(x - xp)
    val = np.exp(-dx ** 2 / (2.0 * p.ell_x)
                 - dx * np.asarray(t) / (2.0 * p.ell_xt))
    return val + p.sigma2_eps * (dx == 0)


def _joint_cov(x_flat, t_flat, p):
    dx = np.abs(x_flat[:, None] - x_flat[None, :])
    dt = np.abs(t_flat[:, None] - t_flat[None, :])
    xt = x_flat * t_flat
    dxt = np.abs(xt[:, None] - xt[None, :])
    C = np.exp(-dx ** 2 / (2.0 * p.ell_x) - dt ** 2 / (2.0 * p.ell_t)
               - dxt / (2.0 * p.ell_xt))
    C[np.diag_indices_from(C)] += p.sigma2_eps
    return C


def _sub_indices(N, count):
    # every floor(N/(count-1))-th node of the 0..N mesh
    if count < 2 or count > N + 1:
        raise ValueError("sub-mesh size must be in [2, N+1]")
    stride = N // (count - 1)
    return np.arange(count) * stride


def generate(p, sub_I=None, sub_J=None):
    """Draw K trials of the process on the mesh or a regular sub-mesh.

    Subsampling happens before the joint factorization, so capacity is
    governed by the requested mesh only.  Deterministic given p.seed, with
    one stream per trial.
    """
    xs = np.linspace(-1.0, 1.0, p.Nx + 1)
    ts = np.linspace(0.0, 1.0, p.Nt + 1)
    if sub_I is not None:
        xs = xs[_sub_indices(p.Nx, sub_I)]
    if sub_J is not None:
        ts = ts[_sub_indices(p.Nt, sub_J)]
    I, J = xs.size, ts.size
    n = I * J
    if n > GENERATE_CAP:
        raise CapacityError(
            "joint simulation needs a %d-row dense factor > cap %d; "
            "request a sub-mesh" % (n, GENERATE_CAP))
    x_flat = np.tile(xs, J)
    t_flat = np.repeat(ts, I)
    C = _joint_cov(x_flat, t_flat, p)
    try:
        chol = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise NumericalError("joint simulation kernel is not positive "
                             "definite on this mesh")
    mean_flat = true_mean(x_flat, t_flat)
    trials = np.empty((p.K, I, J))
    for k in range(p.K):
        z = RngState(p.seed, stream=k + 1).gen.standard_normal(n)
        y = mean_flat + chol @ z
        trials[k] = y.reshape(J, I).T
    return SpatioTemporalDataset(space=SpaceGrid(points=xs[:, None]),
                                 time=TimeGrid(times=ts), trials=trials)


def image_demo_dataset(rows=40, cols=40, J=5, K=10, noise=0.1, seed=0,
                       cohorts=3, n_blobs=4):
    """Synthetic image-grid stand-in: smooth blobs plus noise.

    Node n = r*cols + c carries normalized coordinates, matching the
    lattice Laplacian ordering.  Trials cycle through cohorts that scale a
    shared time-varying mean; spatial dependence comes from per-trial blob
    amplitudes, so the covariance between pixels changes over time.
    Deterministic given seed, one stream per trial.
    """
    if rows < 2 or cols < 2 or J < 1 or K < 1:
        raise ValueError("rows, cols >= 2 and J, K >= 1 required")
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    points = np.column_stack([rr.ravel() / (rows - 1.0),
                              cc.ravel() / (cols - 1.0)])
    times = np.linspace(0.0, 1.0, J) if J > 1 else np.array([0.0])
    root = RngState(seed, stream=0).gen
    centers = root.uniform(0.15, 0.85, size=(n_blobs, 2))
    widths = root.uniform(0.08, 0.18, size=n_blobs)
    phases = root.uniform(0.0, 2 * np.pi, size=n_blobs)
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    blobs = np.exp(-0.5 * d2 / widths[None, :] ** 2)       # (I, G)
    prof = np.cos(2 * np.pi * times[:, None] + phases[None, :])  # (J, G)
    mean = 0.5 * blobs @ prof.T                            # (I, J)
    I = rows * cols
    trials = np.empty((K, I, J))
    for k in range(K):
        g = RngState(seed, stream=k + 1).gen
        scale = 0.8 + 0.2 * (k % cohorts)
        amp = g.standard_normal(n_blobs)
        wiggle = 0.3 * blobs @ (amp[None, :] * prof).T     # (I, J)
        eps = noise * g.standard_normal((I, J))
        trials[k] = scale * mean + wiggle + eps
    return SpatioTemporalDataset(
        space=SpaceGrid(points=points, grid_shape=(rows, cols)),
        time=TimeGrid(times=times), trials=trials)


@dataclass
class TruthOracle:
    """Closed-form mean and per-time spatial covariance on fixed grids."""
    params: SimParams
    points: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        self.points = pts.reshape(pts.shape[0], -1)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.points.shape[1] != 1:
            raise ValueError("truth oracle covers d=1 only")

    def mean_grid(self):
        """true_mean on the grid, shape (I, J)."""
        return true_mean(self.points[:, 0][:, None],
                         self.times[None, :])

    def tesd_grid(self):
        """True conditional spatial covariance, shape (J, I, I)."""
        x = self.points[:, 0]
        J, I = self.times.size, x.size
        out = np.empty((J, I, I))
        for j, t in enumerate(self.times):
            out[j] = true_tesd(x[:, None], x[None, :], t, self.params)
        return out


def _flatness(cov):
    """Mean over off-diagonal pairs of the std across time, ddof=0."""
    J, I, _ = cov.shape
    sd = cov.std(axis=0)
    off = ~np.eye(I, dtype=bool)
    return float(sd[off].mean())


def tesd_error(est, oracle):
    """Compare a TesdEstimate against the truth oracle.

    rmse_overall runs over all (time, i, i') entries including diagonals;
    flatness averages the across-time standard deviation over off-diagonal
    pairs only (the truth's diagonal is constant by construction, so
    including it would only dilute the reference bar).
    """
    if est.times.shape != oracle.times.shape or \
            not np.allclose(est.times, oracle.times, rtol=0, atol=0):
        raise ValueError("time grid mismatch between estimate and oracle")
    I = oracle.points.shape[0]
    if est.cov_mean.shape != (oracle.times.size, I, I):
        raise ValueError("estimate shape does not match oracle grids")
    truth = oracle.tesd_grid()
    rmse = float(np.sqrt(np.mean((est.cov_mean - truth) ** 2)))
    return {"rmse_overall": rmse,
            "flatness_I": _flatness(est.cov_mean),
            "flatness_truth": _flatness(truth)}
