"""Posterior predictions: the mean field at a space-time target, the
conditional spatial covariance evolved to an unobserved time, and the
covariance extended to an unmonitored location.

All three work per posterior draw with that draw's kernels and eigenpairs,
then aggregate across draws in fixed draw order: means are averaged, the
mean-field variance uses the law of total variance, and credible bands are
empirical 2.5/97.5 percent quantiles of per-draw values (the mean field
instead uses the exact Gaussian-mixture quantiles).
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .data import sufficient_stats, _atomic_write, _fmt
from .errors import NumericalError
from .inference import _provider_from_meta
from .kernels import StationaryKernelParams, stationary_cross, \
    stationary_kernel
from .kronalg import Model2Marginal, m1_assemble, m1_solve_logdet

NEIGHBOR_FLOOR = 1e-12


@dataclass
class MeanPrediction:
    """Predictive mean-field summary at one space-time target."""
    target: tuple
    mean: float
    variance: float
    lo: float
    hi: float
    draw_means: np.ndarray
    draw_vars: np.ndarray


@dataclass
class TesdPrediction:
    """Predicted conditional spatial covariance summary.

    target ("future_time", t*): values have shape (I, I), the covariance
    at t*.  target ("new_location", x*): values have shape (J, I+1); the
    first I columns are C(x_i, x*) at each fitted time and the last is the
    marginal variance C(x*, x*).  draws stacks per-draw values first.
    """
    target: tuple
    values_mean: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    draws: np.ndarray
    model: str
    dropped_terms: int = 0


def _mixture_quantile(means, sds, q):
    """Quantile of an equally weighted Gaussian mixture by bisection."""
    sds = np.maximum(sds, 1e-300)
    lo = float(np.min(means - 8.0 * sds))
    hi = float(np.max(means + 8.0 * sds))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(np.mean(ndtr((mid - means) / sds))) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(hi)):
            break
    return 0.5 * (lo + hi)


def _match_row(points, x_star):
    """Index of an exactly matching training location, or None."""
    x = np.atleast_1d(np.asarray(x_star, dtype=np.float64))
    hits = np.where(np.all(points == x[None, :], axis=1))[0]
    return int(hits[0]) if hits.size else None


def _lam_star(lam_draw, times, t_star, eta_u, s_exp):
    """Conditional-mean extension of each dynamic eigenvalue to t_star.

    Exact float match with a training time short-circuits to the fitted
    value (the conditional GP interpolates); the process variance cancels
    from the conditional mean so only the unit-variance kernel appears.
    """
    j = np.where(times == t_star)[0]
    if j.size:
        return lam_draw[int(j[0])].copy(), None
    params = StationaryKernelParams(1.0, float(np.exp(eta_u)), s_exp)
    C0u = stationary_kernel(times, params)
    c = stationary_cross(np.array([[t_star]]),
                         times.reshape(-1, 1), params)[0]
    try:
        w = np.linalg.solve(C0u, c)
    except np.linalg.LinAlgError:
        raise NumericalError("eigenvalue-process kernel is singular at "
                             "this draw; cannot extend to t*")
    return w @ lam_draw, float(max(0.0, 1.0 - c @ w))


def predict_mean(samples, ds, z_star):
    """Predict the mean field at z* = (location, time) per Proposition-style
    Gaussian conditioning of m(z*) on the trial mean under each draw.

    Locations are matched to training points by exact coordinates.  Under
    Model II an unmatched location has no coupling with the data, so the
    prediction falls back to the prior.  Under Model I unmatched locations
    use the basis extension of the static kernel (stationary kernels only)
    and off-grid times use the conditional-mean extension of the dynamic
    eigenvalues.
    """
    if isinstance(z_star, list):
        return [predict_mean(samples, ds, z) for z in z_star]
    meta = samples.meta
    if (meta["dims"]["I"], meta["dims"]["J"], meta["dims"]["K"]) != \
            (ds.I, ds.J, ds.K):
        raise ValueError("samples and dataset dimensions disagree")
    x_star, t_star = z_star
    t_star = float(t_star)
    model = meta["model"]
    times = ds.time.times
    points = ds.space.points
    I, J, K = ds.I, ds.J, ds.K
    s_exp = meta["prior"]["s_exp"]
    provider = _provider_from_meta(samples)
    stats = sufficient_stats(ds)
    i_idx = _match_row(points, x_star)
    S = samples.n_draws
    d_mean = np.empty(S)
    d_var = np.empty(S)
    basis_memo = {}
    for s, st in enumerate(samples.draws):
        basis = basis_memo.get(st.eta_x)
        if basis is None:
            basis = provider(st.eta_x)
            if len(basis_memo) > 32:
                basis_memo.clear()
            basis_memo[st.eta_x] = basis
        pt = StationaryKernelParams(1.0, float(np.exp(st.eta_t)), s_exp)
        C_t = st.sigma2_t * stationary_kernel(times, pt)
        ct_vec = st.sigma2_t * stationary_cross(
            np.array([[t_star]]), times.reshape(-1, 1), pt)[0]
        if model == "II":
            if i_idx is None:
                d_mean[s] = 0.0
                d_var[s] = st.sigma2_t
                continue
            marg = Model2Marginal(C_t, basis, st.dyn, K)
            c = np.zeros((J, I))
            c[:, i_idx] = ct_vec
            c = c.reshape(-1)
            d_mean[s] = float(c @ marg.inverse_apply(stats.ybar))
            d_var[s] = max(0.0, st.sigma2_t
                           - float(c @ marg.inverse_apply(c)))
        else:
            lam_star, _ = _lam_star(samples.lam[s], times, t_star,
                                    st.eta_u, s_exp)
            if i_idx is not None:
                phi_star = basis.phi[i_idx]
            else:
                if meta["prior"]["spatial_kernel"] != "stationary":
                    raise ValueError("off-grid locations need a "
                                     "stationary spatial kernel")
                px = StationaryKernelParams(1.0, float(np.exp(st.eta_x)),
                                            s_exp)
                kx = stationary_cross(
                    np.atleast_2d(np.asarray(x_star, dtype=np.float64)),
                    points, px)[0]
                phi_star = (kx @ basis.phi) / basis.lambda0 ** 2
            marg = m1_assemble(C_t, basis, st.dyn, st.sigma2_eps, K)
            # cross-covariance couples through both kernels; ct_vec
            # already carries sigma2_t
            w = samples.lam[s] * (phi_star * lam_star)[None, :]  # (J, L)
            c = (basis.phi @ w.T) * ct_vec[None, :]
            c = c.T.reshape(-1)
            cvar = st.sigma2_t * float(np.sum((lam_star * phi_star) ** 2))
            solve, _ = m1_solve_logdet(marg, np.column_stack([stats.ybar,
                                                              c]))
            d_mean[s] = float(c @ solve[:, 0])
            d_var[s] = max(0.0, cvar - float(c @ solve[:, 1]))
    mean = float(np.mean(d_mean))
    variance = float(np.mean(d_var) + np.var(d_mean))
    sds = np.sqrt(d_var)
    lo = _mixture_quantile(d_mean, sds, 0.025)
    hi = _mixture_quantile(d_mean, sds, 0.975)
    return MeanPrediction(target=(tuple(np.atleast_1d(x_star).tolist()),
                                  t_star),
                          mean=mean, variance=variance, lo=lo, hi=hi,
                          draw_means=d_mean, draw_vars=d_var)


def predict_tesd_future(samples, t_star, add_conditional_variance=False):
    """Evolve the conditional spatial covariance to time t*.

    Per draw, each dynamic eigenvalue is extended by its conditional GP
    mean and squared (the default matches the reported estimator; the flag
    adds the conditional variance so the result is E[lambda^2(t*)] under
    the draw).  Noise floors are excluded: values are the smooth kernel
    part sigma2-free of the nugget, matching the fitted TESD span part.

    The conditional mean interpolates a densely sampled smooth kernel, so
    it is only informative within roughly one temporal lengthscale of the
    training window; far beyond that the interpolation weights are
    ill-conditioned and the squared extrapolant can swing to arbitrary
    magnitudes before the kernel decay pulls it to zero.
    """
    meta = samples.meta
    if meta["model"] != "II":
        raise ValueError("TESD prediction is unsupported for model I")
    t_star = float(t_star)
    times = np.array(meta["grids"]["times"])
    I = meta["dims"]["I"]
    s_exp = meta["prior"]["s_exp"]
    provider = _provider_from_meta(samples)
    S = samples.n_draws
    draws = np.empty((S, I, I))
    basis_memo = {}
    for s, st in enumerate(samples.draws):
        basis = basis_memo.get(st.eta_x)
        if basis is None:
            basis = provider(st.eta_x)
            if len(basis_memo) > 32:
                basis_memo.clear()
            basis_memo[st.eta_x] = basis
        lam_star, cvar = _lam_star(samples.lam[s], times, t_star,
                                   st.eta_u, s_exp)
        lam2 = lam_star ** 2
        if add_conditional_variance and cvar is not None:
            gamma = st.dyn.gamma
            lam2 = lam2 + st.sigma2_u * cvar * gamma ** 2
        draws[s] = (basis.phi * lam2[None, :]) @ basis.phi.T
    return TesdPrediction(target=("future_time", t_star),
                          values_mean=draws.mean(axis=0),
                          band_lo=np.quantile(draws, 0.025, axis=0),
                          band_hi=np.quantile(draws, 0.975, axis=0),
                          draws=draws, model=meta["model"])


def predict_tesd_neighbor(samples, x_star):
    """Extend the conditional spatial covariance to location x*.

    Per draw, each basis function reaches x* through the static-kernel
    identity k(x*, X) lambda0^{-2} phi (stationary kernels only; the graph
    kernel has no off-grid extension).  Static eigenpairs are recomputed
    per draw since eta_x varies.  Terms whose static eigenvalue sits below
    1e-12 of the leading one are dropped and counted.
    """
    meta = samples.meta
    if meta["model"] != "II":
        raise ValueError("TESD prediction is unsupported for model I")
    if meta["prior"]["spatial_kernel"] != "stationary":
        raise ValueError("neighbor extension needs a stationary "
                         "spatial kernel")
    points = np.array(meta["grids"]["points"])
    x = np.atleast_1d(np.asarray(x_star, dtype=np.float64))
    J = len(meta["grids"]["times"])
    I = meta["dims"]["I"]
    s_exp = meta["prior"]["s_exp"]
    provider = _provider_from_meta(samples)
    S = samples.n_draws
    draws = np.empty((S, J, I + 1))
    dropped = 0
    basis_memo = {}
    for s, st in enumerate(samples.draws):
        hit = basis_memo.get(st.eta_x)
        if hit is None:
            basis = provider(st.eta_x)
            px = StationaryKernelParams(1.0, float(np.exp(st.eta_x)), s_exp)
            kx = stationary_cross(x[None, :], points, px)[0]
            keep = basis.lambda0 >= NEIGHBOR_FLOOR * basis.lambda0[0]
            phi_star = np.zeros(basis.L)
            phi_star[keep] = (kx @ basis.phi[:, keep]) \
                / basis.lambda0[keep] ** 2
            hit = (basis, phi_star, int(basis.L - keep.sum()))
            if len(basis_memo) > 32:
                basis_memo.clear()
            basis_memo[st.eta_x] = hit
        basis, phi_star, ndrop = hit
        dropped += ndrop
        lam2 = samples.lam[s] ** 2                       # (J, L)
        draws[s, :, :I] = (lam2 * phi_star[None, :]) @ basis.phi.T
        draws[s, :, I] = lam2 @ phi_star ** 2
    return TesdPrediction(target=("new_location", tuple(x.tolist())),
                          values_mean=draws.mean(axis=0),
                          band_lo=np.quantile(draws, 0.025, axis=0),
                          band_hi=np.quantile(draws, 0.975, axis=0),
                          draws=draws, model=meta["model"],
                          dropped_terms=dropped)


def prediction_rows(pred):
    """Flatten a prediction into (target-id, estimate, lo2.5, hi97.5)."""
    rows = []
    if isinstance(pred, MeanPrediction):
        x, t = pred.target
        tid = "mean;x=%s;t=%s" % (",".join(_fmt(v) for v in x), _fmt(t))
        rows.append((tid, pred.mean, pred.lo, pred.hi))
        return rows
    if pred.target[0] == "future_time":
        t = pred.target[1]
        I = pred.values_mean.shape[0]
        for i in range(I):
            for ip in range(I):
                tid = "cov;t*=%s;i=%d;ip=%d" % (_fmt(t), i, ip)
                rows.append((tid, pred.values_mean[i, ip],
                             pred.band_lo[i, ip], pred.band_hi[i, ip]))
        return rows
    xs = ",".join(_fmt(v) for v in pred.target[1])
    J, W = pred.values_mean.shape
    for j in range(J):
        for i in range(W):
            what = ("var;x*=%s" % xs if i == W - 1
                    else "cross;x*=%s;i=%d" % (xs, i))
            tid = "%s;j=%d" % (what, j)
            rows.append((tid, pred.values_mean[j, i],
                         pred.band_lo[j, i], pred.band_hi[j, i]))
    return rows


def save_prediction_csv(preds, path):
    """Write one or more predictions as target-id,estimate,lo2.5,hi97.5."""
    if not isinstance(preds, list):
        preds = [preds]
    lines = ["target,estimate,lo2.5,hi97.5"]
    for p in preds:
        for tid, est, lo, hi in prediction_rows(p):
            lines.append("%s,%s,%s,%s" % (tid, _fmt(est), _fmt(lo),
                                          _fmt(hi)))
    _atomic_write(path, "\n".join(lines) + "\n", mode="w")
