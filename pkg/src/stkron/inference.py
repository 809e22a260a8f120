"""Metropolis-within-Gibbs posterior inference for the two marginalized
space-time models, TESD estimation from posterior draws, and serialization
of posterior samples.

Model II (Kronecker-sum marginal) conditionals, in sweep order:
  sigma2_t  slice sampled on the log scale (Jacobian added),
  sigma2_u  conjugate inverse-gamma, a' = a_u + JL/2,
            b' = b_u + tr(U^T C0u^{-1} U)/2,
  eta_x, eta_t, eta_u   slice sampled,
  U         elliptical slice update under the matrix-normal prior
            MN(0, C_u, I_L); Lambda = U * gamma columnwise.
Model I prepends a slice update of sigma2_eps and evaluates its dense
marginal.  sigma2_x is fixed at 1 and excluded from sampling.

Prior hyperparameter triples follow slot order (eps-or-x, t, u): a/b slot 0
is the sigma2_eps prior for Model I and is unused for Model II (sigma2_x is
fixed); m/V slots are the normal priors of (eta_x, eta_t, eta_u).
"""
import dataclasses
import json
import os
import time as _time
from dataclasses import dataclass

import numpy as np
import scipy.sparse.linalg as spla

from .data import sufficient_stats, _atomic_write, _fmt
from .errors import CapacityError, NumericalError
from .kernels import (LAM2_FLOOR, MercerBasis, StationaryKernelParams,
                      dynamic_eigenvalues, fix_signs, graph_scaling,
                      grid_graph_laplacian, mercer_basis, spd_chol,
                      stationary_kernel)
from .kronalg import (M1_DENSE_CAP, Model2Marginal, m1_assemble,
                      m1_solve_logdet)
from .samplers import RngState, SliceConfig, ess_update, inverse_gamma_draw, \
    slice_sample_1d

# fixed stream ids so block draws never depend on other blocks' call counts
_STREAMS = {"init": 0, "sigma2_eps": 1, "sigma2_t": 2, "sigma2_u": 3,
            "eta_x": 4, "eta_t": 5, "eta_u": 6, "U": 7, "M": 8}


@dataclass(frozen=True)
class PriorConfig:
    """Hyperprior configuration shared by both models.

    a, b: inverse-gamma triples in slot order (eps-or-x, t, u); slot 0 is
    used only by Model I (sigma2_eps).  m, V: normal priors of the log
    length-scales (eta_x, eta_t, eta_u); under the graph-Laplacian kernel
    eta_x is log tau^2.  kappa sets gamma_l = l^(-kappa/2).
    """
    a: tuple
    b: tuple
    m: tuple
    V: tuple
    kappa: float = 2.0
    L: int = 1
    model: str = "II"
    spatial_kernel: str = "stationary"
    s_exp: float = 2.0
    graph_w: int = 1
    graph_s: int = 2

    def __post_init__(self):
        for name in ("a", "b", "m", "V"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3:
                raise ValueError("%s must have exactly 3 entries" % name)
            object.__setattr__(self, name, v)
        if any(x <= 0 for x in self.a) or any(x <= 0 for x in self.b):
            raise ValueError("a and b entries must be positive")
        if any(x <= 0 for x in self.V):
            raise ValueError("V entries must be positive")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.model not in ("I", "II"):
            raise ValueError("model must be 'I' or 'II'")
        if self.spatial_kernel not in ("stationary", "graph_laplacian"):
            raise ValueError("unknown spatial_kernel %r" % self.spatial_kernel)
        if not (1 <= self.graph_s <= 3):
            raise ValueError("graph_s must be in 1..3")
        if self.graph_w < 1:
            raise ValueError("graph_w must be >= 1")


@dataclass(frozen=True)
class HyperState:
    """One point of the hyperparameter chain; Lambda = gamma * U columnwise
    is derived through (kappa, U)."""
    sigma2_t: float
    sigma2_u: float
    eta_x: float
    eta_t: float
    eta_u: float
    U: np.ndarray
    kappa: float
    sigma2_eps: float | None = None

    def __post_init__(self):
        if self.sigma2_t <= 0 or self.sigma2_u <= 0:
            raise ValueError("variances must be positive")
        if self.sigma2_eps is not None and self.sigma2_eps <= 0:
            raise ValueError("sigma2_eps must be positive")
        object.__setattr__(self, "U",
                           np.asarray(self.U, dtype=np.float64))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    @property
    def dyn(self):
        return dynamic_eigenvalues(self.kappa, self.U.shape[1], self.U)

    @property
    def lam(self):
        return self.dyn.lam


class BasisProvider:
    """Mercer basis as a function of eta_x.

    Stationary kernel: eigendecomposition of the unit-variance kernel with
    rho = exp(eta_x), recomputed per value.  Graph Laplacian: eigenvectors
    of (s_n L + tau^2 I)^s do not depend on tau^2, so the bottom-L
    eigenpairs of L are computed once (shift-invert with a fixed start
    vector) and eta_x = log tau^2 only rescales lambda0.
    """

    def __init__(self, points, prior, grid_shape=None):
        self.prior = prior
        self.points = np.asarray(points, dtype=np.float64)
        if prior.spatial_kernel == "graph_laplacian":
            if grid_shape is None:
                raise ValueError("graph_laplacian kernel needs an image "
                                 "grid_shape on the space grid")
            rows, cols = grid_shape
            lg = grid_graph_laplacian(rows, cols, prior.graph_w)
            if lg.n != self.points.shape[0]:
                raise ValueError("grid_shape inconsistent with point count")
            mu, phi = _bottom_eigpairs(lg, prior.L)
            self._mu = mu
            self._phi = fix_signs(phi)
            self._s_n = graph_scaling(lg.n)
        elif prior.L > self.points.shape[0]:
            raise ValueError("L must be <= I")

    def __call__(self, eta_x):
        if self.prior.spatial_kernel == "graph_laplacian":
            tau2 = np.exp(eta_x)
            lam0 = (self._s_n * self._mu + tau2) ** (-self.prior.graph_s / 2.0)
            return MercerBasis(phi=self._phi, lambda0=lam0)
        params = StationaryKernelParams(sigma2=1.0, rho=float(np.exp(eta_x)),
                                        s_exp=self.prior.s_exp)
        C_x = stationary_kernel(self.points, params)
        return mercer_basis(C_x, self.prior.L)

    @property
    def fixed_phi(self):
        return (self.prior.spatial_kernel == "graph_laplacian")


def _bottom_eigpairs(lg, L):
    """Bottom-L eigenpairs of a sparse graph Laplacian, deterministic."""
    n = lg.n
    if L > n:
        raise ValueError("L must be <= node count")
    if n <= 512 or L >= n - 1:
        w, V = np.linalg.eigh(lg.entries.toarray())
        return w[:L], V[:, :L]
    v0 = np.random.Generator(np.random.Philox(key=0xB0B)).standard_normal(n)
    shift = -1e-3 * max(1.0, lg.entries.diagonal().mean())
    vals, vecs = spla.eigsh(lg.entries.tocsc(), k=L, sigma=shift,
                            which="LM", v0=v0)
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


class _ProjStats:
    """Data statistics in the coordinates of one basis."""

    def __init__(self, phi, Vbar, centered_tm):
        self.Yt_bar = Vbar @ phi                       # (J, L)
        Vperp = Vbar - self.Yt_bar @ phi.T
        self.Gperp = Vperp @ Vperp.T                   # (J, J)
        if centered_tm.shape[0] > 1:
            P = centered_tm @ phi                      # (K, J, L)
            self.PSS = np.einsum("kjl,kjl->jl", P, P)
        else:
            self.PSS = np.zeros_like(self.Yt_bar)


class _Engine:
    """Shared computation core for log-posteriors and Gibbs sweeps.

    Owns the basis provider and small memo caches keyed by hyperparameter
    values; all caches are derived from the fixed dataset, so an engine
    must not be reused across datasets.
    """

    def __init__(self, stats, prior, times, points, grid_shape=None,
                 dense_cap=M1_DENSE_CAP, prior_only=False,
                 slice_cfg=SliceConfig()):
        self.stats = stats
        self.prior = prior
        self.times = np.asarray(times, dtype=np.float64)
        self.I, self.J, self.K = stats.I, stats.J, stats.K
        self.L = prior.L
        self.dense_cap = dense_cap
        self.prior_only = prior_only
        self.slice_cfg = slice_cfg
        self.basis_provider = BasisProvider(points, prior, grid_shape)
        self.Vbar = stats.ybar.reshape(self.J, self.I)
        self.centered_tm = stats.centered.reshape(self.K, self.J, self.I)
        if prior.model == "I" and self.I * self.J > dense_cap:
            raise CapacityError(
                "Model I needs a dense %d x %d marginal > cap %d"
                % (self.I * self.J, self.I * self.J, dense_cap))
        self._proj_memo = {}
        self._c0t_memo = {}
        self._c0u_memo = {}

    # ---- kernel caches ---------------------------------------------------
    def _c0t(self, eta_t):
        hit = self._c0t_memo.get(eta_t)
        if hit is None:
            params = StationaryKernelParams(1.0, float(np.exp(eta_t)),
                                            self.prior.s_exp)
            hit = stationary_kernel(self.times, params)
            if len(self._c0t_memo) > 64:
                self._c0t_memo.clear()
            self._c0t_memo[eta_t] = hit
        return hit

    def _c0u(self, eta_u):
        """Unit-variance GP kernel of the eigenvalue processes, factored."""
        hit = self._c0u_memo.get(eta_u)
        if hit is None:
            params = StationaryKernelParams(1.0, float(np.exp(eta_u)),
                                            self.prior.s_exp)
            C = stationary_kernel(self.times, params)
            chol = spd_chol(C)
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            hit = (chol, logdet)
            if len(self._c0u_memo) > 64:
                self._c0u_memo.clear()
            self._c0u_memo[eta_u] = hit
        return hit

    def basis_proj(self, eta_x):
        hit = self._proj_memo.get(eta_x)
        if hit is None:
            basis = self.basis_provider(eta_x)
            if self.basis_provider.fixed_phi and self._proj_memo:
                # same Phi for every eta_x; reuse any cached projection
                proj = next(iter(self._proj_memo.values()))[1]
            else:
                proj = _ProjStats(basis.phi, self.Vbar, self.centered_tm)
            if len(self._proj_memo) > 16:
                self._proj_memo.clear()
            hit = (basis, proj)
            self._proj_memo[eta_x] = hit
        return hit

    # ---- log-posterior pieces ---------------------------------------------
    def data_terms_m2(self, state, need_proj_terms=True, need_marginal=True):
        """Model II data-dependent terms of the marginalized log posterior.

        Projected-likelihood convention for rank deficiency (L < I): the
        centered-trial quadratic form and the pseudo log-determinant run
        over the JL span coordinates with lambda^2 floored; a state pushing
        lambda^2 below floor where the data projection is nonzero scores
        -inf so MCMC rejects it.
        """
        if self.prior_only:
            return 0.0
        try:
            basis, proj = self.basis_proj(state.eta_x)
        except NumericalError:
            return -np.inf
        dyn = state.dyn
        lam2 = dyn.lam ** 2
        out = 0.0
        if need_proj_terms and self.K > 1:
            low = lam2 < LAM2_FLOOR
            if np.any(low & (proj.PSS > 0.0)):
                return -np.inf
            lam2f = np.maximum(lam2, LAM2_FLOOR)
            out -= 0.5 * (self.K - 1) * float(np.sum(np.log(lam2f)))
            out -= 0.5 * float(np.sum(proj.PSS / lam2f))
        if need_marginal:
            C_t = state.sigma2_t * self._c0t(state.eta_t)
            try:
                marg = Model2Marginal(C_t, basis, dyn, self.K)
                quad, logdet = marg.marginal_quad_logdet(proj.Yt_bar,
                                                         proj.Gperp)
            except NumericalError:
                return -np.inf
            out -= 0.5 * (logdet + quad)
        return float(out) if np.isfinite(out) else -np.inf

    def data_terms_m1(self, state):
        """Model I data-dependent terms (dense marginal)."""
        if self.prior_only:
            return 0.0
        K, I, J = self.K, self.I, self.J
        try:
            basis, _ = self.basis_proj(state.eta_x)
            C_t = state.sigma2_t * self._c0t(state.eta_t)
            marg = m1_assemble(C_t, basis, state.dyn, state.sigma2_eps,
                               K, self.dense_cap)
            solve, logdet = m1_solve_logdet(marg, self.stats.ybar)
        except NumericalError:
            return -np.inf
        quad = float(self.stats.ybar @ solve)
        out = -0.5 * (logdet + quad)
        if K > 1:
            resid = self.stats.ysq - float(self.stats.ybar @ self.stats.ybar)
            out -= 0.5 * I * J * (K - 1) * np.log(state.sigma2_eps)
            out -= 0.5 * K * resid / state.sigma2_eps
        return float(out) if np.isfinite(out) else -np.inf

    def data_terms(self, state):
        if self.prior.model == "II":
            return self.data_terms_m2(state)
        return self.data_terms_m1(state)

    def lambda_prior_terms(self, state):
        """Matrix-normal prior of Lambda through U, including the gamma
        column scaling and the C_u = sigma2_u * C0u terms."""
        chol0, logdet0 = self._c0u(state.eta_u)
        W = np.linalg.solve(chol0, state.U)
        trq = float(np.sum(W * W))
        gamma = state.dyn.gamma
        J, L = state.U.shape
        return (-J * float(np.sum(np.log(gamma)))
                - 0.5 * L * (J * np.log(state.sigma2_u) + logdet0)
                - 0.5 * trq / state.sigma2_u)

    def _trq_u(self, state, eta_u=None):
        chol0, _ = self._c0u(state.eta_u if eta_u is None else eta_u)
        W = np.linalg.solve(chol0, state.U)
        return float(np.sum(W * W))

    def hyper_prior_terms(self, state):
        pr = self.prior
        out = 0.0
        pairs = [(state.sigma2_t, pr.a[1], pr.b[1]),
                 (state.sigma2_u, pr.a[2], pr.b[2])]
        if pr.model == "I":
            pairs.append((state.sigma2_eps, pr.a[0], pr.b[0]))
        for sig2, a, b in pairs:
            out += -(a + 1.0) * np.log(sig2) - b / sig2
        for eta, m, V in zip((state.eta_x, state.eta_t, state.eta_u),
                             pr.m, pr.V):
            out += -0.5 * (eta - m) ** 2 / V
        return float(out)

    def logpost(self, state):
        d = self.data_terms(state)
        if not np.isfinite(d):
            return -np.inf
        return d + self.lambda_prior_terms(state) + self.hyper_prior_terms(state)

    # ---- Gibbs sweep -------------------------------------------------------
    def initial_state(self, rng):
        pr = self.prior
        def ig_init(a, b):
            return b / (a - 1.0) if a > 1.0 else 1.0
        sigma2_t = ig_init(pr.a[1], pr.b[1])
        sigma2_u = ig_init(pr.a[2], pr.b[2])
        sigma2_eps = ig_init(pr.a[0], pr.b[0]) if pr.model == "I" else None
        eta_x, eta_t, eta_u = pr.m
        chol0, _ = self._c0u(eta_u)
        Z = rng.gen.standard_normal((self.J, self.L))
        U = np.sqrt(sigma2_u) * (chol0 @ Z)
        return HyperState(sigma2_t=sigma2_t, sigma2_u=sigma2_u,
                          eta_x=eta_x, eta_t=eta_t, eta_u=eta_u,
                          U=U, kappa=pr.kappa, sigma2_eps=sigma2_eps)

    def sweep(self, state, rngs, counters=None):
        """One full Metropolis-within-Gibbs sweep; returns the new state."""
        pr = self.prior
        cfg = self.slice_cfg
        model2 = (pr.model == "II")

        if not model2:
            # sigma2_eps, log scale
            a_e, b_e = pr.a[0], pr.b[0]
            def target_eps(th):
                s2 = np.exp(th)
                cand = state.replace(sigma2_eps=float(s2))
                return self.data_terms_m1(cand) - a_e * th - b_e / s2
            th = slice_sample_1d(target_eps, np.log(state.sigma2_eps), cfg,
                                 rngs["sigma2_eps"], counters)
            state = state.replace(sigma2_eps=float(np.exp(th)))

        # sigma2_t, log scale
        a_t, b_t = pr.a[1], pr.b[1]
        if model2:
            def target_st(th):
                cand = state.replace(sigma2_t=float(np.exp(th)))
                d = self.data_terms_m2(cand, need_proj_terms=False)
                return d - a_t * th - b_t / np.exp(th)
        else:
            def target_st(th):
                cand = state.replace(sigma2_t=float(np.exp(th)))
                return self.data_terms_m1(cand) - a_t * th - b_t / np.exp(th)
        th = slice_sample_1d(target_st, np.log(state.sigma2_t), cfg,
                             rngs["sigma2_t"], counters)
        state = state.replace(sigma2_t=float(np.exp(th)))

        # sigma2_u, conjugate inverse-gamma
        a_u, b_u = pr.a[2], pr.b[2]
        trq = self._trq_u(state)
        draw = inverse_gamma_draw(a_u + 0.5 * self.J * self.L,
                                  b_u + 0.5 * trq, rngs["sigma2_u"])
        state = state.replace(sigma2_u=float(draw))

        # eta_x
        m_x, V_x = pr.m[0], pr.V[0]
        if self.basis_provider.fixed_phi or self.prior_only:
            # likelihood does not involve eta_x; conditional is the prior
            def target_ex(e):
                return -0.5 * (e - m_x) ** 2 / V_x
        elif model2:
            def target_ex(e):
                cand = state.replace(eta_x=float(e))
                return (self.data_terms_m2(cand)
                        - 0.5 * (e - m_x) ** 2 / V_x)
        else:
            def target_ex(e):
                cand = state.replace(eta_x=float(e))
                return (self.data_terms_m1(cand)
                        - 0.5 * (e - m_x) ** 2 / V_x)
        e = slice_sample_1d(target_ex, state.eta_x, cfg, rngs["eta_x"],
                            counters)
        state = state.replace(eta_x=float(e))

        # eta_t
        m_t, V_t = pr.m[1], pr.V[1]
        if model2:
            def target_et(e):
                cand = state.replace(eta_t=float(e))
                d = self.data_terms_m2(cand, need_proj_terms=False)
                return d - 0.5 * (e - m_t) ** 2 / V_t
        else:
            def target_et(e):
                cand = state.replace(eta_t=float(e))
                return (self.data_terms_m1(cand)
                        - 0.5 * (e - m_t) ** 2 / V_t)
        e = slice_sample_1d(target_et, state.eta_t, cfg, rngs["eta_t"],
                            counters)
        state = state.replace(eta_t=float(e))

        # eta_u: only the Lambda prior and its own prior move
        m_u, V_u = pr.m[2], pr.V[2]
        L_, J_ = self.L, self.J
        def target_eu(e):
            try:
                chol0, logdet0 = self._c0u(float(e))
            except NumericalError:
                return -np.inf
            W = np.linalg.solve(chol0, state.U)
            trq = float(np.sum(W * W))
            return (-0.5 * L_ * logdet0 - 0.5 * trq / state.sigma2_u
                    - 0.5 * (e - m_u) ** 2 / V_u)
        e = slice_sample_1d(target_eu, state.eta_u, cfg, rngs["eta_u"],
                            counters)
        state = state.replace(eta_u=float(e))

        # U via elliptical slice; prior MN(0, sigma2_u * C0u, I_L)
        chol0, _ = self._c0u(state.eta_u)
        sd_u = np.sqrt(state.sigma2_u)
        def prior_draw(r):
            return sd_u * (chol0 @ r.gen.standard_normal((J_, L_)))
        if self.prior_only:
            def loglik(U):
                return 0.0
        elif model2:
            def loglik(U):
                return self.data_terms_m2(state.replace(U=U))
        else:
            def loglik(U):
                return self.data_terms_m1(state.replace(U=U))
        U = ess_update(loglik, prior_draw, state.U, rngs["U"], counters)
        return state.replace(U=U)

    # ---- posterior draw of the mean field ----------------------------------
    def draw_M(self, state, rng):
        basis, _ = self.basis_proj(state.eta_x)
        C_t = state.sigma2_t * self._c0t(state.eta_t)
        z = rng.gen.standard_normal(self.I * self.J)
        if self.prior.model == "II":
            marg = Model2Marginal(C_t, basis, state.dyn, self.K)
            mean = marg.posterior_mean(self.stats.ybar)
            return mean + marg.posterior_cov_sqrt_apply(z)
        marg = m1_assemble(C_t, basis, state.dyn, state.sigma2_eps,
                           self.K, self.dense_cap)
        # C_z and C* commute (C* = C_z + c I), so share eigenvectors
        w, V = np.linalg.eigh(marg.dense)
        c = state.sigma2_eps / self.K
        d = np.clip(w - c, 0.0, None)          # eigenvalues of C_z
        post = d * c / (d + c)
        mean = V @ ((d / (d + c)) * (V.T @ self.stats.ybar))
        return mean + V @ (np.sqrt(post) * (V.T @ z))


# ---- public log-posteriors --------------------------------------------------
def logpost_m2(state, stats, prior, times, points, grid_shape=None):
    """Marginalized Model II log posterior, up to an additive constant."""
    if prior.model != "II":
        raise ValueError("prior.model must be 'II'")
    eng = _Engine(stats, prior, times, points, grid_shape)
    return eng.logpost(state)


def logpost_m1(state, stats, prior, times, points, grid_shape=None):
    """Marginalized Model I log posterior, up to an additive constant."""
    if prior.model != "I":
        raise ValueError("prior.model must be 'I'")
    if state.sigma2_eps is None:
        raise ValueError("Model I state needs sigma2_eps")
    eng = _Engine(stats, prior, times, points, grid_shape)
    return eng.logpost(state)


def gibbs_step(state, stats, prior, rng, times, points, grid_shape=None,
               slice_cfg=SliceConfig(), counters=None, engine=None):
    """One Gibbs sweep; all blocks draw sequentially from rng.

    fit() gives each block its own stream instead; outcomes are valid
    either way, this entry point just favors simplicity.
    """
    eng = engine or _Engine(stats, prior, times, points, grid_shape,
                            slice_cfg=slice_cfg)
    rngs = {name: rng for name in _STREAMS}
    return eng.sweep(state, rngs, counters)


# ---- fit --------------------------------------------------------------------
@dataclass
class PosteriorSamples:
    """Retained posterior draws plus run metadata.

    lam stacks the derived Lambda per draw, shape (draws, J, L); scalars
    live in the HyperState list.  M is present only when sample_M was on.
    """
    draws: list
    lam: np.ndarray
    logpost: np.ndarray
    meta: dict
    M: np.ndarray | None = None

    @property
    def n_draws(self):
        return len(self.draws)

    def scalar(self, name):
        return np.array([getattr(d, name) for d in self.draws])


def fit(ds, prior, run):
    """Run the Metropolis-within-Gibbs chain on a dataset.

    run is a mapping with n_iter, burn_in, thin, seed and optional
    sample_M (default False).  Deterministic given seed: every Gibbs block
    owns its own counter-based stream.
    """
    n_iter = int(run["n_iter"])
    burn_in = int(run.get("burn_in", 0))
    thin = int(run.get("thin", 1))
    seed = int(run.get("seed", 0))
    sample_M = bool(run.get("sample_M", False))
    prior_only = bool(run.get("prior_only", False))
    if not (0 <= burn_in <= n_iter):
        raise ValueError("need 0 <= burn_in <= n_iter")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    if prior.L > ds.I:
        raise ValueError("L must be <= I")

    stats = sufficient_stats(ds)
    engine = _Engine(stats, prior, ds.time.times, ds.space.points,
                     grid_shape=ds.space.grid_shape, prior_only=prior_only)
    base = RngState(seed)
    rngs = {name: base.split(sid) for name, sid in _STREAMS.items()}
    counters = {}

    t0 = _time.monotonic()
    state = engine.initial_state(rngs["init"])
    if not np.isfinite(engine.logpost(state)):
        raise NumericalError("initial state has non-finite log posterior; "
                             "check prior configuration against the data")
    draws, lam_list, lp_list, m_list = [], [], [], []
    for it in range(1, n_iter + 1):
        state = engine.sweep(state, rngs, counters)
        if it > burn_in and (it - burn_in) % thin == 0:
            draws.append(state)
            lam_list.append(state.lam)
            lp_list.append(engine.logpost(state))
            if sample_M:
                m_list.append(engine.draw_M(state, rngs["M"]))
    wall = _time.monotonic() - t0

    J, L = engine.J, engine.L
    lam = (np.array(lam_list) if lam_list
           else np.zeros((0, J, L)))
    meta = {
        "model": prior.model,
        "prior": {"a": list(prior.a), "b": list(prior.b),
                  "m": list(prior.m), "V": list(prior.V),
                  "kappa": prior.kappa, "L": prior.L,
                  "spatial_kernel": prior.spatial_kernel,
                  "s_exp": prior.s_exp, "graph_w": prior.graph_w,
                  "graph_s": prior.graph_s},
        "run": {"n_iter": n_iter, "burn_in": burn_in, "thin": thin,
                "seed": seed, "sample_M": sample_M},
        "dims": {"I": ds.I, "J": ds.J, "K": ds.K},
        "grids": {"times": [float(v) for v in ds.time.times],
                  "points": [[float(v) for v in p]
                             for p in ds.space.points],
                  "grid_shape": (list(ds.space.grid_shape)
                                 if ds.space.grid_shape else None)},
        "counters": dict(sorted(counters.items())),
        "wall_time": wall,
    }
    return PosteriorSamples(draws=draws, lam=lam,
                            logpost=np.array(lp_list), meta=meta,
                            M=(np.array(m_list) if sample_M and m_list
                               else None))


# ---- TESD estimation ---------------------------------------------------------
@dataclass
class TesdEstimate:
    """Posterior summary of the spatial covariance at each requested time."""
    times: np.ndarray
    time_indices: np.ndarray
    cov_mean: np.ndarray            # (Jsel, I, I)
    corr_mean: np.ndarray           # (Jsel, I, I)
    band_pairs: list
    band_lo: np.ndarray             # (Jsel, P)
    band_hi: np.ndarray             # (Jsel, P)
    model: str


def _tesd_coeffs(samples):
    """Per-draw diagonal and span coefficients of C_{y|t}.

    Model II: sigma2_t * I + Phi diag(lam_j^2) Phi^T
    Model I:  sigma2_eps * I + sigma2_t * Phi diag(lam_j^2) Phi^T
    """
    model = samples.meta["model"]
    s_t = samples.scalar("sigma2_t")
    if model == "II":
        return s_t, np.ones_like(s_t)
    s_e = samples.scalar("sigma2_eps")
    return s_e, s_t


def _provider_from_meta(samples):
    meta = samples.meta
    prior = PriorConfig(**meta["prior"], model=meta["model"])
    gs = meta["grids"].get("grid_shape")
    return BasisProvider(np.array(meta["grids"]["points"]), prior,
                         tuple(gs) if gs else None)


def estimate_tesd(samples, time_indices=None, band_pairs=None,
                  dense_draws_max_I=64):
    """Posterior mean and bands of the conditional spatial covariance.

    For I up to dense_draws_max_I the full I x I matrix is accumulated per
    draw (correlation averaged draw-wise).  Above that, the basis must be
    eta_x-independent (graph-Laplacian kernel); the mean covariance is then
    assembled once from averaged lambda^2 and the correlation is that of
    the mean covariance.  Credible bands are empirical 2.5/97.5 percent
    quantiles of per-draw entries for the selected index pairs.
    """
    if samples.n_draws == 0:
        raise ValueError("no posterior draws")
    meta = samples.meta
    I = meta["dims"]["I"]
    times = np.array(meta["grids"]["times"])
    J = times.size
    idx = (np.arange(J) if time_indices is None
           else np.asarray(time_indices, dtype=int))
    if np.any(idx < 0) or np.any(idx >= J):
        raise ValueError("time index out of range")
    if band_pairs is None:
        band_pairs = ([(i, ip) for i in range(I) for ip in range(i, I)]
                      if I <= 12 else [])
    for i, ip in band_pairs:
        if not (0 <= i < I and 0 <= ip < I):
            raise ValueError("band pair index out of range")
    provider = _provider_from_meta(samples)
    diag_c, span_c = _tesd_coeffs(samples)
    S = samples.n_draws
    lam2 = samples.lam[:, idx, :] ** 2                  # (S, Jsel, L)
    nsel = idx.size

    band_draws = np.empty((S, nsel, len(band_pairs)))
    if I <= dense_draws_max_I:
        cov_sum = np.zeros((nsel, I, I))
        corr_sum = np.zeros((nsel, I, I))
        for s, st in enumerate(samples.draws):
            phi = provider(st.eta_x).phi
            C = span_c[s] * np.einsum("al,jl,bl->jab", phi, lam2[s], phi)
            C[:, np.arange(I), np.arange(I)] += diag_c[s]
            cov_sum += C
            d = np.sqrt(C[:, np.arange(I), np.arange(I)])
            corr_sum += C / (d[:, :, None] * d[:, None, :])
            for p, (i, ip) in enumerate(band_pairs):
                band_draws[s, :, p] = C[:, i, ip]
        cov_mean = cov_sum / S
        corr_mean = corr_sum / S
    else:
        if not provider.fixed_phi:
            raise CapacityError(
                "dense per-draw TESD needs I <= %d unless the basis is "
                "fixed (graph-Laplacian kernel)" % dense_draws_max_I)
        phi = provider(samples.draws[0].eta_x).phi
        mean_lam2 = np.einsum("s,sjl->jl", span_c, lam2) / S
        cov_mean = np.einsum("al,jl,bl->jab", phi, mean_lam2, phi)
        cov_mean[:, np.arange(I), np.arange(I)] += diag_c.mean()
        d = np.sqrt(cov_mean[:, np.arange(I), np.arange(I)])
        corr_mean = cov_mean / (d[:, :, None] * d[:, None, :])
        for p, (i, ip) in enumerate(band_pairs):
            proj = np.einsum("sjl,l,l->sj", lam2, phi[i], phi[ip])
            band_draws[:, :, p] = span_c[:, None] * proj
            if i == ip:
                band_draws[:, :, p] += diag_c[:, None]
    if band_pairs:
        lo = np.quantile(band_draws, 0.025, axis=0)
        hi = np.quantile(band_draws, 0.975, axis=0)
    else:
        lo = hi = np.zeros((nsel, 0))
    return TesdEstimate(times=times[idx], time_indices=idx,
                        cov_mean=cov_mean, corr_mean=corr_mean,
                        band_pairs=list(band_pairs), band_lo=lo, band_hi=hi,
                        model=meta["model"])


# ---- serialization -----------------------------------------------------------
def save_samples(samples, dirpath):
    """Write meta.json, hyper.csv, lambda.bin and optional m.bin."""
    os.makedirs(dirpath, exist_ok=True)
    meta_path = os.path.join(dirpath, "meta.json")
    _atomic_write(meta_path, json.dumps(samples.meta, indent=2,
                                        sort_keys=True), mode="w")
    model = samples.meta["model"]
    cols = ["draw"]
    if model == "I":
        cols.append("sigma2_eps")
    cols += ["sigma2_t", "sigma2_u", "eta_x", "eta_t", "eta_u", "logpost"]
    lines = [",".join(cols)]
    for s, st in enumerate(samples.draws):
        row = [str(s)]
        if model == "I":
            row.append(_fmt(st.sigma2_eps))
        row += [_fmt(st.sigma2_t), _fmt(st.sigma2_u), _fmt(st.eta_x),
                _fmt(st.eta_t), _fmt(st.eta_u), _fmt(samples.logpost[s])]
        lines.append(",".join(row))
    _atomic_write(os.path.join(dirpath, "hyper.csv"),
                  "\n".join(lines) + "\n", mode="w")
    _atomic_write(os.path.join(dirpath, "lambda.bin"),
                  np.ascontiguousarray(samples.lam, dtype="<f8").tobytes(),
                  mode="wb")
    if samples.M is not None:
        _atomic_write(os.path.join(dirpath, "m.bin"),
                      np.ascontiguousarray(samples.M, dtype="<f8").tobytes(),
                      mode="wb")


def load_samples(dirpath):
    """Reload a PosteriorSamples directory written by save_samples."""
    with open(os.path.join(dirpath, "meta.json")) as fh:
        meta = json.load(fh)
    model = meta["model"]
    J = len(meta["grids"]["times"])
    L = meta["prior"]["L"]
    kappa = meta["prior"]["kappa"]
    with open(os.path.join(dirpath, "hyper.csv")) as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:] if line]
    lam_raw = np.fromfile(os.path.join(dirpath, "lambda.bin"), dtype="<f8")
    lam = lam_raw.reshape(len(rows), J, L) if rows else np.zeros((0, J, L))
    gamma = np.arange(1, L + 1, dtype=np.float64) ** (-kappa / 2.0)
    draws, lp = [], []
    for s, row in enumerate(rows):
        rec = dict(zip(header, row))
        U = lam[s] / gamma[None, :]
        draws.append(HyperState(
            sigma2_t=float(rec["sigma2_t"]), sigma2_u=float(rec["sigma2_u"]),
            eta_x=float(rec["eta_x"]), eta_t=float(rec["eta_t"]),
            eta_u=float(rec["eta_u"]), U=U, kappa=kappa,
            sigma2_eps=(float(rec["sigma2_eps"]) if model == "I" else None)))
        lp.append(float(rec["logpost"]))
    m_path = os.path.join(dirpath, "m.bin")
    M = None
    if os.path.exists(m_path):
        I = meta["dims"]["I"]
        M = np.fromfile(m_path, dtype="<f8").reshape(len(rows), I * J)
    return PosteriorSamples(draws=draws, lam=lam, logpost=np.array(lp),
                            meta=meta, M=M)
