"""Structured covariance algebra for the two marginalized models.

Model II marginal:  C* = C_t (x) I_x + K^{-1} C_{x|t}
with C_{x|t} block-diagonal over time, block j = Phi diag(lam_j^2) Phi^T.
Inverse applies, log-determinants and the posterior of the mean field M are
computed without ever materializing an IJ x IJ matrix: split vectors into
their span(Phi) coordinates and the orthogonal complement per time block,

    (C*)^{-1} = C_t^{-1} (x) (I - Phi Phi^T)
              + (I_t (x) Phi) [K^{-1} diag(vec' Lam^2) + C_t (x) I_L]^{-1}
                (I_t (x) Phi^T),

and the inner JL x JL system permutes into L independent J x J SPD systems
S_l = C_t + K^{-1} diag(lam_{.,l}^2), factored in one batched call.

Model I marginal:  C* = C_z + K^{-1} sigma2_eps I  with
block (j,j') of C_z equal to C_t[j,j'] Phi diag(lam_j) diag(lam_j') Phi^T;
no structured shortcut exists, so it is assembled densely under a size cap.

All vectors follow the space-fastest stacking from the data module: a
length-IJ vector reshapes to (J, I) with row j the spatial slice at time j.
"""
import numpy as np

from .errors import CapacityError, NumericalError
from .kernels import add_jitter, symmetric_sqrt

M1_DENSE_CAP = 4096


def _as_time_major(v, I, J):
    """View a length-IJ space-fastest vector as a (J, I) matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (I * J,):
        raise ValueError("expected vector of length I*J = %d" % (I * J))
    return v.reshape(J, I)


class Model2Marginal:
    """Factored form of C_t (x) I_x + K^{-1} C_{x|t}.

    Construction validates that C_t is SPD (batched Cholesky after jitter)
    and factors the L inner systems once; applies are then cheap and pure.
    """

    def __init__(self, C_t, basis, dyn, K):
        C_t = np.asarray(C_t, dtype=np.float64)
        J = C_t.shape[0]
        if C_t.shape != (J, J):
            raise ValueError("C_t must be square")
        if dyn.J != J:
            raise ValueError("dyn rows must match C_t size")
        if basis.L != dyn.L:
            raise ValueError("basis and dyn truncation mismatch")
        if K < 1:
            raise ValueError("K must be >= 1")
        self.C_t = C_t
        self.basis = basis
        self.dyn = dyn
        self.K = int(K)
        self.I = basis.I
        self.J = J
        self.L = basis.L

        self._Ct_j = add_jitter(C_t)
        lam2 = dyn.lam ** 2
        S = np.repeat(self._Ct_j[None, :, :], self.L, axis=0)
        S[:, np.arange(J), np.arange(J)] += lam2.T / self.K
        self._S = S
        try:
            self._chol_Ct = np.linalg.cholesky(self._Ct_j)
            chol_S = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            w = np.linalg.eigvalsh(0.5 * (C_t + C_t.T))
            raise NumericalError(
                "C_t not positive definite after jitter; eigenvalue range "
                "[%g, %g]" % (w.min(), w.max()))
        dj = np.arange(J)
        self._logdet_Ct = 2.0 * np.sum(np.log(np.diag(self._chol_Ct)))
        self._logdet_S = 2.0 * np.sum(np.log(chol_S[:, dj, dj]), axis=1)
        self._sqrt_cache = None

    # -- projections ------------------------------------------------------
    def project(self, V):
        """Split (J, I) time-major slices into span and complement parts."""
        Yt = V @ self.basis.phi            # (J, L)
        Vperp = V - Yt @ self.basis.phi.T  # (J, I)
        return Yt, Vperp

    def _solve_S(self, R):
        """Batched solve of the L inner systems; R has shape (L, J, ...)."""
        return np.linalg.solve(self._S, R)

    def _solve_Ct(self, B):
        return np.linalg.solve(self._Ct_j, B)

    # -- marginal operations ----------------------------------------------
    def inverse_apply(self, v):
        """(C*)^{-1} v for a length-IJ vector."""
        V = _as_time_major(v, self.I, self.J)
        Yt, Vperp = self.project(V)
        W = self._solve_Ct(Vperp)
        Z = self._solve_S(Yt.T[:, :, None])[:, :, 0]    # (L, J)
        W += Z.T @ self.basis.phi.T
        return W.reshape(-1)

    def logdet(self):
        """log det C* via the determinant identity; (I-L) copies of C_t."""
        return float(np.sum(self._logdet_S)
                     + (self.I - self.L) * self._logdet_Ct)

    def quad_form(self, v):
        """v^T (C*)^{-1} v, non-negative up to roundoff."""
        return float(np.dot(v, self.inverse_apply(v)))

    def marginal_quad_logdet(self, Yt, Gperp):
        """Quadratic form and logdet from projected statistics only.

        Yt is the (J, L) span projection of ybar and Gperp the (J, J) Gram
        matrix of its orthogonal complement; avoids touching I-sized arrays
        in the MCMC hot path.
        """
        Z = self._solve_S(Yt.T[:, :, None])[:, :, 0]       # (L, J)
        quad = float(np.sum(Z.T * Yt)
                     + np.trace(self._solve_Ct(Gperp)))
        return quad, self.logdet()

    # -- posterior of the mean field --------------------------------------
    def posterior_mean(self, ybar):
        """Posterior mean of vec(M) given trial mean ybar.

        Span coordinates get C_t S_l^{-1} ytilde_l; the orthogonal
        complement keeps the prior zero mean (the rank-deficient likelihood
        carries no information there).
        """
        V = _as_time_major(ybar, self.I, self.J)
        Yt, _ = self.project(V)
        Z = self._solve_S(Yt.T[:, :, None])[:, :, 0]       # (L, J)
        coef = (self.C_t @ Z.T)                            # (J, L)
        return (coef @ self.basis.phi.T).reshape(-1)

    def posterior_cov_apply(self, v):
        """Apply the posterior covariance C' of vec(M)."""
        V = _as_time_major(v, self.I, self.J)
        Yt, Vperp = self.project(V)
        lam2 = self.dyn.lam ** 2                           # (J, L)
        W = self.C_t @ Vperp
        T = self._solve_S((self.C_t @ Yt).T[:, :, None])[:, :, 0]  # (L, J)
        span = (lam2 / self.K) * T.T                       # (J, L)
        W += span @ self.basis.phi.T
        return W.reshape(-1)

    def _sqrt_factors(self):
        if self._sqrt_cache is None:
            lam2 = self.dyn.lam ** 2
            CtL = np.repeat(self.C_t[None, :, :], self.L, axis=0)
            D = (lam2.T[:, :, None] / self.K) * self._solve_S(CtL)
            D = 0.5 * (D + np.transpose(D, (0, 2, 1)))
            w, V = np.linalg.eigh(D)
            root = np.sqrt(np.clip(w, 0.0, None))
            Dhalf = np.einsum("ljk,lk,lmk->ljm", V, root, V)
            self._sqrt_cache = (symmetric_sqrt(self.C_t), Dhalf)
        return self._sqrt_cache

    def posterior_cov_sqrt_apply(self, v):
        """Apply a symmetric square root of C'; composing it with itself
        reproduces posterior_cov_apply."""
        Ct_half, Dhalf = self._sqrt_factors()
        V = _as_time_major(v, self.I, self.J)
        Yt, Vperp = self.project(V)
        W = Ct_half @ Vperp
        span = np.einsum("ljk,kl->jl", Dhalf, Yt)
        W += span @ self.basis.phi.T
        return W.reshape(-1)


def m2_inverse_apply(m, v):
    """(C_t (x) I_x + K^{-1} C_{x|t})^{-1} v without dense assembly."""
    return m.inverse_apply(v)


def m2_logdet(m):
    """log det of the Model II marginal via the determinant identity."""
    return m.logdet()


def m2_posterior_mean_cov_apply(m, ybar):
    """Posterior mean of vec(M) plus covariance and covariance-sqrt
    operators, usable to draw M exactly."""
    ybar = np.asarray(ybar, dtype=np.float64)
    mean = m.posterior_mean(ybar)
    return mean, m.posterior_cov_apply, m.posterior_cov_sqrt_apply


class Model1Marginal:
    """Dense Model I marginal C_z + K^{-1} sigma2_eps I."""

    def __init__(self, C_t, basis, dyn, sigma2_eps, K, dense):
        self.C_t = C_t
        self.basis = basis
        self.dyn = dyn
        self.sigma2_eps = float(sigma2_eps)
        self.K = int(K)
        self.dense = dense
        self._chol = None

    def _factor(self):
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(add_jitter(self.dense))
            except np.linalg.LinAlgError:
                w = np.linalg.eigvalsh(self.dense)
                raise NumericalError(
                    "Model I marginal not positive definite; eigenvalue "
                    "range [%g, %g]" % (w.min(), w.max()))
        return self._chol


def m1_assemble(C_t, basis, dyn, sigma2_eps, K, dense_cap=M1_DENSE_CAP):
    """Materialize the Model I marginal; refuses above the dense cap."""
    I, J, L = basis.I, dyn.J, dyn.L
    if C_t.shape != (J, J):
        raise ValueError("C_t size must match dyn rows")
    if basis.L != L:
        raise ValueError("basis and dyn truncation mismatch")
    if not (sigma2_eps > 0):
        raise ValueError("sigma2_eps must be positive")
    if K < 1:
        raise ValueError("K must be >= 1")
    n = I * J
    if n > dense_cap:
        raise CapacityError(
            "Model I dense marginal needs %d x %d > cap %d; "
            "reduce I*J or raise dense_cap" % (n, n, dense_cap))
    W = basis.phi[None, :, :] * dyn.lam[:, None, :]         # (J, I, L)
    G = np.einsum("jal,kbl->jakb", W, W)
    G *= C_t[:, None, :, None]
    dense = G.reshape(n, n)
    dense = 0.5 * (dense + dense.T)
    dense[np.diag_indices(n)] += sigma2_eps / K
    return Model1Marginal(C_t=C_t, basis=basis, dyn=dyn,
                          sigma2_eps=sigma2_eps, K=K, dense=dense)


def m1_solve_logdet(m, v):
    """Cholesky solve and log-determinant of the dense Model I marginal."""
    chol = m._factor()
    v = np.asarray(v, dtype=np.float64)
    z = np.linalg.solve(chol, v if v.ndim > 1 else v[:, None])
    solve = np.linalg.solve(chol.T, z)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return (solve if v.ndim > 1 else solve[:, 0]), logdet
