"""Covariance kernels: stationary space/time kernels, the Mercer eigenbasis,
dynamic eigenvalues for the time-varying spatial kernel, and the sparse
graph-Laplacian spatial precision for image grids.

Conventions shared package-wide:
  * a kernel matrix diagonal gets jitter JITTER_REL * trace/n before any
    factorization (guards Cholesky against roundoff-negative eigenvalues);
  * eigenvector signs are fixed so the largest-magnitude entry of each
    column is positive, ties broken by lowest index;
  * squared dynamic eigenvalues are floored at LAM2_FLOOR inside logs and
    divisions.
"""
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .errors import NumericalError

JITTER_REL = 1e-9
LAM2_FLOOR = 1e-12


@dataclass(frozen=True)
class StationaryKernelParams:
    """Parameters of sigma2 * exp(-0.5 * ||p - p'||^s / rho^s)."""
    sigma2: float
    rho: float
    s_exp: float = 2.0

    def __post_init__(self):
        if not (self.sigma2 > 0):
            raise ValueError("sigma2 must be positive")
        if not (self.rho > 0):
            raise ValueError("rho must be positive")
        if not (0 < self.s_exp <= 2):
            raise ValueError("s_exp must be in (0, 2]")


def _as_points(points):
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if not np.all(np.isfinite(p)):
        raise ValueError("coordinates must be finite")
    return p


def stationary_kernel(points, params):
    """Gram matrix of the stationary kernel on one set of points."""
    p = _as_points(points)
    D = cdist(p, p)
    C = params.sigma2 * np.exp(-0.5 * D ** params.s_exp / params.rho ** params.s_exp)
    return 0.5 * (C + C.T)


def stationary_cross(points_a, points_b, params):
    """Cross-covariance block between two point sets, same kernel form."""
    pa, pb = _as_points(points_a), _as_points(points_b)
    D = cdist(pa, pb)
    return params.sigma2 * np.exp(-0.5 * D ** params.s_exp / params.rho ** params.s_exp)


def add_jitter(C):
    """Diagonal jitter proportional to the mean diagonal element."""
    n = C.shape[0]
    return C + (JITTER_REL * np.trace(C) / n) * np.eye(n)


def spd_chol(C):
    """Lower Cholesky factor after jitter; NumericalError on failure."""
    try:
        return np.linalg.cholesky(add_jitter(C))
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(0.5 * (C + C.T))
        raise NumericalError(
            "Cholesky failed after jitter; eigenvalue range [%g, %g]"
            % (w.min(), w.max()))


def symmetric_sqrt(C):
    """Symmetric PSD square root via eigendecomposition, negatives clipped."""
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def fix_signs(phi):
    """Flip column signs so each largest-magnitude entry is positive.

    np.argmax returns the first maximizer, so ties break at the lowest index.
    """
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


@dataclass(frozen=True)
class MercerBasis:
    """Top-L orthonormal eigenvectors phi (I x L) and their eigenvalue
    square roots lambda0 (length L, non-increasing)."""
    phi: np.ndarray
    lambda0: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        lam0 = np.asarray(self.lambda0, dtype=np.float64).ravel()
        if phi.ndim != 2 or phi.shape[1] != lam0.size:
            raise ValueError("phi must be I x L with L = len(lambda0)")
        if phi.shape[1] > phi.shape[0]:
            raise ValueError("L must be <= I")
        G = phi.T @ phi
        if np.max(np.abs(G - np.eye(phi.shape[1]))) > 1e-10:
            raise ValueError("phi columns must be orthonormal")
        if np.any(lam0 < 0) or np.any(np.diff(lam0) > 1e-12):
            raise ValueError("lambda0 must be non-negative, non-increasing")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "lambda0", lam0)

    @property
    def I(self):
        return self.phi.shape[0]

    @property
    def L(self):
        return self.phi.shape[1]


def mercer_basis(C_x, L):
    """Truncated eigendecomposition C_x ~ phi diag(lambda0^2) phi^T.

    Columns of phi are the top-L unit eigenvectors by descending eigenvalue,
    sign-fixed; lambda0[l] = sqrt(max(eigenvalue_l, 0)).
    """
    C = np.asarray(C_x, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("C_x must be square")
    scale = max(1.0, np.max(np.abs(C)))
    if np.max(np.abs(C - C.T)) > 1e-10 * scale:
        raise ValueError("C_x must be symmetric within 1e-10")
    I = C.shape[0]
    if not (1 <= L <= I):
        raise ValueError("L must be in 1..I")
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(w)[::-1][:L]
    phi = fix_signs(V[:, order])
    lambda0 = np.sqrt(np.clip(w[order], 0.0, None))
    return MercerBasis(phi=phi, lambda0=lambda0)


@dataclass(frozen=True)
class DynamicEigenvalues:
    """Time-varying eigenvalues lambda[j, l] = gamma[l] * u[j, l] with decay
    weights gamma[l] = (l+1)^(-kappa/2) (l zero-based here)."""
    gamma: np.ndarray   # (L,)
    u: np.ndarray       # (J, L)
    lam: np.ndarray     # (J, L)

    @property
    def J(self):
        return self.u.shape[0]

    @property
    def L(self):
        return self.u.shape[1]


def dynamic_eigenvalues(kappa, L, u):
    """Scale GP coefficients u columnwise by gamma_l = l^(-kappa/2).

    kappa = 0 gives gamma identically 1 (the improper-prior setting used
    for image grids).
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != L:
        raise ValueError("u must be J x L")
    if not np.all(np.isfinite(u)):
        raise ValueError("u must be finite")
    gamma = np.arange(1, L + 1, dtype=np.float64) ** (-kappa / 2.0)
    return DynamicEigenvalues(gamma=gamma, u=u, lam=u * gamma[None, :])


def assemble_Cxt(basis, dyn, j):
    """Spatial covariance at time index j: phi diag(lambda_j^2) phi^T."""
    if basis.L != dyn.L:
        raise ValueError("basis and dyn truncation mismatch")
    if not (0 <= j < dyn.J):
        raise ValueError("time index out of range")
    lam2 = dyn.lam[j] ** 2
    return (basis.phi * lam2[None, :]) @ basis.phi.T


@dataclass(frozen=True)
class GraphLaplacian:
    """Unweighted graph Laplacian L = D - A with its sparsity density."""
    n: int
    entries: sp.csr_matrix
    density: float
    grid_shape: tuple | None = None


def grid_graph_laplacian(rows, cols, w=1):
    """Laplacian of the 2-d lattice with Chebyshev-radius-w neighborhoods.

    Each node connects to every node within max(|dr|, |dc|) <= w, unit
    weights, so interior nodes have (2w+1)^2 - 1 neighbors.
    """
    if rows < 2 or cols < 2:
        raise ValueError("rows and cols must be >= 2")
    if w < 1:
        raise ValueError("w must be >= 1")
    n = rows * cols
    idx = np.arange(n).reshape(rows, cols)
    src_list, dst_list = [], []
    for dr in range(-w, w + 1):
        for dc in range(-w, w + 1):
            if dr == 0 and dc == 0:
                continue
            r0, r1 = max(0, -dr), rows - max(0, dr)
            c0, c1 = max(0, -dc), cols - max(0, dc)
            if r0 >= r1 or c0 >= c1:
                continue
            src_list.append(idx[r0:r1, c0:c1].ravel())
            dst_list.append(idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel())
    src = np.concatenate(src_list)
    dst = np.concatenate(dst_list)
    A = sp.coo_matrix((np.ones(src.size), (src, dst)), shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    L = sp.diags(deg) - A
    L = L.tocsr()
    return GraphLaplacian(n=n, entries=L, density=L.nnz / float(n) ** 2,
                          grid_shape=(rows, cols))


def graph_laplacian_precision(L_g, tau2, s, d=2):
    """Sparse spatial precision (s_n L + tau2 I)^s.

    s_n = 1 / (n^(1-2/d) log(n)^(1+2/d)).  The covariance (the inverse) is
    never materialized; downstream code works with eigenpairs.  s is capped
    at 3 to bound sparse fill-in.
    """
    if tau2 < 0:
        raise ValueError("tau2 must be non-negative")
    if not (1 <= int(s) <= 3) or int(s) != s:
        raise ValueError("s must be an integer in 1..3")
    n = L_g.n
    s_n = graph_scaling(n, d)
    M = (s_n * L_g.entries + tau2 * sp.identity(n, format="csr")).tocsr()
    P = M
    for _ in range(int(s) - 1):
        P = P @ M
    return P.tocsr()


def graph_scaling(n, d=2):
    """The normalization s_n = 1/(n^(1-2/d) log(n)^(1+2/d))."""
    if n < 2:
        raise ValueError("need n >= 2")
    return 1.0 / (n ** (1.0 - 2.0 / d) * np.log(n) ** (1.0 + 2.0 / d))
