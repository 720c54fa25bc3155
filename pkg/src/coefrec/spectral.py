"""Stability constants of the discrete operator by whitened singular values.

With Gram factors C_M^T C_M = S_M and C_V^T C_V = S_V, the singular values of
Mt = C_V^{-T} T C_M^{-1} are exactly the extremal values of the quotient
v^T T mu / (||mu||_M ||v||_V). The smallest singular value is alpha, the
second smallest (the inf over the M-orthogonal complement of the minimizing
direction z) is the stability constant beta, and the largest is rho.

Cholesky factors are used instead of symmetric square roots: any factor with
C^T C = S induces the same norms, so the singular values are unchanged, and
triangular factors are cheaper.

Three computational routes cover increasing problem sizes: a dense SVD of Mt,
a dense symmetric eigensolve of the whitened normal matrix, and a matrix-free
LOBPCG for the extreme eigenpairs.
"""

from dataclasses import dataclass
import csv

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import lobpcg

from .system import OperatorSystem

__all__ = [
    "SpectralResult",
    "whiten",
    "extremal_singulars",
    "spectral_constants",
    "beta_in_direction",
    "pair_fails_infsup",
    "usc_sweep",
    "write_infsup_csv",
]

DENSE_SVD_LIMIT = 8000      # n + p for the dense SVD route
NORMAL_EIG_LIMIT = 6000     # n for the dense normal-matrix eigensolve

# beta below this multiple of rho counts as a failed discrete inf-sup pair
DEGENERATE_RATIO = 1e-10


@dataclass(frozen=True)
class SpectralResult:
    """alpha <= beta <= rho plus the degenerate direction z (unit M-norm).

    delta = sqrt(rho^2 - alpha^2); `method` records the computational route.
    """

    alpha: float
    beta: float
    rho: float
    delta: float
    z: np.ndarray
    method: str = "dense_svd"

    @property
    def ratio(self):
        return self.alpha / self.beta if self.beta > 0 else np.inf


def _fix_sign(z):
    return -z if z.sum() < 0 else z


def whiten(T, S_M, S_V) -> np.ndarray:
    """Dense Mt = C_V^{-T} T C_M^{-1} with upper Cholesky factors C."""
    Td = np.asarray(T.todense()) if sp.issparse(T) else np.asarray(T, dtype=float)
    sv = np.asarray(S_V.todense()) if sp.issparse(S_V) else np.asarray(S_V)
    sm = np.asarray(S_M.todense()) if sp.issparse(S_M) else np.asarray(S_M)
    try:
        cv = scipy.linalg.cholesky(sv, lower=False)
        cm = scipy.linalg.cholesky(sm, lower=False)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(f"Gram matrix is not positive definite: {exc}") from exc
    left = scipy.linalg.solve_triangular(cv, Td, lower=False, trans="T")
    return scipy.linalg.solve_triangular(cm, left.T, lower=False, trans="T").T


def extremal_singulars(Mt, cm=None) -> SpectralResult:
    """Extreme singular values of a whitened matrix and the minimizing direction.

    `cm` is the upper M factor used for whitening; when given, z is mapped
    back to coefficient coordinates and renormalized in the S_M inner product.
    The sign is fixed so that the coefficient sum of z is nonnegative.
    """
    Mt = np.asarray(Mt, dtype=float)
    if not np.isfinite(Mt).all():
        raise ValueError("whitened matrix has non-finite entries")
    if Mt.shape[1] < 2:
        raise ValueError("beta needs at least two parameter directions")
    _, svals, vt = scipy.linalg.svd(Mt, full_matrices=True)
    svals = np.concatenate([svals, np.zeros(Mt.shape[1] - len(svals))])
    order = np.argsort(svals)
    alpha = float(svals[order[0]])
    beta = float(svals[order[1]])
    rho = float(svals[order[-1]])
    zw = vt[order[0]]
    z = scipy.linalg.solve_triangular(cm, zw, lower=False) if cm is not None else zw
    if cm is not None:
        nrm = np.linalg.norm(cm @ z)
        z = z / nrm
    z = _fix_sign(z)
    return SpectralResult(alpha, beta, rho,
                          float(np.sqrt(max(rho ** 2 - alpha ** 2, 0.0))), z)


def _dense_svd_route(system: OperatorSystem) -> SpectralResult:
    Td = np.asarray(system.T.todense())
    Kd = np.asarray(system.K.todense())
    cv = scipy.linalg.cholesky(Kd, lower=False)
    ni = system.p // 2
    half = np.empty_like(Td)
    half[:ni] = scipy.linalg.solve_triangular(cv, Td[:ni], lower=False, trans="T")
    half[ni:] = scipy.linalg.solve_triangular(cv, Td[ni:], lower=False, trans="T")
    if system.sm_is_diagonal:
        Mt = half / np.sqrt(system._sm_diag)
    else:
        Mt = scipy.linalg.solve_triangular(
            system._chol_m(), half.T, lower=False, trans="T").T
    res = extremal_singulars(Mt)
    z = system.cm_solve(res.z)
    z = _fix_sign(z / system.m_norm(z))
    return SpectralResult(res.alpha, res.beta, res.rho, res.delta, z,
                          "dense_svd")


def _normal_eig_route(system: OperatorSystem) -> SpectralResult:
    W = system.whitened_normal_matrix()
    lam, vec = scipy.linalg.eigh(W)
    lam = np.maximum(lam, 0.0)
    alpha, beta, rho = np.sqrt(lam[0]), np.sqrt(lam[1]), np.sqrt(lam[-1])
    z = system.cm_solve(vec[:, 0])
    z = _fix_sign(z / system.m_norm(z))
    return SpectralResult(float(alpha), float(beta), float(rho),
                          float(np.sqrt(max(rho ** 2 - alpha ** 2, 0.0))), z,
                          "normal_eig")


def _iterative_route(system: OperatorSystem, tol=1e-9, maxiter=3000,
                     seed=0) -> SpectralResult:
    op = system.whitened_normal_operator()
    rng = np.random.default_rng(seed)
    n = system.n
    # largest eigenvalue by power iteration on the whitened normal operator
    x = rng.normal(size=n)
    x /= np.linalg.norm(x)
    rho_sq = 0.0
    for _ in range(500):
        y = op.matvec(x)
        new = float(x @ y)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            break
        x = y / nrm
        if abs(new - rho_sq) <= 1e-12 * max(new, 1e-300):
            rho_sq = new
            break
        rho_sq = new
    X = rng.normal(size=(n, 2))
    # seed the search with the constant direction, usually close to z
    X[:, 0] = system.cm_apply(np.ones(n))
    lam, vec = lobpcg(op, X, largest=False, tol=tol * max(rho_sq, 1e-300),
                      maxiter=maxiter)
    order = np.argsort(lam)
    lam = np.maximum(lam[order], 0.0)
    vec = vec[:, order]
    alpha, beta = float(np.sqrt(lam[0])), float(np.sqrt(lam[1]))
    rho = float(np.sqrt(max(rho_sq, lam[-1])))
    z = system.cm_solve(vec[:, 0])
    z = _fix_sign(z / system.m_norm(z))
    return SpectralResult(alpha, beta, rho,
                          float(np.sqrt(max(rho ** 2 - alpha ** 2, 0.0))), z,
                          "lobpcg")


def spectral_constants(system_or_T, S_M=None, S_V=None, method="auto",
                       tol=1e-9) -> SpectralResult:
    """alpha(T_h), beta(T_h), rho(T_h) and z_h for an assembled system.

    Accepts either an OperatorSystem or the triple (T, S_M, S_V). The route is
    picked by size unless `method` forces one of 'dense', 'normal',
    'iterative'.
    """
    if isinstance(system_or_T, OperatorSystem):
        system = system_or_T
    else:
        system = OperatorSystem(system_or_T, S_M, S_V=S_V)
    if system.n < 2:
        raise ValueError("beta needs at least two parameter directions")
    if method == "auto":
        if system.n + system.p <= DENSE_SVD_LIMIT:
            method = "dense"
        elif system.n <= NORMAL_EIG_LIMIT:
            method = "normal"
        else:
            method = "iterative"
    if method == "dense":
        return _dense_svd_route(system)
    if method == "normal":
        return _normal_eig_route(system)
    if method == "iterative":
        return _iterative_route(system, tol=tol)
    raise ValueError(f"unknown method {method!r}")


def pair_fails_infsup(result: SpectralResult) -> bool:
    """Degenerate-pair detection: beta below 1e-10 * rho."""
    return result.beta < DEGENERATE_RATIO * result.rho


def beta_in_direction(T, S_M, S_V, e) -> float:
    """inf-sup constant restricted to the S_M-orthogonal complement of e.

    Computed as the smallest singular value of the whitened matrix projected
    onto the complement of the whitened direction.
    """
    e = np.asarray(e, dtype=float)
    if np.linalg.norm(e) == 0:
        raise ValueError("direction e must be nonzero")
    Mt = whiten(T, S_M, S_V)
    sm = np.asarray(S_M.todense()) if sp.issparse(S_M) else np.asarray(S_M)
    cm = scipy.linalg.cholesky(sm, lower=False)
    ew = cm @ e
    ew = ew / np.linalg.norm(ew)
    # Householder reflection sending ew to the first axis; the remaining
    # columns span the orthogonal complement
    v = ew.copy()
    v[0] += np.sign(ew[0]) if ew[0] != 0 else 1.0
    v /= np.linalg.norm(v)
    H = np.eye(len(ew)) - 2.0 * np.outer(v, v)
    Q = H[:, 1:]
    svals = scipy.linalg.svd(Mt @ Q, compute_uv=False)
    if Mt.shape[0] < Q.shape[1]:   # wide: zero singular values are implicit
        return 0.0
    return float(svals.min())


def usc_sweep(builder, h_list, method="auto"):
    """Tabulate (h, alpha, beta, rho, ratio, n, p) over a mesh-size list.

    `builder` maps h to (T, S_M, S_V) or to an OperatorSystem. The table is
    for monotonicity inspection; no assertion is made.
    """
    rows = []
    for h in h_list:
        built = builder(h)
        system = built if isinstance(built, OperatorSystem) else OperatorSystem(
            built[0], built[1], S_V=built[2])
        res = spectral_constants(system, method=method)
        rows.append({
            "h": float(h), "alpha": res.alpha, "beta": res.beta,
            "rho": res.rho, "ratio": res.ratio, "n": system.n, "p": system.p,
        })
    return rows


def write_infsup_csv(rows, path):
    """CSV dump 'h,alpha,beta,rho,ratio'."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["h", "alpha", "beta", "rho", "ratio"])
        for r in rows:
            w.writerow([f"{r['h']:.17g}", f"{r['alpha']:.17g}",
                        f"{r['beta']:.17g}", f"{r['rho']:.17g}",
                        f"{r['ratio']:.17g}"])
