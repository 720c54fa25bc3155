"""Shared factorizations for one assembled operator system.

Bundles the rectangular operator matrix T (p x n), the scalar Gram matrix S_M
and the test Gram matrix S_V = blockdiag(K, K), and lazily builds the pieces
every consumer needs: a solver for S_V (one sparse LU of the component block
K), the M whitening factor, the dense normal matrix T^T S_V^{-1} T, and a
matrix-free whitened normal operator for large problems.

Norm conventions: ||mu||_M^2 = mu^T S_M mu and, for a functional with
coefficient vector f, ||f||_{V_h'}^2 = f^T S_V^{-1} f.
"""

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, splu

__all__ = ["OperatorSystem"]

# memory cap for one dense solve block in normal-matrix assembly
_BLOCK_FLOATS = 2_000_000


class OperatorSystem:
    def __init__(self, T, S_M, sv_block=None, S_V=None):
        self.T = sp.csr_matrix(T)
        self.p, self.n = self.T.shape
        self.S_M = S_M
        if sv_block is None:
            if S_V is None:
                raise ValueError("provide sv_block or S_V")
            ni = self.p // 2
            sv = sp.csr_matrix(S_V)
            if (sv[:ni, ni:].nnz or sv[ni:, :ni].nnz
                    or (sv[:ni, :ni] - sv[ni:, ni:]).nnz):
                raise ValueError("S_V is not blockdiag(K, K) in this layout")
            sv_block = sv[:ni, :ni]
        self.K = sp.csc_matrix(sv_block)
        if 2 * self.K.shape[0] != self.p:
            raise ValueError("component block size does not match T")
        d = np.asarray(self.S_M.diagonal()).ravel()
        offdiag = self.S_M - sp.diags(d)
        self._sm_diag = d if offdiag.nnz == 0 else None
        self._k_lu = None
        self._sm_chol = None
        self._normal = None

    # -- S_V ----------------------------------------------------------------
    @property
    def k_lu(self):
        if self._k_lu is None:
            self._k_lu = splu(self.K)
        return self._k_lu

    def solve_sv(self, b):
        """S_V^{-1} b for a vector or (p, k) block, solving per component."""
        ni = self.p // 2
        b = np.asarray(b)
        single = b.ndim == 1
        bb = b[:, None] if single else b
        out = np.empty_like(bb, dtype=float)
        out[:ni] = self.k_lu.solve(np.ascontiguousarray(bb[:ni]))
        out[ni:] = self.k_lu.solve(np.ascontiguousarray(bb[ni:]))
        return out[:, 0] if single else out

    def dual_norm(self, f):
        """||f||_{V_h'} = sqrt(f^T S_V^{-1} f)."""
        return float(np.sqrt(max(f @ self.solve_sv(f), 0.0)))

    # -- S_M ----------------------------------------------------------------
    @property
    def sm_is_diagonal(self):
        return self._sm_diag is not None

    def m_norm(self, x):
        return float(np.sqrt(max(x @ (self.S_M @ x), 0.0)))

    def m_inner(self, x, y):
        return float(x @ (self.S_M @ y))

    def _chol_m(self):
        """Upper factor C with C^T C = S_M."""
        if self._sm_chol is None:
            self._sm_chol = scipy.linalg.cholesky(
                np.asarray(self.S_M.todense()), lower=False)
        return self._sm_chol

    def cm_apply(self, x):
        """C_M x (whitening map)."""
        if self.sm_is_diagonal:
            return np.sqrt(self._sm_diag) * x
        return self._chol_m() @ x

    def cm_solve(self, y):
        """C_M^{-1} y."""
        if self.sm_is_diagonal:
            return y / np.sqrt(self._sm_diag)
        return scipy.linalg.solve_triangular(self._chol_m(), y, lower=False)

    def cm_solve_t(self, y):
        """C_M^{-T} y."""
        if self.sm_is_diagonal:
            return y / np.sqrt(self._sm_diag)
        return scipy.linalg.solve_triangular(self._chol_m(), y, lower=False,
                                             trans="T")

    # -- normal matrix ------------------------------------------------------
    def normal_matrix(self):
        """Dense N = T^T S_V^{-1} T, built in column blocks."""
        if self._normal is None:
            N = np.empty((self.n, self.n))
            block = max(1, _BLOCK_FLOATS // max(self.p, 1))
            Tc = self.T.tocsc()
            for j0 in range(0, self.n, block):
                j1 = min(self.n, j0 + block)
                cols = np.asarray(Tc[:, j0:j1].todense())
                N[:, j0:j1] = self.T.T @ self.solve_sv(cols)
            self._normal = 0.5 * (N + N.T)
        return self._normal

    def whitened_normal_matrix(self):
        """Dense C_M^{-T} N C_M^{-1}; spectrum = squared singular quotients."""
        N = self.normal_matrix()
        if self.sm_is_diagonal:
            s = 1.0 / np.sqrt(self._sm_diag)
            return N * s[:, None] * s[None, :]
        W = self.cm_solve_t(self.cm_solve_t(N).T)
        return 0.5 * (W + W.T)

    def whitened_normal_operator(self) -> LinearOperator:
        """Matrix-free version of `whitened_normal_matrix` (diagonal S_M only)."""
        if not self.sm_is_diagonal:
            raise ValueError("matrix-free path requires a diagonal S_M")
        s = 1.0 / np.sqrt(self._sm_diag)

        def mv(x):
            x = np.asarray(x)
            squeeze = x.ndim == 1
            xx = x[:, None] if squeeze else x
            y = self.T @ (s[:, None] * xx)
            y = self.solve_sv(y)
            out = s[:, None] * (self.T.T @ y)
            return out[:, 0] if squeeze else out

        return LinearOperator((self.n, self.n), matvec=mv, matmat=mv,
                              dtype=float)

    def apply_normal(self, x):
        """N x without forming N."""
        return self.T.T @ self.solve_sv(self.T @ x)
