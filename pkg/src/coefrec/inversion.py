"""Least-squares inversion in the dual test norm, calibration, certificates.

The reconstruction minimizes ||T m - b|| in the S_V^{-1} norm, either over all
of M_h (requires alpha > 0) or over the hyperplane orthogonal to the
degenerate direction z (requires beta > 0). The hyperplane constraint is
taken in the M inner product, <m, z>_M = 0, matching the whitened singular
value analysis; a compatibility switch selects the plain Euclidean constraint
instead.

The scalar left undetermined by the constrained solve is fixed by one extra
datum (a known mean, a known cell value, or the oracle projection), and the
quantitative error certificates bound the relative M-norm error from the
computable quantities (alpha, beta, rho, interpolation and data errors).
"""

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import cg

from .spaces import ScalarSpace, gram_M, integral_weights, project_pi_h
from .system import OperatorSystem

__all__ = [
    "NoiseSpec",
    "Certificate",
    "ReconstructionReport",
    "RankDeficientOperatorError",
    "UnstablePairError",
    "apply_noise",
    "solve_unconstrained",
    "solve_constrained",
    "calibrate",
    "relative_error",
    "certificate",
]

DENSE_SOLVE_LIMIT = 3000     # n above which the solvers go matrix-free
_RANK_TOL = 1e-14


class RankDeficientOperatorError(np.linalg.LinAlgError):
    """Normal matrix numerically singular; use the constrained solver."""


class UnstablePairError(np.linalg.LinAlgError):
    """beta(T_h) vanishes: the pair does not control the constrained problem."""


@dataclass(frozen=True)
class NoiseSpec:
    """Multiplicative Gaussian corruption: each sample scaled by 1 + sigma*N."""

    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise level sigma must be nonnegative")


def apply_noise(values, spec: NoiseSpec):
    """Multiply every entry by an independent 1 + sigma*N(0,1) draw."""
    values = np.asarray(values, dtype=float)
    if spec.sigma == 0:
        return values.copy()
    rng = np.random.default_rng(spec.seed)
    return values * (1.0 + spec.sigma * rng.standard_normal(values.shape))


def _as_system(T, S_V=None, S_M=None, system=None):
    if system is not None:
        return system
    import scipy.sparse as sp
    n = T.shape[1]
    sm = S_M if S_M is not None else sp.identity(n, format="csr")
    return OperatorSystem(T, sm, S_V=S_V)


def solve_unconstrained(T, b, S_V=None, system=None, info=None):
    """mu = (T^T S_V^{-1} T)^{-1} T^T S_V^{-1} b.

    Dense sizes solve the normal equations by Cholesky after a rank check and
    raise RankDeficientOperatorError when the normal matrix is numerically
    singular (alpha ~ 0), advising the constrained solver. Larger systems use
    conjugate gradients started at zero, which converges on the range
    component of a consistent singular system.
    """
    system = _as_system(T, S_V=S_V, system=system)
    g = system.T.T @ system.solve_sv(b)
    if system.n <= DENSE_SOLVE_LIMIT:
        N = system.normal_matrix()
        lam = scipy.linalg.eigvalsh(N)
        if lam[0] <= _RANK_TOL * max(lam[-1], 1e-300):
            raise RankDeficientOperatorError(
                "normal matrix is rank deficient (alpha(T_h) ~ 0); "
                "use solve_constrained with the degenerate direction z")
        if info is not None:
            info["condition"] = float(lam[-1] / lam[0])
        c, low = scipy.linalg.cho_factor(N)
        mu = scipy.linalg.cho_solve((c, low), g)
    else:
        op = system.whitened_normal_operator()
        gw = system.cm_solve_t(g)
        sol, code = cg(op, gw, rtol=1e-12, atol=0.0, maxiter=5000)
        if code != 0:
            raise RankDeficientOperatorError(
                f"conjugate gradients did not converge (code {code}); "
                "use solve_constrained with the degenerate direction z")
        mu = system.cm_solve(sol)
    if info is not None:
        r = system.T @ mu - b
        info["residual_dual"] = system.dual_norm(r)
    return mu


def solve_constrained(T, b, z, S_V=None, S_M=None, system=None,
                      orthogonality="gram", info=None):
    """Minimize ||T m - b||_{S_V^{-1}} subject to <m, z> = 0.

    orthogonality 'gram' constrains in the M inner product (m^T S_M z = 0,
    consistent with beta as the second whitened singular value); 'euclidean'
    appends the plain z^T row instead.
    """
    system = _as_system(T, S_V=S_V, S_M=S_M, system=system)
    z = np.asarray(z, dtype=float)
    if orthogonality == "gram":
        c = system.S_M @ z
    elif orthogonality == "euclidean":
        c = z.copy()
    else:
        raise ValueError(f"unknown orthogonality {orthogonality!r}")
    g = system.T.T @ system.solve_sv(b)
    if system.n <= DENSE_SOLVE_LIMIT:
        N = system.normal_matrix()
        kkt = np.zeros((system.n + 1, system.n + 1))
        kkt[:-1, :-1] = N
        kkt[:-1, -1] = c
        kkt[-1, :-1] = c
        rhs = np.concatenate([g, [0.0]])
        try:
            sol = scipy.linalg.solve(kkt, rhs, assume_a="sym")
        except scipy.linalg.LinAlgError as exc:
            raise UnstablePairError(
                f"constrained normal system is singular: {exc}") from exc
        if not np.isfinite(sol).all():
            raise UnstablePairError("constrained normal system is singular")
        mu = sol[:-1]
    else:
        if not system.sm_is_diagonal:
            raise NotImplementedError(
                "matrix-free constrained solve needs a diagonal S_M")
        # whitened coordinates: constraint becomes Euclidean orthogonality
        # to u = C_M z (gram) or C_M^{-1} c (euclidean)
        u = system.cm_apply(z) if orthogonality == "gram" else system.cm_solve_t(c)
        u = u / np.linalg.norm(u)
        op = system.whitened_normal_operator()

        def proj(x):
            return x - (u @ x) * u

        from scipy.sparse.linalg import LinearOperator
        pop = LinearOperator((system.n, system.n),
                             matvec=lambda x: proj(op.matvec(proj(x))))
        gw = proj(system.cm_solve_t(g))
        sol, code = cg(pop, gw, rtol=1e-13, atol=0.0, maxiter=5000)
        if code != 0:
            raise UnstablePairError(
                f"projected conjugate gradients did not converge (code {code})")
        mu = system.cm_solve(proj(sol))
    if info is not None:
        r = system.T @ mu - b
        info["residual_dual"] = system.dual_norm(r)
        info["constraint"] = float(abs(c @ mu))
    return mu


def calibrate(mu_h, z, space: ScalarSpace, target):
    """Fix the coefficient of z from one scalar datum.

    target is one of
      ('mean', m): match the domain mean of the calibrated field to m;
      ('cell', index, value): match one coefficient;
      ('oracle', pi_mu_exact): best t in the M norm, t = <pi_mu - mu_h, z>_M
        (assumes ||z||_M = 1).
    Returns (t, mu_h + t * z).
    """
    mu_h = np.asarray(mu_h, dtype=float)
    z = np.asarray(z, dtype=float)
    kind = target[0]
    if kind == "mean":
        w = integral_weights(space)
        zmean = float(w @ z) / float(w.sum())
        if abs(zmean) < 1e-14 * float(np.abs(z).max() + 1e-300):
            raise ValueError(
                "direction z has (numerically) zero mean; a known-mean datum "
                "cannot fix its coefficient")
        t = (target[1] - float(w @ mu_h) / float(w.sum())) / zmean
    elif kind == "cell":
        _, idx, value = target
        if z[idx] == 0:
            raise ValueError(f"z vanishes at dof {idx}; pick another cell")
        t = (value - mu_h[idx]) / z[idx]
    elif kind == "oracle":
        pi_mu = np.asarray(target[1], dtype=float)
        sm = gram_M(space)
        t = float((pi_mu - mu_h) @ (sm @ z))
    else:
        raise ValueError(f"unknown calibration target {target!r}")
    return float(t), mu_h + t * z


def relative_error(mu_h, mu_exact, space: ScalarSpace, interface=None):
    """||mu_h - pi_h(mu_exact)||_M / ||pi_h(mu_exact)||_M."""
    interface = interface if interface is not None else getattr(
        mu_exact, "interface", None)
    pi = (np.asarray(mu_exact, dtype=float) if isinstance(
        mu_exact, np.ndarray) else project_pi_h(mu_exact, space,
                                                interface=interface))
    sm = gram_M(space)
    denom = math.sqrt(float(pi @ (sm @ pi)))
    if denom == 0:
        raise ValueError("projected exact field vanishes; relative error undefined")
    diff = np.asarray(mu_h) - pi
    return math.sqrt(max(float(diff @ (sm @ diff)), 0.0)) / denom


@dataclass(frozen=True)
class Certificate:
    """Computable right-hand side of one of the stability estimates."""

    theorem: str
    value: float
    inputs: dict = field(default_factory=dict)
    flags: tuple = ()

    @property
    def hypothesis_ok(self):
        return not self.flags


@dataclass
class ReconstructionReport:
    """Outcome of one inversion run.

    mu_h is the reconstructed coefficient vector (None when the pair is too
    degenerate to solve); t the calibration coefficient of z; residual the
    data misfit in the dual test norm; certificates maps a theorem tag to its
    evaluated bound; meta carries run identifiers (pair, h, sigma, seed, ...).
    """

    mu_h: object
    t: float
    rel_error_raw: float
    rel_error_calibrated: float
    residual: float
    spectral: object
    certificates: dict = field(default_factory=dict)
    flags: tuple = ()
    meta: dict = field(default_factory=dict)

    def to_json(self, directory, stem="report"):
        """Flat JSON with field arrays dumped to CSV files referenced by name."""
        import json
        import pathlib

        from .spaces import dump_field_csv

        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        refs = {}
        if self.mu_h is not None:
            dump_field_csv(self.mu_h, directory / f"{stem}_mu_h.csv")
            refs["mu_h_csv"] = f"{stem}_mu_h.csv"
        if self.spectral is not None:
            dump_field_csv(self.spectral.z, directory / f"{stem}_z.csv")
            refs["z_csv"] = f"{stem}_z.csv"
        doc = {
            "t": self.t,
            "rel_error_raw": self.rel_error_raw,
            "rel_error_calibrated": self.rel_error_calibrated,
            "residual": self.residual,
            "flags": list(self.flags),
        }
        if self.spectral is not None:
            doc.update(alpha=self.spectral.alpha, beta=self.spectral.beta,
                       rho=self.spectral.rho, spectral_method=self.spectral.method)
        for name, cert in self.certificates.items():
            doc[f"certificate_{name}"] = cert.value
            doc[f"certificate_{name}_flags"] = list(cert.flags)
        for k, v in self.meta.items():
            doc[k] = v
        doc.update(refs)
        path = directory / f"{stem}.json"
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True, default=float)
        return path


_REQUIRED = {
    "T2": ("r", "rho", "beta", "eps_op", "eps_int"),
    "T4": ("r", "rho", "alpha", "eps_op", "eps_int", "eps_rhs"),
    "T5": ("r", "rho", "alpha", "beta", "eps_op", "eps_int", "eps_rhs"),
}


def certificate(theorem, **inputs) -> Certificate:
    """Evaluate an a posteriori error bound.

    T2: null-space identification, 4/beta * (sqrt(2) r eps_op + 2 rho eps_int).
    T4: unconstrained solve,       4/alpha * (r eps_op + rho (eps_rhs + eps_int)).
    T5: constrained solve,  4/beta * (r eps_op + rho (eps_rhs + eps_int) + alpha/2).

    The interpolation hypothesis eps_int <= 1/2 is checked for T2 and T5 (and
    reported for T4); a vanishing alpha or beta where the bound divides by it
    yields an infinite bound with a flag rather than an error.
    """
    theorem = theorem.upper()
    if theorem not in _REQUIRED:
        raise ValueError(f"unknown certificate {theorem!r}; use T2, T4 or T5")
    missing = [k for k in _REQUIRED[theorem] if k not in inputs]
    if missing:
        raise ValueError(f"certificate {theorem} missing input(s): "
                         + ", ".join(missing))
    vals = {k: float(inputs[k]) for k in _REQUIRED[theorem]}
    if not all(np.isfinite(v) for v in vals.values()):
        raise ValueError("certificate inputs must be finite")
    flags = []
    if vals["eps_int"] > 0.5:
        flags.append("hypothesis violated: eps_int > 1/2")
    if theorem == "T2":
        denom, num = vals["beta"], (math.sqrt(2.0) * vals["r"] * vals["eps_op"]
                                    + 2.0 * vals["rho"] * vals["eps_int"])
    elif theorem == "T4":
        denom, num = vals["alpha"], (vals["r"] * vals["eps_op"]
                                     + vals["rho"] * (vals["eps_rhs"]
                                                      + vals["eps_int"]))
    else:
        denom, num = vals["beta"], (vals["r"] * vals["eps_op"]
                                    + vals["rho"] * (vals["eps_rhs"]
                                                     + vals["eps_int"])
                                    + 0.5 * vals["alpha"])
    if denom <= 0:
        flags.append(f"stability constant vanishes ({theorem} bound is vacuous)")
        value = math.inf
    else:
        value = 4.0 * num / denom
    return Certificate(theorem, float(value), vals, tuple(flags))
