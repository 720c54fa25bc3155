"""End-to-end benchmark problems: inverse gradient and quasi-static elastography.

The inverse gradient problem recovers mu from f = -grad(mu) on the unit
square with S = I. The elastography benchmark solves the forward elastic
problem on its own fine mesh, stores the displacement on a cartesian grid
(the only data handed to the inversion), differentiates it on the inversion
mesh, and identifies mu as the calibrated degenerate direction of the
assembled operator.

Element pairs are named honeycomb, P0P1, P1P2, P0P2, P1P1. The classical
pairs live on structured uniform-diagonal triangulations. The honeycomb pair
reports its stability constants in the conventional test-norm normalization
gram_scale = 1/2 (see spaces.VectorSpace); reconstructions and certificates
do not depend on that choice.
"""

from dataclasses import dataclass, field, replace
import csv
import math
import time
from typing import Optional

import numpy as np

from .assembly import (assemble_rhs_from_gradient, assemble_rhs_from_p0_vector,
                       assemble_rhs_from_p1_vector, assemble_T,
                       grid_vertex_field, identity_field, p0_gradient_data,
                       rasterize_vertex_field, strain_field)
from .elasticity import forward_elasticity
from .inversion import (NoiseSpec, ReconstructionReport, UnstablePairError,
                        apply_noise, calibrate, certificate, relative_error,
                        solve_constrained)
from .meshing import build_honeycomb, build_structured_trimesh
from .spaces import (cellwise_integrals, eps_int, gram_M, integral_weights,
                     project_pi_h, scalar_space, scalar_stiffness_interior,
                     vector_space)
from .spectral import pair_fails_infsup, spectral_constants
from .system import OperatorSystem
from .targets import get_target

__all__ = [
    "PAIRS",
    "UNIT_SQUARE",
    "GradientProblemSpec",
    "ElastographySpec",
    "SweepResult",
    "make_pair",
    "gradient_context",
    "run_gradient",
    "run_forward",
    "run_elastography",
    "sweep",
    "write_sweep_csv",
    "write_xy_csv",
]

UNIT_SQUARE = (0.0, 0.0, 1.0, 1.0)

# pair name -> (scalar kind, vector degree)
PAIRS = {
    "honeycomb": ("p0hex", 1),
    "P0P1": ("p0tri", 1),
    "P1P2": ("p1tri", 2),
    "P0P2": ("p0tri", 2),
    "P1P1": ("p1tri", 1),
}

# conventional normalization of the hexagon-pair test norm; calibrated so the
# reported stability constants line up with the published tables for this pair
HONEYCOMB_GRAM_SCALE = 0.5


def normalize_pair(name):
    for key in PAIRS:
        if key.lower() == str(name).lower():
            return key
    raise ValueError(f"unknown pair {name!r}; supported: {', '.join(PAIRS)}")


def make_pair(pair, rect, h, diagonal_rule="uniform"):
    """Mesh, scalar space and zero-trace vector space for a named pair."""
    pair = normalize_pair(pair)
    kind, degree = PAIRS[pair]
    if pair == "honeycomb":
        mesh = build_honeycomb(rect, h)
        vh = vector_space(mesh, degree, gram_scale=HONEYCOMB_GRAM_SCALE)
    else:
        mesh = build_structured_trimesh(rect, h, diagonal_rule)
        vh = vector_space(mesh, degree)
    return mesh, scalar_space(mesh, kind), vh


@dataclass(frozen=True)
class GradientProblemSpec:
    """Inverse gradient run: recover `target` from measured f = -grad(target).

    data_model 'interp' mimics measured data: f is stored as a nodal P1 field
    (smooth targets) or as per-triangle average gradients obtained from the
    divergence theorem (discontinuous targets), and the noise corrupts those
    stored samples term by term. 'exact' assembles the weak right-hand side
    by high-order quadrature instead (no data representation error).
    """

    target: object = "mu1"
    pair: str = "honeycomb"
    h: float = 0.05
    noise: NoiseSpec = NoiseSpec()
    domain: tuple = UNIT_SQUARE
    data_model: str = "interp"
    spectral_method: str = "auto"


class GradientContext:
    """Assembled operator, data field and spectral constants, shared across
    noise levels."""

    def __init__(self, spec: GradientProblemSpec):
        if spec.data_model not in ("interp", "exact"):
            raise ValueError(f"unknown data_model {spec.data_model!r}")
        self.spec = spec
        self.mesh, self.mh, self.vh = make_pair(spec.pair, spec.domain, spec.h)
        self.T = assemble_T(identity_field(), self.mh, self.vh)
        self.system = OperatorSystem(
            self.T, gram_M(self.mh),
            sv_block=scalar_stiffness_interior(self.vh))
        self.spectral = spectral_constants(self.system,
                                           method=spec.spectral_method)
        target = get_target(spec.target)
        # reference right-hand side: the weak form of -grad(mu) integrated by
        # parts, so no pointwise derivative of mu is ever taken
        self.exact_rhs = assemble_rhs_from_gradient(target, self.vh)
        # stored data samples: nodal values of f for smooth targets, cell
        # average gradients for discontinuous ones
        if target.grad is not None:
            self.data_field = -target.grad(self.vh.tri.vertices)
            self.data_kind = "p1"
        else:
            self.data_field = -p0_gradient_data(target, self.vh.tri,
                                                interface=target.interface)
            self.data_kind = "p0"
        self.pi_exact = project_pi_h(target, self.mh,
                                     interface=target.interface)
        self.eps_int = eps_int(target, self.mh, interface=target.interface)
        mu_sq = cellwise_integrals(lambda p: target(p) ** 2, self.mh.tri,
                                   interface=target.interface).sum()
        sup = target.sup_norm if target.sup_norm is not None else float(
            np.abs(self.pi_exact).max())
        self.r = sup / math.sqrt(mu_sq)
        self.f_dual_norm = self.system.dual_norm(self.exact_rhs)
        # operator norm of the continuous gradient in the pair's test norm
        self.rho_T = 1.0 / math.sqrt(self.vh.gram_scale)

    def rhs(self, noise: NoiseSpec):
        """Assembled right-hand side for the requested data model and noise."""
        if self.spec.data_model == "exact" and noise.sigma == 0:
            return self.exact_rhs
        field = apply_noise(self.data_field, noise)
        if self.data_kind == "p1":
            return assemble_rhs_from_p1_vector(field, self.vh)
        return assemble_rhs_from_p0_vector(field, self.vh)


def gradient_context(spec: GradientProblemSpec) -> GradientContext:
    return GradientContext(spec)


def run_gradient(spec: GradientProblemSpec,
                 context: Optional[GradientContext] = None) -> ReconstructionReport:
    """Assemble, solve the z-orthogonal least squares, calibrate to the exact
    projection's mean, and evaluate the certificates."""
    t0 = time.perf_counter()
    ctx = context if context is not None else GradientContext(spec)
    res = ctx.spectral
    system = ctx.system
    flags = []
    meta = {
        "problem": "gradient", "pair": normalize_pair(spec.pair),
        "h": spec.h, "sigma": spec.noise.sigma, "seed": spec.noise.seed,
        "n": system.n, "p": system.p,
        "target": get_target(spec.target).name,
        "data_model": spec.data_model,
        "data_representation": ("nodal P1 samples of -grad(mu)"
                                if ctx.data_kind == "p1"
                                else "per-triangle average gradient"),
    }
    if pair_fails_infsup(res):
        flags.append("pair fails discrete inf-sup")

    b = ctx.rhs(spec.noise)
    eps_rhs = 0.0
    if b is not ctx.exact_rhs and ctx.f_dual_norm > 0:
        eps_rhs = system.dual_norm(b - ctx.exact_rhs) / ctx.f_dual_norm

    mu_cal, t, err_raw, err_cal, residual = None, math.nan, math.nan, math.nan, math.nan
    if not flags:
        info = {}
        try:
            mu_h = solve_constrained(None, b, res.z, system=system, info=info)
        except UnstablePairError:
            flags.append("pair fails discrete inf-sup")
        else:
            residual = info["residual_dual"]
            err_raw = relative_error(mu_h, ctx.pi_exact, ctx.mh)
            w = integral_weights(ctx.mh)
            target_mean = float(w @ ctx.pi_exact) / float(w.sum())
            t, mu_cal = calibrate(mu_h, res.z, ctx.mh, ("mean", target_mean))
            err_cal = relative_error(mu_cal, ctx.pi_exact, ctx.mh)

    certs = {}
    for tag in ("T2", "T4", "T5"):
        kw = dict(r=ctx.r, rho=ctx.rho_T, eps_op=0.0, eps_int=ctx.eps_int)
        if tag != "T2":
            kw.update(eps_rhs=eps_rhs)
        if tag in ("T4", "T5"):
            kw.update(alpha=res.alpha)
        if tag in ("T2", "T5"):
            kw.update(beta=res.beta)
        certs[tag] = certificate(tag, **kw)
    meta["eps_int"] = ctx.eps_int
    meta["eps_rhs"] = eps_rhs
    meta["eps_op"] = 0.0
    meta["runtime_s"] = time.perf_counter() - t0
    return ReconstructionReport(mu_cal, t, err_raw, err_cal, residual, res,
                                certs, tuple(flags), meta)


@dataclass(frozen=True)
class ElastographySpec:
    """Quasi-static elastography run from a single displacement field.

    The forward mesh, the storage grid, and the inversion mesh are pairwise
    distinct, so the inversion never sees its own discretization.
    """

    mu_exact: object = "mu_exact"
    forward_h: float = 0.008
    grid_resolution: int = 201
    pair: str = "honeycomb"
    h: float = 0.05
    traction: tuple = (1.0, -1.0)
    region_of_interest: tuple = (0.1, 0.1, 0.9, 0.9)
    domain: tuple = UNIT_SQUARE
    forward_diagonal: str = "alternating"
    noise: Optional[NoiseSpec] = None
    spectral_method: str = "auto"


def run_forward(spec: ElastographySpec):
    """Forward elastic solve on the fine mesh; returns (mesh, displacement)."""
    target = get_target(spec.mu_exact)
    fmesh = build_structured_trimesh(spec.domain, spec.forward_h,
                                     spec.forward_diagonal)
    u = forward_elasticity(target, fmesh, traction=spec.traction,
                           interface=target.interface)
    return fmesh, u


def run_elastography(spec: ElastographySpec,
                     forward_data=None) -> ReconstructionReport:
    """Full pipeline: forward solve, grid storage, strain on the inversion
    mesh, spectral identification of the null direction, mean calibration."""
    t0 = time.perf_counter()
    target = get_target(spec.mu_exact)
    if forward_data is None:
        fmesh, u = run_forward(spec)
    else:
        fmesh, u = forward_data
    g = spec.grid_resolution
    grid = rasterize_vertex_field(fmesh, u, (g, g))
    if spec.noise is not None and spec.noise.sigma > 0:
        grid = replace(grid, values=apply_noise(grid.values, spec.noise))

    mesh, mh, vh = make_pair(spec.pair, spec.region_of_interest, spec.h)
    u_vert = grid_vertex_field(grid, mesh)
    S = strain_field(mesh, u_vert)
    T = assemble_T(S, mh, vh)
    system = OperatorSystem(T, gram_M(mh),
                            sv_block=scalar_stiffness_interior(vh))
    res = spectral_constants(system, method=spec.spectral_method)

    flags = []
    if res.beta > 0 and res.alpha / res.beta > 0.5:
        flags.append("poorly separated null direction")
    if pair_fails_infsup(res):
        flags.append("pair fails discrete inf-sup")

    pi_exact = project_pi_h(target, mh, interface=target.interface)
    w = integral_weights(mh)
    mu_integral = cellwise_integrals(target, mh.tri,
                                     interface=target.interface).sum()
    target_mean = mu_integral / float(w.sum())
    t, mu_cal = calibrate(np.zeros(mh.n), res.z, mh, ("mean", target_mean))
    err = relative_error(mu_cal, pi_exact, mh)
    raw = relative_error(np.zeros(mh.n), pi_exact, mh)
    residual = system.dual_norm(T @ mu_cal)

    ei = eps_int(target, mh, interface=target.interface)
    mu_sq = cellwise_integrals(lambda p: target(p) ** 2, mh.tri,
                               interface=target.interface).sum()
    sup = target.sup_norm if target.sup_norm is not None else float(
        np.abs(pi_exact).max())
    r = sup / math.sqrt(mu_sq)
    fro = np.sqrt(np.einsum("tcd,tcd->t", S.values, S.values))
    rho_T = float(fro.max()) / math.sqrt(vh.gram_scale)
    certs = {"T2": certificate("T2", r=r, rho=rho_T, beta=res.beta,
                               eps_op=0.0, eps_int=ei)}

    meta = {
        "problem": "elastography", "pair": normalize_pair(spec.pair),
        "h": spec.h, "n": system.n, "p": system.p,
        "forward_h": spec.forward_h, "grid_resolution": g,
        "region_of_interest": list(spec.region_of_interest),
        "forward_vertices": fmesh.n_vertices,
        "sigma": 0.0 if spec.noise is None else spec.noise.sigma,
        "seed": 0 if spec.noise is None else spec.noise.seed,
        "target": target.name, "eps_int": ei,
        "certificate_note": "eps_op not estimable from measured data; "
                            "T2 evaluated with eps_op = 0",
        "runtime_s": time.perf_counter() - t0,
    }
    return ReconstructionReport(mu_cal, t, raw, err, residual, res, certs,
                                tuple(flags), meta)


@dataclass(frozen=True)
class SweepResult:
    axis: str
    rows: list
    slope: float = math.nan
    slope_band: tuple = (math.nan, math.nan)

    def errors(self):
        return np.array([r["error"] for r in self.rows])


def _fit_slope(xs, ys):
    keep = (np.asarray(xs) > 0) & (np.asarray(ys) > 0)
    x = np.log(np.asarray(xs)[keep])
    y = np.log(np.asarray(ys)[keep])
    if len(x) < 4:
        return math.nan, (math.nan, math.nan)
    coef, cov = np.polyfit(x, y, 1, cov=True)
    half = 1.96 * math.sqrt(max(cov[0, 0], 0.0))
    return float(coef[0]), (float(coef[0] - half), float(coef[0] + half))


def sweep(axis, values, base: GradientProblemSpec) -> SweepResult:
    """Run the gradient benchmark over a list of h or sigma values.

    Rows are sorted by the axis value; the log-log slope comes with a 95%
    band when at least four positive points are available. Sigma sweeps reuse
    one assembled operator.
    """
    if axis not in ("h", "sigma"):
        raise ValueError(f"sweep axis must be 'h' or 'sigma', got {axis!r}")
    rows = []
    values = sorted(values)
    ctx = None
    for v in values:
        if axis == "h":
            spec = replace(base, h=float(v))
            ctx = GradientContext(spec)
        else:
            spec = replace(base, noise=replace(base.noise, sigma=float(v)))
            if ctx is None:
                ctx = GradientContext(spec)
        rep = run_gradient(spec, context=ctx)
        rows.append({
            axis: float(v), "error": rep.rel_error_calibrated,
            "alpha": rep.spectral.alpha, "beta": rep.spectral.beta,
            "ratio": rep.spectral.ratio, "n": rep.meta["n"],
            "p": rep.meta["p"], "runtime_s": rep.meta["runtime_s"],
        })
    slope, band = _fit_slope([r[axis] for r in rows],
                             [r["error"] for r in rows])
    return SweepResult(axis, rows, slope, band)


def write_sweep_csv(result: SweepResult, path):
    """CSV with header '<axis>,error,alpha,beta,ratio,n,p,runtime_s'."""
    cols = [result.axis, "error", "alpha", "beta", "ratio", "n", "p",
            "runtime_s"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in result.rows:
            w.writerow([r[c] if c in ("n", "p") else f"{r[c]:.17g}"
                        for c in cols])


def write_xy_csv(result: SweepResult, path):
    """Two-column figure-data dump '<axis>,value'."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([result.axis, "value"])
        for r in result.rows:
            w.writerow([f"{r[result.axis]:.17g}", f"{r['error']:.17g}"])
