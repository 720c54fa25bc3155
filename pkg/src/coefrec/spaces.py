"""Discrete parameter and test spaces with their Gram matrices and projections.

Scalar spaces hold the unknown coefficient: piecewise constants per hexagon
('p0hex'), per triangle ('p0tri'), or continuous piecewise linears ('p1tri').
Vector spaces hold the zero-trace test fields: continuous P1 or P2 vectors
vanishing on the mesh boundary. Vector degrees of freedom are stored
component-major: dof = comp * n_interior + interior_scalar_index.

The M-inner product is L2; the V-inner product is the gradient seminorm
int grad(v) : grad(w), which is a norm on zero-trace fields, so the V Gram
matrix is the scalar stiffness matrix repeated per component.
"""

from dataclasses import dataclass
import csv

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .meshing import HoneycombMesh, TriMesh, triangle_areas
from .quadrature import physical_points, subdivide_reference, triangle_rule

__all__ = [
    "ScalarSpace",
    "VectorSpace",
    "ZeroProjectionError",
    "scalar_space",
    "vector_space",
    "gram_M",
    "gram_V",
    "scalar_stiffness_interior",
    "project_pi_h",
    "normalized_projection_p_h",
    "eps_int",
    "evaluate_scalar_field",
    "cellwise_integrals",
    "grad_barycentric",
    "integral_weights",
    "field_linfty",
    "m_norm",
    "vertex_values",
    "locate_points",
    "dump_field_csv",
    "raster_field_csv",
]

SCALAR_KINDS = ("p0hex", "p0tri", "p1tri")


class ZeroProjectionError(ValueError):
    """The projection of the given function vanishes."""


def _p2_values(bary):
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ])


def _p2_dlam(bary):
    """dN/dlambda, shape (nq, 6, 3)."""
    nq = bary.shape[0]
    d = np.zeros((nq, 6, 3))
    for i in range(3):
        d[:, i, i] = 4 * bary[:, i] - 1
    pairs = [(0, 1), (1, 2), (2, 0)]
    for k, (a, b) in enumerate(pairs):
        d[:, 3 + k, a] = 4 * bary[:, b]
        d[:, 3 + k, b] = 4 * bary[:, a]
    return d


def grad_barycentric(tri: TriMesh):
    """Physical gradients of the barycentric coordinates, shape (nt, 3, 2)."""
    p = tri.tri_coords()
    a2 = 2.0 * triangle_areas(tri.vertices, tri.triangles)
    g = np.empty((tri.n_triangles, 3, 2))
    for k in range(3):
        pj, pk = p[:, (k + 1) % 3], p[:, (k + 2) % 3]
        g[:, k, 0] = (pj[:, 1] - pk[:, 1]) / a2
        g[:, k, 1] = (pk[:, 0] - pj[:, 0]) / a2
    return g


def _edge_table(tri: TriMesh):
    """Unique edges, per-triangle edge ids, and boundary-edge flags."""
    e = np.concatenate([tri.triangles[:, [0, 1]], tri.triangles[:, [1, 2]],
                        tri.triangles[:, [2, 0]]])
    e_sorted = np.sort(e, axis=1)
    uniq, inverse, counts = np.unique(e_sorted, axis=0, return_inverse=True,
                                      return_counts=True)
    tri_edges = inverse.reshape(3, tri.n_triangles).T
    return uniq, tri_edges, counts == 1


@dataclass(frozen=True)
class ScalarSpace:
    """Parameter space M_h over a mesh; see `scalar_space`."""

    mesh: object
    kind: str
    tri: TriMesh
    n: int
    local_dofs: np.ndarray    # (nt, nloc)

    def basis_at(self, bary):
        """Reference basis values at barycentric points, shape (nq, nloc)."""
        if self.kind == "p1tri":
            return bary
        return np.ones((bary.shape[0], 1))

    @property
    def degree(self):
        return 1 if self.kind == "p1tri" else 0


def scalar_space(mesh, kind) -> ScalarSpace:
    if kind not in SCALAR_KINDS:
        raise ValueError(f"unknown scalar space kind {kind!r}; "
                         f"choose from {SCALAR_KINDS}")
    if kind == "p0hex":
        if not isinstance(mesh, HoneycombMesh):
            raise TypeError("p0hex requires a HoneycombMesh")
        tri = mesh.as_trimesh()
        return ScalarSpace(mesh, kind, tri, mesh.n_hexagons,
                           mesh.tri_to_hex[:, None])
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    if kind == "p0tri":
        return ScalarSpace(mesh, kind, tri, tri.n_triangles,
                           np.arange(tri.n_triangles)[:, None])
    return ScalarSpace(mesh, kind, tri, tri.n_vertices, tri.triangles.copy())


@dataclass(frozen=True)
class VectorSpace:
    """Zero-trace vector test space V_h; see `vector_space`.

    p = 2 * n_interior scalar basis functions; interior_of_scalar maps a
    scalar dof to its interior index (-1 on the boundary).

    gram_scale multiplies the V inner product: the norm is
    sqrt(gram_scale * int grad(v):grad(v)). Stability constants scale with
    1/sqrt(gram_scale) while reconstructions and relative error bounds are
    invariant; the hexagon-cell pair conventionally reports its constants
    with gram_scale = 1/2 (see benchmarks.make_pair).
    """

    mesh: object
    tri: TriMesh
    degree: int
    n_scalar: int
    interior: np.ndarray           # interior scalar dof ids
    interior_of_scalar: np.ndarray
    local_scalar_dofs: np.ndarray  # (nt, nloc)
    gram_scale: float = 1.0

    @property
    def p(self):
        return 2 * len(self.interior)

    @property
    def n_interior(self):
        return len(self.interior)

    def basis_at(self, bary):
        if self.degree == 1:
            return bary
        return _p2_values(bary)

    def phys_grads(self, bary):
        """Physical basis gradients, shape (nt, nq, nloc, 2)."""
        glam = grad_barycentric(self.tri)
        if self.degree == 1:
            # dN/dlambda is the identity
            return np.broadcast_to(glam[:, None, :, :],
                                   (self.tri.n_triangles, bary.shape[0], 3, 2))
        dlam = _p2_dlam(bary)
        return np.einsum("qlk,tkd->tqld", dlam, glam)


def vector_space(mesh, degree=1, gram_scale=1.0) -> VectorSpace:
    if degree not in (1, 2):
        raise ValueError(f"vector space degree must be 1 or 2, got {degree}")
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    if degree == 1:
        n_scalar = tri.n_vertices
        boundary = tri.boundary_vertex.copy()
        local = tri.triangles.copy()
    else:
        edges, tri_edges, edge_boundary = _edge_table(tri)
        n_scalar = tri.n_vertices + len(edges)
        boundary = np.zeros(n_scalar, dtype=bool)
        boundary[:tri.n_vertices] = tri.boundary_vertex
        boundary[tri.n_vertices:] = edge_boundary
        local = np.hstack([tri.triangles, tri.n_vertices + tri_edges])
    interior = np.nonzero(~boundary)[0]
    if len(interior) == 0:
        raise ValueError("vector space has no interior degrees of freedom")
    pos = np.full(n_scalar, -1, dtype=np.int64)
    pos[interior] = np.arange(len(interior))
    return VectorSpace(mesh, tri, degree, n_scalar, interior, pos, local,
                       float(gram_scale))


def gram_M(space: ScalarSpace) -> sp.csr_matrix:
    """L2 mass matrix of M_h (diagonal for the P0 spaces)."""
    tri = space.tri
    areas = triangle_areas(tri.vertices, tri.triangles)
    if space.kind == "p0hex":
        return sp.diags(space.mesh.hex_areas()).tocsr()
    if space.kind == "p0tri":
        return sp.diags(areas).tocsr()
    bary, w = triangle_rule(4)
    vals = space.basis_at(bary)                        # (nq, 3)
    local = np.einsum("q,qa,qb->ab", w, vals, vals)    # reference mass
    nt = tri.n_triangles
    blocks = areas[:, None, None] * local[None]
    rows = np.repeat(space.local_dofs, 3, axis=1).ravel()
    cols = np.tile(space.local_dofs, (1, 3)).ravel()
    m = sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(space.n, space.n))
    return m.tocsr()


def scalar_stiffness_interior(space: VectorSpace) -> sp.csr_matrix:
    """One component block of the V Gram matrix: int grad(phi_a).grad(phi_b)
    over interior scalar dofs."""
    tri = space.tri
    areas = triangle_areas(tri.vertices, tri.triangles)
    bary, w = triangle_rule(4 if space.degree == 2 else 1)
    grads = space.phys_grads(bary)                     # (nt, nq, nloc, 2)
    local = np.einsum("q,tqad,tqbd->tab", w, grads, grads) * areas[:, None, None]
    local *= space.gram_scale
    nloc = grads.shape[2]
    dofs = space.interior_of_scalar[space.local_scalar_dofs]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    vals = local.ravel()
    keep = (rows >= 0) & (cols >= 0)
    k = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])),
                      shape=(space.n_interior, space.n_interior))
    return k.tocsr()


def gram_V(space: VectorSpace) -> sp.csr_matrix:
    """Gram matrix of the gradient inner product on V_h (block diagonal per
    component). Raises if singular, which signals a zero-trace mask bug."""
    k = scalar_stiffness_interior(space)
    s = sp.block_diag([k, k], format="csr")
    d = s.diagonal()
    if d.min() <= 0:
        raise ValueError("V Gram matrix is not positive definite")
    return s


def _needs_refinement(tri: TriMesh, interface):
    """Triangles whose vertices come close to or straddle the interface."""
    d = interface(tri.vertices)[tri.triangles]       # (nt, 3)
    p = tri.tri_coords()
    diam = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    diam = np.maximum(diam, np.linalg.norm(p[:, 2] - p[:, 1], axis=1))
    diam = np.maximum(diam, np.linalg.norm(p[:, 0] - p[:, 2], axis=1))
    straddle = (d.min(axis=1) < 0) & (d.max(axis=1) > 0)
    near = np.abs(d).min(axis=1) < diam
    return straddle | near


def cellwise_integrals(func, tri: TriMesh, degree=6, interface=None, levels=4):
    """Per-triangle integrals of func(points)->(N,) or (N, k).

    Triangles near `interface` (a signed-distance callable) are integrated on
    a 4^levels uniform subdivision so that jump discontinuities are resolved.
    Returns an array of shape (nt,) or (nt, k).
    """
    bary, w = triangle_rule(degree)
    areas = triangle_areas(tri.vertices, tri.triangles)
    pts = physical_points(tri.tri_coords(), bary)
    flat = func(pts.reshape(-1, 2))
    extra = flat.shape[1:]
    vals = flat.reshape(pts.shape[0], pts.shape[1], *extra)
    out = np.einsum("q,tq...->t...", w, vals) * areas.reshape(
        (-1,) + (1,) * len(extra))
    if interface is not None:
        ref = np.nonzero(_needs_refinement(tri, interface))[0]
        if ref.size:
            rb, rw = subdivide_reference(bary, w, levels)
            rpts = physical_points(tri.tri_coords()[ref], rb)
            rvals = func(rpts.reshape(-1, 2)).reshape(
                len(ref), rb.shape[0], *extra)
            out[ref] = np.einsum("q,tq...->t...", rw, rvals) * areas[ref].reshape(
                (-1,) + (1,) * len(extra))
    return out


def project_pi_h(func, space: ScalarSpace, degree=6, interface=None):
    """L2-orthogonal projection of func onto M_h (cell averages for P0)."""
    tri = space.tri
    cell = cellwise_integrals(func, tri, degree, interface)
    if space.kind == "p0hex":
        hexsum = np.zeros(space.n)
        np.add.at(hexsum, space.mesh.tri_to_hex, cell)
        return hexsum / space.mesh.hex_areas()
    if space.kind == "p0tri":
        return cell / triangle_areas(tri.vertices, tri.triangles)
    # p1: solve the mass system with the quadrature load vector
    bary, w = triangle_rule(degree)
    areas = triangle_areas(tri.vertices, tri.triangles)
    pts = physical_points(tri.tri_coords(), bary)
    fv = func(pts.reshape(-1, 2)).reshape(pts.shape[:2])
    if interface is not None:
        ref = np.nonzero(_needs_refinement(tri, interface))[0]
    else:
        ref = np.array([], dtype=int)
    load = np.zeros(space.n)
    contrib = np.einsum("q,tq,qa->ta", w, fv, space.basis_at(bary)) * areas[:, None]
    if ref.size:
        rb, rw = subdivide_reference(bary, w, 4)
        rpts = physical_points(tri.tri_coords()[ref], rb)
        rfv = func(rpts.reshape(-1, 2)).reshape(len(ref), rb.shape[0])
        contrib[ref] = np.einsum("q,tq,qa->ta", rw, rfv,
                                 space.basis_at(rb)) * areas[ref, None]
    np.add.at(load, space.local_dofs, contrib)
    mass = gram_M(space)
    return spsolve(mass.tocsc(), load)


def evaluate_scalar_field(space: ScalarSpace, coeffs, bary):
    """Field values at barycentric points of every triangle, shape (nt, nq)."""
    vals = space.basis_at(bary)
    return np.einsum("ta,qa->tq", coeffs[space.local_dofs], vals)


def m_norm(space_or_gram, coeffs):
    """M-norm of a coefficient vector given a ScalarSpace or a Gram matrix."""
    g = gram_M(space_or_gram) if isinstance(space_or_gram, ScalarSpace) else space_or_gram
    return float(np.sqrt(coeffs @ (g @ coeffs)))


def normalized_projection_p_h(func, space: ScalarSpace, degree=6, interface=None):
    """Unit M-norm projection pi_h(f)/||pi_h f||; raises if the projection vanishes."""
    c = project_pi_h(func, space, degree, interface)
    nrm = m_norm(space, c)
    if nrm < 1e-300:
        raise ZeroProjectionError("projection of the given function is zero")
    return c / nrm


def eps_int(func, space: ScalarSpace, degree=6, interface=None):
    """Relative L2 interpolation error ||pi_h f - f|| / ||f|| on Omega_h."""
    c = project_pi_h(func, space, degree, interface)
    tri = space.tri
    bary, w = triangle_rule(degree)
    areas = triangle_areas(tri.vertices, tri.triangles)

    def accumulate(b, wts, tri_idx):
        pts = physical_points(tri.tri_coords()[tri_idx], b)
        fv = func(pts.reshape(-1, 2)).reshape(len(tri_idx), b.shape[0])
        pv = np.einsum("ta,qa->tq", c[space.local_dofs[tri_idx]],
                       space.basis_at(b))
        err = np.einsum("q,tq->t", wts, (pv - fv) ** 2) * areas[tri_idx]
        ref = np.einsum("q,tq->t", wts, fv ** 2) * areas[tri_idx]
        return err.sum(), ref.sum()

    all_idx = np.arange(tri.n_triangles)
    if interface is not None:
        refine = _needs_refinement(tri, interface)
        coarse = all_idx[~refine]
        fine = all_idx[refine]
    else:
        coarse, fine = all_idx, np.array([], dtype=int)
    e2, f2 = accumulate(bary, w, coarse) if coarse.size else (0.0, 0.0)
    if fine.size:
        rb, rw = subdivide_reference(bary, w, 4)
        e2b, f2b = accumulate(rb, rw, fine)
        e2, f2 = e2 + e2b, f2 + f2b
    if f2 <= 0:
        raise ZeroProjectionError("cannot form a relative error for f = 0")
    return float(np.sqrt(e2 / f2))


def integral_weights(space: ScalarSpace):
    """Vector of int(epsilon_j); equals S_M @ 1 since constants have unit coefficients."""
    return gram_M(space) @ np.ones(space.n)


def field_linfty(space: ScalarSpace, coeffs):
    """sup-norm of the field; exact for P0 and P1 (coefficient extrema)."""
    return float(np.max(np.abs(coeffs)))


def vertex_values(space: VectorSpace, coeffs):
    """Expand zero-trace vector coefficients to per-vertex values (P1 only)."""
    if space.degree != 1:
        raise ValueError("vertex_values only applies to P1 vector fields")
    ni = space.n_interior
    out = np.zeros((space.tri.n_vertices, 2))
    out[space.interior, 0] = coeffs[:ni]
    out[space.interior, 1] = coeffs[ni:]
    return out


def dump_field_csv(coeffs, path):
    """CSV dump 'dof_index,value'."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dof_index", "value"])
        for i, v in enumerate(np.asarray(coeffs)):
            w.writerow([i, f"{v:.17g}"])


def raster_field_csv(space: ScalarSpace, coeffs, path, nx=64, ny=64):
    """Sample the scalar field on a regular grid over the mesh bounding box
    and write 'x,y,value' rows (empty value outside the mesh)."""
    tri = space.tri
    lo = tri.vertices.min(axis=0)
    hi = tri.vertices.max(axis=0)
    xs = np.linspace(lo[0], hi[0], nx)
    ys = np.linspace(lo[1], hi[1], ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    tri_idx, bary = locate_points(tri, pts)
    inside = tri_idx >= 0
    vals = np.full(len(pts), np.nan)
    if inside.any():
        ld = space.local_dofs[tri_idx[inside]]
        bv = bary[inside]
        if space.kind == "p1tri":
            vals[inside] = np.einsum("ta,ta->t", coeffs[ld], bv)
        else:
            vals[inside] = coeffs[ld[:, 0]]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "value"])
        for (x, y), v in zip(pts, vals):
            w.writerow([f"{x:.17g}", f"{y:.17g}", "" if np.isnan(v) else f"{v:.17g}"])


def locate_points(tri: TriMesh, pts, tol=1e-12):
    """Containing triangle and barycentric coordinates for each point.

    Returns (tri_idx, bary) with tri_idx = -1 for points outside the mesh.
    Uses a uniform bin grid over the bounding box; candidate tests run
    vectorized over all points at once.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    coords = tri.tri_coords()
    lo = tri.vertices.min(axis=0)
    hi = tri.vertices.max(axis=0)
    span = np.maximum(hi - lo, 1e-300)
    nbins = max(1, int(np.sqrt(tri.n_triangles)))
    tmin = coords.min(axis=1)
    tmax = coords.max(axis=1)
    b_lo = np.clip(np.floor((tmin - lo) / span * nbins).astype(int), 0, nbins - 1)
    b_hi = np.clip(np.floor((tmax - lo) / span * nbins).astype(int), 0, nbins - 1)

    bins = {}
    maxlen = 0
    for t in range(tri.n_triangles):
        for bx in range(b_lo[t, 0], b_hi[t, 0] + 1):
            for by in range(b_lo[t, 1], b_hi[t, 1] + 1):
                lst = bins.setdefault(bx * nbins + by, [])
                lst.append(t)
                maxlen = max(maxlen, len(lst))

    # padded candidate table: point -> up to maxlen triangle ids
    pb = np.clip(np.floor((pts - lo) / span * nbins).astype(int), 0, nbins - 1)
    keys = pb[:, 0] * nbins + pb[:, 1]
    cand = np.full((len(pts), maxlen), -1, dtype=np.int64)
    uniq_keys, inv = np.unique(keys, return_inverse=True)
    for uk_pos, uk in enumerate(uniq_keys):
        lst = bins.get(int(uk))
        if lst:
            cand[inv == uk_pos, :len(lst)] = lst

    a2 = 2.0 * triangle_areas(tri.vertices, tri.triangles)
    scale = tol * max(span[0], span[1])
    out_idx = np.full(len(pts), -1, dtype=np.int64)
    out_bary = np.zeros((len(pts), 3))
    undecided = np.arange(len(pts))
    for col in range(maxlen):
        if undecided.size == 0:
            break
        t = cand[undecided, col]
        live = t >= 0          # padding is trailing: t < 0 means exhausted
        rows = undecided[live]
        tt = t[live]
        hit = np.zeros(len(rows), dtype=bool)
        if rows.size:
            p0 = coords[tt, 0]
            rel = pts[rows] - p0
            e1 = coords[tt, 1] - p0
            e2 = coords[tt, 2] - p0
            l1 = (e2[:, 1] * rel[:, 0] - e2[:, 0] * rel[:, 1]) / a2[tt]
            l2 = (e1[:, 0] * rel[:, 1] - e1[:, 1] * rel[:, 0]) / a2[tt]
            l0 = 1.0 - l1 - l2
            hit = (l0 >= -scale) & (l1 >= -scale) & (l2 >= -scale)
            hr = rows[hit]
            out_idx[hr] = tt[hit]
            out_bary[hr, 0] = l0[hit]
            out_bary[hr, 1] = l1[hit]
            out_bary[hr, 2] = l2[hit]
        keep = live.copy()
        keep[np.nonzero(live)[0][hit]] = False
        undecided = undecided[keep]
    return out_idx, out_bary
