"""Assembly of the weak operator mu -> -div(mu S) and its right-hand sides.

The operator matrix has entries T[i, j] = int epsilon_j (S : grad e_i) with
the sign convention <T mu, v> := + int mu S : grad v (integration by parts of
-div(mu S) against zero-trace tests). Rows follow the vector-space dof layout
(component-major), columns the scalar-space dofs.

A cartesian grid container is provided so measured fields can be stored on a
regular grid and re-sampled on a different mesh, keeping forward data and
inversion meshes distinct.
"""

from dataclasses import dataclass
from typing import Callable, Optional
import csv

import numpy as np
import scipy.sparse as sp

from .meshing import HoneycombMesh, TriMesh, triangle_areas
from .quadrature import (edge_rule, physical_points, subdivide_reference,
                         triangle_rule)
from .spaces import (ScalarSpace, VectorSpace, grad_barycentric,
                     locate_points)

__all__ = [
    "MatrixFieldS",
    "CartesianGrid",
    "identity_field",
    "constant_field",
    "strain_field",
    "p0_gradient_data",
    "parameter_cell_nodes",
    "gradient_of_sampled_field",
    "assemble_T",
    "assemble_rhs_lumped_nodal",
    "assemble_rhs_from_gradient",
    "assemble_rhs_from_vector_samples",
    "assemble_rhs_from_p0_vector",
    "rasterize_p0",
    "rasterize_vertex_field",
    "grid_vertex_field",
    "transfer_field",
    "eps_op_bound",
    "export_operator_mm",
    "export_matrix_field_csv",
]


@dataclass(frozen=True)
class MatrixFieldS:
    """2x2 coefficient matrix field: per-triangle constants or a callable.

    `values` has shape (nt, 2, 2); alternatively `func` maps (N, 2) points to
    (N, 2, 2) samples.
    """

    mesh: Optional[object] = None
    values: Optional[np.ndarray] = None
    func: Optional[Callable] = None
    symmetric: bool = False

    def __post_init__(self):
        if (self.values is None) == (self.func is None):
            raise ValueError("provide exactly one of values, func")
        if self.values is not None:
            if not np.isfinite(self.values).all():
                raise ValueError("matrix field contains non-finite entries")
            if self.symmetric:
                skew = np.abs(self.values[:, 0, 1] - self.values[:, 1, 0])
                scale = np.abs(self.values).max() + 1e-300
                if skew.max() > 1e-12 * max(scale, 1.0):
                    raise ValueError("field marked symmetric is not")

    def at(self, tri_idx, pts):
        """Samples at physical points grouped per triangle.

        tri_idx: (nt,) triangle indices; pts: (nt, nq, 2).
        Returns (nt, nq, 2, 2).
        """
        if self.func is not None:
            flat = self.func(pts.reshape(-1, 2))
            return flat.reshape(pts.shape[0], pts.shape[1], 2, 2)
        return np.broadcast_to(self.values[tri_idx][:, None],
                               (len(tri_idx), pts.shape[1], 2, 2))

    def scaled(self, c):
        if self.values is not None:
            return MatrixFieldS(self.mesh, self.values * c,
                                symmetric=self.symmetric)
        return MatrixFieldS(self.mesh, func=lambda p: c * self.func(p),
                            symmetric=self.symmetric)


def identity_field(mesh=None) -> MatrixFieldS:
    return MatrixFieldS(mesh, func=lambda p: np.broadcast_to(
        np.eye(2), (len(p), 2, 2)), symmetric=True)


def constant_field(mat, mesh=None) -> MatrixFieldS:
    mat = np.asarray(mat, dtype=float)
    return MatrixFieldS(mesh, func=lambda p: np.broadcast_to(
        mat, (len(p), 2, 2)), symmetric=bool(np.allclose(mat, mat.T)))


def strain_field(mesh, u_vertex) -> MatrixFieldS:
    """Twice the symmetric gradient of a P1 vector field, constant per triangle.

    u_vertex holds the two displacement components at every mesh vertex, shape
    (nv, 2); differentiation of a P1 field is exact.
    """
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    glam = grad_barycentric(tri)                   # (nt, 3, 2)
    uv = u_vertex[tri.triangles]                   # (nt, 3, 2) components
    grad_u = np.einsum("tkc,tkd->tcd", uv, glam)   # (nt, 2, 2), du_c/dx_d
    s = grad_u + np.transpose(grad_u, (0, 2, 1))
    return MatrixFieldS(tri, s, symmetric=True)


def _row_indices(vh: VectorSpace):
    """Global row indices (nt, nloc, 2) with -1 for boundary scalar dofs."""
    ia = vh.interior_of_scalar[vh.local_scalar_dofs]   # (nt, nloc)
    rows = np.stack([ia, np.where(ia >= 0, ia + vh.n_interior, -1)], axis=-1)
    return rows


def assemble_T(S: MatrixFieldS, mh: ScalarSpace, vh: VectorSpace,
               degree=4) -> sp.csr_matrix:
    """Operator matrix T[i, j] = int epsilon_j (S : grad e_i), shape (p, n)."""
    if mh.tri is not vh.tri and mh.tri.n_triangles != vh.tri.n_triangles:
        raise ValueError("scalar and vector spaces do not share a mesh")
    tri = vh.tri
    bary, w = triangle_rule(degree)
    areas = triangle_areas(tri.vertices, tri.triangles)
    pts = physical_points(tri.tri_coords(), bary)
    sval = S.at(np.arange(tri.n_triangles), pts)       # (nt, nq, 2, 2)
    grads = vh.phys_grads(bary)                        # (nt, nq, nla, 2)
    mbasis = mh.basis_at(bary)                         # (nq, nlm)
    local = np.einsum("q,qj,tqcd,tqad->tjac", w, mbasis, sval, grads)
    local *= areas[:, None, None, None]

    nlm, nla = mbasis.shape[1], grads.shape[2]
    rows = _row_indices(vh)                            # (nt, nla, 2)
    rows_full = np.broadcast_to(rows[:, None, :, :],
                                (tri.n_triangles, nlm, nla, 2))
    cols_full = np.broadcast_to(mh.local_dofs[:, :, None, None],
                                (tri.n_triangles, nlm, nla, 2))
    r = rows_full.ravel()
    keep = r >= 0
    mat = sp.coo_matrix(
        (local.ravel()[keep], (r[keep], cols_full.ravel()[keep])),
        shape=(vh.p, mh.n))
    return mat.tocsr()


def assemble_rhs_from_gradient(mu, vh: VectorSpace, degree=6,
                               interface=None) -> np.ndarray:
    """Weak right-hand side of -grad(mu) = f: b_i = int mu div(e_i).

    Integrating by parts avoids pointwise differentiation, so `mu` may be
    discontinuous; pass its interface signed distance to refine the
    quadrature on crossing triangles.
    """
    interface = interface if interface is not None else getattr(
        mu, "interface", None)
    tri = vh.tri
    bary, w = triangle_rule(degree)
    areas = triangle_areas(tri.vertices, tri.triangles)

    def contrib(b, wts, idx):
        pts = physical_points(tri.tri_coords()[idx], b)
        muv = mu(pts.reshape(-1, 2)).reshape(len(idx), b.shape[0])
        # div(phi_a e_c) = d phi_a / d x_c
        grads = vh.phys_grads(b)
        return np.einsum("q,tq,tqac->tac", wts, muv,
                         grads[idx]) * areas[idx, None, None]

    all_idx = np.arange(tri.n_triangles)
    if interface is not None:
        from .spaces import _needs_refinement
        refine = _needs_refinement(tri, interface)
    else:
        refine = np.zeros(tri.n_triangles, dtype=bool)
    loc = np.zeros((tri.n_triangles, vh.local_scalar_dofs.shape[1], 2))
    coarse = all_idx[~refine]
    if coarse.size:
        loc[coarse] = contrib(bary, w, coarse)
    fine = all_idx[refine]
    if fine.size:
        rb, rw = subdivide_reference(bary, w, 4)
        loc[fine] = contrib(rb, rw, fine)
    return _scatter_rows(vh, loc)


def _scatter_rows(vh: VectorSpace, loc):
    """Accumulate (nt, nloc, 2) local contributions into a length-p vector."""
    rows = _row_indices(vh)
    b = np.zeros(vh.p)
    r = rows.ravel()
    keep = r >= 0
    np.add.at(b, r[keep], loc.ravel()[keep])
    return b


def assemble_rhs_from_vector_samples(samples, vh: VectorSpace,
                                     degree=6) -> np.ndarray:
    """b_i = int f . e_i from pointwise samples of f at the quadrature nodes.

    samples has shape (nt, nq, 2) matching `triangle_rule(degree)`.
    """
    tri = vh.tri
    bary, w = triangle_rule(degree)
    if samples.shape[:2] != (tri.n_triangles, bary.shape[0]):
        raise ValueError("sample array does not match the quadrature layout")
    areas = triangle_areas(tri.vertices, tri.triangles)
    basis = vh.basis_at(bary)                          # (nq, nloc)
    loc = np.einsum("q,tqc,qa->tac", w, samples, basis) * areas[:, None, None]
    return _scatter_rows(vh, loc)


def assemble_rhs_from_p0_vector(field, vh: VectorSpace) -> np.ndarray:
    """b_i = int f . e_i for a per-triangle constant vector field (nt, 2)."""
    tri = vh.tri
    bary, w = triangle_rule(2 if vh.degree == 1 else 4)
    areas = triangle_areas(tri.vertices, tri.triangles)
    basis = vh.basis_at(bary)
    loc = np.einsum("q,tc,qa->tac", w, field, basis) * areas[:, None, None]
    return _scatter_rows(vh, loc)


def assemble_rhs_from_p1_vector(vertex_values, vh: VectorSpace) -> np.ndarray:
    """b_i = int f . e_i for a P1 vector field given by vertex values (nv, 2)."""
    tri = vh.tri
    bary, w = triangle_rule(2 if vh.degree == 1 else 4)
    areas = triangle_areas(tri.vertices, tri.triangles)
    basis = vh.basis_at(bary)
    fq = np.einsum("qk,tkc->tqc", bary, vertex_values[tri.triangles])
    loc = np.einsum("q,tqc,qa->tac", w, fq, basis) * areas[:, None, None]
    return _scatter_rows(vh, loc)


def assemble_rhs_lumped_nodal(vertex_values, vh: VectorSpace,
                              element_factor=None) -> np.ndarray:
    """Nodal-rule pairing of pointwise data: b_i = sum_K (|K|/3) f_c(v) for
    the vertices of K, optionally scaled by a per-element factor.

    This is the vertex (lumped) quadrature of int f . e_i for P1 tests; the
    per-element factor lets each element's data record carry its own gain.
    """
    if vh.degree != 1:
        raise ValueError("the lumped nodal rule applies to P1 test spaces")
    tri = vh.tri
    areas = triangle_areas(tri.vertices, tri.triangles)
    loc = areas / 3.0
    if element_factor is not None:
        loc = loc * np.asarray(element_factor, dtype=float)
    ni = vh.n_interior
    b = np.zeros(vh.p)
    for k in range(3):
        v = tri.triangles[:, k]
        ia = vh.interior_of_scalar[v]
        ok = ia >= 0
        np.add.at(b, ia[ok], loc[ok] * vertex_values[v[ok], 0])
        np.add.at(b, ni + ia[ok], loc[ok] * vertex_values[v[ok], 1])
    return b


def parameter_cell_nodes(mh: ScalarSpace):
    """One sampling point per parameter degree of freedom.

    Hexagon spaces sample at the cell centroids, triangle P0 at triangle
    centroids, P1 at the vertices.
    """
    if mh.kind == "p0hex":
        return mh.mesh.vertices[mh.mesh.hex_center]
    if mh.kind == "p0tri":
        return mh.tri.centroids()
    return mh.tri.vertices.copy()


def gradient_of_sampled_field(mh: ScalarSpace, samples) -> np.ndarray:
    """Per-triangle P0 representation of grad(mu) when mu is known only
    through one sample per parameter cell.

    For P0 parameter spaces the sampled field is piecewise constant; its
    distributional gradient is concentrated on the cell boundaries, and the
    elementwise representation averages each edge jump between the two
    adjacent cells: g_K = (1/|K|) sum_e (s_nbr - s_K)/2 * nu_e |e|. Edges
    interior to a cell and domain-boundary edges contribute nothing. For P1
    parameter spaces the samples define the interpolant, whose gradient is
    exact per triangle.
    """
    samples = np.asarray(samples, dtype=float)
    tri = mh.tri
    if mh.kind == "p1tri":
        glam = grad_barycentric(tri)
        return np.einsum("tk,tkd->td", samples[tri.triangles], glam)
    cell = mh.local_dofs[:, 0]            # parameter cell of each triangle
    areas = triangle_areas(tri.vertices, tri.triangles)
    coords = tri.tri_coords()
    # neighbor triangle across each local edge via the shared-edge table
    edges = np.concatenate([tri.triangles[:, [0, 1]], tri.triangles[:, [1, 2]],
                            tri.triangles[:, [2, 0]]])
    owner = np.tile(np.arange(tri.n_triangles), 3)
    uniq, inverse = np.unique(np.sort(edges, axis=1), axis=0,
                              return_inverse=True)
    two = np.full((len(uniq), 2), -1, dtype=np.int64)
    slot = np.zeros(len(uniq), dtype=np.int64)
    for row, t in zip(inverse, owner):
        two[row, slot[row]] = t
        slot[row] += 1
    g = np.zeros((tri.n_triangles, 2))
    for k in range(3):
        eid = inverse[k * tri.n_triangles:(k + 1) * tri.n_triangles]
        pair = two[eid]
        here = np.arange(tri.n_triangles)
        other = np.where(pair[:, 0] == here, pair[:, 1], pair[:, 0])
        s_here = samples[cell]
        s_other = np.where(other >= 0, samples[cell[np.clip(other, 0, None)]],
                           s_here)
        a = coords[:, k]
        b = coords[:, (k + 1) % 3]
        d = b - a
        normal = np.column_stack([d[:, 1], -d[:, 0]])   # outward * |e|
        g += 0.5 * (s_other - s_here)[:, None] * normal
    return g / areas[:, None]


def p0_gradient_data(mu, mesh, interface=None, edge_segments=16,
                     gauss_points=4) -> np.ndarray:
    """Per-triangle average gradient of mu via the divergence theorem.

    g_K = (1/|K|) * contour_int mu nu ds, which equals the cell average of the
    distributional gradient; edges of triangles near the interface are
    integrated on a composite rule.
    """
    interface = interface if interface is not None else getattr(
        mu, "interface", None)
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    coords = tri.tri_coords()
    areas = triangle_areas(tri.vertices, tri.triangles)
    if interface is not None:
        from .spaces import _needs_refinement
        refine = _needs_refinement(tri, interface)
    else:
        refine = np.zeros(tri.n_triangles, dtype=bool)
    x, w = edge_rule(gauss_points)
    # composite rule on [0, 1] for edges near the discontinuity
    seg = (np.arange(edge_segments)[:, None] + x[None, :]) / edge_segments
    xc, wc = seg.ravel(), np.tile(w / edge_segments, edge_segments)

    g = np.zeros((tri.n_triangles, 2))
    for k in range(3):
        a = coords[:, k]
        b = coords[:, (k + 1) % 3]
        d = b - a
        normal = np.column_stack([d[:, 1], -d[:, 0]])   # outward, length |e|
        for mask, xs, ws in ((~refine, x, w), (refine, xc, wc)):
            if not mask.any():
                continue
            pts = a[mask, None, :] + xs[None, :, None] * d[mask, None, :]
            vals = mu(pts.reshape(-1, 2)).reshape(mask.sum(), len(xs))
            line = np.einsum("q,tq->t", ws, vals)
            g[mask] += line[:, None] * normal[mask]
    return g / areas[:, None]


@dataclass(frozen=True)
class CartesianGrid:
    """Node-centered regular grid with componentwise values and validity mask.

    values has shape (gx, gy, k); invalid nodes (outside the source domain)
    are masked out and poison any bilinear sample touching them.
    """

    x0: float
    y0: float
    dx: float
    dy: float
    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape[:2]

    def sample(self, pts):
        """Bilinear interpolation at the given points, shape (N, k)."""
        pts = np.asarray(pts, dtype=float)
        gx, gy = self.shape
        fx = (pts[:, 0] - self.x0) / self.dx
        fy = (pts[:, 1] - self.y0) / self.dy
        eps = 1e-9
        out = (fx < -eps) | (fy < -eps) | (fx > gx - 1 + eps) | (fy > gy - 1 + eps)
        if out.any():
            i = int(np.nonzero(out)[0][0])
            raise ValueError(f"sample point {tuple(pts[i])} outside the grid")
        ix = np.clip(fx.astype(int), 0, gx - 2)
        iy = np.clip(fy.astype(int), 0, gy - 2)
        tx = np.clip(fx - ix, 0.0, 1.0)[:, None]
        ty = np.clip(fy - iy, 0.0, 1.0)[:, None]
        corners_ok = (self.valid[ix, iy] & self.valid[ix + 1, iy]
                      & self.valid[ix, iy + 1] & self.valid[ix + 1, iy + 1])
        if not corners_ok.all():
            i = int(np.nonzero(~corners_ok)[0][0])
            raise ValueError(
                f"sample point {tuple(pts[i])} touches the invalid grid region")
        v00 = self.values[ix, iy]
        v10 = self.values[ix + 1, iy]
        v01 = self.values[ix, iy + 1]
        v11 = self.values[ix + 1, iy + 1]
        return ((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10
                + (1 - tx) * ty * v01 + tx * ty * v11)


def _grid_nodes(mesh, shape):
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    lo = tri.vertices.min(axis=0)
    hi = tri.vertices.max(axis=0)
    gx, gy = shape
    xs = np.linspace(lo[0], hi[0], gx)
    ys = np.linspace(lo[1], hi[1], gy)
    return tri, lo, xs, ys


def rasterize_p0(field_values, mesh, shape=(256, 256)) -> CartesianGrid:
    """Store per-triangle values (nt, k) on a regular grid over the mesh bbox."""
    tri, lo, xs, ys = _grid_nodes(mesh, shape)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    idx, _ = locate_points(tri, pts)
    valid = (idx >= 0).reshape(shape)
    k = field_values.shape[1:]
    vals = np.zeros(shape + k)
    inside = idx >= 0
    vals.reshape(-1, *k)[inside] = field_values[idx[inside]]
    return CartesianGrid(xs[0], ys[0], xs[1] - xs[0], ys[1] - ys[0],
                         vals.reshape(shape + (-1,)), valid)


def rasterize_vertex_field(mesh, vertex_values, shape=(256, 256)) -> CartesianGrid:
    """Store a P1 field given by vertex values (nv, k) on a regular grid."""
    tri, lo, xs, ys = _grid_nodes(mesh, shape)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    idx, bary = locate_points(tri, pts)
    valid = (idx >= 0).reshape(shape)
    k = vertex_values.shape[1:]
    vals = np.zeros((len(pts),) + k)
    inside = idx >= 0
    vv = vertex_values[tri.triangles[idx[inside]]]     # (N, 3, k)
    vals[inside] = np.einsum("nj,nj...->n...", bary[inside], vv)
    return CartesianGrid(xs[0], ys[0], xs[1] - xs[0], ys[1] - ys[0],
                         vals.reshape(shape + (-1,)), valid)


def grid_vertex_field(grid: CartesianGrid, mesh) -> np.ndarray:
    """Sample a stored vector field at the vertices of a target mesh, (nv, 2)."""
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    return grid.sample(tri.vertices).reshape(tri.n_vertices, 2)


def transfer_field(S_source: MatrixFieldS, mesh_b, grid_shape=(256, 256),
                   degree=2) -> MatrixFieldS:
    """Move a matrix field onto another mesh through a cartesian grid.

    The source field is rasterized componentwise on a grid over its own mesh,
    then sampled bilinearly at the target quadrature points and averaged per
    target triangle. Raises if a target sample leaves the stored grid.
    """
    if S_source.values is None or S_source.mesh is None:
        raise ValueError("transfer_field needs a per-triangle source field")
    grid = rasterize_p0(S_source.values.reshape(-1, 4), S_source.mesh,
                        grid_shape)
    tri_b = mesh_b.as_trimesh() if isinstance(mesh_b, HoneycombMesh) else mesh_b
    bary, w = triangle_rule(degree)
    pts = physical_points(tri_b.tri_coords(), bary)
    flat = grid.sample(pts.reshape(-1, 2)).reshape(tri_b.n_triangles,
                                                   len(w), 4)
    vals = np.einsum("q,tqk->tk", w, flat).reshape(-1, 2, 2)
    return MatrixFieldS(tri_b, vals, symmetric=False)


def eps_op_bound(S_h: MatrixFieldS, S_ref, mesh=None, degree=4,
                 interface=None) -> float:
    """||S_h - S_ref||_{L2(Omega_h)} with the Frobenius norm in the matrix slot.

    Bounds the operator perturbation: the weak action of mu (S_h - S_ref) on a
    zero-trace field is at most this value times ||mu||_inf ||grad v||.
    S_ref may be a MatrixFieldS or a callable returning (N, 2, 2).
    """
    mesh = mesh if mesh is not None else S_h.mesh
    tri = mesh.as_trimesh() if isinstance(mesh, HoneycombMesh) else mesh
    bary, w = triangle_rule(degree)
    areas = triangle_areas(tri.vertices, tri.triangles)

    def piece(idx, b, wts):
        pts = physical_points(tri.tri_coords()[idx], b)
        a = S_h.at(idx, pts)
        if isinstance(S_ref, MatrixFieldS):
            r = S_ref.at(idx, pts)
        else:
            r = S_ref(pts.reshape(-1, 2)).reshape(len(idx), b.shape[0], 2, 2)
        d = a - r
        return float(np.einsum("q,tqcd,tqcd,t->", wts, d, d, areas[idx]))

    all_idx = np.arange(tri.n_triangles)
    if interface is not None:
        from .spaces import _needs_refinement
        refine = _needs_refinement(tri, interface)
    else:
        refine = np.zeros(tri.n_triangles, dtype=bool)
    total = piece(all_idx[~refine], bary, w) if (~refine).any() else 0.0
    if refine.any():
        rb, rw = subdivide_reference(bary, w, 4)
        total += piece(all_idx[refine], rb, rw)
    return float(np.sqrt(max(total, 0.0)))


def export_operator_mm(T, path):
    """Matrix Market coordinate dump of the operator matrix."""
    import scipy.io
    scipy.io.mmwrite(str(path), sp.coo_matrix(T))


def export_matrix_field_csv(S: MatrixFieldS, path):
    """CSV dump 'tri_index,S11,S12,S21,S22' of a per-triangle field."""
    if S.values is None:
        raise ValueError("only per-triangle fields can be dumped")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tri_index", "S11", "S12", "S21", "S22"])
        for i, m in enumerate(S.values):
            w.writerow([i, f"{m[0, 0]:.17g}", f"{m[0, 1]:.17g}",
                        f"{m[1, 0]:.17g}", f"{m[1, 1]:.17g}"])
