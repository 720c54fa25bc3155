"""Plane linear elasticity forward solver (P1 vectors, mixed BCs).

Solves -div(2 mu E(u)) = 0 on a rectangle with the displacement clamped on
the left and right edges, a constant traction applied on the top edge, and a
traction-free bottom edge. The second Lame parameter is zero throughout, so
the stiffness form is a(u, v) = int 2 mu E(u):E(v).

Degrees of freedom are component-major over all mesh vertices; the Dirichlet
rows are eliminated symmetrically.
"""

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .meshing import TriMesh, triangle_areas
from .quadrature import physical_points, subdivide_reference, triangle_rule
from .spaces import _needs_refinement, grad_barycentric

__all__ = ["forward_elasticity", "elastic_energy"]


def _mu_cell_averages(mu, tri: TriMesh, interface, degree=2):
    bary, w = triangle_rule(degree)
    pts = physical_points(tri.tri_coords(), bary)
    vals = mu(pts.reshape(-1, 2)).reshape(pts.shape[:2])
    avg = np.einsum("q,tq->t", w, vals)
    if interface is not None:
        ref = np.nonzero(_needs_refinement(tri, interface))[0]
        if ref.size:
            rb, rw = subdivide_reference(bary, w, 4)
            rpts = physical_points(tri.tri_coords()[ref], rb)
            rv = mu(rpts.reshape(-1, 2)).reshape(len(ref), rb.shape[0])
            avg[ref] = np.einsum("q,tq->t", rw, rv)
    return avg


def _stiffness(mu_cell, tri: TriMesh):
    """a(u, v) = int 2 mu E(u):E(v) over all vertex dofs (component-major)."""
    nv = tri.n_vertices
    areas = triangle_areas(tri.vertices, tri.triangles)
    g = grad_barycentric(tri)                           # (nt, 3, 2)
    coef = 2.0 * mu_cell * areas
    # 2 mu E(phi_a e_c):E(phi_b e_d)
    #   = mu (delta_cd grad_a . grad_b + d_d phi_a d_c phi_b)
    gg = np.einsum("tad,tbd->tab", g, g)
    rows, cols, vals = [], [], []
    for c in range(2):
        for d in range(2):
            loc = 0.5 * coef[:, None, None] * (
                (c == d) * gg + np.einsum("ta,tb->tab", g[:, :, d], g[:, :, c]))
            r = (tri.triangles + c * nv)
            s = (tri.triangles + d * nv)
            rows.append(np.repeat(r, 3, axis=1).ravel())
            cols.append(np.tile(s, (1, 3)).ravel())
            vals.append(loc.ravel())
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * nv, 2 * nv)).tocsr()


def _top_edges(tri: TriMesh, tol):
    """Boundary edges lying on the top side of the bounding box."""
    edges = np.concatenate([tri.triangles[:, [0, 1]], tri.triangles[:, [1, 2]],
                            tri.triangles[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    bnd = uniq[counts == 1]
    ymax = tri.vertices[:, 1].max()
    on_top = (np.abs(tri.vertices[bnd[:, 0], 1] - ymax) < tol) & \
             (np.abs(tri.vertices[bnd[:, 1], 1] - ymax) < tol)
    return bnd[on_top]


def forward_elasticity(mu, mesh: TriMesh, traction=(1.0, -1.0),
                       interface=None, info=None):
    """Displacement field of the quasi-static problem, shape (nv, 2).

    mu maps points to shear modulus values (must be bounded below by a
    positive constant); `interface` refines the coefficient quadrature near
    discontinuities. The load is a constant traction on the top edge.
    """
    interface = interface if interface is not None else getattr(
        mu, "interface", None)
    tri = mesh
    nv = tri.n_vertices
    tol = 1e-9 * max(np.ptp(tri.vertices[:, 0]), np.ptp(tri.vertices[:, 1]))
    mu_cell = _mu_cell_averages(mu, tri, interface)
    if mu_cell.min() <= 0:
        raise ValueError("shear modulus must be strictly positive")
    K = _stiffness(mu_cell, tri)

    f = np.zeros(2 * nv)
    tvec = np.asarray(traction, dtype=float)
    for a, b in _top_edges(tri, tol):
        length = np.linalg.norm(tri.vertices[b] - tri.vertices[a])
        for c in range(2):
            f[c * nv + a] += 0.5 * length * tvec[c]
            f[c * nv + b] += 0.5 * length * tvec[c]

    xmin = tri.vertices[:, 0].min()
    xmax = tri.vertices[:, 0].max()
    clamped = (np.abs(tri.vertices[:, 0] - xmin) < tol) | \
              (np.abs(tri.vertices[:, 0] - xmax) < tol)
    free = np.concatenate([np.nonzero(~clamped)[0],
                           nv + np.nonzero(~clamped)[0]])
    Kff = K[np.ix_(free, free)].tocsc()
    try:
        lu = splu(Kff)
    except RuntimeError as exc:
        raise ValueError(f"stiffness matrix singular after clamping: {exc}") from exc
    uf = lu.solve(f[free])
    if not np.isfinite(uf).all():
        raise ValueError("stiffness matrix singular after clamping")
    u = np.zeros(2 * nv)
    u[free] = uf
    if info is not None:
        info["energy"] = float(u @ (K @ u))
        info["boundary_work"] = float(f @ u)
        info["n_clamped"] = int(clamped.sum())
    return np.column_stack([u[:nv], u[nv:]])


def elastic_energy(mu, mesh: TriMesh, u_vertex, interface=None):
    """int 2 mu E(u):E(u) for a P1 displacement field."""
    mu_cell = _mu_cell_averages(mu, mesh, interface if interface is not None
                                else getattr(mu, "interface", None))
    K = _stiffness(mu_cell, mesh)
    nv = mesh.n_vertices
    u = np.concatenate([u_vertex[:, 0], u_vertex[:, 1]])
    return float(u @ (K @ u))
