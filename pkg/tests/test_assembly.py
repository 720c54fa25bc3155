import math

import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from coefrec.assembly import (
    CartesianGrid, MatrixFieldS, assemble_rhs_from_gradient, assemble_T,
    constant_field, eps_op_bound, export_matrix_field_csv, export_operator_mm,
    identity_field, p0_gradient_data, rasterize_p0, strain_field,
    transfer_field,
)
from coefrec.meshing import build_honeycomb, build_structured_trimesh, triangle_areas
from coefrec.spaces import (
    grad_barycentric, gram_M, gram_V, project_pi_h, scalar_space, vector_space,
)
from coefrec.targets import mu_smooth

UNIT = (0.0, 0.0, 1.0, 1.0)


def honeycomb_pair(h):
    mesh = build_honeycomb(UNIT, h)
    return mesh, scalar_space(mesh, "p0hex"), vector_space(mesh, 1)


def test_single_hexagon_identity_gives_zero():
    mesh, mh, vh = honeycomb_pair(1.0)
    T = assemble_T(identity_field(), mh, vh)
    assert T.shape == (2, 1)
    assert abs(T).max() < 1e-15


def oracle_divergence_matrix(mh, vh):
    """Independent assembly of D[i, j] = int_{cell_j} div(e_i) for P0tri/P1."""
    tri = vh.tri
    areas = triangle_areas(tri.vertices, tri.triangles)
    glam = grad_barycentric(tri)
    ni = vh.n_interior
    D = np.zeros((vh.p, mh.n))
    for t in range(tri.n_triangles):
        for k in range(3):
            v = tri.triangles[t, k]
            a = vh.interior_of_scalar[v]
            if a < 0:
                continue
            # d(lambda_k)/dx and /dy integrated over the triangle
            D[a, t] += areas[t] * glam[t, k, 0]
            D[ni + a, t] += areas[t] * glam[t, k, 1]
    return D


def test_identity_matches_divergence_oracle():
    mesh = build_structured_trimesh(UNIT, 0.25)
    mh = scalar_space(mesh, "p0tri")
    vh = vector_space(mesh, 1)
    T = assemble_T(identity_field(), mh, vh).toarray()
    D = oracle_divergence_matrix(mh, vh)
    assert np.abs(T - D).max() < 1e-13


def test_linearity_and_scaling():
    mesh, mh, vh = honeycomb_pair(0.3)
    rng = np.random.default_rng(3)
    s1 = MatrixFieldS(mesh, rng.normal(size=(mesh.n_triangles, 2, 2)))
    s2 = MatrixFieldS(mesh, rng.normal(size=(mesh.n_triangles, 2, 2)))
    t1 = assemble_T(s1, mh, vh).toarray()
    t2 = assemble_T(s2, mh, vh).toarray()
    t12 = assemble_T(MatrixFieldS(mesh, s1.values + s2.values), mh, vh).toarray()
    assert np.abs(t12 - (t1 + t2)).max() < 1e-13 * max(1, np.abs(t12).max())
    tc = assemble_T(s1.scaled(3.5), mh, vh).toarray()
    assert np.abs(tc - 3.5 * t1).max() < 1e-13 * np.abs(tc).max()


@pytest.mark.parametrize("pair", ["honeycomb", "p0p1", "p1p2"])
def test_constants_in_null_space(pair):
    if pair == "honeycomb":
        mesh, mh, vh = honeycomb_pair(0.2)
    else:
        mesh = build_structured_trimesh(UNIT, 0.2)
        mh = scalar_space(mesh, "p0tri" if pair == "p0p1" else "p1tri")
        vh = vector_space(mesh, 1 if pair == "p0p1" else 2)
    T = assemble_T(identity_field(), mh, vh)
    resid = np.abs(T @ np.ones(mh.n)).max()
    assert resid < 1e-13


def test_adjoint_identity():
    # ||T mu||_{V'}^2 computed through the sup maximizer equals the normal
    # matrix quadratic form
    mesh, mh, vh = honeycomb_pair(0.35)
    rng = np.random.default_rng(11)
    S = MatrixFieldS(mesh, rng.normal(size=(mesh.n_triangles, 2, 2)))
    T = assemble_T(S, mh, vh).toarray()
    sv = gram_V(vh).toarray()
    for _ in range(5):
        mu = rng.normal(size=mh.n)
        tmu = T @ mu
        vstar = scipy.linalg.solve(sv, tmu, assume_a="pos")
        sup_sq = (vstar @ tmu) ** 2 / (vstar @ sv @ vstar)
        quad = mu @ (T.T @ scipy.linalg.solve(sv, T @ mu, assume_a="pos"))
        assert sup_sq == pytest.approx(quad, rel=1e-10)


class TestRhs:
    def test_constant_mu_gives_zero(self):
        mesh, mh, vh = honeycomb_pair(0.25)
        b = assemble_rhs_from_gradient(lambda p: np.full(len(p), 4.2), vh)
        assert np.abs(b).max() < 1e-14

    def test_affine_mu_matches_operator_times_averages(self):
        mesh = build_structured_trimesh(UNIT, 0.2)
        mh = scalar_space(mesh, "p0tri")
        vh = vector_space(mesh, 1)
        mu = lambda p: 1.5 + 0.3 * p[:, 0] - 0.8 * p[:, 1]
        b = assemble_rhs_from_gradient(mu, vh)
        T = assemble_T(identity_field(), mh, vh)
        cell_avg = mu(mesh.centroids())
        assert np.abs(T @ cell_avg - b).max() < 1e-12

    def test_residual_shrinks_with_h(self):
        res = []
        for h in (0.2, 0.1):
            mesh, mh, vh = honeycomb_pair(h)
            T = assemble_T(identity_field(), mh, vh)
            b = assemble_rhs_from_gradient(mu_smooth, vh)
            pi = project_pi_h(mu_smooth, mh)
            sv = gram_V(vh).toarray()
            r = T @ pi - b
            res.append(math.sqrt(r @ scipy.linalg.solve(sv, r, assume_a="pos")))
        assert res[1] < 0.6 * res[0]


class TestStrain:
    def test_identity_map(self):
        mesh = build_structured_trimesh(UNIT, 0.25)
        s = strain_field(mesh, mesh.vertices.copy())
        np.testing.assert_allclose(s.values, np.broadcast_to(
            2 * np.eye(2), s.values.shape), atol=1e-13)

    def test_rigid_rotation(self):
        mesh = build_structured_trimesh(UNIT, 0.25)
        u = np.column_stack([-mesh.vertices[:, 1], mesh.vertices[:, 0]])
        s = strain_field(mesh, u)
        assert np.abs(s.values).max() < 1e-13

    def test_quadratic_strain_converges(self):
        errs = []
        for h in (0.1, 0.05):
            mesh = build_structured_trimesh(UNIT, h)
            u = np.column_stack([mesh.vertices[:, 0] ** 2,
                                 np.zeros(mesh.n_vertices)])
            s = strain_field(mesh, u)
            cx = mesh.centroids()[:, 0]
            errs.append(np.abs(s.values[:, 0, 0] - 4 * cx).max())
        assert errs[1] < 0.7 * errs[0]
        assert np.abs(strain_field(
            build_structured_trimesh(UNIT, 0.1),
            np.zeros((121, 2))).values).max() == 0


class TestTransfer:
    def test_constant_exact(self):
        a = build_structured_trimesh(UNIT, 0.1)
        b = build_structured_trimesh((0.2, 0.2, 0.8, 0.8), 0.07)
        mat = np.array([[1.0, 2.0], [3.0, 4.0]])
        src = MatrixFieldS(a, np.broadcast_to(mat, (a.n_triangles, 2, 2)).copy())
        out = transfer_field(src, b, grid_shape=(64, 64))
        np.testing.assert_allclose(out.values, np.broadcast_to(
            mat, out.values.shape), rtol=1e-12)

    def test_bilinear_sampling_second_order_in_spacing(self):
        def smooth(x, y):
            return np.sin(3 * x) * np.cos(2 * y)

        rng = np.random.default_rng(5)
        pts = rng.uniform(0.05, 0.95, size=(400, 2))
        errs = []
        for g in (20, 40, 80):
            xs = np.linspace(0, 1, g)
            X, Y = np.meshgrid(xs, xs, indexing="ij")
            grid = CartesianGrid(0.0, 0.0, xs[1], xs[1],
                                 smooth(X, Y)[..., None],
                                 np.ones((g, g), dtype=bool))
            errs.append(np.abs(grid.sample(pts)[:, 0]
                               - smooth(pts[:, 0], pts[:, 1])).max())
        assert errs[1] < 0.35 * errs[0]
        assert errs[2] < 0.35 * errs[1]

    def test_linear_field_through_fine_grid(self):
        # a per-triangle linear-in-x field transfers with error bounded by the
        # source cell size plus the quadratic grid term
        a = build_structured_trimesh(UNIT, 0.01)
        b = build_structured_trimesh((0.2, 0.2, 0.8, 0.8), 0.1)
        cx = a.centroids()
        vals = np.zeros((a.n_triangles, 2, 2))
        vals[:, 0, 0] = 2.0 * cx[:, 0]
        src = MatrixFieldS(a, vals)
        out = transfer_field(src, b, grid_shape=(120, 120))
        bc = b.centroids()
        assert np.abs(out.values[:, 0, 0] - 2.0 * bc[:, 0]).max() < 0.02

    def test_round_trip(self):
        a = build_structured_trimesh(UNIT, 0.05)
        cx = a.centroids()
        vals = np.zeros((a.n_triangles, 2, 2))
        vals[:, 0, 1] = cx[:, 0] + 0.5 * cx[:, 1]
        src = MatrixFieldS(a, vals)
        out = transfer_field(src, a, grid_shape=(600, 600))
        assert np.abs(out.values - vals).max() < 5e-3

    def test_outside_sample_raises(self):
        a = build_structured_trimesh((0.3, 0.3, 0.7, 0.7), 0.05)
        b = build_structured_trimesh(UNIT, 0.2)
        src = MatrixFieldS(a, np.zeros((a.n_triangles, 2, 2)))
        with pytest.raises(ValueError, match="outside"):
            transfer_field(src, b)


class TestEpsOp:
    def test_zero_for_equal(self):
        mesh = build_structured_trimesh(UNIT, 0.2)
        s = constant_field(np.eye(2), mesh)
        assert eps_op_bound(s, s, mesh) == 0

    def test_constant_shift(self):
        mesh = build_structured_trimesh(UNIT, 0.2)
        c = 0.7
        s1 = constant_field(np.eye(2), mesh)
        s2 = constant_field((1 + c) * np.eye(2), mesh)
        # Frobenius norm of c*I is c*sqrt(2); the domain has unit area
        assert eps_op_bound(s2, s1, mesh) == pytest.approx(
            c * math.sqrt(2.0), rel=1e-12)

    def test_misaligned_stripe_sqrt_h(self):
        # S jumps at x = x0, its discrete version at x = x0 + h/2
        vals = []
        for h in (0.08, 0.02):
            mesh = build_structured_trimesh(UNIT, 0.01)
            x0 = 0.413

            def s_ref(p):
                out = np.zeros((len(p), 2, 2))
                out[:, 0, 0] = out[:, 1, 1] = 1.0 + (p[:, 0] > x0)
                return out

            def s_h(p, h=h):
                out = np.zeros((len(p), 2, 2))
                out[:, 0, 0] = out[:, 1, 1] = 1.0 + (p[:, 0] > x0 + h / 2)
                return out

            interface = lambda p, h=h: np.maximum(x0 - p[:, 0], p[:, 0] - x0 - h / 2)
            vals.append(eps_op_bound(
                MatrixFieldS(mesh, func=s_h), s_ref, mesh, interface=interface))
        # expected value sqrt(2 * (h/2) * 1) = sqrt(h), ratio = 2 for h ratio 4
        assert vals[0] == pytest.approx(math.sqrt(0.08), rel=0.02)
        assert vals[0] / vals[1] == pytest.approx(2.0, rel=0.05)


def test_p0_gradient_data_affine_exact():
    mesh = build_structured_trimesh(UNIT, 0.2)
    mu = lambda p: 2.0 + 3.0 * p[:, 0] - 1.5 * p[:, 1]
    g = p0_gradient_data(mu, mesh)
    np.testing.assert_allclose(g, np.tile([3.0, -1.5], (mesh.n_triangles, 1)),
                               atol=1e-12)


def test_matrix_field_validation():
    mesh = build_structured_trimesh(UNIT, 0.5)
    with pytest.raises(ValueError, match="symmetric"):
        MatrixFieldS(mesh, np.broadcast_to(np.array([[0.0, 1.0], [0.0, 0.0]]),
                                           (mesh.n_triangles, 2, 2)).copy(),
                     symmetric=True)
    bad = np.zeros((mesh.n_triangles, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        MatrixFieldS(mesh, bad)
    with pytest.raises(ValueError):
        MatrixFieldS(mesh)


def test_exports(tmp_path):
    mesh, mh, vh = honeycomb_pair(0.4)
    T = assemble_T(identity_field(), mh, vh)
    export_operator_mm(T, tmp_path / "T.mtx")
    assert (tmp_path / "T.mtx").exists()
    s = strain_field(mesh.as_trimesh(), mesh.vertices.copy())
    export_matrix_field_csv(s, tmp_path / "S.csv")
    lines = (tmp_path / "S.csv").read_text().splitlines()
    assert lines[0] == "tri_index,S11,S12,S21,S22"
    assert len(lines) == mesh.n_triangles + 1
