import numpy as np
import pytest
import scipy.linalg
import scipy.sparse as sp

from coefrec.assembly import assemble_T, identity_field
from coefrec.meshing import build_honeycomb, build_structured_trimesh
from coefrec.spaces import (
    gram_M, gram_V, m_norm, normalized_projection_p_h, scalar_space,
    scalar_stiffness_interior, vector_space,
)
from coefrec.spectral import (
    SpectralResult, beta_in_direction, extremal_singulars, pair_fails_infsup,
    spectral_constants, usc_sweep, whiten, write_infsup_csv,
)
from coefrec.system import OperatorSystem

UNIT = (0.0, 0.0, 1.0, 1.0)


def random_spd(rng, k, spread=3.0):
    q, _ = np.linalg.qr(rng.normal(size=(k, k)))
    lam = np.exp(rng.uniform(-spread / 2, spread / 2, size=k))
    return (q * lam) @ q.T


def honeycomb_system(h, gram_scale=0.5):
    mesh = build_honeycomb(UNIT, h)
    mh = scalar_space(mesh, "p0hex")
    vh = vector_space(mesh, 1, gram_scale=gram_scale)
    T = assemble_T(identity_field(), mh, vh)
    return mesh, mh, OperatorSystem(T, gram_M(mh),
                                    sv_block=scalar_stiffness_interior(vh))


def test_diagonal_extremal():
    res = extremal_singulars(np.diag([3.0, 1.0, 2.0]))
    assert res.alpha == pytest.approx(1.0)
    assert res.beta == pytest.approx(2.0)
    assert res.rho == pytest.approx(3.0)
    assert res.delta == pytest.approx(np.sqrt(8.0))


def test_whiten_identity_grams():
    rng = np.random.default_rng(0)
    T = rng.normal(size=(5, 3))
    np.testing.assert_allclose(whiten(T, np.eye(3), np.eye(5)), T, atol=1e-14)
    c = 2.5
    np.testing.assert_allclose(whiten(T, c ** 2 * np.eye(3), np.eye(5)),
                               T / c, atol=1e-14)


def test_whiten_matches_random_search():
    # brute-force optimization of the quotient over random directions
    rng = np.random.default_rng(42)
    T = rng.normal(size=(4, 3))
    sm = random_spd(rng, 3, 1.0)
    sv = random_spd(rng, 4, 1.0)
    Mt = whiten(T, sm, sv)
    svals = np.sort(scipy.linalg.svd(Mt, compute_uv=False))
    sv_inv = np.linalg.inv(sv)

    def quotient(mu):
        tmu = T @ mu
        return np.sqrt((tmu @ sv_inv @ tmu) / (mu @ sm @ mu))

    samples = rng.normal(size=(100_000, 3))
    q = np.array([quotient(m) for m in samples[:20_000]])
    qmin, qmax = q.min(), q.max()
    # local random refinement around the best samples, same oracle budget
    for anchor, sign in ((samples[:20_000][q.argmin()], +1),
                         (samples[:20_000][q.argmax()], -1)):
        best = anchor / np.linalg.norm(anchor)
        radius = 0.5
        for _ in range(8):
            probes = best + radius * rng.normal(size=(5000, 3))
            qq = np.array([quotient(m) for m in probes])
            k = qq.argmin() if sign > 0 else qq.argmax()
            cand = probes[k] / np.linalg.norm(probes[k])
            if sign > 0 and qq[k] < qmin:
                qmin, best = qq[k], cand
            if sign < 0 and qq[k] > qmax:
                qmax, best = qq[k], cand
            radius *= 0.4
    assert svals[0] <= qmin + 1e-12
    assert qmin - svals[0] < 1e-2
    assert qmax <= svals[-1] + 1e-12
    assert svals[-1] - qmax < 1e-2


def test_factor_independence():
    # symmetric square roots in place of Cholesky factors leave the singular
    # values unchanged
    rng = np.random.default_rng(7)
    T = rng.normal(size=(6, 4))
    sm = random_spd(rng, 4)
    sv = random_spd(rng, 6)

    def sym_sqrt(a):
        lam, q = np.linalg.eigh(a)
        return (q * np.sqrt(lam)) @ q.T

    Mt_chol = whiten(T, sm, sv)
    Mt_sym = np.linalg.solve(sym_sqrt(sv), T) @ np.linalg.inv(sym_sqrt(sm))
    s1 = np.sort(scipy.linalg.svd(Mt_chol, compute_uv=False))
    s2 = np.sort(scipy.linalg.svd(Mt_sym, compute_uv=False))
    np.testing.assert_allclose(s1, s2, rtol=1e-12)


def test_honeycomb_reference_point():
    mesh, mh, system = honeycomb_system(0.1056)
    res = spectral_constants(system)
    assert res.alpha < 1e-10
    assert 0.42 <= res.beta <= 0.45      # published table value 0.4352
    assert res.rho < 1.5
    ph1 = normalized_projection_p_h(lambda p: np.ones(len(p)), mh)
    assert m_norm(mh, res.z - ph1) < 1e-8
    assert abs(m_norm(mh, res.z) - 1.0) < 1e-12


def test_scaling_equivariance():
    mesh = build_honeycomb(UNIT, 0.3)
    mh = scalar_space(mesh, "p0hex")
    vh = vector_space(mesh, 1)
    sm = gram_M(mh)
    blk = scalar_stiffness_interior(vh)
    c = 3.7
    base = spectral_constants(OperatorSystem(
        assemble_T(identity_field(), mh, vh), sm, sv_block=blk))
    scaled = spectral_constants(OperatorSystem(
        assemble_T(identity_field().scaled(c), mh, vh), sm, sv_block=blk))
    assert scaled.beta == pytest.approx(c * base.beta, rel=1e-12)
    assert scaled.rho == pytest.approx(c * base.rho, rel=1e-12)
    assert scaled.alpha == pytest.approx(c * base.alpha, abs=1e-12)
    np.testing.assert_allclose(scaled.z, base.z, atol=1e-7)


def test_ordering_invariant():
    rng = np.random.default_rng(12)
    for _ in range(20):
        p, n = rng.integers(3, 9), rng.integers(2, 7)
        T = rng.normal(size=(p, n))
        res = extremal_singulars(T)
        assert res.alpha <= res.beta <= res.rho


def test_self_adjoint_projection_inequality():
    # for z nearly minimizing the quadratic form, the cross term against any
    # orthogonal unit direction is bounded by eps * sqrt(rho^2 - alpha^2)
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        k = int(rng.integers(2, 12))
        S = random_spd(rng, k)
        lam, q = np.linalg.eigh(S)
        alpha2, rho2 = lam[0], lam[-1]
        t = rng.uniform(0, 1)
        w = rng.normal(size=k)
        w /= np.linalg.norm(w)
        z = np.sqrt(1 - t ** 2) * q[:, 0] + t * w
        z /= np.linalg.norm(z)
        eps2 = max(z @ S @ z - alpha2, 0.0)
        pvec = rng.normal(size=k)
        pvec -= (pvec @ z) * z
        nrm = np.linalg.norm(pvec)
        if nrm < 1e-12:
            continue
        pvec /= nrm
        lhs = abs(z @ S @ pvec)
        rhs = np.sqrt(eps2) * np.sqrt(max(rho2 - alpha2, 0.0))
        assert lhs <= rhs + 1e-10


def test_two_sided_direction_inequality():
    # beta_e(T)^2 <= beta(T)^2 <= beta_e(T)^2 + eps*(delta + eps) whenever
    # ||T e||^2 <= alpha^2 + eps^2
    rng = np.random.default_rng(99)
    for _ in range(200):
        p, n = int(rng.integers(3, 8)), int(rng.integers(2, 6))
        T = rng.normal(size=(p, n))
        sm = random_spd(rng, n, 1.5)
        sv = random_spd(rng, p, 1.5)
        res = extremal_singulars(whiten(T, sm, sv))
        e = rng.normal(size=n)
        e /= np.sqrt(e @ sm @ e)
        sv_inv = np.linalg.inv(sv)
        te = T @ e
        eps2 = max(te @ sv_inv @ te - res.alpha ** 2, 0.0)
        be = beta_in_direction(T, sm, sv, e)
        slack = 1e-9 * max(1.0, res.rho ** 2)
        assert be ** 2 <= res.beta ** 2 + slack
        assert res.beta ** 2 <= be ** 2 + np.sqrt(eps2) * (res.delta + np.sqrt(eps2)) + slack


def test_beta_in_direction_at_z():
    mesh, mh, system = honeycomb_system(0.25)
    res = spectral_constants(system)
    sv = gram_V(vector_space(mesh, 1, gram_scale=0.5))
    be = beta_in_direction(system.T, gram_M(mh), sv, res.z)
    assert be == pytest.approx(res.beta, rel=1e-11)


def test_beta_in_direction_diagonal_closed_form():
    # Mt = diag(a, b, c), e orthogonal to the minimizing axis: the projected
    # quotient splits into the invariant first axis and the rotated (b, c) mix
    a, b, c = 1.0, 2.0, 3.0
    T = np.diag([a, b, c])
    s, t = 0.6, 0.8
    e = np.array([0.0, s, t])
    be = beta_in_direction(T, np.eye(3), np.eye(3), e)
    mixed = np.sqrt((b * t) ** 2 + (c * s) ** 2)  # quotient at (0, t, -s)
    assert be == pytest.approx(min(a, mixed), rel=1e-12)
    with pytest.raises(ValueError):
        beta_in_direction(T, np.eye(3), np.eye(3), np.zeros(3))


def test_lemma_comp_eigenvalue_realization():
    # singular values squared of the whitened matrix equal the generalized
    # eigenvalues of (T^T S_V^{-1} T, S_M)
    rng = np.random.default_rng(5)
    T = rng.normal(size=(7, 4))
    sm = random_spd(rng, 4)
    sv = random_spd(rng, 7)
    svals = np.sort(scipy.linalg.svd(whiten(T, sm, sv), compute_uv=False))
    N = T.T @ np.linalg.solve(sv, T)
    lam = np.sort(scipy.linalg.eigh(N, sm, eigvals_only=True))
    np.testing.assert_allclose(svals ** 2, lam, rtol=1e-10, atol=1e-12)


def test_routes_agree():
    mesh, mh, system = honeycomb_system(0.1)
    dense = spectral_constants(system, method="dense")
    normal = spectral_constants(system, method="normal")
    it = spectral_constants(system, method="iterative", tol=1e-11)
    assert normal.beta == pytest.approx(dense.beta, rel=1e-9)
    assert normal.rho == pytest.approx(dense.rho, rel=1e-9)
    assert it.beta == pytest.approx(dense.beta, rel=1e-6)
    assert it.rho == pytest.approx(dense.rho, rel=1e-6)
    for other in (normal, it):
        assert m_norm(mh, other.z - dense.z) < 1e-5


def test_degenerate_pair_detection():
    mesh = build_structured_trimesh(UNIT, 0.2)
    mh = scalar_space(mesh, "p0tri")
    vh = vector_space(mesh, 1)
    T = assemble_T(identity_field(), mh, vh)
    res = spectral_constants(OperatorSystem(
        T, gram_M(mh), sv_block=scalar_stiffness_interior(vh)))
    assert pair_fails_infsup(res)


def test_beta_needs_two_directions():
    mesh = build_honeycomb(UNIT, 1.0)
    mh = scalar_space(mesh, "p0hex")
    vh = vector_space(mesh, 1)
    T = assemble_T(identity_field(), mh, vh)
    with pytest.raises(ValueError, match="two parameter directions"):
        spectral_constants(OperatorSystem(
            T, gram_M(mh), sv_block=scalar_stiffness_interior(vh)))


def test_usc_sweep_and_csv(tmp_path):
    def builder(h):
        mesh = build_honeycomb(UNIT, h)
        mh = scalar_space(mesh, "p0hex")
        vh = vector_space(mesh, 1, gram_scale=0.5)
        return OperatorSystem(assemble_T(identity_field(), mh, vh), gram_M(mh),
                              sv_block=scalar_stiffness_interior(vh))

    rows = usc_sweep(builder, [0.3, 0.2])
    assert [r["h"] for r in rows] == [0.3, 0.2]
    assert all(0.4 < r["beta"] < 0.47 for r in rows)
    path = tmp_path / "sweep.csv"
    write_infsup_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "h,alpha,beta,rho,ratio"
    assert len(lines) == 3
