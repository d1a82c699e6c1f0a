import numpy as np
import pytest
import scipy.sparse as sp

from rigforge.errors import ShapeMismatch
from rigforge.mesh import TriMesh, icosphere
from rigforge.operators import (
    DiffusionTimes,
    MASS_FLOOR_REL,
    build_operators,
    cotan_laplacian,
    eigenbasis,
    implicit_diffuse,
    implicit_filter_diffuse,
    load_operators,
    lumped_mass,
    save_operators,
    spectral_diffuse,
)


def tetra_mesh():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    f = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    return TriMesh(v, f)


def two_component_mesh():
    a = icosphere(1)
    b = icosphere(0, radius=0.3)
    v = np.vstack([a.vertices, b.vertices + [3.0, 0, 0]])
    f = np.vstack([a.faces, b.faces + a.n_vertices])
    return TriMesh(v, f)


class TestCotanLaplacian:
    def test_right_isoceles_triangle(self):
        # legs of length 1 along x and y; right angle at vertex 0
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float)
        mesh = TriMesh(v, np.array([[0, 1, 2]]))
        L = cotan_laplacian(mesh).toarray()
        # hypotenuse (1,2) is opposite the right angle: -1/2 cot(pi/2) = 0
        assert L[1, 2] == pytest.approx(0.0, abs=1e-12)
        # legs are opposite pi/4 angles: -1/2 cot(pi/4) = -0.5
        assert L[0, 1] == pytest.approx(-0.5, abs=1e-12)
        assert L[0, 2] == pytest.approx(-0.5, abs=1e-12)
        np.testing.assert_allclose(L, L.T, atol=1e-12)

    def test_row_sums_zero(self):
        for mesh in (tetra_mesh(), icosphere(2), two_component_mesh()):
            L = cotan_laplacian(mesh)
            np.testing.assert_allclose(
                np.asarray(L.sum(axis=1)).ravel(), 0.0, atol=1e-10
            )

    def test_component_indicator_in_kernel(self):
        mesh = two_component_mesh()
        L = cotan_laplacian(mesh)
        for c in range(mesh.n_components):
            x = (mesh.component_id == c).astype(float)
            assert abs(x @ (L @ x)) < 1e-10

    def test_positive_semidefinite(self):
        mesh = icosphere(2)
        L = cotan_laplacian(mesh)
        rng = np.random.default_rng(3)
        for _ in range(10):
            x = rng.standard_normal(mesh.n_vertices)
            assert x @ (L @ x) > -1e-10

    def test_block_diagonal_across_components(self):
        mesh = two_component_mesh()
        L = cotan_laplacian(mesh).tocoo()
        labels = mesh.component_id
        assert (labels[L.row] == labels[L.col]).all()

    def test_degenerate_face_clamped_no_nan(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], dtype=float)  # collinear
        mesh = TriMesh(v, np.array([[0, 1, 2]]))
        L = cotan_laplacian(mesh)
        assert np.isfinite(L.data).all()


class TestLumpedMass:
    def test_equilateral_triangle(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]])
        mesh = TriMesh(v, np.array([[0, 1, 2]]))
        m = lumped_mass(mesh)
        np.testing.assert_allclose(m, np.sqrt(3) / 12, rtol=1e-12)

    def test_sum_equals_total_area(self):
        mesh = icosphere(2)
        from rigforge.mesh import face_areas_normals

        areas, _ = face_areas_normals(mesh.vertices, mesh.faces)
        m = lumped_mass(mesh)
        assert m.sum() == pytest.approx(areas.sum(), rel=1e-9)

    def test_isolated_vertex_floored(self):
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]], dtype=float)
        mesh = TriMesh(v, np.array([[0, 1, 2]]))
        m = lumped_mass(mesh)
        assert m[3] == pytest.approx(MASS_FLOOR_REL * 0.5)
        assert (m > 0).all()


class TestEigenbasis:
    def test_kernel_dimension_matches_components(self):
        mesh = two_component_mesh()
        ops = build_operators(mesh, k=8)
        zeros = np.sum(ops.basis.evals < 1e-8)
        assert zeros == mesh.n_components == 2

    def test_constant_per_component_kernel(self):
        mesh = icosphere(1)
        ops = build_operators(mesh, k=6)
        phi0 = ops.basis.evecs[:, 0]
        assert ops.basis.evals[0] == pytest.approx(0.0, abs=1e-8)
        assert phi0.std() / abs(phi0.mean()) < 1e-6

    def test_m_orthonormal(self):
        mesh = icosphere(2)
        ops = build_operators(mesh, k=24)
        G = ops.basis.evecs.T @ (ops.M[:, None] * ops.basis.evecs)
        np.testing.assert_allclose(G, np.eye(24), atol=1e-6)

    def test_eigen_residuals(self):
        mesh = icosphere(2)
        ops = build_operators(mesh, k=24)
        lam_norm = np.linalg.norm(ops.basis.evals)
        for j in range(ops.k):
            r = ops.L @ ops.basis.evecs[:, j] - ops.basis.evals[j] * (
                ops.M * ops.basis.evecs[:, j]
            )
            assert np.linalg.norm(r) / lam_norm < 1e-6

    def test_sphere_spectrum_convergence(self):
        # eigenvalues of the unit sphere cluster at l(l+1); l=1 gives 2
        mesh = icosphere(4)
        assert mesh.n_vertices >= 2562
        ops = build_operators(mesh, k=10)
        lam = ops.basis.evals[1:4]
        assert np.all(np.abs(lam - 2.0) / 2.0 < 0.15)

    def test_full_basis_reconstructs_l(self):
        mesh = tetra_mesh()
        L = cotan_laplacian(mesh)
        M = lumped_mass(mesh)
        basis = eigenbasis(L, M, k=4)
        # with phi^T M phi = I, L = M phi diag(lambda) phi^T M
        L_rec = (M[:, None] * basis.evecs) @ np.diag(basis.evals) @ (
            basis.evecs.T * M[None, :]
        )
        np.testing.assert_allclose(L_rec, L.toarray(), atol=1e-8)

    def test_deterministic(self):
        mesh = icosphere(2)
        a = build_operators(mesh, k=16)
        b = build_operators(mesh, k=16)
        np.testing.assert_array_equal(a.basis.evals, b.basis.evals)
        np.testing.assert_array_equal(a.basis.evecs, b.basis.evecs)

    def test_k_exceeding_n_rejected(self):
        mesh = tetra_mesh()
        with pytest.raises(ShapeMismatch):
            eigenbasis(cotan_laplacian(mesh), lumped_mass(mesh), k=5)


class TestSpectralDiffuse:
    def test_time_zero_full_basis_identity(self):
        mesh = tetra_mesh()
        ops = build_operators(mesh, k=4)
        rng = np.random.default_rng(0)
        u = rng.standard_normal((4, 3))
        out = spectral_diffuse(u, np.zeros(3), ops.basis, ops.M)
        np.testing.assert_allclose(out, u, atol=1e-10)

    def test_time_zero_truncated_is_projection(self):
        mesh = icosphere(1)
        ops = build_operators(mesh, k=10)
        rng = np.random.default_rng(1)
        u = rng.standard_normal((mesh.n_vertices, 2))
        out = spectral_diffuse(u, np.zeros(2), ops.basis, ops.M)
        proj = ops.basis.evecs @ (ops.basis.evecs.T @ (ops.M[:, None] * u))
        np.testing.assert_allclose(out, proj, atol=1e-12)
        # projecting again changes nothing
        out2 = spectral_diffuse(out, np.zeros(2), ops.basis, ops.M)
        np.testing.assert_allclose(out2, out, atol=1e-10)

    def test_long_time_reaches_weighted_mean(self):
        mesh = icosphere(2)
        ops = build_operators(mesh, k=16)
        rng = np.random.default_rng(2)
        u = rng.standard_normal((mesh.n_vertices, 2))
        out = spectral_diffuse(u, np.full(2, 1e6), ops.basis, ops.M)
        target = (ops.M[:, None] * u).sum(axis=0) / ops.M.sum()
        np.testing.assert_allclose(out, np.broadcast_to(target, out.shape), atol=1e-6)

    def test_eigenvector_decays_exactly(self):
        mesh = icosphere(1)
        ops = build_operators(mesh, k=8)
        j, t = 5, 0.37
        u = ops.basis.evecs[:, [j]]
        out = spectral_diffuse(u, np.array([t]), ops.basis, ops.M)
        np.testing.assert_allclose(
            out, np.exp(-ops.basis.evals[j] * t) * u, atol=1e-8
        )

    def test_mean_conservation(self):
        mesh = icosphere(2)
        ops = build_operators(mesh, k=20)
        rng = np.random.default_rng(3)
        u = rng.standard_normal((mesh.n_vertices, 3))
        for t in (0.01, 0.5, 10.0):
            out = spectral_diffuse(u, np.full(3, t), ops.basis, ops.M)
            before = (ops.M[:, None] * u).sum(axis=0) / ops.M.sum()
            after = (ops.M[:, None] * out).sum(axis=0) / ops.M.sum()
            np.testing.assert_allclose(after, before, atol=1e-8)

    def test_semigroup(self):
        mesh = icosphere(1)
        ops = build_operators(mesh, k=12)
        rng = np.random.default_rng(4)
        u = rng.standard_normal((mesh.n_vertices, 2))
        t1, t2 = np.full(2, 0.2), np.full(2, 0.7)
        once = spectral_diffuse(
            spectral_diffuse(u, t1, ops.basis, ops.M), t2, ops.basis, ops.M
        )
        combined = spectral_diffuse(u, t1 + t2, ops.basis, ops.M)
        np.testing.assert_allclose(once, combined, atol=1e-8)

    def test_soft_maximum_principle_full_basis(self):
        mesh = icosphere(2)
        n = mesh.n_vertices
        ops = build_operators(mesh, k=n)
        rng = np.random.default_rng(5)
        u = rng.standard_normal((n, 1))
        for t in (0.0, 0.05, 1.0, 100.0):
            out = spectral_diffuse(u, np.array([t]), ops.basis, ops.M)
            assert np.abs(out).max() <= np.abs(u).max() + 1e-6

    def test_triangulation_agnostic(self):
        # same smooth field sampled on two tessellations diffuses consistently
        coarse, fine = icosphere(3), icosphere(4)

        def field(pts):
            return np.stack([pts[:, 0] * pts[:, 2], np.sin(2 * pts[:, 1])], axis=1)

        t = np.full(2, 0.1)
        out_c = spectral_diffuse(
            field(coarse.vertices), t, *_basis_m(coarse, k=64)
        )
        out_f = spectral_diffuse(field(fine.vertices), t, *_basis_m(fine, k=64))
        # nearest-vertex transfer from fine to coarse
        d2 = ((coarse.vertices[:, None, :] - fine.vertices[None, :, :]) ** 2).sum(-1)
        nearest = d2.argmin(axis=1)
        rms = np.sqrt(((out_f[nearest] - out_c) ** 2).mean())
        assert rms < 2e-2

    def test_shape_mismatch(self):
        mesh = tetra_mesh()
        ops = build_operators(mesh, k=4)
        with pytest.raises(ShapeMismatch):
            spectral_diffuse(np.zeros((4, 2)), np.zeros(3), ops.basis, ops.M)


def _basis_m(mesh, k):
    ops = build_operators(mesh, k=k)
    return ops.basis, ops.M


class TestImplicitForm:
    def test_matches_spectral_filter_at_full_basis(self):
        mesh = icosphere(1)
        n = mesh.n_vertices
        ops = build_operators(mesh, k=n)
        rng = np.random.default_rng(6)
        u = rng.standard_normal((n, 2))
        t = np.array([0.05, 1.3])
        direct = implicit_diffuse(u, t, ops.L, ops.M)
        filtered = implicit_filter_diffuse(u, t, ops.basis, ops.M)
        np.testing.assert_allclose(direct, filtered, atol=1e-8)


class TestDiffusionTimes:
    def test_always_nonnegative(self):
        dt = DiffusionTimes(np.array([-50.0, -1.0, 0.0, 3.0]))
        assert (dt.times() >= 0).all()

    def test_init_near_squared_edge_length(self):
        mesh = icosphere(2)
        from rigforge.mesh import mean_edge_length

        dt = DiffusionTimes.init_for_mesh(mesh, channels=4)
        np.testing.assert_allclose(dt.times(), mean_edge_length(mesh) ** 2, rtol=1e-9)

    def test_roundtrip(self):
        t = np.array([1e-6, 0.5, 40.0])
        np.testing.assert_allclose(DiffusionTimes.from_times(t).times(), t, rtol=1e-9)


class TestOperatorCache:
    def test_roundtrip(self, tmp_path):
        mesh = two_component_mesh()
        ops = build_operators(mesh, k=12)
        p = tmp_path / "ops.rfop"
        save_operators(ops, p)
        back = load_operators(p)
        np.testing.assert_array_equal(back.basis.evals, ops.basis.evals)
        np.testing.assert_array_equal(back.basis.evecs, ops.basis.evecs)
        np.testing.assert_array_equal(back.M, ops.M)
        assert back.mean_edge == ops.mean_edge
        np.testing.assert_array_equal(back.L.toarray(), ops.L.toarray())

    def test_truncated_file_rejected(self, tmp_path):
        mesh = tetra_mesh()
        ops = build_operators(mesh, k=3)
        p = tmp_path / "ops.rfop"
        save_operators(ops, p)
        blob = p.read_bytes()
        p.write_bytes(blob[:-10])
        from rigforge.errors import ChecksumMismatch

        with pytest.raises(ChecksumMismatch):
            load_operators(p)
