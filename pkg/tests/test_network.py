import numpy as np
import pytest

from rigforge import autodiff as ad
from rigforge import network as net
from rigforge.errors import BadConfig, OperatorMismatch, ShapeMismatch
from rigforge.mesh import TriMesh, icosphere
from rigforge.operators import Eigenbasis, SurfaceOperators, build_operators

TINY = net.ModelConfig(
    width=8, blocks=2, global_width=4, global_feature=6, facs_dim=3,
    fusion_hidden=8, k_eigen=8,
)


def bumpy_sphere(level=1, seed=0, radius=1.0):
    """Icosphere with smooth radial bumps; breaks spectral symmetry."""
    mesh = icosphere(level, radius=radius)
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((4, 3))
    centers /= np.linalg.norm(centers, axis=1)[:, None]
    amps = rng.uniform(0.03, 0.08, size=4)
    dirs = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1)[:, None]
    rho = np.ones(mesh.n_vertices)
    for c, a in zip(centers, amps):
        rho += a * np.exp(-4.0 * (1.0 - dirs @ c))
    return mesh.with_vertices(dirs * (radius * rho)[:, None])


def head_with_eyes(level=1):
    head = bumpy_sphere(level)
    eye = icosphere(0, radius=0.15)
    v = np.vstack(
        [head.vertices, eye.vertices + [0.3, 0.2, 0.6], eye.vertices + [-0.3, 0.2, 0.6]]
    )
    f = np.vstack(
        [head.faces, eye.faces + head.n_vertices, eye.faces + head.n_vertices + eye.n_vertices]
    )
    return TriMesh(v, f)


class TestConfigAndInit:
    def test_default_config_param_count_formula(self):
        cfg = net.ModelConfig()  # w=64, B=4, wg=32, g=64, D=12
        w, B, wg, g, D = 64, 4, 32, 64, 12
        gl = g + D
        fh = w
        block = w + 2 * (w * w + w) + ((w + gl) * fh + fh) + (fh * w + w)
        genc_block = wg + 2 * (wg * wg + wg)
        expected = (
            (6 * w + w) + B * block + (w * 3 + 3)
            + (6 * wg + wg) + 2 * genc_block + (wg * g + g)
        )
        assert net.count_params(cfg) == expected
        params = net.init_model(cfg, seed=0)
        assert params.count_params() == expected
        # desk-scale config lands in the tens of thousands
        assert 10_000 < expected < 200_000

    def test_same_seed_identical_checkpoints(self, tmp_path):
        for i, p in enumerate(["a.rfck", "b.rfck"]):
            params = net.init_model(TINY, seed=0)
            net.save_model(tmp_path / p, params)
        assert (tmp_path / "a.rfck").read_bytes() == (tmp_path / "b.rfck").read_bytes()

    def test_different_seed_differs(self):
        a = net.init_model(TINY, seed=0)
        b = net.init_model(TINY, seed=1)
        assert any(
            not np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays
        )

    def test_zero_width_rejected(self):
        with pytest.raises(BadConfig):
            net.ModelConfig(width=0)

    def test_facs_bounds_validated(self):
        with pytest.raises(BadConfig):
            net.FacsVector(np.array([0.5, 1.2]))
        with pytest.raises(BadConfig):
            net.FacsVector(np.array([-0.1]))

    def test_save_load_roundtrip(self, tmp_path):
        params = net.init_model(TINY, seed=3)
        net.save_model(tmp_path / "m.rfck", params)
        back, state = net.load_model(tmp_path / "m.rfck")
        assert state is None
        assert back.config == TINY
        for k, v in params.arrays.items():
            np.testing.assert_array_equal(back.arrays[k], v)


class TestGlobalEncoder:
    def test_component_removal_changes_feature(self):
        params = net.init_model(TINY, seed=0)
        full = head_with_eyes()
        head_only = bumpy_sphere(1)
        g_full = net.global_encode(full, build_operators(full, k=TINY.k_eigen), params)
        g_head = net.global_encode(
            head_only, build_operators(head_only, k=TINY.k_eigen), params
        )
        assert np.linalg.norm(g_full.data - g_head.data) > 1e-4

    def test_tessellation_invariance_smoke(self):
        params = net.init_model(TINY, seed=0)
        coarse, fine = icosphere(2), icosphere(3)
        g_c = net.global_encode(coarse, build_operators(coarse, k=48), params)
        g_f = net.global_encode(fine, build_operators(fine, k=48), params)
        rel = np.linalg.norm(g_c.data - g_f.data) / np.linalg.norm(g_f.data)
        assert rel < 5e-2

    def test_permutation_invariance(self):
        params = net.init_model(TINY, seed=0)
        mesh = bumpy_sphere(1)
        ops = build_operators(mesh, k=12)
        g0 = net.global_encode(mesh, ops, params)
        rng = np.random.default_rng(5)
        perm = rng.permutation(mesh.n_vertices)
        inv = np.argsort(perm)
        mesh_p = TriMesh(mesh.vertices[perm], inv[mesh.faces])
        # operators permuted consistently: isolates pooling symmetry from
        # eigensolver round-off
        ops_p = SurfaceOperators(
            L=ops.L[perm][:, perm].tocsr(),
            M=ops.M[perm],
            basis=Eigenbasis(evals=ops.basis.evals, evecs=ops.basis.evecs[perm]),
            mean_edge=ops.mean_edge,
        )
        g0_p = net.global_encode(mesh_p, ops_p, params)
        np.testing.assert_allclose(g0_p.data, g0.data, atol=1e-9)


class TestForward:
    def test_zero_head_predicts_neutral(self):
        params = net.init_model(TINY, seed=0)
        mesh = head_with_eyes()
        ops = build_operators(mesh, k=TINY.k_eigen)
        d = net.forward(mesh, ops, net.FacsVector.zeros(3), params)
        assert (d.data == 0.0).all()

    def test_conditioning_nondegenerate(self):
        params = net.init_model(TINY, seed=0)
        rng = np.random.default_rng(0)
        params.arrays["head.w"][:] = rng.standard_normal((TINY.width, 3)) * 0.1
        mesh = bumpy_sphere(1)
        ops = build_operators(mesh, k=TINY.k_eigen)
        d0 = net.forward(mesh, ops, net.FacsVector.onehot(0, 3), params)
        d1 = net.forward(mesh, ops, net.FacsVector.onehot(1, 3), params)
        assert np.abs(d0.data - d1.data).max() > 1e-8

    def test_vertex_permutation_equivariance(self):
        params = net.init_model(TINY, seed=0)
        rng = np.random.default_rng(0)
        params.arrays["head.w"][:] = rng.standard_normal((TINY.width, 3)) * 0.1
        mesh = bumpy_sphere(1)
        ops = build_operators(mesh, k=12)
        facs = net.FacsVector(np.array([1.0, 0.0, 0.5]))
        d = net.forward(mesh, ops, facs, params)
        perm = rng.permutation(mesh.n_vertices)
        inv = np.argsort(perm)
        mesh_p = TriMesh(mesh.vertices[perm], inv[mesh.faces])
        ops_p = SurfaceOperators(
            L=ops.L[perm][:, perm].tocsr(),
            M=ops.M[perm],
            basis=Eigenbasis(evals=ops.basis.evals, evecs=ops.basis.evecs[perm]),
            mean_edge=ops.mean_edge,
        )
        d_p = net.forward(mesh_p, ops_p, facs, params)
        np.testing.assert_allclose(d_p.data, d.data[perm], atol=1e-9)

    def test_operator_mismatch(self):
        params = net.init_model(TINY, seed=0)
        mesh = bumpy_sphere(1)
        other = icosphere(2)
        ops = build_operators(other, k=8)
        with pytest.raises(OperatorMismatch):
            net.forward(mesh, ops, net.FacsVector.zeros(3), params)

    def test_wrong_facs_dim(self):
        params = net.init_model(TINY, seed=0)
        mesh = bumpy_sphere(1)
        ops = build_operators(mesh, k=8)
        with pytest.raises(ShapeMismatch):
            net.forward(mesh, ops, net.FacsVector.zeros(7), params)

    def test_ablation_config_drops_global_encoder(self):
        cfg = net.ModelConfig(
            width=8, blocks=2, global_width=4, global_feature=6, facs_dim=3,
            use_global_encoder=False,
        )
        params = net.init_model(cfg, seed=0)
        assert not any(k.startswith("genc.") for k in params.arrays)
        mesh = bumpy_sphere(1)
        ops = build_operators(mesh, k=8)
        d = net.forward(mesh, ops, net.FacsVector.zeros(3), params)
        assert d.shape == (mesh.n_vertices, 3)


class TestConditionalBlock:
    def test_identity_fusion_reduces_to_unconditioned_block(self):
        # fusion hidden 2w can represent the exact identity on the feature
        # half of the concat input: h = relu(h) - relu(-h)
        w = 6
        cfg = net.ModelConfig(
            width=w, blocks=1, global_width=4, global_feature=4, facs_dim=2,
            fusion_hidden=2 * w,
        )
        params = net.init_model(cfg, seed=0)
        gl = cfg.latent_dim
        w1 = np.zeros((w + gl, 2 * w))
        w1[:w, :w] = np.eye(w)
        w1[:w, w:] = -np.eye(w)
        w2 = np.vstack([np.eye(w), -np.eye(w)])
        params.arrays["block0.fusion.w1"][:] = w1
        params.arrays["block0.fusion.b1"][:] = 0.0
        params.arrays["block0.fusion.w2"][:] = w2
        params.arrays["block0.fusion.b2"][:] = 0.0

        mesh = bumpy_sphere(1)
        ops = build_operators(mesh, k=10)
        rng = np.random.default_rng(1)
        feats = rng.standard_normal((mesh.n_vertices, w))
        t = params.tensors()
        latent = ad.Tensor(np.zeros((1, gl)))
        out = net.conditional_block(ad.Tensor(feats), latent, ops, t, "block0")

        # reference unconditioned block: x + mlp(diffuse(x))
        from rigforge.operators import softplus, spectral_diffuse

        times = softplus(params.arrays["block0.time_raw"])
        h = spectral_diffuse(feats, times, ops.basis, ops.M)
        h = np.maximum(h @ params.arrays["block0.mlp.w1"] + params.arrays["block0.mlp.b1"], 0)
        h = h @ params.arrays["block0.mlp.w2"] + params.arrays["block0.mlp.b2"]
        np.testing.assert_allclose(out.data, feats + h, atol=1e-9)

    def test_constant_features_fixed_under_long_diffusion(self):
        w = 4
        cfg = net.ModelConfig(
            width=w, blocks=1, global_width=4, global_feature=4, facs_dim=2
        )
        params = net.init_model(cfg, seed=0)
        params.arrays["block0.time_raw"][:] = 50.0  # effective t ~ 50
        mesh = head_with_eyes()
        ops = build_operators(mesh, k=16)
        # constant per component stays fixed under diffusion
        labels = mesh.component_id
        feats = np.stack([(labels == c % 3).astype(float) for c in range(w)], axis=1)
        from rigforge.operators import softplus, spectral_diffuse

        times = softplus(params.arrays["block0.time_raw"])
        diffused = spectral_diffuse(feats, times, ops.basis, ops.M)
        np.testing.assert_allclose(diffused, feats, atol=1e-6)
        # so the block output is just the MLP cascade on those features
        t = params.tensors()
        latent = ad.Tensor(np.zeros((1, cfg.latent_dim)))
        out = net.conditional_block(ad.Tensor(feats), latent, ops, t, "block0")
        h = np.maximum(feats @ params.arrays["block0.mlp.w1"] + params.arrays["block0.mlp.b1"], 0)
        h = h @ params.arrays["block0.mlp.w2"] + params.arrays["block0.mlp.b2"]
        z = np.concatenate([h, np.zeros((len(feats), cfg.latent_dim))], axis=1)
        u = np.maximum(z @ params.arrays["block0.fusion.w1"] + params.arrays["block0.fusion.b1"], 0)
        u = u @ params.arrays["block0.fusion.w2"] + params.arrays["block0.fusion.b2"]
        np.testing.assert_allclose(out.data, feats + u, atol=1e-5)


class TestGradientFlow:
    @pytest.mark.parametrize(
        "name", ["embed.w", "block0.fusion.w1", "block1.time_raw", "genc.proj.w", "head.w"]
    )
    def test_forward_gradients_match_finite_differences(self, name):
        params = net.init_model(TINY, seed=0)
        rng = np.random.default_rng(2)
        params.arrays["head.w"][:] = rng.standard_normal((TINY.width, 3)) * 0.05
        mesh = bumpy_sphere(0)  # 12 vertices
        ops = build_operators(mesh, k=8)
        facs = net.FacsVector(np.array([1.0, 0.0, 0.3]))
        probe = rng.standard_normal((mesh.n_vertices, 3))

        def f(x):
            t = {k: ad.Tensor(v) for k, v in params.arrays.items()}
            t[name] = x
            out = net.forward(mesh, ops, facs, params, tensors=t)
            return ad.sum_(ad.mul(out, probe))

        x = ad.Tensor(params.arrays[name].copy(), requires_grad=True)
        assert ad.grad_check(f, x, h=1e-6) < 1e-6
