import numpy as np
import pytest

from rigforge import autodiff as ad
from rigforge.errors import NonScalarRoot, ShapeMismatch
from rigforge.mesh import icosphere
from rigforge.operators import build_operators


def scalarize(t):
    return ad.sum_(t)


class TestPrimitiveGradients:
    """Every primitive against central differences at random inputs."""

    CASES = {
        "add": lambda x: ad.sum_(ad.mul(ad.add(x, 0.7), ad.add(x, -1.2))),
        "sub": lambda x: ad.sum_(ad.mul(ad.sub(x, 1.7), ad.sub(x, 0.2))),
        "mul": lambda x: ad.sum_(ad.mul(x, x)),
        "div": lambda x: ad.sum_(ad.div(1.0, ad.add(ad.mul(x, x), 1.5))),
        "transpose": lambda x: ad.sum_(ad.mul(ad.transpose(x), 3.0)),
        "concat": lambda x: ad.sum_(ad.mul(ad.concat([x, x], axis=1), 0.5)),
        "slice": lambda x: ad.sum_(ad.mul(x[1:, :2], x[:-1, 1:])),
        "broadcast": lambda x: ad.sum_(ad.mul(ad.broadcast_to(x[:1], x.shape), x)),
        "sum_axis": lambda x: ad.sum_(ad.mul(ad.sum_(x, axis=0), 2.0)),
        "mean": lambda x: ad.mean(ad.mul(x, x)),
        "relu": lambda x: ad.sum_(ad.relu(x)),
        "sigmoid": lambda x: ad.sum_(ad.sigmoid(x)),
        "softplus": lambda x: ad.sum_(ad.softplus(x)),
        "exp": lambda x: ad.sum_(ad.exp(ad.mul(x, 0.3))),
        "abs": lambda x: ad.sum_(ad.abs_(x)),
        "sqrt": lambda x: ad.sum_(ad.sqrt(ad.add(ad.mul(x, x), 1.0))),
        "clamp": lambda x: ad.sum_(ad.clamp(x, -0.9, 0.9)),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_primitive(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        x = ad.Tensor(rng.standard_normal((4, 3)) * 1.3, requires_grad=True)
        # keep clear of each op's nondifferentiable points
        if name in ("relu", "abs", "clamp"):
            x.data[np.abs(np.abs(x.data) - 0.9) < 0.05] += 0.2
            x.data[np.abs(x.data) < 0.05] += 0.3
        err = ad.grad_check(self.CASES[name], x)
        assert err < 1e-6, f"{name}: rel err {err}"

    def test_matmul_against_finite_differences(self):
        rng = np.random.default_rng(0)
        B = rng.standard_normal((3, 2))

        def f(x):
            return ad.sum_(ad.matmul(x, B))

        x = ad.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        assert ad.grad_check(f, x, h=1e-5) < 1e-6

    def test_gather_scatter(self):
        rng = np.random.default_rng(1)
        idx = np.array([0, 2, 2, 1])

        def f(x):
            g = ad.gather_rows(x, idx)
            s = ad.scatter_add_rows(ad.mul(g, g), np.array([1, 0, 0, 1]), 2)
            return ad.sum_(s)

        x = ad.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        assert ad.grad_check(f, x) < 1e-6

    def test_relu_subgradient_zero_at_zero(self):
        x = ad.Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.relu(x))
            ad.backward(tape, y)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_abs_subgradient_zero_at_zero(self):
        x = ad.Tensor(np.array([0.0, -2.0, 3.0]), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_(ad.abs_(x))
            ad.backward(tape, y)
        np.testing.assert_array_equal(x.grad, [0.0, -1.0, 1.0])

    def test_sum_seed_ones(self):
        x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with ad.Tape() as tape:
            ad.backward(tape, ad.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_spectral_diffuse_wrt_features_and_time(self):
        mesh = icosphere(1)
        ops = build_operators(mesh, k=16)
        rng = np.random.default_rng(2)
        u0 = rng.standard_normal((mesh.n_vertices, 2))

        def f_u(x):
            return ad.sum_(
                ad.mul(
                    ad.spectral_diffuse_node(x, ad.Tensor([0.3, 0.05]), ops.basis, ops.M),
                    u0[:, ::-1].copy(),
                )
            )

        x = ad.Tensor(u0.copy(), requires_grad=True)
        assert ad.grad_check(f_u, x) < 1e-6

        def f_t(t):
            return ad.sum_(
                ad.mul(ad.spectral_diffuse_node(u0, t, ops.basis, ops.M), u0)
            )

        t = ad.Tensor(np.array([0.2, 0.8]), requires_grad=True)
        assert ad.grad_check(f_t, t) < 1e-6


class TestBackward:
    def test_square(self):
        x = ad.Tensor(3.0, requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            ad.backward(tape, y)
        assert x.grad == pytest.approx(6.0)

    def test_diamond_fanout(self):
        x = ad.Tensor(5.0, requires_grad=True)
        with ad.Tape() as tape:
            y = ad.add(x, x)
            ad.backward(tape, y)
        assert x.grad == pytest.approx(2.0)

    def test_nonscalar_root_rejected(self):
        x = ad.Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
            with pytest.raises(NonScalarRoot):
                ad.backward(tape, y)

    def test_tape_consumed(self):
        x = ad.Tensor(2.0, requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            ad.backward(tape, y)
        with pytest.raises(RuntimeError):
            ad.backward(tape, y)

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((8, 8))

        def run():
            x = ad.Tensor(a.copy(), requires_grad=True)
            with ad.Tape() as tape:
                y = ad.matmul(x, ad.transpose(x))
                z = ad.sum_(ad.sigmoid(y))
                ad.backward(tape, z)
            return x.grad

        g1, g2 = run(), run()
        np.testing.assert_array_equal(g1, g2)

    def test_unused_input_gets_no_gradient(self):
        x = ad.Tensor(1.0, requires_grad=True)
        unused = ad.Tensor(2.0, requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
            ad.backward(tape, y)
        assert unused.grad is None

    def test_accumulation_across_backwards_until_zero_grad(self):
        x = ad.Tensor(2.0, requires_grad=True)
        for _ in range(2):
            with ad.Tape() as tape:
                y = ad.mul(x, x)
                ad.backward(tape, y)
        assert x.grad == pytest.approx(8.0)
        x.zero_grad()
        assert x.grad is None

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


class TestGradCheckHarness:
    def test_quadratic_form(self):
        rng = np.random.default_rng(4)
        A = rng.standard_normal((5, 5))
        A = A + A.T

        def f(x):
            return ad.sum_(ad.mul(x, ad.matmul(ad.matmul(x, A), ad.transpose(x))))

        x = ad.Tensor(rng.standard_normal((1, 5)), requires_grad=True)
        assert ad.grad_check(f, x) < 1e-9


class TestAdam:
    def test_single_step_descends(self):
        params = {"x": np.array([1.0])}
        grads = {"x": np.array([2.0])}  # grad of x^2 at 1
        state = ad.adam_init(params)
        ad.adam_step(params, grads, state, lr=0.1)
        assert params["x"][0] < 1.0

    def test_zero_grad_fresh_state_keeps_params(self):
        params = {"x": np.array([1.0, -2.0])}
        state = ad.adam_init(params)
        ad.adam_step(params, {"x": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["x"], [1.0, -2.0])
        assert state["t"] == 1

    def test_rosenbrock_convergence(self):
        params = {"p": np.array([-1.2, 1.0])}
        state = ad.adam_init(params)
        for _ in range(20000):
            x, y = params["p"]
            grads = {
                "p": np.array(
                    [-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)]
                )
            }
            ad.adam_step(params, grads, state, lr=2e-3)
        assert np.linalg.norm(params["p"] - np.array([1.0, 1.0])) < 1e-3


class TestCheckpoint:
    def test_roundtrip_with_adam(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}
        state = ad.adam_init(params)
        ad.adam_step(params, {k: rng.standard_normal(v.shape) for k, v in params.items()}, state, lr=1e-3)
        p = tmp_path / "ck.rfck"
        ad.save_checkpoint(p, params, meta={"cfg": {"w": 3}}, adam_state=state)
        params2, meta, state2 = ad.load_checkpoint(p)
        assert meta == {"cfg": {"w": 3}}
        for k in params:
            np.testing.assert_array_equal(params2[k], params[k])
            np.testing.assert_array_equal(state2["m"][k], state["m"][k])
            np.testing.assert_array_equal(state2["v"][k], state["v"][k])
        assert state2["t"] == state["t"]

    def test_roundtrip_without_adam(self, tmp_path):
        params = {"w": np.eye(3)}
        p = tmp_path / "ck.rfck"
        ad.save_checkpoint(p, params)
        params2, meta, state2 = ad.load_checkpoint(p)
        np.testing.assert_array_equal(params2["w"], np.eye(3))
        assert state2 is None

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.rfck"
        p.write_bytes(b"NOPE" + b"\0" * 32)
        from rigforge.errors import ChecksumMismatch

        with pytest.raises(ChecksumMismatch):
            ad.load_checkpoint(p)


class TestDebugMode:
    def test_nonfinite_detection(self):
        ad.set_debug_nonfinite(True)
        try:
            from rigforge.errors import NonFiniteValue

            with pytest.raises(NonFiniteValue):
                with ad.Tape():
                    x = ad.Tensor(np.array([1.0]), requires_grad=True)
                    ad.div(x, 0.0)
        finally:
            ad.set_debug_nonfinite(False)
