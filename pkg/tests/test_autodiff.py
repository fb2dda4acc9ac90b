"""Tensor engine: forward semantics, taped backward, optimizer, checkpoints."""

import numpy as np
import pytest

from sonomotion import autodiff as ad
from sonomotion.autodiff import Tape, Tensor
from sonomotion.checkpoint import load_checkpoint, save_checkpoint
from sonomotion.errors import ContractError, NumericError, ShapeError
from sonomotion.gradcheck import (check_scalar_fn, numeric_gradient,
                                  run_primitive_suite)
from sonomotion.nn import Linear, Module
from sonomotion.optim import AdamW, OptimizerState, adamw_step


class TestForwardPrimitives:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((3, 3))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_allclose(out.data, m)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_softmax_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, np.full(3, 1 / 3))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        out = ad.softmax(Tensor(rng.standard_normal((20, 7)) * 5), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(20), atol=1e-9)
        assert np.all(out.data >= 0)

    def test_layer_norm_moments(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((50, 16)) * 3.0 + 2.0
        out = ad.layer_norm(Tensor(x))
        mu = out.data.mean(axis=1)
        var = out.data.var(axis=1)
        assert np.abs(mu).max() <= 1e-9
        assert np.abs(var - 1.0).max() < 1e-6

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NumericError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_concat_and_slice_roundtrip(self):
        rng = np.random.default_rng(3)
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
        cat = ad.concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(cat.data[:, :3], a)
        np.testing.assert_array_equal(cat[:, 3:].data, b)

    def test_embedding_lookup(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = ad.embedding(table, np.array([2, 0, 2]))
        np.testing.assert_array_equal(out.data[0], [6, 7, 8])
        np.testing.assert_array_equal(out.data[1], [0, 1, 2])


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(w)
            tape.backward(loss)
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_mse_scalar_analytic(self):
        c = 1.7
        w = Tensor(np.array(c), requires_grad=True)
        with Tape() as tape:
            loss = ad.mse(w, Tensor(np.array(0.0)))
            tape.backward(loss)
        np.testing.assert_allclose(w.grad, 2 * c)

    def test_two_layer_network_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 4))
        target = rng.standard_normal((5, 2))
        w1 = rng.standard_normal((4, 8)) * 0.5
        w2 = rng.standard_normal((8, 2)) * 0.5

        def net(w1_t, w2_t):
            h = ad.tanh_(ad.matmul(Tensor(x), w1_t))
            return ad.mse(ad.matmul(h, w2_t), Tensor(target))

        err = check_scalar_fn(net, [w1, w2])
        assert err < 1e-4

    def test_off_path_tensor_gets_zero_grad(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            _dead_end = ad.mul(unused, 2.0)   # on tape, not reaching the loss
            loss = ad.sum_(used)
            tape.backward(loss)
        np.testing.assert_array_equal(used.grad, np.ones(3))
        np.testing.assert_array_equal(unused.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = ad.mul(w, 2.0)
            with pytest.raises(ContractError):
                tape.backward(out)

    def test_backward_deterministic_bitwise(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((6, 6))

        def run():
            w = Tensor(x.copy(), requires_grad=True)
            with Tape() as tape:
                h = ad.softmax(ad.matmul(w, w), axis=-1)
                loss = ad.mean(ad.mul(h, h))
                tape.backward(loss)
            return w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_reused_tensor_accumulates(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_(ad.mul(w, w))   # d(w^2)/dw = 2w
            tape.backward(loss)
        np.testing.assert_allclose(w.grad, [6.0])


class TestGradcheckSuite:
    def test_every_primitive_passes(self):
        rows = run_primitive_suite(seed=0)
        failing = [r.name for r in rows if not r.passed]
        assert not failing, f"gradcheck failures: {failing}"

    def test_numeric_gradient_sane(self):
        x = np.array([2.0])
        g = numeric_gradient(lambda: float(x[0] ** 3), x)
        np.testing.assert_allclose(g, [12.0], rtol=1e-6)


class TestOptimizer:
    def test_zero_grad_zero_decay_no_change(self):
        p = Tensor(np.full(4, 1.5), requires_grad=True)
        p.grad = np.zeros(4)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, np.full(4, 1.5))

    def test_descends_quadratic(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([2.0])   # gradient of w^2 at w=1
        opt = AdamW([p], lr=0.1)
        opt.step()
        assert p.data[0] < 1.0

    def test_converges_on_convex_quadratic(self):
        rng = np.random.default_rng(5)
        target = rng.standard_normal(6)
        p = Tensor(np.zeros(6), requires_grad=True)
        opt = AdamW([p], lr=0.05)
        loss = None
        for _ in range(200):
            with Tape() as tape:
                loss = ad.mse(p, Tensor(target))
                tape.backward(loss)
            opt.step()
        assert loss.item() < 1e-6

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        state = OptimizerState(lr=0.1)
        with pytest.raises(ContractError):
            adamw_step([p], [np.ones(4)], state)

    def test_weight_decay_shrinks(self):
        p = Tensor(np.full(2, 2.0), requires_grad=True)
        p.grad = np.zeros(2)
        opt = AdamW([p], lr=0.1, weight_decay=0.5)
        opt.step()
        assert np.all(p.data < 2.0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        named = [("layer.w", rng.standard_normal((3, 4))),
                 ("layer.b", rng.standard_normal(4)),
                 ("scalar", np.array(2.5))]
        path = tmp_path / "model.snm"
        save_checkpoint(path, named)
        loaded = load_checkpoint(path)
        assert set(loaded) == {"layer.w", "layer.b", "scalar"}
        for name, arr in named:
            np.testing.assert_array_equal(loaded[name], arr)

    def test_little_endian_on_disk(self, tmp_path):
        path = tmp_path / "m.snm"
        save_checkpoint(path, [("x", np.array([1.0]))])
        blob = path.read_bytes()
        assert blob[:8] == b"SNMCKPT1"
        assert np.frombuffer(blob[-8:], dtype="<f8")[0] == 1.0

    def test_module_state_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)

        class Net(Module):
            def __init__(self):
                self.fc1 = Linear(4, 5, rng)
                self.fc2 = Linear(5, 2, rng)

        net = Net()
        path = tmp_path / "net.snm"
        save_checkpoint(path, net.named_parameters())
        net2 = Net()
        net2.load_state(load_checkpoint(path))
        for (_, a), (_, b) in zip(net.named_parameters(), net2.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)
