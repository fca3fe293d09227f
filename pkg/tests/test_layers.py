import numpy as np
import pytest

import capslab.autodiff as ad
import capslab.layers as ly
from capslab.autodiff import Tensor
from capslab.errors import ShapeError

from gradcheck import check_gradients, rand_tensor


class TestInit:
    def test_bias_zero_after_init(self, rng):
        _, bias = ly.init_conv(rng, 8, 3, 5)
        np.testing.assert_array_equal(bias.data, 0.0)
        _, fb = ly.init_fc(rng, 10, 4)
        np.testing.assert_array_equal(fb.data, 0.0)

    def test_same_seed_bitwise_identical(self):
        a, ab = ly.init_conv(np.random.default_rng(7), 4, 2, 3)
        b, bb = ly.init_conv(np.random.default_rng(7), 4, 2, 3)
        assert a.data.tobytes() == b.data.tobytes()
        assert ab.data.tobytes() == bb.data.tobytes()

    def test_empirical_variance(self, rng):
        fan_in, fan_out = 40, 85
        draws = ly.glorot_uniform(rng, (100_000,), fan_in, fan_out, dtype=np.float64)
        expected = 2.0 / (fan_in + fan_out)
        assert abs(draws.var() - expected) / expected < 0.10

    def test_transform_matrices_use_stated_fans(self, rng):
        w = ly.init_transform(np.random.default_rng(0), 50, 8, 160, dtype=np.float64)
        limit = np.sqrt(6.0 / (8 + 160))
        assert w.data.shape == (50, 8, 160)
        assert np.abs(w.data).max() <= limit


class TestGlobalAvgPool:
    def test_constant_map(self):
        x = Tensor(np.full((2, 3, 4, 4), 1.7, dtype=np.float32))
        np.testing.assert_allclose(ly.global_avg_pool(x).data, 1.7, rtol=1e-6)

    def test_one_hot_spatial(self):
        x = np.zeros((1, 1, 2, 2), dtype=np.float32)
        x[0, 0, 1, 0] = 1.0
        assert ly.global_avg_pool(Tensor(x)).data[0, 0] == 0.25

    def test_matches_reduce_mean(self, rng):
        x = Tensor(rng.standard_normal((3, 5, 6, 7)))
        got = ly.global_avg_pool(x).data
        np.testing.assert_array_equal(got, x.data.mean(axis=(2, 3)))

    def test_gradcheck(self, rng):
        x = rand_tensor(rng, (2, 3, 4, 4))
        check_gradients(lambda x: ad.reduce_sum(ad.square(ly.global_avg_pool(x))), [x])


class TestFcForward:
    def test_gradcheck(self, rng):
        x = rand_tensor(rng, (4, 3))
        w = rand_tensor(rng, (3, 5))
        b = rand_tensor(rng, (5,))
        check_gradients(lambda x, w, b: ad.reduce_sum(ad.square(ly.fc_forward(x, w, b))), [x, w, b])


def scalar_adam_oracle(p0, grads, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    """Element-independent reference Adam trajectory."""
    p = np.array(p0, dtype=np.float64, copy=True)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


class TestAdam:
    def _params(self, values):
        return {"p": Tensor(np.array(values, dtype=np.float64), requires_grad=True)}

    def test_zero_gradient_leaves_params(self):
        params = self._params([1.0, -2.0])
        state = ly.adam_init(params)
        before = params["p"].data.copy()
        ly.adam_step(params, state, grads={"p": np.zeros(2)})
        np.testing.assert_array_equal(params["p"].data, before)
        assert state.t == 1

    def test_first_step_magnitude_is_lr(self, rng):
        g = rng.uniform(-1, 1, 50)
        g[np.abs(g) < 1e-3] = 5e-3
        params = self._params(np.zeros(50))
        state = ly.adam_init(params)
        ly.adam_step(params, state, grads={"p": g})
        delta = params["p"].data  # started from zero
        np.testing.assert_allclose(np.abs(delta), state.lr, rtol=1e-3)
        np.testing.assert_array_equal(np.sign(delta), -np.sign(g))

    def test_three_step_trajectory_matches_oracle_exactly(self, rng):
        grads = [rng.uniform(-2, 2, 7) for _ in range(3)]
        p0 = rng.uniform(-1, 1, 7)
        params = self._params(p0)
        state = ly.adam_init(params)
        for g in grads:
            ly.adam_step(params, state, grads={"p": g})
        np.testing.assert_array_equal(params["p"].data, scalar_adam_oracle(p0, grads))

    def test_scale_consistency_at_step_one(self, rng):
        g = rng.uniform(0.1, 1.0, 20)
        upd = []
        for scale in (1.0, 1000.0):
            params = self._params(np.zeros(20))
            state = ly.adam_init(params)
            ly.adam_step(params, state, grads={"p": g * scale})
            upd.append(params["p"].data.copy())
        np.testing.assert_allclose(upd[0], upd[1], rtol=1e-3)

    def test_quadratic_loss_decreases_over_100_steps(self, rng):
        target = rng.uniform(-1, 1, 10)
        params = self._params(rng.uniform(-1, 1, 10))
        state = ly.adam_init(params)

        def loss():
            return float(np.sum((params["p"].data - target) ** 2))

        initial = loss()
        for _ in range(100):
            g = 2 * (params["p"].data - target)
            ly.adam_step(params, state, grads={"p": g})
        assert loss() < initial

    def test_shape_mismatch(self):
        params = self._params([1.0])
        state = ly.adam_init(params)
        with pytest.raises(ShapeError):
            ly.adam_step(params, state, grads={"p": np.zeros(3)})

    def test_grads_default_to_tensor_grad(self):
        params = self._params([2.0])
        state = ly.adam_init(params)
        loss = ad.reduce_sum(ad.square(params["p"]))
        loss.backward()
        ly.adam_step(params, state)
        expected = scalar_adam_oracle([2.0], [np.array([4.0])])
        np.testing.assert_array_equal(params["p"].data, expected)
