import numpy as np
import pytest

import capslab.autodiff as ad
import capslab.capsules as cp
from capslab.autodiff import Tensor
from capslab.errors import ShapeError

from gradcheck import check_gradients, rand_tensor


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def routing_oracle(votes, iterations, b_init=None):
    """Straight-line unrolled routing in plain numpy.

    The two index contractions are spelled with einsum exactly as the
    summation notation reads, and scalar-factor groupings mirror the
    library's evaluation order, so the float64 comparison can demand
    bitwise equality while keeping the iteration structure independent.
    """
    votes = np.asarray(votes, dtype=np.float64)
    bsz, m, n, d = votes.shape
    if b_init is None:
        b_init = np.zeros((bsz, m, n))
    agr = np.zeros((bsz, m, n))
    for t in range(1, iterations + 1):
        logits = b_init + agr
        e = np.exp(logits - logits.max(axis=2, keepdims=True))
        c = e / e.sum(axis=2, keepdims=True)
        s = np.einsum("bmn,bmnd->bnd", c, votes)
        n2 = (s * s).sum(axis=-1, keepdims=True)
        norm = np.sqrt(n2)
        denom = np.where(norm > 0, norm, 1.0)
        v = s * (n2 / (1.0 + n2) / denom)
        agr = agr + np.einsum("bnd,bmnd->bmn", v, votes)
    return v, c, agr


class TestSquash:
    def test_zero_maps_to_zero(self):
        out = cp.squash(Tensor(np.zeros((2, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_unit_vector_halves(self):
        s = np.array([[0.0, 1.0, 0.0]])
        out = cp.squash(t64(s)).data
        np.testing.assert_allclose(np.linalg.norm(out), 0.5, rtol=1e-12)
        np.testing.assert_allclose(out / np.linalg.norm(out), s, rtol=1e-12)

    def test_norm_three_gives_point_nine(self):
        s = np.array([[3.0, 0.0]])
        out = cp.squash(t64(s)).data
        np.testing.assert_allclose(np.linalg.norm(out), 0.9, rtol=1e-12)
        assert out[0, 0] > 0 and out[0, 1] == 0

    def test_invariants_on_random_vectors(self, rng):
        # length below 1, monotone in input length, direction preserved
        s = rng.uniform(-3, 3, (10_000, 8))
        out = cp.squash(t64(s)).data
        lens_in = np.linalg.norm(s, axis=-1)
        lens_out = np.linalg.norm(out, axis=-1)
        assert np.all(lens_out < 1.0)
        order = np.argsort(lens_in)
        assert np.all(np.diff(lens_out[order]) >= -1e-12)
        nz = lens_in > 1e-9
        cos = np.sum(out[nz] * s[nz], axis=-1) / (lens_out[nz] * lens_in[nz])
        np.testing.assert_allclose(cos, 1.0, atol=1e-10)

    def test_scaling_preserves_direction(self, rng):
        s = rng.uniform(-1, 1, (100, 5))
        s = s[np.linalg.norm(s, axis=-1) > 0.1]
        for alpha in (0.5, 2.0, 7.0):
            a = cp.squash(t64(alpha * s)).data
            b = cp.squash(t64(s)).data
            na = a / np.linalg.norm(a, axis=-1, keepdims=True)
            nb = b / np.linalg.norm(b, axis=-1, keepdims=True)
            np.testing.assert_allclose(na, nb, atol=1e-10)

    def test_gradcheck(self, rng):
        x = rand_tensor(rng, (3, 4, 5))
        x.data += np.sign(x.data) * 0.2
        w = np.arange(60, dtype=np.float64).reshape(3, 4, 5)
        check_gradients(lambda x: ad.reduce_sum(ad.mul(cp.squash(x), w)), [x])


class TestPrimaryCapsules:
    def test_round_trip_is_lossless(self, rng):
        fmaps = rng.standard_normal((2, 16, 3, 4))
        caps = cp.primary_capsules(Tensor(fmaps, dtype=np.float64), 8)
        assert caps.data.shape == (2, 2 * 3 * 4, 8)
        back = (
            caps.data.reshape(2, 2, 3, 4, 8).transpose(0, 1, 4, 2, 3).reshape(2, 16, 3, 4)
        )
        np.testing.assert_array_equal(back, fmaps)

    def test_channel_grouping(self):
        fmaps = np.zeros((1, 16, 2, 2))
        fmaps[0, 8:, 1, 1] = np.arange(8)  # second channel group, last location
        caps = cp.primary_capsules(Tensor(fmaps, dtype=np.float64), 8).data
        np.testing.assert_array_equal(caps[0, -1], np.arange(8))

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ShapeError):
            cp.primary_capsules(Tensor(np.zeros((1, 12, 2, 2))), 8)


class TestTransformVotes:
    def test_identity_matrices_replicate_poses(self, rng):
        # D_in == N * D_out, identity transform: votes replicate pose entries
        poses = t64(rng.uniform(-1, 1, (2, 3, 4)))
        w = t64(np.broadcast_to(np.eye(4), (3, 4, 4)).copy())
        votes = cp.transform_votes(poses, w, num_classes=2, d_out=2)
        np.testing.assert_array_equal(votes.data, poses.data.reshape(2, 3, 2, 2))

    def test_zero_poses_zero_votes(self, rng):
        poses = t64(np.zeros((1, 5, 8)))
        w = t64(rng.standard_normal((5, 8, 20)))
        votes = cp.transform_votes(poses, w, num_classes=10, d_out=2)
        np.testing.assert_array_equal(votes.data, 0.0)

    def test_non_shared_matches_per_capsule_loop(self, rng):
        b, m, d_in, n, d_out = 3, 4, 8, 5, 2
        poses = t64(rng.uniform(-1, 1, (b, m, d_in)))
        w = t64(rng.uniform(-1, 1, (m, d_in, n * d_out)))
        votes = cp.transform_votes(poses, w, n, d_out).data
        for i in range(m):
            expected = (poses.data[:, i, :] @ w.data[i]).reshape(b, n, d_out)
            np.testing.assert_allclose(votes[:, i], expected, rtol=1e-12)

    def test_shared_applies_single_matrix_everywhere(self, rng):
        b, m, d_in, n, d_out = 2, 6, 4, 3, 2
        poses = t64(rng.uniform(-1, 1, (b, m, d_in)))
        w = t64(rng.uniform(-1, 1, (1, d_in, n * d_out)))
        votes = cp.transform_votes(poses, w, n, d_out).data
        for i in range(m):
            expected = (poses.data[:, i, :] @ w.data[0]).reshape(b, n, d_out)
            np.testing.assert_allclose(votes[:, i], expected, rtol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            cp.transform_votes(t64(np.zeros((1, 2, 8))), t64(np.zeros((2, 8, 21))), 10, 2)

    @pytest.mark.parametrize("shared", [False, True])
    def test_gradcheck(self, rng, shared):
        b, m, d_in, n, d_out = 2, 3, 4, 2, 2
        poses = rand_tensor(rng, (b, m, d_in))
        w = rand_tensor(rng, (1 if shared else m, d_in, n * d_out))
        check_gradients(
            lambda p, w: ad.reduce_sum(ad.square(cp.transform_votes(p, w, n, d_out))),
            [poses, w],
        )


class TestDynamicRouting:
    def test_identical_votes_keep_uniform_coupling(self, rng):
        vote = rng.uniform(-1, 1, 3)
        votes = t64(np.broadcast_to(vote, (2, 5, 4, 3)).copy())
        for iterations in (1, 2, 4):
            caps, state = cp.dynamic_routing(votes, iterations)
            np.testing.assert_allclose(state.c, 0.25, atol=1e-12)
            expected = routing_oracle(votes.data, 1)[0]
            np.testing.assert_allclose(caps.v.data, expected, atol=1e-12)

    def test_single_iteration_uniform_coefficients(self, rng):
        votes = t64(rng.uniform(-1, 1, (2, 3, 4, 2)))
        caps, state = cp.dynamic_routing(votes, 1)
        np.testing.assert_allclose(state.c, 1.0 / 4.0, atol=1e-15)
        s = votes.data.sum(axis=1) / 4.0
        n2 = (s * s).sum(-1, keepdims=True)
        expected = s * (n2 / (1 + n2) / np.sqrt(n2))
        np.testing.assert_allclose(caps.v.data, expected, rtol=1e-12)

    def test_matches_transcription_oracle_exactly(self, rng):
        votes = t64(rng.uniform(-1, 1, (2, 2, 2, 2)))
        caps, state = cp.dynamic_routing(votes, 3)
        v, c, agr = routing_oracle(votes.data, 3)
        np.testing.assert_array_equal(caps.v.data, v)
        np.testing.assert_array_equal(state.c, c)
        np.testing.assert_array_equal(state.agreement_sum, agr)
        np.testing.assert_array_equal(state.b, agr)  # zero prior

    def test_oracle_sweep_small_shapes(self, rng):
        for m in range(1, 5):
            for n in range(1, 5):
                for d in range(1, 5):
                    votes = t64(rng.uniform(-1, 1, (2, m, n, d)))
                    for iterations in range(1, 6):
                        caps, _ = cp.dynamic_routing(votes, iterations)
                        v, _, _ = routing_oracle(votes.data, iterations)
                        np.testing.assert_array_equal(caps.v.data, v)

    def test_nonzero_prior_enters_softmax(self, rng):
        votes = t64(rng.uniform(-1, 1, (1, 3, 2, 2)))
        prior = rng.uniform(-1, 1, (1, 3, 2))
        caps, _ = cp.dynamic_routing(votes, 2, b_init=prior)
        v, _, _ = routing_oracle(votes.data, 2, b_init=prior)
        np.testing.assert_array_equal(caps.v.data, v)

    def test_coupling_simplex_every_iteration(self, rng):
        votes = t64(rng.uniform(-2, 2, (3, 6, 5, 4)))
        for iterations in range(1, 5):
            _, state = cp.dynamic_routing(votes, iterations)
            assert np.all(state.c >= 0)
            np.testing.assert_allclose(state.c.sum(axis=2), 1.0, atol=1e-6)

    def test_iterations_below_one_rejected(self, rng):
        with pytest.raises(ValueError):
            cp.dynamic_routing(t64(np.zeros((1, 2, 2, 2))), 0)

    def test_gradients_flow_through_coefficients(self, rng):
        votes = rand_tensor(rng, (1, 3, 2, 2))
        check_gradients(
            lambda v: ad.reduce_sum(ad.square(cp.dynamic_routing(v, 3)[0].v)), [votes]
        )

    def test_detach_coefficients_changes_gradient(self, rng):
        votes = rand_tensor(rng, (1, 3, 2, 2))

        def grad_of(detach):
            votes.zero_grad()
            caps, _ = cp.dynamic_routing(votes, 3, detach_coefficients=detach)
            ad.reduce_sum(ad.square(caps.v)).backward()
            return votes.grad.copy()

        full = grad_of(False)
        detached = grad_of(True)
        assert not np.allclose(full, detached)

    def test_squash_disabled(self, rng):
        votes = t64(rng.uniform(-1, 1, (1, 3, 2, 2)))
        caps, _ = cp.dynamic_routing(votes, 1, squash_output=False)
        np.testing.assert_allclose(caps.v.data, votes.data.mean(axis=1) * 3 / 2, rtol=1e-12)


class TestNoRouting:
    def test_identical_votes(self, rng):
        vote = rng.uniform(-1, 1, 4)
        votes = t64(np.broadcast_to(vote, (1, 7, 3, 4)).copy())
        caps = cp.no_routing_average(votes)
        n2 = (vote**2).sum()
        expected = vote * (n2 / (1 + n2) / np.sqrt(n2))
        np.testing.assert_allclose(caps.v.data, np.broadcast_to(expected, (1, 3, 4)), rtol=1e-10)

    def test_zero_votes(self):
        caps = cp.no_routing_average(t64(np.zeros((2, 3, 4, 5))))
        np.testing.assert_array_equal(caps.v.data, 0.0)

    def test_argmax_matches_single_iteration_routing(self, rng):
        for _ in range(20):
            votes = t64(rng.uniform(-1, 1, (4, 6, 5, 3)))
            nor = cp.no_routing_average(votes)
            dr, _ = cp.dynamic_routing(votes, 1)
            np.testing.assert_array_equal(
                nor.lengths.data.argmax(axis=1), dr.lengths.data.argmax(axis=1)
            )

    def test_gradcheck(self, rng):
        votes = rand_tensor(rng, (2, 3, 2, 2))
        check_gradients(
            lambda v: ad.reduce_sum(ad.square(cp.no_routing_average(v).v)), [votes]
        )


class TestMarginLoss:
    def test_positive_at_target_length(self):
        lengths = t64([[0.9]])
        assert float(cp.margin_loss(lengths, np.array([[1.0]])).data) == 0.0

    def test_negative_at_floor(self):
        lengths = t64([[0.1]])
        assert float(cp.margin_loss(lengths, np.array([[0.0]])).data) == 0.0

    def test_quarter_penalty(self):
        lengths = t64([[0.4]])
        np.testing.assert_allclose(
            float(cp.margin_loss(lengths, np.array([[1.0]])).data), 0.25, rtol=1e-12
        )

    def test_multi_hot_targets(self, rng):
        lengths = t64(rng.uniform(0, 1, (4, 10)))
        targets = np.zeros((4, 10))
        targets[:, [2, 7]] = 1.0
        got = float(cp.margin_loss(lengths, targets).data)
        l = lengths.data
        per = targets * np.maximum(0, 0.9 - l) ** 2 + 0.5 * (1 - targets) * np.maximum(0, l - 0.1) ** 2
        np.testing.assert_allclose(got, per.sum(axis=1).mean(), rtol=1e-12)

    def test_gradcheck_away_from_hinges(self, rng):
        lengths = Tensor(rng.uniform(0.15, 0.85, (3, 5)), requires_grad=True, dtype=np.float64)
        targets = (rng.random((3, 5)) < 0.3).astype(np.float64)
        check_gradients(lambda l: cp.margin_loss(l, targets), [lengths])

    def test_invalid_margins_rejected(self):
        with pytest.raises(ValueError):
            cp.MarginLossParams(m_plus=0.1, m_minus=0.9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cp.margin_loss(t64(np.zeros((2, 3))), np.zeros((2, 4)))


class TestMaskCapsules:
    def test_non_target_groups_zeroed(self, rng):
        v = t64(rng.uniform(-1, 1, (3, 10, 16)))
        out = cp.mask_capsules(v, 4).data.reshape(3, 10, 16)
        np.testing.assert_array_equal(np.delete(out, 4, axis=1), 0.0)

    def test_zero_capsules_stay_zero(self):
        out = cp.mask_capsules(t64(np.zeros((2, 5, 4))), 1)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_round_trip_of_kept_group(self, rng):
        v = t64(rng.uniform(-1, 1, (2, 6, 8)))
        keep = np.array([5, 0])
        out = cp.mask_capsules(v, keep).data.reshape(2, 6, 8)
        for i, k in enumerate(keep):
            np.testing.assert_array_equal(out[i, k], v.data[i, k])

    def test_predicted_class_when_unspecified(self, rng):
        v_data = rng.uniform(-1, 1, (4, 5, 3))
        v = t64(v_data)
        out = cp.mask_capsules(v).data.reshape(4, 5, 3)
        predicted = np.linalg.norm(v_data, axis=-1).argmax(axis=1)
        for i, k in enumerate(predicted):
            np.testing.assert_array_equal(out[i, k], v_data[i, k])

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            cp.mask_capsules(t64(np.zeros((1, 5, 4))), 5)

    def test_gradient_blocked_on_masked_groups(self, rng):
        v = rand_tensor(rng, (2, 4, 3))
        out = cp.mask_capsules(v, 1)
        ad.reduce_sum(ad.square(out)).backward()
        grads = v.grad.reshape(2, 4, 3)
        np.testing.assert_array_equal(np.delete(grads, 1, axis=1), 0.0)
        assert np.any(grads[:, 1] != 0)
