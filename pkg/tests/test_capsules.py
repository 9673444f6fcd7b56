"""Capsule primitives against scalar oracles and stated invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import cfccaps.tensor as T
from cfccaps.capsules import (
    CapsuleSet, HARD_MARGIN, MarginLossParams, NORMAL_MARGIN, capsule_dropout,
    capsule_lengths, dynamic_routing, margin_loss, predict_vectors, squash,
)
from oracles import check_gradients, routing_oracle, squash_scalar


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(0, scale, shape)


# -- squash -----------------------------------------------------------------


def test_squash_zero_maps_to_zero():
    out = squash(T.Tensor(np.zeros((3, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((3, 4)))


def test_squash_3_4_reference_values():
    # |s| = 5: scale 25/26, unit direction (0.6, 0.8)
    out = squash(T.Tensor(np.array([3.0, 4.0])))
    np.testing.assert_allclose(out.data, [25 / 26 * 0.6, 25 / 26 * 0.8], rtol=1e-10)
    assert np.linalg.norm(out.data) == pytest.approx(25 / 26, rel=1e-10)
    np.testing.assert_allclose(out.data, [0.5769, 0.7692], atol=5e-5)


def test_squash_long_vector_norm():
    s = np.zeros(8)
    s[0] = 100.0
    out = squash(T.Tensor(s))
    assert np.linalg.norm(out.data) == pytest.approx(10000 / 10001, rel=1e-9)


def test_squash_outputs_inside_unit_ball():
    vecs = rand((50, 6), 3, scale=20.0)
    norms = np.linalg.norm(squash(T.Tensor(vecs)).data, axis=-1)
    assert (norms < 1.0).all()


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_squash_is_norm_monotone(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 3.0, (2, 5))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    sa = np.linalg.norm(squash(T.Tensor(a)).data)
    sb = np.linalg.norm(squash(T.Tensor(b)).data)
    if na < nb:
        assert sa < sb
    elif nb < na:
        assert sb < sa


def test_squash_preserves_direction():
    v = np.array([1.0, -2.0, 0.5])
    out = squash(T.Tensor(v)).data
    cos = out @ v / (np.linalg.norm(out) * np.linalg.norm(v))
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_squash_matches_scalar_formula():
    vec = [0.3, -1.2, 2.0]
    out = squash(T.Tensor(np.array(vec))).data
    np.testing.assert_allclose(out, squash_scalar(vec), rtol=1e-14)


# -- lengths -----------------------------------------------------------------


def test_capsule_lengths_values():
    caps = CapsuleSet(T.Tensor(np.array([[0.0, 0.0], [3.0, 4.0]])))
    np.testing.assert_allclose(capsule_lengths(caps).data, [0.0, 5.0], atol=0)


def test_post_squash_lengths_below_one():
    caps = CapsuleSet(squash(T.Tensor(rand((10, 8), 2, scale=10.0))))
    assert (capsule_lengths(caps).data < 1.0).all()


# -- prediction vectors --------------------------------------------------------


def test_predict_vectors_identity_weights():
    u = rand((3, 4), 1)
    w = np.zeros((3, 2, 4, 4))
    w[:, :] = np.eye(4)
    out = predict_vectors(CapsuleSet(T.Tensor(u)), T.Tensor(w))
    for j in range(2):
        np.testing.assert_allclose(out.data[:, j, :], u, rtol=1e-14)


def test_predict_vectors_hand_matmul():
    u = np.array([[1.0, 1.0]])
    w = np.array([[[[2.0, 0.0], [0.0, 3.0]]]])  # [1, 1, 2, 2]
    out = predict_vectors(CapsuleSet(T.Tensor(u)), T.Tensor(w))
    np.testing.assert_allclose(out.data, [[[2.0, 3.0]]])


def test_routing_weight_tensor_size():
    # baseline CIFAR-10 routing block: 2048 x 10 x 16 x 8 entries
    assert 2048 * 10 * 16 * 8 == 2_621_440


def test_predict_vectors_shape_mismatch():
    with pytest.raises(ValueError):
        predict_vectors(CapsuleSet(T.Tensor(rand((3, 5), 1))), T.Tensor(rand((3, 2, 4, 4), 2)))


# -- dynamic routing -------------------------------------------------------------


def test_routing_single_class_sums_all_inputs():
    u_hat = rand((4, 1, 3), 1)
    for r in (1, 2, 3):
        out = dynamic_routing(T.Tensor(u_hat), r)
        expected = squash(T.Tensor(u_hat.sum(axis=0))).data  # [1, D]
        np.testing.assert_allclose(out.vectors.data, expected, rtol=1e-12)


def test_routing_single_input_uniform_first_pass():
    u_hat = rand((1, 2, 3), 2)
    out = dynamic_routing(T.Tensor(u_hat), 1)
    expected = squash(T.Tensor(0.5 * u_hat[0])).data
    np.testing.assert_allclose(out.vectors.data, expected, rtol=1e-12)


@pytest.mark.parametrize("n_in,n_out,d,r", [
    (2, 2, 2, 2), (3, 2, 3, 3), (1, 3, 2, 1), (3, 3, 3, 2), (2, 3, 1, 3),
])
def test_routing_matches_scalar_oracle(n_in, n_out, d, r):
    u_hat = rand((n_in, n_out, d), seed=n_in * 100 + n_out * 10 + r)
    got = dynamic_routing(T.Tensor(u_hat), r).vectors.data
    expected, _ = routing_oracle(u_hat.tolist(), r)
    np.testing.assert_allclose(got, np.array(expected), atol=1e-12, rtol=0)


def test_routing_rejects_zero_iterations():
    with pytest.raises(ValueError):
        dynamic_routing(T.Tensor(rand((2, 2, 2), 1)), 0)


def test_routing_coefficients_sum_to_one_every_iteration():
    u_hat = rand((2, 6, 5, 4), 4)
    _, state = dynamic_routing(T.Tensor(u_hat), 3, return_state=True)
    assert len(state.coefficient_history) == 3
    for c in state.coefficient_history:
        np.testing.assert_allclose(c.sum(axis=-1), np.ones(c.shape[:-1]), atol=1e-9)
    assert (state.coefficients >= 0).all()


def test_routing_state_logits_start_at_zero():
    u_hat = rand((3, 2, 2), 5)
    _, state = dynamic_routing(T.Tensor(u_hat), 1, return_state=True)
    # after one pass the logits hold exactly one agreement update
    v = state.sums  # s_j of the only iteration
    assert state.iterations == 1
    np.testing.assert_allclose(state.coefficient_history[0], np.full((3, 2), 0.5), atol=0)


def test_routing_permutation_equivariance():
    u_hat = rand((5, 3, 4), 6)
    perm = np.random.default_rng(7).permutation(5)
    base = dynamic_routing(T.Tensor(u_hat), 3).vectors.data
    permuted = dynamic_routing(T.Tensor(u_hat[perm]), 3).vectors.data
    np.testing.assert_allclose(base, permuted, atol=1e-12)


def test_routing_gradients_through_unrolled_loop():
    u_hat = T.Tensor(rand((3, 2, 3), 8), requires_grad=True)

    def loss():
        v = dynamic_routing(u_hat, 3).vectors
        return (v * v).sum()

    assert check_gradients(loss, [("u_hat", u_hat)], n_coords=18, seed=9) < 1e-6


def test_routing_batched_matches_per_sample():
    u_hat = rand((4, 3, 2, 3), 10)
    batched = dynamic_routing(T.Tensor(u_hat), 2).vectors.data
    for i in range(4):
        single = dynamic_routing(T.Tensor(u_hat[i]), 2).vectors.data
        np.testing.assert_allclose(batched[i], single, atol=1e-13)


# -- margin loss -------------------------------------------------------------


def test_margin_loss_zero_at_thresholds():
    lengths = np.array([0.9, 0.1, 0.1])
    assert margin_loss(T.Tensor(lengths), 0).item() == pytest.approx(0.0, abs=0)


def test_margin_loss_correct_capsule_short():
    lengths = np.array([0.3, 0.1])
    loss = margin_loss(T.Tensor(lengths), 0)
    assert loss.item() == pytest.approx((0.9 - 0.3) ** 2, rel=1e-12)


def test_margin_loss_wrong_capsule_long():
    lengths = np.array([0.9, 0.8])
    loss = margin_loss(T.Tensor(lengths), 0)
    assert loss.item() == pytest.approx(0.5 * (0.8 - 0.1) ** 2, rel=1e-12)


def test_margin_loss_hard_phase_thresholds():
    assert HARD_MARGIN.m_plus == 0.95 and HARD_MARGIN.m_minus == 0.05
    lengths = np.array([0.92, 0.02])
    assert margin_loss(T.Tensor(lengths), 0, NORMAL_MARGIN).item() == pytest.approx(0.0)
    hard = margin_loss(T.Tensor(lengths), 0, HARD_MARGIN).item()
    assert hard == pytest.approx((0.95 - 0.92) ** 2, rel=1e-12)


def test_margin_loss_batch_mean():
    lengths = np.array([[0.3, 0.1], [0.9, 0.1]])
    loss = margin_loss(T.Tensor(lengths), np.array([0, 0]))
    assert loss.item() == pytest.approx(0.5 * (0.9 - 0.3) ** 2, rel=1e-12)


def test_margin_loss_target_out_of_range():
    with pytest.raises(IndexError):
        margin_loss(T.Tensor(np.array([0.5, 0.5])), 2)


def test_margin_loss_params_validation():
    with pytest.raises(ValueError):
        MarginLossParams(m_plus=0.1, m_minus=0.9)
    with pytest.raises(ValueError):
        MarginLossParams(lam=0.0)


@given(
    st.floats(0.0, 0.999), st.floats(0.0, 0.999), st.floats(0.0, 0.999),
)
@settings(max_examples=60, deadline=None)
def test_margin_loss_zero_iff_within_thresholds(correct, wrong1, wrong2):
    lengths = np.array([correct, wrong1, wrong2])
    loss = margin_loss(T.Tensor(lengths), 0).item()
    satisfied = correct >= 0.9 and wrong1 <= 0.1 and wrong2 <= 0.1
    assert (loss == 0.0) == satisfied


def test_margin_loss_gradients():
    lengths = T.Tensor(np.array([[0.3, 0.7], [0.95, 0.4]]), requires_grad=True)

    def loss():
        return margin_loss(lengths, np.array([0, 1]))

    assert check_gradients(loss, [("lengths", lengths)], n_coords=4, seed=1) < 1e-6


# -- capsule dropout ------------------------------------------------------------


def test_dropout_p0_is_identity():
    caps = CapsuleSet(T.Tensor(rand((4, 6, 3), 1)))
    rng = np.random.default_rng(0)
    for mode in ("train", "eval"):
        out = capsule_dropout(caps, 0.0, mode, rng)
        assert out is caps


def test_dropout_eval_is_bitwise_identity():
    caps = CapsuleSet(T.Tensor(rand((4, 6, 3), 2)))
    out = capsule_dropout(caps, 0.7, "eval")
    assert out is caps  # identical object, so trivially bitwise-identical


def test_dropout_zeroes_whole_capsules_and_scales_survivors():
    vecs = np.ones((1, 10_000, 4))
    caps = CapsuleSet(T.Tensor(vecs))
    out = capsule_dropout(caps, 0.4, "train", np.random.default_rng(11)).vectors.data
    per_capsule = out[0]
    zeroed = (per_capsule == 0.0).all(axis=-1)
    kept = ~zeroed
    # never partial: each capsule is all-zero or all-scaled
    assert ((per_capsule == 0.0).all(axis=-1) | (per_capsule != 0.0).all(axis=-1)).all()
    assert np.allclose(per_capsule[kept], 1.0 / 0.6)
    assert abs(zeroed.mean() - 0.4) < 0.02


def test_dropout_fraction_across_seeds():
    caps = CapsuleSet(T.Tensor(np.ones((1, 2000, 2))))
    fractions = []
    for seed in range(5):
        out = capsule_dropout(caps, 0.4, "train", np.random.default_rng(seed))
        fractions.append((out.vectors.data == 0.0).all(axis=-1).mean())
    assert abs(np.mean(fractions) - 0.4) < 0.02


def test_dropout_rejects_p_one():
    caps = CapsuleSet(T.Tensor(rand((2, 3, 2), 1)))
    with pytest.raises(ValueError):
        capsule_dropout(caps, 1.0, "train", np.random.default_rng(0))


def test_dropout_per_sample_independent_masks():
    caps = CapsuleSet(T.Tensor(np.ones((2, 500, 2))))
    out = capsule_dropout(caps, 0.5, "train", np.random.default_rng(3)).vectors.data
    mask0 = (out[0] == 0).all(axis=-1)
    mask1 = (out[1] == 0).all(axis=-1)
    assert (mask0 != mask1).any()  # one Bernoulli trial per capsule per sample
