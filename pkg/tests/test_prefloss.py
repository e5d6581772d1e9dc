import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from foldpref import prefloss
from foldpref.checks import random_batch, tiny_policy
from foldpref.graphcore import ShapeError, Tape
from foldpref.prefloss import (
    LOSE,
    WIN,
    EmbeddingEncoder,
    LossConfig,
    PreferenceBatch,
    Residuals,
    compute_residuals,
    dpo_loss,
    estimate_qref,
    kto_loss,
    preference_loss,
    residual,
    residual_graph,
    rko_loss,
    rko_sample_weights,
    rko_weights,
    rpo_loss,
    similarity_weights,
)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def softplus(x):
    return math.log1p(math.exp(x))


def hand_residuals(theta, ref, labels):
    tape = Tape()
    return Residuals(tape.constant(np.asarray(theta, float)), np.asarray(ref, float), np.asarray(labels))


def value(node):
    return float(node.value)


# ---------------------------------------------------------------------------
# residual primitive


class TestResidual:
    def test_zero_network_gives_noise_norm(self):
        rng = np.random.default_rng(0)
        pol = tiny_policy(rng)
        pol.params.values[:] = 0.0
        batch = random_batch(rng, 2, 2, pol.schedule.K)
        np.testing.assert_allclose(residual(pol, batch), (batch.eps ** 2).sum(axis=1), rtol=1e-15)

    def test_matches_sum_of_squares_oracle(self):
        rng = np.random.default_rng(1)
        pol = tiny_policy(rng)
        batch = random_batch(rng, 3, 2, pol.schedule.K)
        expected = []
        for i in range(len(batch)):
            a0 = batch.chunks[i]
            ab = pol.schedule.alpha_bar[batch.k[i]]
            a_k = math.sqrt(ab) * a0 + math.sqrt(1 - ab) * batch.eps[i]
            pred = pol.predict_noise(batch.obs[i:i + 1], a_k[None], batch.k[i])[0]
            expected.append(sum((e - p) ** 2 for e, p in zip(batch.eps[i], pred)))
        np.testing.assert_allclose(residual(pol, batch), expected, rtol=1e-13)

    def test_graph_and_numpy_agree(self):
        rng = np.random.default_rng(2)
        pol = tiny_policy(rng)
        batch = random_batch(rng, 2, 3, pol.schedule.K)
        tape = Tape()
        node = residual_graph(tape, tape.frozen(pol.params), pol, batch)
        np.testing.assert_allclose(node.value, residual(pol, batch), rtol=1e-14)

    def test_shared_draws_between_policies(self):
        rng = np.random.default_rng(3)
        ref = tiny_policy(rng)
        batch = random_batch(rng, 2, 2, ref.schedule.K)
        tape = Tape()
        res = compute_residuals(tape, tape.frozen(ref.params), ref, ref, batch)
        np.testing.assert_array_equal(res.theta.value, res.ref)

    def test_batch_validation(self):
        with pytest.raises(ShapeError):
            PreferenceBatch(np.zeros((2, 3)), np.zeros((3, 2)), [1, -1], [0, 0], np.zeros((2, 2)))
        with pytest.raises(ValueError):
            PreferenceBatch(np.zeros((1, 3)), np.zeros((1, 2)), [0], [0], np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# DPO / RPO


class TestDpo:
    def test_identity_is_ln2(self):
        res = hand_residuals([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0], [WIN, WIN, LOSE, LOSE])
        loss = dpo_loss(res, np.array([[0, 2], [1, 3]]), LossConfig(beta=10.0))
        assert value(loss) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_closed_form_margin(self):
        # delta_w - delta_l = (-1.5) - (0.5) = -2 at beta = 1
        res = hand_residuals([1.0, 3.0], [2.5, 2.5], [WIN, LOSE])
        assert value(dpo_loss(res, np.array([[0, 1]]), LossConfig(beta=1.0))) == pytest.approx(0.12692801104297263, abs=1e-15)

    def test_monotone_in_winner_residual(self):
        cfg = LossConfig(beta=3.0)
        vals = [value(dpo_loss(hand_residuals([w, 1.0], [1.0, 1.0], [WIN, LOSE]), np.array([[0, 1]]), cfg))
                for w in (2.0, 1.0, 0.5, 0.0)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_pairs_must_be_win_lose(self):
        res = hand_residuals([1.0, 1.0], [1.0, 1.0], [WIN, LOSE])
        with pytest.raises(ValueError):
            dpo_loss(res, np.array([[1, 0]]), LossConfig(beta=1.0))
        with pytest.raises(ValueError):
            dpo_loss(res, np.zeros((0, 2)), LossConfig(beta=1.0))


class TestSimilarity:
    def test_temperature_example(self):
        fw = np.array([[1.0, 0.0]])
        fl = np.array([[2.0, 0.0], [0.0, 3.0]])  # cosines 1 and 0
        omega = similarity_weights(fw, fl, EmbeddingEncoder(), 0.15).omega
        e = math.exp(-1.0 / 0.15)
        np.testing.assert_allclose(omega[0], [1 / (1 + e), e / (1 + e)], rtol=1e-14)
        np.testing.assert_allclose(omega[0], [0.99873, 0.00127], atol=5e-6)

    def test_single_loser(self):
        omega = similarity_weights(np.ones((3, 2)), np.array([[1.0, -1.0]]), EmbeddingEncoder(), 0.15).omega
        np.testing.assert_array_equal(omega, np.ones((3, 1)))

    def test_tied_losers(self):
        omega = similarity_weights(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, -1.0]]),
                                   EmbeddingEncoder(), 0.15).omega
        np.testing.assert_allclose(omega, [[0.5, 0.5]])

    def test_zero_norm_embedding_flagged(self):
        sw = similarity_weights(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]),
                                EmbeddingEncoder(), 0.15)
        assert sw.zero_norm_winners == [0]
        np.testing.assert_allclose(sw.omega[0], [0.5, 0.5])

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            similarity_weights(np.ones((1, 2)), np.ones((1, 2)), EmbeddingEncoder(), 0.0)

    def test_reference_encoder_is_a_frozen_copy(self):
        pol = tiny_policy(np.random.default_rng(0))
        enc = EmbeddingEncoder.from_reference(pol)
        obs = np.random.default_rng(1).uniform(size=(2, pol.obs_dim))
        before = enc(obs)
        pol.params.values[:] += 1.0
        np.testing.assert_array_equal(enc(obs), before)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), w=st.integers(1, 6), l=st.integers(1, 6),
           tau=st.floats(1e-2, 10.0))
    def test_rows_are_stochastic(self, seed, w, l, tau):
        rng = np.random.default_rng(seed)
        omega = similarity_weights(rng.normal(size=(w, 4)), rng.normal(size=(l, 4)), EmbeddingEncoder(), tau).omega
        assert np.abs(omega.sum(axis=1) - 1).max() <= 1e-12
        assert np.all(omega > 0) and np.all(omega <= 1)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_temperature_limits(self, seed):
        rng = np.random.default_rng(seed)
        fw, fl = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        wide = similarity_weights(fw, fl, EmbeddingEncoder(), 1e6).omega
        assert np.abs(wide - 0.2).max() < 1e-6
        cos = (fw / np.linalg.norm(fw, axis=1, keepdims=True)) @ (fl / np.linalg.norm(fl, axis=1, keepdims=True)).T
        top2 = np.sort(cos, axis=1)[:, -2:]
        assume(np.all(top2[:, 1] - top2[:, 0] > 0.02))
        sharp = similarity_weights(fw, fl, EmbeddingEncoder(), 1e-3).omega
        onehot = np.eye(5)[cos.argmax(axis=1)]
        assert np.abs(sharp - onehot).max() < 1e-6


class TestRpo:
    def test_single_pair_equals_dpo(self):
        res = hand_residuals([0.7, 1.9], [1.0, 1.2], [WIN, LOSE])
        cfg = LossConfig(beta=20.0)
        assert value(rpo_loss(res, np.ones((1, 1)), cfg)) == pytest.approx(
            value(dpo_loss(res, np.array([[0, 1]]), cfg)), abs=1e-12)

    def test_identity_is_ln2(self):
        res = hand_residuals(np.ones(5), np.ones(5), [WIN, WIN, LOSE, LOSE, LOSE])
        omega = similarity_weights(np.random.default_rng(0).normal(size=(2, 3)),
                                   np.random.default_rng(1).normal(size=(3, 3)), EmbeddingEncoder(), 0.15).omega
        assert value(rpo_loss(res, omega, LossConfig(beta=20.0))) == pytest.approx(math.log(2), abs=1e-14)

    def test_double_loop_oracle(self):
        theta = [0.3, 1.1, 0.9, 0.2]
        ref = [0.5, 1.0, 0.6, 0.4]
        labels = [WIN, WIN, LOSE, LOSE]
        omega = np.array([[0.8, 0.2], [0.35, 0.65]])
        beta = 2.0
        delta = [t - r for t, r in zip(theta, ref)]
        total = 0.0
        for i, wi in enumerate([0, 1]):
            for j, lj in enumerate([2, 3]):
                total += omega[i, j] * softplus(beta * (delta[wi] - delta[lj]))
        expected = total / 2
        got = value(rpo_loss(hand_residuals(theta, ref, labels), omega, LossConfig(beta=beta)))
        assert got == pytest.approx(expected, abs=1e-14)

    def test_requires_both_classes(self):
        with pytest.raises(ValueError):
            rpo_loss(hand_residuals([1.0], [1.0], [WIN]), np.ones((1, 0)), LossConfig(beta=1.0))

    def test_omega_shape_checked(self):
        with pytest.raises(ShapeError):
            rpo_loss(hand_residuals([1.0, 1.0], [1.0, 1.0], [WIN, LOSE]), np.ones((2, 2)), LossConfig(beta=1.0))


# ---------------------------------------------------------------------------
# Q_ref, KTO, RKO


class TestQref:
    def test_all_negative_clamps(self):
        assert estimate_qref([-1.0, -0.2], LossConfig(beta=1.0)) == 0.0

    def test_positive_mean(self):
        assert estimate_qref([0.1, 0.5], LossConfig(beta=1.0)) == pytest.approx(0.3)

    def test_zero_mode(self):
        assert estimate_qref([5.0], LossConfig(beta=1.0, qref_mode="zero")) == 0.0

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    def test_mean_then_clamp(self, rewards):
        assert estimate_qref(rewards, LossConfig(beta=1.0)) == pytest.approx(max(0.0, sum(rewards) / len(rewards)))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            estimate_qref([], LossConfig(beta=1.0))

    def test_no_gradient_through_qref(self):
        # the batch-mean estimate enters as a constant: shifting it by hand reproduces the loss
        res = hand_residuals([0.2, 0.9, 0.4], [0.5, 0.5, 0.5], [WIN, WIN, LOSE])
        cfg = LossConfig(beta=4.0)
        r = cfg.beta * (res.ref - res.theta.value)
        q = max(0.0, r.mean())
        assert value(kto_loss(res, cfg)) == value(kto_loss(res, cfg, qref=q))


class TestKto:
    def test_identity(self):
        res = hand_residuals([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [WIN, LOSE, WIN])
        assert value(kto_loss(res, LossConfig(beta=12.0, qref_mode="zero"))) == -0.5

    def test_identity_with_nonzero_qref(self):
        labels = [WIN, LOSE, WIN]
        res = hand_residuals([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], labels)
        got = value(kto_loss(res, LossConfig(beta=12.0), qref=0.3))
        assert got == pytest.approx(-np.mean([sigmoid(-q * 0.3) for q in labels]), abs=1e-15)

    def test_elementwise_oracle(self):
        theta = [0.50, 0.62, 0.41, 0.70]
        ref = [0.55, 0.60, 0.45, 0.66]
        labels = [WIN, WIN, LOSE, LOSE]
        beta, q = 12.0, 0.1
        expected = -np.mean([sigmoid(lab * (beta * (r - t) - q)) for t, r, lab in zip(theta, ref, labels)])
        got = value(kto_loss(hand_residuals(theta, ref, labels), LossConfig(beta=beta), qref=q))
        assert got == pytest.approx(expected, abs=1e-15)

    def test_saturated_winner(self):
        res = hand_residuals([0.0], [1e3], [WIN])
        assert value(kto_loss(res, LossConfig(beta=12.0, qref_mode="zero"))) == pytest.approx(-1.0)

    def test_single_class_batches_allowed(self):
        assert np.isfinite(value(kto_loss(hand_residuals([1.0, 2.0], [1.5, 1.5], [LOSE, LOSE]), LossConfig(beta=1.0))))


class TestRkoWeights:
    def test_one_by_one(self):
        np.testing.assert_array_equal(rko_weights(np.ones((1, 1))), [4 / 3, 2 / 3])

    def test_uniform_two_by_two(self):
        np.testing.assert_allclose(rko_weights(np.full((2, 2), 0.5)), [1.2, 1.2, 0.8, 0.8], rtol=1e-15)

    def test_single_class_bypass(self):
        np.testing.assert_array_equal(rko_sample_weights(np.array([WIN, WIN, WIN]), None), np.ones(3))

    def test_rejects_non_stochastic(self):
        with pytest.raises(ValueError):
            rko_weights(np.array([[0.5, 0.6]]))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), w=st.integers(1, 8), l=st.integers(1, 8))
    def test_mean_one_and_positive(self, seed, w, l):
        rng = np.random.default_rng(seed)
        omega = similarity_weights(rng.normal(size=(w, 3)), rng.normal(size=(l, 3)), EmbeddingEncoder(), 0.15).omega
        s = rko_weights(omega)
        assert abs(s.mean() - 1.0) <= 1e-12
        assert np.all(s > 0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10**6), l=st.integers(2, 6), bump=st.floats(0.05, 1.0))
    def test_hard_pair_emphasis(self, seed, l, bump):
        # winners share every cosine except the closest one, where A is strictly closer
        rng = np.random.default_rng(seed)
        base = rng.uniform(-1.0, 0.0, size=l)
        cos_b = base.copy()
        cos_b[0] = 0.5 * (base[1:].max() + 1.0) - 0.5 * bump * (1.0 - base[1:].max()) * 0.5
        cos_a = cos_b.copy()
        cos_a[0] = min(1.0, cos_b[0] + bump * (1.0 - cos_b[0]))
        assume(cos_a[0] > cos_b[0] and cos_b[0] > base[1:].max())
        logits = -(1.0 - np.stack([cos_a, cos_b])) / 0.15
        omega = np.exp(logits - logits.max(axis=1, keepdims=True))
        omega /= omega.sum(axis=1, keepdims=True)
        s = rko_weights(omega)
        assert s[0] > s[1]

    def test_max_cosine_alone_does_not_order_weights(self):
        # a winner close to two losers spreads its weight and ends up with the smaller s
        cos = np.array([[0.9, 0.9], [0.5, -0.5]])
        logits = -(1.0 - cos) / 0.15
        omega = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        s = rko_weights(omega)
        assert cos[0].max() > cos[1].max() and s[0] < s[1]


class TestRko:
    def test_reweight_off_equals_kto(self):
        res = hand_residuals([0.3, 0.8, 0.5], [0.4, 0.6, 0.5], [WIN, LOSE, LOSE])
        cfg = LossConfig(beta=12.0)
        omega = np.array([[0.7, 0.3]])
        assert value(rko_loss(res, cfg, omega, reweight=False)) == pytest.approx(value(kto_loss(res, cfg)), abs=1e-12)

    def test_identity_regardless_of_weights(self):
        res = hand_residuals([1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [WIN, LOSE, LOSE])
        cfg = LossConfig(beta=12.0, qref_mode="zero")
        assert value(rko_loss(res, cfg, np.array([[0.9, 0.1]]))) == pytest.approx(-0.5, abs=1e-15)

    def test_one_by_one_oracle(self):
        theta, ref, labels = [0.40, 0.75], [0.45, 0.70], [WIN, LOSE]
        beta, q = 12.0, 0.1
        s = [4 / 3, 2 / 3]
        u = [sigmoid(lab * (beta * (r - t) - q)) for t, r, lab in zip(theta, ref, labels)]
        expected = -(s[0] * u[0] + s[1] * u[1]) / (s[0] + s[1])
        got = value(rko_loss(hand_residuals(theta, ref, labels), LossConfig(beta=beta), np.ones((1, 1)), qref=q))
        assert got == pytest.approx(expected, abs=1e-15)

    def test_single_class_is_kto(self):
        res = hand_residuals([0.3, 0.8], [0.4, 0.6], [WIN, WIN])
        cfg = LossConfig(beta=12.0)
        assert value(rko_loss(res, cfg)) == pytest.approx(value(kto_loss(res, cfg)), abs=1e-15)


# ---------------------------------------------------------------------------
# dispatch


class TestDispatch:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.ref = tiny_policy(rng)
        self.theta = self.ref.copy()
        self.batch = random_batch(rng, 3, 3, self.ref.schedule.K)

    def loss(self, method, batch=None, cfg=None):
        tape = Tape()
        return value(preference_loss(method, tape, tape.watch(self.theta.params), self.theta, self.ref,
                                     batch or self.batch, cfg or LossConfig(beta=12.0, qref_mode="zero")))

    def test_identities_through_dispatch(self):
        assert self.loss("dpo") == pytest.approx(math.log(2), abs=1e-12)
        assert self.loss("rpo") == pytest.approx(math.log(2), abs=1e-12)
        for m in ("kto", "rko", "rko_norw"):
            assert self.loss(m) == pytest.approx(-0.5, abs=1e-12)

    def test_pair_methods_reject_single_class(self):
        only_win = self.batch.subset(self.batch.win_idx)
        for m in ("dpo", "rpo"):
            with pytest.raises(ValueError):
                self.loss(m, only_win)
        assert np.isfinite(self.loss("rko", only_win))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            self.loss("ipo")

    def test_loss_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(beta=0.0)
        with pytest.raises(ValueError):
            LossConfig(beta=1.0, tau=-1.0)
        with pytest.raises(ValueError):
            LossConfig(beta=1.0, qref_mode="ema")

    def test_methods_listed(self):
        assert prefloss.METHODS == ("dpo", "rpo", "kto", "rko", "rko_norw")
