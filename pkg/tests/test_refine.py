"""Refinement checks: composition identities, REINFORCE gradients, rewards.

The policy-gradient oracle perturbs one weight at a time and measures the
change in the expected surrogate loss summed over all actions, which is the
quantity whose sample estimate REINFORCE computes.
"""

import math

import numpy as np
import numpy.testing as npt
import pytest

from segrl.decoder import LogitMap, ProbMap
from segrl.errors import ConfigError, ShapeError
from segrl.refine import (
    ActionSpace,
    BaselineState,
    PolicyNet,
    ResidualRefiner,
    compute_reward,
    compute_rewards_batch,
    policy_forward,
    policy_loss,
    refine,
    residual,
    update_baseline,
)


class TestActionSpace:
    def test_defaults_and_ordering(self):
        space = ActionSpace()
        assert space.alphas == (-0.1, 0.0, 0.1)
        assert len(space) == 3

    def test_rejects_bad_spaces(self):
        with pytest.raises(ConfigError):
            ActionSpace(alphas=())
        with pytest.raises(ConfigError):
            ActionSpace(alphas=(0.1, 0.0))
        with pytest.raises(ConfigError):
            ActionSpace(alphas=(0.0, 0.1, 0.1))
        with pytest.raises(ConfigError):
            ActionSpace(alphas=(-0.1, 0.1))  # no-op action required


class TestRefineComposition:
    def test_zero_alpha_is_bit_identical_copy(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            z = rng.normal(size=(3, 8, 8)) * rng.uniform(0.1, 100)
            r = rng.normal(size=(3, 8, 8))
            out = refine(z, 0.0, r)
            npt.assert_array_equal(out, z)
            assert out is not z  # a copy, not an alias

    def test_matches_linear_formula(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            z = rng.normal(size=(2, 5, 5))
            r = rng.normal(size=(2, 5, 5))
            alpha = float(rng.uniform(-0.5, 0.5))
            npt.assert_allclose(refine(z, alpha, r), z + alpha * r, atol=1e-12)

    def test_logit_map_wrapper_round_trip(self):
        z = LogitMap(scores=np.ones((2, 4, 4)))
        r = LogitMap(scores=np.full((2, 4, 4), 2.0))
        out = refine(z, 0.1, r)
        assert isinstance(out, LogitMap)
        npt.assert_allclose(out.scores, 1.2)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            refine(np.zeros((2, 4, 4)), 0.1, np.zeros((2, 4, 5)))


class TestResidualRefiner:
    def test_zero_at_initialization(self):
        rng = np.random.default_rng(3)
        refiner = ResidualRefiner(num_classes=4, rng=rng)
        z = rng.normal(size=(2, 4, 8, 8))
        npt.assert_array_equal(refiner.forward(z), 0.0)

    def test_shapes_and_single_sample_wrapper(self):
        rng = np.random.default_rng(4)
        refiner = ResidualRefiner(num_classes=3, rng=rng)
        for p in refiner.params():
            p.value[...] = rng.normal(size=p.value.shape) * 0.1
        z = rng.normal(size=(2, 3, 6, 6))
        out = refiner.forward(z)
        assert out.shape == z.shape
        single = residual(refiner, LogitMap(scores=z[0]))
        npt.assert_allclose(single.scores, refiner.forward(z[:1])[0], atol=1e-6)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        refiner = ResidualRefiner(num_classes=2, rng=rng)
        # float64 weights and a small eps keep the probe away from ReLU kinks
        for p in refiner.params():
            p.value = rng.normal(size=p.value.shape) * 0.2
            p.grad = np.zeros_like(p.value)
        z = rng.normal(size=(1, 2, 5, 5))
        dout = rng.normal(size=(1, 2, 5, 5))

        # scalar objective sum(forward(z) * dout); FD on a few inputs/weights
        def objective():
            return float((refiner.forward(z) * dout).sum())

        objective()
        dz = refiner.backward(dout)

        eps = 1e-5
        flat = z.reshape(-1)
        for j in rng.choice(flat.size, size=8, replace=False):
            base = flat[j]
            flat[j] = base + eps
            up = objective()
            flat[j] = base - eps
            down = objective()
            flat[j] = base
            fd = (up - down) / (2 * eps)
            assert dz.reshape(-1)[j] == pytest.approx(fd, rel=1e-4, abs=1e-7)

        for p in refiner.params():
            pflat = p.value.reshape(-1)
            gflat = p.grad.reshape(-1)
            for j in rng.choice(pflat.size, size=min(4, pflat.size), replace=False):
                base = pflat[j]
                pflat[j] = base + eps
                up = objective()
                pflat[j] = base - eps
                down = objective()
                pflat[j] = base
                fd = (up - down) / (2 * eps)
                assert gflat[j] == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestPolicyNet:
    def test_initial_distribution_is_uniform(self):
        rng = np.random.default_rng(6)
        policy = PolicyNet(in_dim=16, actions=ActionSpace(), rng=rng)
        pooled = rng.normal(size=(5, 16))
        probs = policy.forward_batch(pooled)
        npt.assert_allclose(probs, 1.0 / 3.0, atol=1e-12)

    def test_sampling_follows_probabilities(self):
        rng = np.random.default_rng(7)
        policy = PolicyNet(in_dim=8, actions=ActionSpace(), rng=rng)
        # force a lopsided distribution via the final bias
        policy.fc2.bias.value[...] = np.array([3.0, 0.0, -3.0])
        pooled = np.zeros((4000, 8))
        probs, indices, log_probs, alphas = policy.sample_batch(
            pooled, np.random.default_rng(0))
        expected = probs[0]
        freq = np.bincount(indices, minlength=3) / indices.size
        npt.assert_allclose(freq, expected, atol=0.02)
        npt.assert_allclose(log_probs,
                            np.log(probs[np.arange(indices.size), indices]),
                            atol=1e-9)
        npt.assert_array_equal(alphas, np.asarray(ActionSpace().alphas)[indices])

    def test_greedy_picks_argmax(self):
        rng = np.random.default_rng(8)
        policy = PolicyNet(in_dim=8, actions=ActionSpace(), rng=rng)
        policy.fc2.bias.value[...] = np.array([0.0, 0.0, 1.0])
        probs, indices, alphas = policy.greedy_batch(np.zeros((3, 8)))
        npt.assert_array_equal(indices, 2)
        npt.assert_allclose(alphas, 0.1)

    def test_single_sample_wrapper_modes(self):
        rng = np.random.default_rng(9)
        policy = PolicyNet(in_dim=8, actions=ActionSpace(), rng=rng)
        pooled = rng.normal(size=8)
        out = policy_forward(policy, pooled, "greedy")
        assert out.sampled_index in range(3)
        assert out.alpha == ActionSpace().alphas[out.sampled_index]
        out = policy_forward(policy, pooled, "sample", rng=np.random.default_rng(1))
        assert math.isfinite(out.log_prob)
        with pytest.raises(ValueError):
            policy_forward(policy, pooled, "sample")  # rng required
        with pytest.raises(ValueError):
            policy_forward(policy, pooled, "bogus")
        with pytest.raises(ShapeError):
            policy_forward(policy, pooled[None], "greedy")

    def test_policy_gradient_matches_expected_surrogate(self):
        # backward_batch accumulates d/dw of coeff * -log pi(a|s) with coeff
        # held constant. Calling it once per action with coeff_a frozen at
        # pi_0(a) * advantage_a makes the accumulated gradient equal the
        # gradient of F(w) = -sum_a c_a log pi_w(a), a plain weighted
        # cross-entropy that finite differences can measure.
        rng = np.random.default_rng(10)
        for trial in range(20):
            trial_rng = np.random.default_rng(100 + trial)
            policy = PolicyNet(in_dim=6, actions=ActionSpace(), rng=trial_rng)
            for p in policy.params():
                # float64 weights keep finite-difference noise below the
                # 1e-3 relative tolerance
                p.value = trial_rng.normal(size=p.value.shape) * 0.5
                p.grad = np.zeros_like(p.value)
            pooled = trial_rng.normal(size=(1, 6))
            coeff = trial_rng.normal(size=3)  # one advantage per action

            probs = policy.forward_batch(pooled)[0]
            for p in policy.params():
                p.grad[...] = 0.0
            for a in range(3):
                policy.forward_batch(pooled)
                policy.backward_batch(probs[None], np.array([a]),
                                      np.array([probs[a] * coeff[a]]))

            def expected_surrogate():
                pr = policy.forward_batch(pooled)[0]
                return -sum(coeff[a] * probs[a] * math.log(max(pr[a], 1e-300))
                            for a in range(3))

            eps = 1e-5
            checked = 0
            for p in policy.params():
                flat = p.value.reshape(-1)
                gflat = p.grad.reshape(-1)
                idx = trial_rng.choice(flat.size, size=min(3, flat.size),
                                       replace=False)
                for j in idx:
                    base = flat[j]
                    flat[j] = base + eps
                    up = expected_surrogate()
                    flat[j] = base - eps
                    down = expected_surrogate()
                    flat[j] = base
                    fd = (up - down) / (2 * eps)
                    if abs(fd) < 1e-7 and abs(gflat[j]) < 1e-7:
                        continue
                    assert gflat[j] == pytest.approx(fd, rel=1e-3, abs=1e-8)
                    checked += 1
            assert checked > 0

    def test_positive_advantage_raises_sampled_action_probability(self):
        rng = np.random.default_rng(11)
        policy = PolicyNet(in_dim=6, actions=ActionSpace(), rng=rng)
        pooled = rng.normal(size=(1, 6))
        probs = policy.forward_batch(pooled)
        for p in policy.params():
            p.grad[...] = 0.0
        policy.backward_batch(probs, np.array([2]), np.array([1.0]))
        # one plain gradient-descent step must increase pi(action 2)
        for p in policy.params():
            p.value[...] -= 0.1 * p.grad
        after = policy.forward_batch(pooled)
        assert after[0, 2] > probs[0, 2]


class TestRewardsAndBaseline:
    def test_reward_is_dice_improvement(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        gt[0] = 1
        good = np.zeros((2, 4, 4))
        good[0], good[1] = (gt == 0) + 0.6, (gt == 1) + 0.6  # argmax == gt
        bad = np.zeros((2, 4, 4))
        bad[0] = 1.0  # argmax all class 0
        reward = compute_reward(good, bad, gt)
        # exact: perfect dice 1.0 vs mean(2*12/(12+16), 0) = mean over classes
        bad_dice = (2 * 12 / (16 + 12) + 0.0) / 2
        assert reward == pytest.approx(1.0 - bad_dice, abs=1e-12)
        assert compute_reward(bad, bad, gt) == 0.0

    def test_reward_accepts_prob_maps_and_checks_shapes(self):
        gt = np.zeros((3, 3), dtype=np.int64)
        uniform = ProbMap(probs=np.full((2, 3, 3), 0.5))
        assert compute_reward(uniform, uniform, gt) == 0.0
        with pytest.raises(ShapeError):
            compute_reward(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), gt)

    def test_batch_rewards_match_single(self):
        rng = np.random.default_rng(12)
        refined = rng.normal(size=(5, 3, 6, 6))
        unrefined = rng.normal(size=(5, 3, 6, 6))
        gt = rng.integers(0, 3, size=(5, 6, 6))
        batch = compute_rewards_batch(refined, unrefined, gt)
        assert batch.shape == (5,)
        for i in range(5):
            single = compute_reward(refined[i], unrefined[i], gt[i])
            assert batch[i] == pytest.approx(single, abs=1e-12)

    def test_baseline_seeding_and_ema(self):
        state = BaselineState(momentum=0.8)
        assert not state.initialized
        state = update_baseline(state, 0.5)
        assert state.initialized and state.value == 0.5
        state = update_baseline(state, 1.0)
        assert state.value == pytest.approx(0.8 * 0.5 + 0.2 * 1.0)
        with pytest.raises(ValueError):
            update_baseline(state, float("nan"))
        with pytest.raises(ConfigError):
            BaselineState(momentum=1.0)

    def test_policy_loss_sign_convention(self):
        assert policy_loss(-1.0, 2.0, 0.5) == pytest.approx(1.5)
        assert policy_loss(-1.0, 0.5, 2.0) == pytest.approx(-1.5)
