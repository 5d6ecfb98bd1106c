import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pombu.envs import build_chain_posterior, uniform_policy
from pombu.mdp import TabularPolicy, exact_values, expected_return, sample_trajectories
from pombu.policy import (
    GaussianPolicy,
    OptimConfig,
    SurrogateBatch,
    TabularSoftmaxPolicy,
    action_log_density,
    advantage_estimates,
    conservative_objective,
    exact_surrogate,
    exact_surrogate_gradient,
    exploration_objective,
    improvement_probability,
    objective_gradient,
    optimize_policy,
    prob_improvement,
    returns_to_go,
    sample_action,
    surrogate_clip,
    surrogate_sr,
    surrogate_std,
)
from pombu.posterior import mean_mdp

from .conftest import random_mdp


class FixedRatios:
    """Stand-in policy whose log-probabilities are fixed offsets from the batch's old ones."""

    def __init__(self, ratios, old_log_prob):
        self.log_values = np.log(np.asarray(ratios, dtype=np.float64)) + old_log_prob

    def log_prob(self, states, actions):
        return self.log_values[np.asarray(states)]


def fixed_batch(ratios, advantages, sqrt_d=None):
    n = len(advantages)
    batch = SurrogateBatch(np.arange(n), np.zeros(n), np.zeros(n), advantages, sqrt_d, num_trajectories=1)
    return batch, FixedRatios(ratios, batch.old_log_prob)


def gaussian_batch(seed=0, n=200, dim=2):
    rng = np.random.default_rng(seed)
    old = GaussianPolicy.build(dim, dim, hidden=(8,), init_std=0.3, seed=seed)
    states = rng.normal(size=(n, dim))
    actions = old.sample(states, rng)
    batch = SurrogateBatch(
        states,
        actions,
        old.log_prob(states, actions),
        rng.normal(size=n),
        np.abs(rng.normal(size=n)),
        num_trajectories=10,
    )
    return old, batch


def perturbed(policy, scale, seed):
    new = policy.copy()
    new.set_params(new.params + scale * np.random.default_rng(seed).normal(size=len(new.params)))
    return new


class TestGaussianPolicy:
    def _standard(self, dim):
        pol = GaussianPolicy.build(dim, dim, hidden=(4,), init_std=1.0, seed=0)
        pol.mean_net.set_params(np.zeros(pol.mean_net.num_params))
        return pol

    @pytest.mark.parametrize("dim", [1, 2, 3])
    def test_log_density_at_mode(self, dim):
        pol = self._standard(dim)
        s = np.ones(dim)
        assert action_log_density(pol, s, np.zeros(dim)) == pytest.approx(-0.5 * dim * math.log(2 * math.pi), abs=1e-12)

    def test_density_integrates_to_one(self):
        pol = GaussianPolicy.build(1, 1, hidden=(4,), init_std=0.7, seed=2)
        mu = pol.mean(np.zeros((1, 1)))[0, 0]
        n, half = 1_000_000, 8.0
        x = np.random.default_rng(0).uniform(mu - half, mu + half, size=(n, 1))
        vals = 2 * half * np.exp(pol.log_prob(np.zeros((n, 1)), x))
        se = vals.std() / math.sqrt(n)
        assert abs(vals.mean() - 1.0) <= 3 * se

    def test_same_seed_same_action(self):
        pol = GaussianPolicy.build(2, 2, seed=1)
        np.testing.assert_array_equal(sample_action(pol, np.ones(2), seed=5), sample_action(pol, np.ones(2), seed=5))
        assert not np.array_equal(sample_action(pol, np.ones(2), seed=5), sample_action(pol, np.ones(2), seed=6))

    def test_non_finite_mean(self):
        pol = GaussianPolicy.build(2, 2, seed=1)
        pol.mean_net.params[:] = np.nan
        with pytest.raises(FloatingPointError):
            action_log_density(pol, np.ones(2), np.zeros(2))

    def test_grad_log_prob_finite_differences(self):
        old, batch = gaussian_batch(n=20)
        w = np.random.default_rng(3).normal(size=20)
        analytic = old.grad_log_prob(batch.states, batch.actions, w)
        base = old.params.copy()
        for i in range(0, len(base), 7):
            p = base.copy()
            p[i] += 1e-6
            old.set_params(p)
            up = w @ old.log_prob(batch.states, batch.actions)
            p[i] -= 2e-6
            old.set_params(p)
            down = w @ old.log_prob(batch.states, batch.actions)
            assert analytic[i] == pytest.approx((up - down) / 2e-6, rel=1e-5, abs=1e-7)
        old.set_params(base)

    def test_serialization_round_trip(self):
        pol = GaussianPolicy.build(3, 3, seed=4)
        back = GaussianPolicy.from_dict(pol.to_dict())
        np.testing.assert_array_equal(back.params, pol.params)

    def test_entropy_formula(self):
        pol = GaussianPolicy.build(2, 2, init_std=0.5)
        assert pol.entropy() == pytest.approx(2 * (math.log(0.5) + 0.5 * (math.log(2 * math.pi) + 1)))


class TestTabularSoftmax:
    def test_grad_log_prob_finite_differences(self):
        rng = np.random.default_rng(0)
        pol = TabularSoftmaxPolicy(rng.normal(size=(3, 4)))
        states, actions, w = rng.integers(3, size=30), rng.integers(4, size=30), rng.normal(size=30)
        analytic = pol.grad_log_prob(states, actions, w)
        base = pol.params.copy()
        for i in range(len(base)):
            p = base.copy()
            p[i] += 1e-6
            pol.set_params(p)
            up = w @ pol.log_prob(states, actions)
            p[i] -= 2e-6
            pol.set_params(p)
            down = w @ pol.log_prob(states, actions)
            assert analytic[i] == pytest.approx((up - down) / 2e-6, rel=1e-6, abs=1e-8)

    def test_probabilities_normalized(self):
        pol = TabularSoftmaxPolicy(np.array([[1000.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(pol.probs.sum(axis=1), 1.0)
        assert pol.probs[1, 0] == 0.5


class TestAdvantages:
    def test_perfect_baseline_on_deterministic_mdp(self):
        rewards = np.array([[1.0, 2.0, 3.0]])
        baseline = returns_to_go(rewards)
        np.testing.assert_array_equal(advantage_estimates(rewards, baseline), 0.0)

    def test_zero_baseline_gives_return_to_go(self):
        rewards = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 0.0]])
        np.testing.assert_array_equal(advantage_estimates(rewards, np.zeros((2, 3))), [[6, 5, 3], [-0.5, -1, 0]])

    def test_discounting_and_lengths(self):
        adv = advantage_estimates(np.array([[1.0, 1.0, 7.0]]), np.zeros((1, 3)), lengths=[2], gamma=0.5)
        np.testing.assert_allclose(adv, [[1.5, 1.0, 0.0]])

    def test_chain_monte_carlo_matches_exact(self):
        H = 4
        ens = build_chain_posterior(H)
        pi = uniform_policy(ens)
        m = mean_mdp(ens)
        vals = exact_values(m, pi)
        ro = sample_trajectories(m, pi, 100_000, seed=7)
        valid = np.arange(H)[None, :] < ro.lengths[:, None]
        steps = np.broadcast_to(np.arange(H), ro.states.shape)
        baseline = vals.V[steps, ro.states]
        adv = advantage_estimates(ro.rewards, baseline, ro.lengths)
        checked = 0
        for t in range(H):
            for s in range(ens.num_states):
                for a in range(ens.num_actions):
                    mask = valid & (steps == t) & (ro.states == s) & (ro.actions == a)
                    if mask.sum() < 100:
                        continue
                    sample = adv[mask]
                    se = sample.std() / math.sqrt(len(sample))
                    assert abs(sample.mean() - vals.A[t, s, a]) <= 3 * se + 1e-12
                    checked += 1
        assert checked >= 2 * H


class TestSurrogates:
    def test_clip_cap_and_floor_arithmetic(self):
        batch, pol = fixed_batch([2.0], [1.0])
        assert surrogate_clip(batch, pol, 0.15) == pytest.approx(1.15)
        batch, pol = fixed_batch([0.5], [-1.0])
        assert surrogate_clip(batch, pol, 0.15) == pytest.approx(-0.85)

    def test_std_arithmetic(self):
        batch, pol = fixed_batch([1.2], [0.0], [3.0])
        assert surrogate_std(batch, pol) == pytest.approx(0.6)

    def test_at_old_policy(self):
        old, batch = gaussian_batch()
        assert surrogate_std(batch, old) == 0.0
        assert surrogate_clip(batch, old) == surrogate_sr(batch, old)
        assert surrogate_sr(batch, old) == pytest.approx(batch.advantages.sum() / 10)
        assert conservative_objective(batch, old, 0.5) == surrogate_clip(batch, old)

    def test_zero_advantages(self):
        old, batch = gaussian_batch()
        batch.advantages[:] = 0.0
        assert surrogate_sr(batch, perturbed(old, 0.1, 0)) == 0.0

    def test_zero_weights_zero_penalty(self):
        old, batch = gaussian_batch()
        batch.sqrt_d[:] = 0.0
        new = perturbed(old, 0.1, 0)
        assert surrogate_std(batch, new) == 0.0
        assert exploration_objective(batch, new, 7.0) == surrogate_clip(batch, new)

    def test_reductions_are_bitwise(self):
        old, batch = gaussian_batch()
        new = perturbed(old, 0.1, 1)
        assert conservative_objective(batch, new, 0.0) == surrogate_clip(batch, new)
        assert exploration_objective(batch, new, 0.0) == surrogate_clip(batch, new)
        g_clip = objective_gradient(batch, new, "clip")[1]
        np.testing.assert_array_equal(objective_gradient(batch, new, "conservative", alpha=0.0)[1], g_clip)
        np.testing.assert_array_equal(objective_gradient(batch, new, "exploration", beta=0.0)[1], g_clip)

    def test_non_increasing_in_alpha(self):
        old, batch = gaussian_batch()
        for seed in range(5):
            new = perturbed(old, 0.05, seed)
            values = [conservative_objective(batch, new, a) for a in (0.25, 0.5, 0.75)]
            assert values[0] >= values[1] >= values[2]
            assert surrogate_std(batch, new) > 0

    def test_negative_weights_rejected(self):
        old, batch = gaussian_batch()
        with pytest.raises(ValueError):
            conservative_objective(batch, old, -1.0)
        with pytest.raises(ValueError):
            exploration_objective(batch, old, -1.0)

    def test_missing_uncertainty(self):
        old, batch = gaussian_batch()
        batch.sqrt_d = None
        with pytest.raises(ValueError):
            surrogate_std(batch, old)

    def test_invalid_batch(self):
        with pytest.raises(ValueError):
            SurrogateBatch(np.zeros(2), np.zeros(2), [0.0, -np.inf], [1.0, 1.0])
        with pytest.raises(ValueError):
            SurrogateBatch(np.zeros(2), np.zeros(2), [0.0, 0.0], [1.0, 1.0], sqrt_d=[1.0, -1.0])

    def test_exploration_regression_value(self):
        old, batch = gaussian_batch(seed=11)
        new = perturbed(old, 0.05, 3)
        r = np.exp(new.log_prob(batch.states, batch.actions) - batch.old_log_prob)
        adv = batch.advantages + 10.0 * batch.sqrt_d
        reference = sum(
            (min(1.15, ri) if ai > 0 else max(0.85, ri)) * ai for ri, ai in zip(r, adv)
        ) / batch.num_trajectories
        value = exploration_objective(batch, new, 10.0)
        assert value == pytest.approx(reference, rel=1e-12)
        assert value == pytest.approx(134.97871756495985, rel=1e-9)

    @pytest.mark.parametrize("kind", ["sr", "clip", "std", "conservative", "exploration"])
    def test_gradients_match_finite_differences(self, kind):
        old, batch = gaussian_batch(n=50)
        new = perturbed(old, 0.03, 2)
        value, grad = objective_gradient(batch, new, kind, alpha=0.5, beta=2.0)
        base = new.params.copy()
        for i in range(0, len(base), 5):
            p = base.copy()
            p[i] += 1e-7
            new.set_params(p)
            up = objective_gradient(batch, new, kind, alpha=0.5, beta=2.0)[0]
            p[i] -= 2e-7
            new.set_params(p)
            down = objective_gradient(batch, new, kind, alpha=0.5, beta=2.0)[0]
            assert grad[i] == pytest.approx((up - down) / 2e-7, rel=1e-4, abs=1e-6)


def clip_is_one_sided(ratio, adv, eps, clipped, unclipped):
    """The clipped term never exceeds the unclipped one and only differs past the clip radius in the rewarded direction."""
    if clipped > unclipped + 1e-12:
        return False
    rewarded = ratio > 1 + eps if adv > 0 else ratio < 1 - eps
    return rewarded or adv == 0 or abs(clipped - unclipped) <= 1e-12 * max(1.0, abs(unclipped))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0.01, 5.0), st.floats(-5.0, 5.0)), min_size=1, max_size=30),
    st.floats(0.01, 0.9),
)
def test_clip_is_one_sided(records, eps):
    for ratio, adv in records:
        batch, pol = fixed_batch([ratio], [adv])
        assert clip_is_one_sided(ratio, adv, eps, surrogate_clip(batch, pol, eps), surrogate_sr(batch, pol))


class TestProbImprovement:
    def test_old_policy_gives_half(self):
        old, batch = gaussian_batch()
        assert prob_improvement(batch, old) == 0.5

    def test_standard_normal_values(self):
        batch, pol = fixed_batch([1.2], [3.0], [3.0])
        assert prob_improvement(batch, pol) == pytest.approx(0.8413447460685429, abs=1e-6)
        batch, pol = fixed_batch([1.2], [-3.0], [3.0])
        assert prob_improvement(batch, pol) == pytest.approx(0.15865525393145707, abs=1e-6)

    def test_monotone_in_expected_gain(self):
        values = [improvement_probability(g, 1.3) for g in np.linspace(-4, 4, 41)]
        assert all(a < b for a, b in zip(values, values[1:]))
        assert improvement_probability(1.0, 0.0) == 0.5


def _bandit_batch(sqrt_d=(0.0, 0.0)):
    return SurrogateBatch(np.zeros(2, dtype=int), np.array([0, 1]), np.log([0.5, 0.5]), [1.0, -1.0], list(sqrt_d), num_trajectories=2)


class TestOptimizePolicy:
    def test_zero_learning_rate(self):
        old, batch = gaussian_batch()
        new, diag = optimize_policy(old, batch, OptimConfig(epochs=2, minibatch_size=64), learning_rate=0.0)
        np.testing.assert_array_equal(new.params, old.params)
        assert diag.kl == 0.0 and diag.penalty == 0.0 and not diag.aborted

    def test_input_not_modified(self):
        old, batch = gaussian_batch()
        before = old.params.copy()
        optimize_policy(old, batch, OptimConfig(epochs=2, minibatch_size=64, learning_rate=1e-2))
        np.testing.assert_array_equal(old.params, before)

    def test_bandit_ascent(self):
        pol = TabularSoftmaxPolicy(np.zeros((1, 2)))
        new, diag = optimize_policy(pol, _bandit_batch(), OptimConfig(alpha=0.0, epochs=1, learning_rate=0.1))
        assert new.probs[0, 0] > 0.5
        assert diag.objective_after > diag.objective_before

    def test_large_alpha_is_more_conservative(self):
        pol = TabularSoftmaxPolicy(np.zeros((1, 2)))
        batch = _bandit_batch(sqrt_d=(5.0, 0.0))
        kls = []
        for alpha in (0.0, 100.0):
            _, diag = optimize_policy(pol, batch, OptimConfig(alpha=alpha, epochs=50, learning_rate=0.05))
            kls.append(diag.kl)
        assert 0.0 <= kls[1] < kls[0]

    def test_non_finite_objective_aborts(self):
        old, batch = gaussian_batch()
        batch.old_log_prob[:5] = -1e4
        with np.errstate(over="ignore", invalid="ignore"):
            new, diag = optimize_policy(old, batch, OptimConfig(epochs=1, minibatch_size=500, learning_rate=1e-2))
        assert diag.aborted and "non-finite" in diag.message
        np.testing.assert_array_equal(new.params, old.params)

    def test_deterministic_given_seed(self):
        old, batch = gaussian_batch()
        cfg = OptimConfig(epochs=3, minibatch_size=50, learning_rate=1e-2)
        a, _ = optimize_policy(old, batch, cfg, seed=4)
        b, _ = optimize_policy(old, batch, cfg, seed=4)
        np.testing.assert_array_equal(a.params, b.params)

    def test_unknown_objective(self):
        old, batch = gaussian_batch()
        with pytest.raises(ValueError):
            optimize_policy(old, batch, OptimConfig(), objective="sr")

    def test_learning_rate_schedule(self):
        cfg = OptimConfig(learning_rate=1.0, lr_final_fraction=0.1)
        assert cfg.learning_rate_at(0, 5) == 1.0
        assert cfg.learning_rate_at(4, 5) == pytest.approx(0.1)
        assert OptimConfig(lr_schedule="constant").learning_rate_at(3, 5) == 3e-4


class TestExactSurrogate:
    def _case(self, seed):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, int(rng.integers(2, 6)), int(rng.integers(2, 4)), int(rng.integers(1, 5)))
        logits = rng.normal(size=(mdp.num_states, mdp.num_actions))
        return mdp, logits

    def test_zero_at_old_policy(self):
        for seed in range(5):
            mdp, logits = self._case(seed)
            old = TabularPolicy.from_logits(logits)
            assert abs(exact_surrogate(mdp, old, old.probs)) <= 1e-12

    def test_gradient_matches_return_gradient(self):
        for seed in range(5):
            mdp, logits = self._case(seed)
            old = TabularPolicy.from_logits(logits)
            grad = exact_surrogate_gradient(mdp, old, logits)
            for idx in np.ndindex(logits.shape):
                up, down = logits.copy(), logits.copy()
                up[idx] += 1e-5
                down[idx] -= 1e-5
                fd = (expected_return(mdp, TabularPolicy.from_logits(up)) - expected_return(mdp, TabularPolicy.from_logits(down))) / 2e-5
                assert grad[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)
