"""Tests for the intervention environment."""

import math

import numpy as np
import pytest

from eventrl.env import (
    EnvConfig,
    HawkesInterventionEnv,
    LearnedEnvAdapter,
    load_env_config,
    make_synthetic_task,
    save_env_config,
)
from eventrl.nhpi import RolloutAnchor
from eventrl.tpp import EventSequence, HawkesParams, HawkesState, make_rng


def flat_config(schedule="usi", horizon=30.0, mu=(0.3, 0.3, 0.05, 0.05), beta=None):
    k = len(mu)
    beta = np.zeros((k, k)) if beta is None else np.asarray(beta)
    return EnvConfig(
        n_types=k,
        observed_types=tuple(range(1, k // 2 + 1)),
        action_types=tuple(range(k // 2 + 1, k + 1)),
        params=HawkesParams(mu=np.array(mu), beta=beta, zeta=1.0),
        lambda_target=np.array(mu[: k // 2]),
        horizon=horizon,
        schedule=schedule,
    )


def rollout(env, policy, seed):
    env.reset(seed)
    rng = np.random.default_rng(seed)
    total, taus, rewards = 0.0, [], []
    while not env.done:
        st = env.step(policy(rng))
        total += st.reward
        taus.append(st.tau)
        rewards.append(st.reward)
    return total, taus, rewards


class TestReset:
    def test_equal_seeds_equal_trajectories(self):
        cfg = make_synthetic_task("8usi", seed=1)
        env = HawkesInterventionEnv(cfg, 0)
        acts = [0, 5, 0, 6, 7, 0, 8] * 40

        def play():
            env.reset(123)
            out = []
            i = 0
            while not env.done:
                st = env.step(acts[i % len(acts)])
                out.append((st.observation, st.reward, st.tau))
                i += 1
            return out, list(env.stream.events)

        assert play() == play()

    def test_reset_discards_excitation(self):
        cfg = make_synthetic_task("8usi", seed=1)
        env = HawkesInterventionEnv(cfg, 0)
        for _ in range(30):
            if env.done:
                break
            env.step(5)
        env.reset(7)
        np.testing.assert_allclose(env.intensity_now(), cfg.params.mu)

    def test_fresh_intensity_equals_mu(self):
        cfg = make_synthetic_task("16si", seed=2)
        env = HawkesInterventionEnv(cfg, 3)
        np.testing.assert_allclose(env.intensity_now(), cfg.params.mu)


class TestStep:
    def test_perfect_tracking_zero_reward(self):
        # beta = 0 and mu = target: every no-op reward is exactly 0
        cfg = flat_config()
        env = HawkesInterventionEnv(cfg, 0)
        total, _, rewards = rollout(env, lambda rng: 0, seed=4)
        assert rewards and all(r == 0.0 for r in rewards)
        assert total == 0.0

    def test_noop_has_zero_cost_component(self):
        cfg = flat_config()
        env = HawkesInterventionEnv(cfg, 0)
        env.reset(5)
        st = env.step(0)
        assert st.reward == 0.0
        env.reset(5)
        st2 = env.step(3)  # same state, action inserted: tracking error + cost
        lam_obs = env.intensity_now()[:2]
        expected = -float(np.sum((cfg.lambda_target - lam_obs) ** 2)) - 0.1 * 1.0
        assert st2.reward == pytest.approx(expected)
        assert st2.reward < st.reward

    def test_rewards_nonpositive(self):
        cfg = make_synthetic_task("8usi", seed=3)
        env = HawkesInterventionEnv(cfg, 0)
        for sd in range(3):
            _, _, rewards = rollout(
                env, lambda rng: int(rng.choice([0] + list(cfg.action_types))), sd)
            assert all(r <= 0.0 for r in rewards)

    def test_invalid_action_rejected(self):
        cfg = make_synthetic_task("8usi", seed=0)
        env = HawkesInterventionEnv(cfg, 0)
        with pytest.raises(ValueError):
            env.step(2)  # observed type, not in the action set

    def test_step_after_done_raises(self):
        cfg = flat_config(horizon=1.0)
        env = HawkesInterventionEnv(cfg, 0)
        while not env.done:
            env.step(0)
        with pytest.raises(RuntimeError):
            env.step(0)

    def test_si_decision_grid(self):
        cfg = make_synthetic_task("8si", seed=4)
        env = HawkesInterventionEnv(cfg, 0)
        _, taus, _ = rollout(env, lambda rng: 0, seed=6)
        assert all(abs(t - 0.5) < 1e-9 for t in taus[:-1])
        markers = [t for t, k, _ in env.stream.events if k == 0]
        expected = [0.5 * i for i in range(1, len(markers) + 1)]
        np.testing.assert_allclose(markers, expected)
        assert markers[-1] < 100.0

    def test_usi_decision_ticks(self):
        cfg = make_synthetic_task("8usi", seed=4)
        env = HawkesInterventionEnv(cfg, 0)
        env.reset(8)
        tick = cfg.usi_tick
        assert env.pending_decision_time() == pytest.approx(tick)
        prev_d = env.pending_decision_time()
        for _ in range(50):
            st = env.step(0)
            if env.done:
                break
            t_evt = st.observation[0]
            d = env.pending_decision_time()
            # smallest tick strictly after the triggering event
            assert d > t_evt
            assert d - t_evt <= tick + 1e-9
            assert abs(d / tick - round(d / tick)) < 1e-6
            assert st.tau == pytest.approx(d - prev_d)
            prev_d = d

    def test_episode_terminates_at_horizon(self):
        cfg = make_synthetic_task("8usi", seed=5)
        env = HawkesInterventionEnv(cfg, 0)
        rollout(env, lambda rng: 0, seed=9)
        assert env.done
        seq, rewards = env.episode_log()
        assert len(rewards) == len(seq.events)
        assert all(t < cfg.horizon for t, _, _ in seq.events)

    def test_action_insertion_inhibits(self):
        # one strong inhibiting action: post-decision observed intensity drops
        beta = np.zeros((2, 2))
        beta[1, 0] = -0.6
        cfg = EnvConfig(
            n_types=2, observed_types=(1,), action_types=(2,),
            params=HawkesParams(mu=np.array([0.5, 0.0]), beta=beta, zeta=1.0),
            lambda_target=np.array([0.5]), horizon=20.0, schedule="usi",
        )
        env = HawkesInterventionEnv(cfg, 0)
        env.reset(10)
        st = env.step(2)
        lam_at_decision = 0.5 - 0.6  # rectified to 0
        assert st.reward == pytest.approx(-(0.5 - max(lam_at_decision, 0.0)) ** 2 - 0.1)


class TestNoopStationaryRate:
    def test_time_average_matches_analytic(self):
        cfg = make_synthetic_task("8si", seed=6)
        obs_idx = np.array(cfg.observed_types) - 1
        analytic = cfg.params.stationary_rates()[obs_idx]
        env = HawkesInterventionEnv(cfg, 0)
        avgs = []
        for sd in range(100):
            env.reset(sd)
            while not env.done:
                env.step(0)
            state = HawkesState(cfg.params)
            integral = np.zeros(cfg.n_types)
            for t, k, _ in env.stream.events:
                integral += state.integral_vector_to(t)
                state.add_event(t, k)
            integral += state.integral_vector_to(cfg.horizon)
            avgs.append(integral[obs_idx] / cfg.horizon)
        mean = np.mean(avgs, axis=0)
        assert np.all(np.abs(mean - analytic) / analytic < 0.10)


class TestMakeSyntheticTask:
    def test_table_shapes(self):
        for name, k in (("8si", 8), ("8usi", 8), ("16si", 16), ("16usi", 16)):
            cfg = make_synthetic_task(name, seed=0)
            assert cfg.n_types == k
            assert len(cfg.action_types) == k // 2
            assert cfg.horizon == 100.0
        np.testing.assert_allclose(make_synthetic_task("8si", 0).lambda_target,
                                   [0.3, 0.3, 0.3, 0.3])
        np.testing.assert_allclose(make_synthetic_task("16usi", 0).lambda_target,
                                   [0.4, 0.3, 0.2, 0.1, 0.4, 0.3, 0.2, 0.1])

    def test_subcritical_by_construction(self):
        for seed in range(10):
            cfg = make_synthetic_task("16usi", seed=seed)
            assert cfg.params.branching_ratio() < 1.0

    def test_seed_determinism(self):
        a = make_synthetic_task("8usi", seed=11)
        b = make_synthetic_task("8usi", seed=11)
        np.testing.assert_array_equal(a.params.beta, b.params.beta)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            make_synthetic_task("12si", seed=0)


class TestConfigRoundTrip:
    def test_json_round_trip(self, tmp_path):
        cfg = make_synthetic_task("16si", seed=9)
        path = tmp_path / "env.json"
        save_env_config(cfg, path)
        back = load_env_config(path)
        assert back.schedule == cfg.schedule
        assert back.action_types == cfg.action_types
        np.testing.assert_array_equal(back.params.beta, cfg.params.beta)
        np.testing.assert_array_equal(back.lambda_target, cfg.lambda_target)


class GroundTruthRollout:
    """Rollout-protocol stub backed by the exact Hawkes kernel state."""

    def __init__(self, params):
        self.params = params

    def rollout_anchor(self, seq):
        state = HawkesState(self.params)
        for t, k, _ in seq.events:
            if k != 0:
                state.add_event(t, k)
        t0 = seq.events[-1][0] if seq.events else 0.0
        c = state.c * math.exp(-self.params.zeta * max(t0 - state.t, 0.0))
        return _HawkesAnchor(self.params.mu, c, self.params.zeta, t0)


class _HawkesAnchor:
    def __init__(self, mu, c, zeta, t):
        self.mu, self.c, self.zeta, self.t = mu, c, zeta, t

    def rates(self, t):
        return np.maximum(self.mu + self.c * np.exp(-self.zeta * (t - self.t)), 0.0)

    def bound(self):
        return float(np.sum(self.mu + np.maximum(self.c, 0.0)))


class TestLearnedEnvAdapter:
    def _reward_fn(self, cfg):
        obs = np.array(cfg.observed_types) - 1
        def fn(rates, action):
            cost = cfg.action_cost if action != 0 else 0.0
            return -float(np.sum((cfg.lambda_target - rates[obs]) ** 2)) \
                - cfg.cost_weight * cost
        return fn

    def test_ground_truth_stub_matches_env_statistics(self):
        cfg = make_synthetic_task("8usi", seed=7)
        stub = GroundTruthRollout(cfg.params)
        adapter = LearnedEnvAdapter(stub, self._reward_fn(cfg), cfg.horizon,
                                    seed=0, tick=cfg.usi_tick,
                                    action_types=cfg.action_types)
        env = HawkesInterventionEnv(cfg, 0)
        n = 40

        def counts(target):
            out = []
            for sd in range(n):
                target.reset(50_000 + sd)
                while not target.done:
                    target.step(0)
                out.append(sum(1 for _, k, _ in target.stream.events if k != 0))
            return np.array(out, dtype=float)

        a = counts(env)
        b = counts(adapter)
        assert abs(a.mean() - b.mean()) / a.mean() < 0.05

    def test_done_at_horizon(self):
        cfg = make_synthetic_task("8usi", seed=7)
        adapter = LearnedEnvAdapter(GroundTruthRollout(cfg.params),
                                    self._reward_fn(cfg), cfg.horizon, seed=1,
                                    action_types=cfg.action_types)
        steps = 0
        while not adapter.done:
            adapter.step(0)
            steps += 1
            assert steps < 100_000
        assert all(t < cfg.horizon for t, _, _ in adapter.stream.events)

    def test_zero_actions_incur_no_cost(self):
        cfg = make_synthetic_task("8usi", seed=7)
        costs = []

        def reward_fn(rates, action):
            costs.append(cfg.action_cost if action != 0 else 0.0)
            return 0.0

        adapter = LearnedEnvAdapter(GroundTruthRollout(cfg.params), reward_fn,
                                    cfg.horizon, seed=2, action_types=cfg.action_types)
        while not adapter.done:
            adapter.step(0)
        assert costs and all(c == 0.0 for c in costs)
