"""Ground-truth environment: a Hawkes simulator with exogenous interventions.

Implements the fake-news-mitigation task.  Event types split into an observed
group (whose intensities the agent steers toward a target vector) and an
action group (the intervention types).  Interventions are inserted into the
Hawkes history exactly like spontaneous events: the inserted type's row of
beta applies from the insertion time on, so a negative row inhibits the
observed group.

Two intervention schedules:

- SI:  the agent decides at every grid point {delta, 2 delta, ...}; events
  keep streaming between decisions.  Each decision appears in the logged
  stream as a marker entry (t = i delta, k = 0, a = action).
- USI: the agent decides at the first clock tick strictly after each
  environment event; the action annotation rides the triggering event entry.
  Between a trigger and its decision tick the simulator is paused, i.e. the
  next event is thinned from the decision time onward (one observation per
  step).  The very first decision of an episode is anchored at t = 0 and
  logged as a marker entry at the first tick.

The reward at a decision time d is

    r = -|| lambda_target - lambda_obs(d+) ||^2 - cost_weight * cost(a)

evaluated after the insertion, over the observed types only; cost(a) is
`action_cost` for any nonzero action.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import json
import math

import numpy as np

from .tpp import EventSequence, HawkesParams, HawkesState, make_rng, thin_next_event


@dataclass(frozen=True)
class EnvConfig:
    n_types: int
    observed_types: tuple[int, ...]
    action_types: tuple[int, ...]
    params: HawkesParams
    lambda_target: np.ndarray
    horizon: float
    cost_weight: float = 0.1
    action_cost: float = 1.0
    schedule: str = "usi"          # "si" | "usi"
    si_delta: float = 0.5
    usi_tick: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "lambda_target",
                           np.asarray(self.lambda_target, dtype=float))
        if not self.action_types:
            raise ValueError("action set must be non-empty")
        if np.any(self.lambda_target < 0):
            raise ValueError("target intensities must be nonnegative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.lambda_target.shape[0] != len(self.observed_types):
            raise ValueError("one target per observed type")
        if self.schedule not in ("si", "usi"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class EnvStep:
    observation: tuple[float, int] | None
    reward: float
    done: bool
    tau: float


def _next_tick(t: float, tick: float) -> float:
    """Smallest multiple of `tick` strictly greater than t."""
    return tick * (math.floor(t / tick + 1e-9) + 1)


class HawkesInterventionEnv:
    """One episode worker over the intervention task; never shares state."""

    def __init__(self, config: EnvConfig, seed=0):
        self.config = config
        self._obs_idx = np.array(config.observed_types, dtype=int) - 1
        self.reset(seed)

    # ------------------------------------------------------------------

    def reset(self, seed=None) -> EnvStep:
        """Clear all excitation and reseed; returns the time-0 marker."""
        if seed is not None:
            self._rng = make_rng(seed)
        self._phys = HawkesState(self.config.params)
        self.stream = EventSequence(events=[], horizon=self.config.horizon)
        self.rewards: list[float] = []
        self.done = False
        self._unreported: tuple[float, int] | None = None
        if self.config.schedule == "usi":
            self._decision_t = _next_tick(0.0, self.config.usi_tick)
            self._append(self._decision_t, 0, 0)   # first decision marker
            self._at_decision = True
        else:
            self._decision_t = self.config.si_delta
            self._advanced_to = 0.0
            self._at_decision = False
        if self._decision_t >= self.config.horizon:
            raise ValueError("horizon shorter than the first decision time")
        return EnvStep(observation=(0.0, 0), reward=0.0, done=False, tau=0.0)

    def _append(self, t: float, k: int, a: int) -> None:
        self.stream.append(t, k, a)
        self.rewards.append(0.0)
        if k != 0:
            self._unreported = (t, k)

    def _advance_si(self) -> None:
        """Generate events up to the pending grid decision and place its marker."""
        if self._at_decision:
            return
        cursor = self._advanced_to
        while True:
            nxt = thin_next_event(self._phys, cursor, self._decision_t, self._rng)
            if nxt is None:
                break
            self._phys.add_event(*nxt)
            self._append(nxt[0], nxt[1], 0)
            cursor = nxt[0]
        self._advanced_to = self._decision_t
        self._append(self._decision_t, 0, 0)
        self._at_decision = True

    def state_sequence(self) -> EventSequence:
        """The event-action stream as the agent sees it before deciding.

        The last entry is the pending decision position with a zero action,
        so the last hidden row of an encoder run over it is the pre-action
        state.  SI schedules advance the simulation to the grid point here.
        """
        if self.config.schedule == "si" and not self.done:
            self._advance_si()
        return self.stream

    def pending_decision_time(self) -> float:
        return self._decision_t

    # ------------------------------------------------------------------

    def step(self, action: int) -> EnvStep:
        if self.done:
            raise RuntimeError("episode is finished; call reset()")
        a = int(action)
        if a != 0 and a not in self.config.action_types:
            raise ValueError(f"action {a} not in {{0}} | {self.config.action_types}")
        if self.config.schedule == "si":
            self._advance_si()
        d = self._decision_t
        t_last, k_last, _ = self.stream.events[-1]
        self.stream.events[-1] = (t_last, k_last, a)
        cost = self.config.action_cost if a != 0 else 0.0
        if a != 0:
            self._phys.add_event(d, a)
        lam_obs = self._phys.intensity(d)[self._obs_idx]
        reward = -float(np.sum((self.config.lambda_target - lam_obs) ** 2))
        reward -= self.config.cost_weight * cost
        self.rewards[-1] = reward
        self._unreported = None

        horizon = self.config.horizon
        if self.config.schedule == "usi":
            nxt = thin_next_event(self._phys, d, horizon, self._rng)
            if nxt is None:
                self.done = True
                tau = horizon - d
            else:
                self._phys.add_event(*nxt)
                self._append(nxt[0], nxt[1], 0)
                new_d = _next_tick(nxt[0], self.config.usi_tick)
                if new_d >= horizon:
                    self.done = True
                    self._fill_trailing(nxt[0])
                    tau = horizon - d
                else:
                    self._decision_t = new_d
                    tau = new_d - d
        else:
            new_d = d + self.config.si_delta
            self._at_decision = False
            if new_d >= horizon - 1e-9:
                self.done = True
                self._fill_trailing(d)
                tau = horizon - d
            else:
                self._decision_t = new_d
                tau = self.config.si_delta
        obs = self._unreported
        self._unreported = None
        return EnvStep(observation=obs, reward=reward, done=self.done, tau=tau)

    def _fill_trailing(self, cursor: float) -> None:
        """Simulate the remaining undecided tail so logs cover [0, horizon)."""
        while True:
            nxt = thin_next_event(self._phys, cursor, self.config.horizon, self._rng)
            if nxt is None:
                return
            self._phys.add_event(*nxt)
            self._append(nxt[0], nxt[1], 0)
            cursor = nxt[0]

    # ------------------------------------------------------------------

    def intensity_now(self) -> np.ndarray:
        """Current (post-jump) intensity vector of the physical process."""
        return self._phys.intensity(max(self._phys.t, 0.0))

    def episode_log(self) -> tuple[EventSequence, list[float]]:
        """Stream plus per-entry rewards (0 on non-decision entries)."""
        return self.stream, list(self.rewards)


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

_TARGETS = {
    8: np.array([0.3, 0.3, 0.3, 0.3]),
    16: np.array([0.4, 0.3, 0.2, 0.1, 0.4, 0.3, 0.2, 0.1]),
}


def make_synthetic_task(name: str, seed: int = 0) -> EnvConfig:
    """Fake-news tasks "8si" | "8usi" | "16si" | "16usi".

    The first half of the types is the observed (fake news) group with the
    target intensities above; the second half is the action (valid news)
    group.  beta is drawn from the seed: positive excitation inside the
    observed group, strong inhibition from action types onto observed types,
    then |beta| is rescaled to a fixed subcritical spectral radius.
    """
    name = name.lower()
    try:
        k = {"8si": 8, "8usi": 8, "16si": 16, "16usi": 16}[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}") from None
    schedule = "usi" if "usi" in name else "si"
    n_obs = k // 2
    rng = make_rng(seed)
    mu = np.concatenate([
        rng.uniform(0.5, 0.65, size=n_obs),    # spontaneous fake news
        rng.uniform(0.01, 0.03, size=n_obs),   # rare spontaneous valid news
    ])
    beta = np.zeros((k, k))
    beta[:n_obs, :n_obs] = rng.uniform(0.03, 0.09, size=(n_obs, n_obs))
    beta[:n_obs, n_obs:] = rng.uniform(0.0, 0.03, size=(n_obs, n_obs))
    # each action type strongly inhibits its counterpart observed type and
    # weakly the rest, so choosing which valid news to post matters
    beta[n_obs:, :n_obs] = -rng.uniform(0.04, 0.1, size=(n_obs, n_obs))
    beta[n_obs:, :n_obs][np.diag_indices(n_obs)] = -rng.uniform(0.45, 0.6, size=n_obs)
    zeta = 1.0
    radius = float(np.max(np.abs(np.linalg.eigvals(np.abs(beta))))) / zeta
    cap = 0.75
    if radius > cap:
        beta *= cap / radius
    params = HawkesParams(mu=mu, beta=beta, zeta=zeta)
    return EnvConfig(
        n_types=k,
        observed_types=tuple(range(1, n_obs + 1)),
        action_types=tuple(range(n_obs + 1, k + 1)),
        params=params,
        lambda_target=_TARGETS[k].copy(),
        horizon=100.0,
        schedule=schedule,
    )


# ---------------------------------------------------------------------------
# config (de)serialization: flat keys, arrays as JSON lists
# ---------------------------------------------------------------------------

def save_env_config(config: EnvConfig, path) -> None:
    blob = {
        "n_types": config.n_types,
        "observed_types": list(config.observed_types),
        "action_types": list(config.action_types),
        "mu": config.params.mu.tolist(),
        "beta": config.params.beta.tolist(),
        "zeta": config.params.zeta,
        "lambda_target": config.lambda_target.tolist(),
        "horizon": config.horizon,
        "cost_weight": config.cost_weight,
        "action_cost": config.action_cost,
        "schedule": config.schedule,
        "si_delta": config.si_delta,
        "usi_tick": config.usi_tick,
    }
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_env_config(path) -> EnvConfig:
    with open(path) as fh:
        blob = json.load(fh)
    params = HawkesParams(mu=np.array(blob["mu"]), beta=np.array(blob["beta"]),
                          zeta=float(blob["zeta"]))
    return EnvConfig(
        n_types=int(blob["n_types"]),
        observed_types=tuple(blob["observed_types"]),
        action_types=tuple(blob["action_types"]),
        params=params,
        lambda_target=np.array(blob["lambda_target"]),
        horizon=float(blob["horizon"]),
        cost_weight=float(blob["cost_weight"]),
        action_cost=float(blob["action_cost"]),
        schedule=blob["schedule"],
        si_delta=float(blob["si_delta"]),
        usi_tick=float(blob["usi_tick"]),
    )


# ---------------------------------------------------------------------------
# learned-model adapter
# ---------------------------------------------------------------------------

class LearnedEnvAdapter:
    """Drives any fitted intensity model through the USI step contract.

    `model` needs `rollout_anchor(seq) -> RolloutAnchor` (NhpiModel or any
    stub); `reward_fn(rates, action) -> float` supplies the reward from the
    model's intensity at the decision time.
    """

    def __init__(self, model, reward_fn, horizon: float, seed=0, tick: float = 0.1,
                 action_types: tuple[int, ...] | None = None):
        self.model = model
        self.reward_fn = reward_fn
        self.horizon = horizon
        self.tick = tick
        self.action_types = action_types
        self.reset(seed)

    def reset(self, seed=None) -> EnvStep:
        if seed is not None:
            self._rng = make_rng(seed)
        self.stream = EventSequence(events=[], horizon=self.horizon)
        self.rewards: list[float] = []
        self.done = False
        self._decision_t = _next_tick(0.0, self.tick)
        self.stream.append(self._decision_t, 0, 0)
        self.rewards.append(0.0)
        return EnvStep(observation=(0.0, 0), reward=0.0, done=False, tau=0.0)

    def state_sequence(self) -> EventSequence:
        return self.stream

    def pending_decision_time(self) -> float:
        return self._decision_t

    def step(self, action: int) -> EnvStep:
        if self.done:
            raise RuntimeError("episode is finished; call reset()")
        a = int(action)
        if a != 0 and self.action_types is not None and a not in self.action_types:
            raise ValueError(f"action {a} not in {{0}} | {self.action_types}")
        d = self._decision_t
        t_last, k_last, _ = self.stream.events[-1]
        self.stream.events[-1] = (t_last, k_last, a)
        anchor = self.model.rollout_anchor(self.stream)
        reward = float(self.reward_fn(anchor.rates(d), a))
        self.rewards[-1] = reward

        obs = None
        t = d
        while True:
            bound = anchor.bound()
            if bound <= 0.0:
                self.done = True
                tau = self.horizon - d
                break
            t += self._rng.exponential(1.0 / bound)
            if t >= self.horizon:
                self.done = True
                tau = self.horizon - d
                break
            rates = anchor.rates(t)
            total = float(rates.sum())
            if self._rng.uniform() * bound <= total:
                kk = int(self._rng.choice(len(rates), p=rates / total)) + 1
                self.stream.append(t, kk, 0)
                self.rewards.append(0.0)
                obs = (t, kk)
                new_d = _next_tick(t, self.tick)
                if new_d >= self.horizon:
                    self.done = True
                    tau = self.horizon - d
                else:
                    self._decision_t = new_d
                    tau = new_d - d
                break
        return EnvStep(observation=obs, reward=reward, done=self.done, tau=tau)

    def episode_log(self) -> tuple[EventSequence, list[float]]:
        return self.stream, list(self.rewards)
