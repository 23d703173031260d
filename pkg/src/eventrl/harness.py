"""Experiment orchestration: the outer training loop, reference policies,
evaluation, metrics persistence and plot-data export.

The training loop interleaves, per environment step: act on the current
latent state, record the decision tuple, one update each of the transition,
reward, Q and V networks (plus a Polyak step on the value target) and one
policy-improvement step.  On every episode end the trajectory joins the
trajectory buffer and the intensity model takes a few likelihood steps over
a resampled mini-batch.

Metrics are one CSV row per episode with a JSON sidecar of the resolved
configuration; identical (config, seed) pairs produce byte-identical files.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .agent import (
    LatentState,
    SedrlAgent,
    TransitionTuple,
    make_agent_nets,
)
from .buffers import StepBuffer, TrajectoryBuffer
from .env import HawkesInterventionEnv, make_synthetic_task, save_env_config
from .nhpi import (
    NhpiConfig,
    NhpiModel,
    NhpiTrainConfig,
    NonFiniteLossError,
    load_checkpoint,
    nll_batch,
    pad_batch,
    save_checkpoint,
    train_nhpi,
)
from .tpp import write_jsonl

METRIC_COLUMNS = (
    "episode", "end_step", "return", "decisions",
    "nhpi_nll", "transition_loss", "reward_loss", "q_loss", "v_loss",
    "policy_objective",
)


@dataclass
class RunConfig:
    """Resolved hyperparameters of one run.

    Defaults follow the documented grid for the synthetic tasks; the 16-type
    tasks widen the networks and attention dimensions (see `for_task`).
    """

    task: str = "8usi"
    seed: int = 0
    max_env_steps: int = 30_000
    warmup_trajectories: int = 64
    task_param_seed: int = 0          # environment parameters; shared across seeds

    # intensity model
    embed_dim: int = 64
    action_dim: int = 16
    attn_layers: int = 2
    heads: int = 1
    key_dim: int = 16
    value_dim: int = 16
    ffn_hidden: int = 128
    hidden_dim: int = 64
    max_len: int = 512
    nhpi_lr: float = 1e-3
    nhpi_warmup_epochs: int = 20
    nhpi_refresh_steps: int = 5       # likelihood steps per finished episode
    nhpi_batch: int = 8
    nhpi_mc_samples: int = 32

    # agent
    model_lr: float = 1e-4            # transition/reward nets
    value_lr: float = 1e-4
    policy_lr: float = 1e-4
    value_widths: tuple[int, ...] = (128, 64)
    policy_widths: tuple[int, ...] = (128, 64)
    transition_hidden: int = 128
    reward_hidden: int = 128
    rho: float = 0.01
    batch_size: int = 64
    polyak_rate: float = 0.005
    temperature: float = 1.0
    tau_mode: str = "nhpi"            # "nhpi" | "buffer"
    step_buffer_capacity: int = 100_000
    traj_buffer_capacity: int = 256

    eval_every_episodes: int = 0      # 0 disables periodic evaluation
    eval_episodes: int = 5

    @classmethod
    def for_task(cls, task: str, seed: int = 0, **overrides) -> "RunConfig":
        base = dict(task=task, seed=seed)
        if task.startswith("16"):
            base.update(heads=2, key_dim=32, value_dim=32, hidden_dim=128,
                        value_widths=(256, 128), policy_widths=(256, 128),
                        transition_hidden=256, reward_hidden=256, value_lr=3e-4)
        base.update(overrides)
        return cls(**base)

    def nhpi_config(self, n_types: int) -> NhpiConfig:
        return NhpiConfig(
            n_types=n_types, embed_dim=self.embed_dim, action_dim=self.action_dim,
            attn_layers=self.attn_layers, heads=self.heads, key_dim=self.key_dim,
            value_dim=self.value_dim, ffn_hidden=self.ffn_hidden,
            hidden_dim=self.hidden_dim, max_len=self.max_len,
        )


def _f17(x) -> str:
    return format(float(x), ".17g")


def _seed_int(*parts) -> int:
    import zlib
    ints = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1, np.uint64)[0])


class MetricsWriter:
    """Append-only CSV with a fixed header; every value must be finite."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")
        self._fh.write(",".join(METRIC_COLUMNS) + "\n")
        self._fh.flush()

    def write_row(self, **kw):
        vals = []
        for col in METRIC_COLUMNS:
            v = kw[col]
            if not math.isfinite(float(v)):
                raise NonFiniteLossError(f"non-finite metric {col}={v}")
            vals.append(str(int(v)) if col in ("episode", "end_step", "decisions")
                        else _f17(v))
        self._fh.write(",".join(vals) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    cols = {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}
    return cols


def run_reference(config: RunConfig, policy: str, out_dir) -> dict:
    """Roll a uniform-random or no-op policy with the run_sedrl metric schema."""
    if policy not in ("random", "noop"):
        raise ValueError(f"unknown reference policy {policy!r}")
    os.makedirs(out_dir, exist_ok=True)
    env_cfg = make_synthetic_task(config.task, seed=config.task_param_seed)
    env = HawkesInterventionEnv(env_cfg, 0)
    choices = [0] + list(env_cfg.action_types)
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([config.seed, 9100])))
    policy_fn = (lambda: 0) if policy == "noop" else \
        (lambda: int(choices[rng.integers(len(choices))]))
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({"kind": f"reference-{policy}", **asdict(config)}, fh,
                  indent=1, sort_keys=True, default=list)
        fh.write("\n")
    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    returns: list[float] = []
    step, episode = 0, 0
    while step < config.max_env_steps:
        env.reset(np.random.SeedSequence([config.seed, 9000, episode]))
        ep_ret, decisions = 0.0, 0
        while not env.done and step < config.max_env_steps:
            st = env.step(policy_fn())
            ep_ret += st.reward
            decisions += 1
            step += 1
        if not env.done:
            break  # budget spent mid-episode: drop the partial episode
        returns.append(ep_ret)
        writer.write_row(episode=episode, end_step=step, **{"return": ep_ret},
                         decisions=decisions, nhpi_nll=0.0, transition_loss=0.0,
                         reward_loss=0.0, q_loss=0.0, v_loss=0.0,
                         policy_objective=0.0)
        episode += 1
    writer.close()
    return {"returns": np.array(returns), "metrics": os.path.join(out_dir, "metrics.csv")}


def _latent(nhpi: NhpiModel, env) -> np.ndarray:
    return nhpi.latent_state(env.state_sequence())


def _collect_episode(env, nhpi, agent, action_map, episode_seed):
    """One full episode under the current policy; returns (stream, return)."""
    env.reset(episode_seed)
    ep_ret = 0.0
    while not env.done:
        a_idx, _ = agent.act(_latent(nhpi, env))
        st = env.step(action_map[a_idx])
        ep_ret += st.reward
    return env.episode_log()[0], ep_ret


def run_sedrl(config: RunConfig, out_dir) -> dict:
    """The full training pipeline; returns summary paths and return curve."""
    os.makedirs(out_dir, exist_ok=True)
    env_cfg = make_synthetic_task(config.task, seed=config.task_param_seed)
    save_env_config(env_cfg, os.path.join(out_dir, "env_config.json"))
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump({"kind": "sedrl", **asdict(config)}, fh, indent=1,
                  sort_keys=True, default=list)
        fh.write("\n")

    env = HawkesInterventionEnv(env_cfg, 0)
    nhpi = NhpiModel(config.nhpi_config(env_cfg.n_types),
                     seed=_seed_int(config.seed, "nhpi"))
    nets = make_agent_nets(
        config.hidden_dim, len(env_cfg.action_types) + 1,
        value_widths=tuple(config.value_widths),
        policy_widths=tuple(config.policy_widths),
        transition_hidden=config.transition_hidden,
        reward_hidden=config.reward_hidden,
        rho=config.rho, alpha=config.policy_lr,
        seed=_seed_int(config.seed, "agent"),
    )
    agent = SedrlAgent(nets, model_lr=config.model_lr, value_lr=config.value_lr,
                       polyak_rate=config.polyak_rate,
                       temperature=config.temperature,
                       seed=_seed_int(config.seed, "agent-rng"))
    action_map = {0: 0}
    for i, a in enumerate(env_cfg.action_types):
        action_map[i + 1] = a

    d_step = StepBuffer(config.step_buffer_capacity)
    d_tr = TrajectoryBuffer(config.traj_buffer_capacity)
    sample_rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([config.seed, 7])))

    def episode_seed(i):
        return np.random.SeedSequence([config.seed, 11, i])

    # ---- warm-up: M trajectories with the initial policy, then the first fit
    for m in range(config.warmup_trajectories):
        stream, _ = _collect_episode(env, nhpi, agent, action_map, episode_seed(-1 - m))
        d_tr.push(stream)
    warmup_curve = train_nhpi(
        nhpi, list(d_tr),
        NhpiTrainConfig(epochs=config.nhpi_warmup_epochs, batch_size=config.nhpi_batch,
                        lr=config.nhpi_lr, mc_samples=config.nhpi_mc_samples,
                        seed=_seed_int(config.seed, "nhpi-warmup")))
    with open(os.path.join(out_dir, "nhpi_warmup.csv"), "w") as fh:
        fh.write("epoch,mean_nll\n")
        for i, v in enumerate(warmup_curve):
            fh.write(f"{i},{_f17(v)}\n")

    writer = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
    opt_nhpi = torch.optim.Adam(nhpi.parameters(), lr=config.nhpi_lr)
    nhpi_gen = torch.Generator().manual_seed(_seed_int(config.seed, "nhpi-mc"))
    returns: list[float] = []
    episode, step = 0, 0

    def refresh_nhpi():
        total = 0.0
        for _ in range(config.nhpi_refresh_steps):
            chunk = d_tr.sample(config.nhpi_batch, sample_rng)
            loss = nll_batch(nhpi, pad_batch(nhpi, chunk),
                             mc_samples=config.nhpi_mc_samples,
                             generator=nhpi_gen).mean()
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"nhpi refresh loss {float(loss)}")
            opt_nhpi.zero_grad(set_to_none=True)
            loss.backward()
            opt_nhpi.step()
            total += float(loss.detach())
        return total / max(config.nhpi_refresh_steps, 1)

    try:
        while step < config.max_env_steps:
            env.reset(episode_seed(episode))
            state = _latent(nhpi, env)
            d_time = env.pending_decision_time()
            ep_ret, decisions = 0.0, 0
            losses_acc: dict[str, list[float]] = {}
            nhpi_nll_ep = 0.0
            while not env.done and step < config.max_env_steps:
                a_idx, _ = agent.act(state)
                st = env.step(action_map[a_idx])
                step += 1
                decisions += 1
                ep_ret += st.reward
                if not math.isfinite(st.reward):
                    raise NonFiniteLossError(f"non-finite reward at step {step}")
                if not env.done:
                    next_state = _latent(nhpi, env)
                    next_d = env.pending_decision_time()
                    d_step.push(TransitionTuple(
                        LatentState(state, d_time), a_idx, st.tau, st.reward,
                        LatentState(next_state, d_time + st.tau)))
                    state, d_time = next_state, next_d
                if len(d_step) >= config.batch_size:
                    batch = d_step.sample(config.batch_size, sample_rng)
                    losses = agent.update(batch, nhpi_model=nhpi,
                                          tau_mode=config.tau_mode)
                    for k, v in losses.items():
                        losses_acc.setdefault(k, []).append(v)
            if not env.done:
                break  # budget spent mid-episode: drop the partial episode
            d_tr.push(env.episode_log()[0])
            nhpi_nll_ep = refresh_nhpi()
            returns.append(ep_ret)
            mean = {k: float(np.mean(v)) for k, v in losses_acc.items()}
            writer.write_row(
                episode=episode, end_step=step, **{"return": ep_ret},
                decisions=decisions, nhpi_nll=nhpi_nll_ep,
                transition_loss=mean.get("transition_loss", 0.0),
                reward_loss=mean.get("reward_loss", 0.0),
                q_loss=mean.get("q_loss", 0.0),
                v_loss=mean.get("v_loss", 0.0),
                policy_objective=mean.get("policy_objective", 0.0))
            episode += 1
    except NonFiniteLossError:
        snap = {"step": step, "episode": episode,
                "returns_so_far": returns[-5:]}
        with open(os.path.join(out_dir, "abort_snapshot.json"), "w") as fh:
            json.dump(snap, fh, indent=1)
        writer.close()
        raise
    writer.close()
    save_checkpoint(nhpi, os.path.join(out_dir, "nhpi.pt"))
    agent.save(os.path.join(out_dir, "agent.pt"))
    return {"returns": np.array(returns),
            "metrics": os.path.join(out_dir, "metrics.csv"),
            "nhpi_warmup": warmup_curve}


def evaluate(checkpoint_dir, task: str, episodes: int, seed: int,
             policy: str | None = None, task_param_seed: int = 0) -> dict:
    """Frozen-policy episode returns; `policy` overrides with a reference."""
    env_cfg = make_synthetic_task(task, seed=task_param_seed)
    env = HawkesInterventionEnv(env_cfg, 0)
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence([seed, 9100])))
    if policy is not None:
        if policy not in ("random", "noop"):
            raise ValueError(f"unknown reference policy {policy!r}")
        choices = [0] + list(env_cfg.action_types)
        act = (lambda env_: 0) if policy == "noop" else \
            (lambda env_: int(choices[rng.integers(len(choices))]))
    else:
        nhpi = load_checkpoint(os.path.join(checkpoint_dir, "nhpi.pt"))
        agent = SedrlAgent.load(os.path.join(checkpoint_dir, "agent.pt"))
        if agent.nets.state_dim != nhpi.config.hidden_dim:
            raise ValueError("checkpoint latent width does not match the model")
        if agent.nets.n_actions != len(env_cfg.action_types) + 1:
            raise ValueError("checkpoint action count does not match the task")
        action_map = {0: 0}
        for i, a in enumerate(env_cfg.action_types):
            action_map[i + 1] = a

        def act(env_):
            a_idx, _ = agent.act(_latent(nhpi, env_))
            return action_map[a_idx]

    returns = []
    for ep in range(episodes):
        env.reset(np.random.SeedSequence([seed, 9000, ep]))
        total = 0.0
        while not env.done:
            total += env.step(act(env)).reward
        returns.append(total)
    returns = np.array(returns)
    std = float(returns.std(ddof=0)) if episodes == 1 else float(returns.std(ddof=1))
    return {"mean": float(returns.mean()), "std": std, "returns": returns}


def export_plot_data(log_paths, out_path, window: int = 1) -> int:
    """Aligned, smoothed training curves: CSV rows (step, mean_return, std).

    The first log's episode end-steps define the grid; other logs contribute
    their most recent smoothed return at each grid step.  Returns row count.
    """
    if not log_paths:
        raise ValueError("need at least one metrics log")
    if window < 1:
        raise ValueError("window must be >= 1")
    logs = [read_metrics(p) for p in log_paths]
    for lg in logs:
        for col in ("end_step", "return"):
            if col not in lg:
                raise ValueError("incompatible metric schema")

    def smooth(x):
        if window == 1:
            return x
        out = np.empty_like(x)
        for i in range(len(x)):
            out[i] = x[max(0, i - window + 1):i + 1].mean()
        return out

    grid = logs[0]["end_step"]
    curves = []
    for lg in logs:
        steps, rets = lg["end_step"], smooth(lg["return"])
        idx = np.clip(np.searchsorted(steps, grid, side="right") - 1, 0, len(rets) - 1)
        curves.append(rets[idx])
    curves = np.stack(curves)
    mean = curves.mean(axis=0)
    std = curves.std(axis=0, ddof=0)
    with open(out_path, "w") as fh:
        fh.write("step,mean_return,std_return\n")
        for s, m, sd in zip(grid, mean, std):
            fh.write(f"{int(s)},{_f17(m)},{_f17(sd)}\n")
    return len(grid)


def simulate_trajectories(task: str, episodes: int, seed: int, out_path,
                          policy: str = "noop", task_param_seed: int = 0) -> int:
    """Ground-truth rollouts to JSONL; returns the number of episodes."""
    env_cfg = make_synthetic_task(task, seed=task_param_seed)
    env = HawkesInterventionEnv(env_cfg, 0)
    choices = [0] + list(env_cfg.action_types)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 5])))
    seqs, rewards = [], []
    for ep in range(episodes):
        env.reset(np.random.SeedSequence([seed, 6, ep]))
        while not env.done:
            a = 0 if policy == "noop" else int(choices[rng.integers(len(choices))])
            env.step(a)
        seq, rew = env.episode_log()
        seqs.append(seq)
        rewards.append(rew)
    write_jsonl(seqs, out_path, n_types=env_cfg.n_types, rewards=rewards)
    return episodes
