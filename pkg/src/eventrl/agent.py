"""Latent-space agent: transition/reward models, SMDP value learning and a
one-step stochastic value gradient policy update.

States are the action-toggled hidden vectors of the intensity model.  All
value bootstrapping uses continuous-time discounting: a transition that waits
tau before the next decision contributes

    target = (1 - e^{-rho tau}) / rho * r + e^{-rho tau} * V(s')

(the reward is treated as constant over the interval).  Policy improvement
draws a relaxed Gumbel-softmax action, imagines reward and next state through
the learned models, simulates tau by thinning the intensity model from the
current state, and ascends the resulting value estimate in the policy
parameters only; the plain-ascent step `theta += alpha * grad` keeps the
other networks untouched by construction.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .nhpi import NonFiniteLossError
from .tpp import make_rng

DTYPE = torch.float64


@dataclass
class LatentState:
    """Hidden state vector plus the decision timestamp it was taken at."""

    s: np.ndarray
    t: float


@dataclass
class TransitionTuple:
    """(s, a, tau, r, s') record of one decision."""

    s: LatentState
    a: int
    tau: float
    r: float
    s_next: LatentState

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if abs((self.s_next.t - self.s.t) - self.tau) > 1e-6 * max(1.0, self.tau):
            raise ValueError(
                f"tau {self.tau} inconsistent with timestamps "
                f"{self.s.t} -> {self.s_next.t}"
            )


def _mlp(in_dim: int, widths: tuple[int, ...], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_dim
    for w in widths:
        layers += [nn.Linear(prev, w, dtype=DTYPE), nn.ReLU()]
        prev = w
    layers.append(nn.Linear(prev, out_dim, dtype=DTYPE))
    return nn.Sequential(*layers)


class GaussianHead(nn.Module):
    """MLP trunk with reparameterized-Gaussian output (mean, softplus std)."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.trunk = nn.Sequential(nn.Linear(in_dim, hidden, dtype=DTYPE), nn.ReLU())
        self.mean = nn.Linear(hidden, out_dim, dtype=DTYPE)
        self.std_raw = nn.Linear(hidden, out_dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        h = self.trunk(x)
        std = torch.nn.functional.softplus(self.std_raw(h))
        return self.mean(h) + std * noise


@dataclass
class AgentNets:
    """All trainable pieces plus the discount rate and policy step size."""

    transition: GaussianHead          # g(s, a, eps)
    reward: GaussianHead              # kappa(s, a, xi)
    value: nn.Module                  # V_phi(s)
    q: nn.Module                      # Q_psi(s, a)
    policy: nn.Module                 # pi_theta(s) -> logits
    value_target: nn.Module           # slow copy of V_phi
    rho: float
    alpha: float
    state_dim: int
    n_actions: int
    arch: dict = None


def _seeded_init(modules, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for root in modules:
            for mod in root.modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.weight.shape[1])
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.zero_()


def make_agent_nets(
    state_dim: int,
    n_actions: int,
    value_widths: tuple[int, ...] = (128, 64),
    policy_widths: tuple[int, ...] = (128, 64),
    transition_hidden: int = 128,
    reward_hidden: int = 128,
    rho: float = 0.01,
    alpha: float = 1e-4,
    seed: int = 0,
) -> AgentNets:
    if not rho > 0:
        raise ValueError("rho must be positive")
    nets = AgentNets(
        transition=GaussianHead(state_dim + n_actions, transition_hidden, state_dim),
        reward=GaussianHead(state_dim + n_actions, reward_hidden, 1),
        value=_mlp(state_dim, value_widths, 1),
        q=_mlp(state_dim + n_actions, value_widths, 1),
        policy=_mlp(state_dim, policy_widths, n_actions),
        value_target=None,
        rho=rho,
        alpha=alpha,
        state_dim=state_dim,
        n_actions=n_actions,
        arch={"value_widths": tuple(value_widths),
              "policy_widths": tuple(policy_widths),
              "transition_hidden": transition_hidden,
              "reward_hidden": reward_hidden},
    )
    _seeded_init([nets.transition, nets.reward, nets.value, nets.q, nets.policy], seed)
    nets.value_target = copy.deepcopy(nets.value)
    for p in nets.value_target.parameters():
        p.requires_grad_(False)
    return nets


def batch_tensors(batch: list[TransitionTuple], n_actions: int) -> dict:
    s = torch.tensor(np.stack([b.s.s for b in batch]), dtype=DTYPE)
    s_next = torch.tensor(np.stack([b.s_next.s for b in batch]), dtype=DTYPE)
    a = torch.tensor([b.a for b in batch], dtype=torch.long)
    a_onehot = torch.nn.functional.one_hot(a, n_actions).to(DTYPE)
    tau = torch.tensor([b.tau for b in batch], dtype=DTYPE)
    r = torch.tensor([b.r for b in batch], dtype=DTYPE)
    return {"s": s, "a": a, "a_onehot": a_onehot, "tau": tau, "r": r,
            "s_next": s_next}


def smdp_value_target(r, tau, v_next, rho):
    """(1 - e^{-rho tau}) / rho * r + e^{-rho tau} * v_next (floats or tensors)."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    if isinstance(r, torch.Tensor) or isinstance(tau, torch.Tensor) \
            or isinstance(v_next, torch.Tensor):
        tau = torch.as_tensor(tau, dtype=DTYPE)
        disc = torch.exp(-rho * tau)
        return (1.0 - disc) / rho * torch.as_tensor(r, dtype=DTYPE) \
            + disc * torch.as_tensor(v_next, dtype=DTYPE)
    if not tau > 0:
        raise ValueError("tau must be positive")
    disc = math.exp(-rho * tau)
    return (1.0 - disc) / rho * r + disc * v_next


def _check_finite(loss: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"{what} loss is {float(loss)}")
    return loss


def transition_loss(nets: AgentNets, batch: dict,
                    generator: torch.Generator) -> torch.Tensor:
    """Mean ||s' - g(s, a, eps)||^2 with reparameterized noise."""
    x = torch.cat([batch["s"], batch["a_onehot"]], dim=-1)
    noise = torch.randn(batch["s"].shape, generator=generator, dtype=DTYPE)
    pred = nets.transition(x, noise)
    loss = ((batch["s_next"] - pred) ** 2).sum(-1).mean()
    return _check_finite(loss, "transition")


def reward_loss(nets: AgentNets, batch: dict,
                generator: torch.Generator) -> torch.Tensor:
    """Mean (r - kappa(s, a, xi))^2 with reparameterized noise."""
    x = torch.cat([batch["s"], batch["a_onehot"]], dim=-1)
    noise = torch.randn(batch["r"].shape[0], 1, generator=generator, dtype=DTYPE)
    pred = nets.reward(x, noise).squeeze(-1)
    loss = ((batch["r"] - pred) ** 2).mean()
    return _check_finite(loss, "reward")


def q_update(nets: AgentNets, batch: dict) -> torch.Tensor:
    """MSE between Q(s, a) and the SMDP target under the slow value copy.

    The target side carries no gradient; only Q's parameters are touched.
    """
    with torch.no_grad():
        v_next = nets.value_target(batch["s_next"]).squeeze(-1)
        target = smdp_value_target(batch["r"], batch["tau"], v_next, nets.rho)
    q = nets.q(torch.cat([batch["s"], batch["a_onehot"]], dim=-1)).squeeze(-1)
    loss = ((q - target) ** 2).mean()
    return _check_finite(loss, "q")


def _q_all_actions(nets: AgentNets, s: torch.Tensor) -> torch.Tensor:
    """Q(s, a) for every action; (B, A)."""
    b = s.shape[0]
    eye = torch.eye(nets.n_actions, dtype=DTYPE)
    s_rep = s.unsqueeze(1).expand(b, nets.n_actions, nets.state_dim)
    a_rep = eye.unsqueeze(0).expand(b, nets.n_actions, nets.n_actions)
    x = torch.cat([s_rep, a_rep], dim=-1).reshape(b * nets.n_actions, -1)
    return nets.q(x).reshape(b, nets.n_actions)


def v_update(nets: AgentNets, batch: dict) -> torch.Tensor:
    """MSE between V(s) and the exact policy expectation of Q over actions."""
    s = batch["s"]
    with torch.no_grad():
        probs = torch.softmax(nets.policy(s), dim=-1)
        target = (probs * _q_all_actions(nets, s)).sum(-1)
    v = nets.value(s).squeeze(-1)
    loss = ((v - target) ** 2).mean()
    return _check_finite(loss, "v")


def gumbel_action(nets: AgentNets, s: torch.Tensor, temperature: float,
                  generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Relaxed Gumbel-softmax sample and its hard argmax index.

    The relaxed sample is differentiable in the policy logits; the hard index
    follows softmax(logits) exactly (Gumbel-max).
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    logits = nets.policy(s)
    u = torch.rand(logits.shape, generator=generator, dtype=DTYPE)
    gumbel = -torch.log(-torch.log(u.clamp(min=1e-300)))
    relaxed = torch.softmax((logits + gumbel) / temperature, dim=-1)
    hard = relaxed.argmax(dim=-1)
    return relaxed, hard


def sample_tau_from_model(model, states: torch.Tensor, rng: np.random.Generator,
                          t_max: float = 100.0) -> np.ndarray:
    """Thin the first arrival of the decay heads anchored at each state.

    Vectorized over the batch; waiting times are capped at t_max (the
    discount e^{-rho tau} is then effectively zero anyway).
    """
    with torch.no_grad():
        mu, eta, zeta = model.decay_params(states)
    mu, eta, zeta = mu.numpy(), eta.numpy(), zeta.numpy()
    bound = np.logaddexp(0.0, np.maximum(mu, eta)).sum(-1)
    b = states.shape[0]
    tau = np.full(b, t_max)
    t = np.zeros(b)
    active = bound > 0.0
    while active.any():
        idx = np.flatnonzero(active)
        t[idx] += rng.exponential(1.0 / bound[idx])
        hit_cap = t >= t_max
        active &= ~hit_cap
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        arg = mu[idx] + (eta[idx] - mu[idx]) * np.exp(-zeta[idx] * t[idx, None])
        rates = np.logaddexp(0.0, arg).sum(-1)
        accept = rng.uniform(size=idx.size) * bound[idx] <= rates
        tau[idx[accept]] = t[idx[accept]]
        active[idx[accept]] = False
    return tau


def policy_improvement(
    nets: AgentNets,
    nhpi_model,
    states: torch.Tensor,
    rng,
    generator: torch.Generator,
    temperature: float = 1.0,
    tau_mode: str = "nhpi",
    taus: np.ndarray | None = None,
) -> float:
    """One plain-ascent step on the imagined one-step value.

    For each state: draw a relaxed action, imagine reward and next state via
    the learned models, simulate the waiting time (tau_mode="nhpi"; "buffer"
    reuses the supplied taus instead), and ascend

        theta += alpha * d/d theta mean[(1-e^{-rho tau})/rho kappa + e^{-rho tau} V(g)]

    with every non-policy network held constant.  Returns the objective.
    """
    relaxed, hard = gumbel_action(nets, states, temperature, generator)
    b = states.shape[0]
    xi = torch.randn(b, 1, generator=generator, dtype=DTYPE)
    eps = torch.randn(b, nets.state_dim, generator=generator, dtype=DTYPE)
    x = torch.cat([states, relaxed], dim=-1)
    r_hat = nets.reward(x, xi).squeeze(-1)
    s_hat = nets.transition(x, eps)
    v_hat = nets.value(s_hat).squeeze(-1)
    if tau_mode == "nhpi":
        tau = torch.as_tensor(sample_tau_from_model(nhpi_model, states, make_rng(rng)),
                              dtype=DTYPE)
    elif tau_mode == "buffer":
        if taus is None:
            raise ValueError("tau_mode='buffer' needs taus")
        tau = torch.as_tensor(np.asarray(taus, dtype=float), dtype=DTYPE)
    else:
        raise ValueError(f"unknown tau_mode {tau_mode!r}")
    disc = torch.exp(-nets.rho * tau)
    objective = ((1.0 - disc) / nets.rho * r_hat + disc * v_hat).mean()
    _check_finite(objective, "policy objective")
    params = [p for p in nets.policy.parameters() if p.requires_grad]
    grads = torch.autograd.grad(objective, params)
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.add_(nets.alpha * g)
    return float(objective.detach())


def polyak_update(target: nn.Module, source: nn.Module, rate: float = 0.005) -> None:
    """target <- (1 - rate) * target + rate * source."""
    with torch.no_grad():
        for pt, ps in zip(target.parameters(), source.parameters()):
            pt.mul_(1.0 - rate).add_(rate * ps)


class SedrlAgent:
    """Bundles the networks with their optimizers and private random streams.

    One update call per environment step: transition, reward, Q, V (plus a
    Polyak step on the value target) and one policy-improvement step.
    """

    def __init__(self, nets: AgentNets, model_lr: float = 1e-4,
                 value_lr: float = 1e-4, polyak_rate: float = 0.005,
                 temperature: float = 1.0, seed: int = 0):
        self.nets = nets
        self.polyak_rate = polyak_rate
        self.temperature = temperature
        self.opt_transition = torch.optim.Adam(nets.transition.parameters(), lr=model_lr)
        self.opt_reward = torch.optim.Adam(nets.reward.parameters(), lr=model_lr)
        self.opt_value = torch.optim.Adam(nets.value.parameters(), lr=value_lr)
        self.opt_q = torch.optim.Adam(nets.q.parameters(), lr=value_lr)
        self.generator = torch.Generator().manual_seed(seed)
        self.tau_rng = make_rng(seed + 1)

    def act(self, state: np.ndarray) -> tuple[int, np.ndarray]:
        s = torch.tensor(state, dtype=DTYPE).unsqueeze(0)
        relaxed, hard = gumbel_action(self.nets, s, self.temperature, self.generator)
        return int(hard[0]), relaxed[0].detach().numpy()

    def _opt_step(self, opt, loss):
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return float(loss.detach())

    def update(self, transitions: list[TransitionTuple], nhpi_model=None,
               tau_mode: str = "nhpi") -> dict[str, float]:
        batch = batch_tensors(transitions, self.nets.n_actions)
        out = {
            "transition_loss": self._opt_step(
                self.opt_transition, transition_loss(self.nets, batch, self.generator)),
            "reward_loss": self._opt_step(
                self.opt_reward, reward_loss(self.nets, batch, self.generator)),
            "q_loss": self._opt_step(self.opt_q, q_update(self.nets, batch)),
            "v_loss": self._opt_step(self.opt_value, v_update(self.nets, batch)),
        }
        polyak_update(self.nets.value_target, self.nets.value, self.polyak_rate)
        out["policy_objective"] = policy_improvement(
            self.nets, nhpi_model, batch["s"], self.tau_rng, self.generator,
            temperature=self.temperature, tau_mode=tau_mode,
            taus=batch["tau"].numpy() if tau_mode == "buffer" else None,
        )
        return out

    # ------------------------------------------------------------------

    def save(self, path) -> None:
        blob = {
            "nets": {
                "transition": self.nets.transition.state_dict(),
                "reward": self.nets.reward.state_dict(),
                "value": self.nets.value.state_dict(),
                "q": self.nets.q.state_dict(),
                "policy": self.nets.policy.state_dict(),
                "value_target": self.nets.value_target.state_dict(),
            },
            "optim": {
                "transition": self.opt_transition.state_dict(),
                "reward": self.opt_reward.state_dict(),
                "value": self.opt_value.state_dict(),
                "q": self.opt_q.state_dict(),
            },
            "rho": self.nets.rho,
            "alpha": self.nets.alpha,
            "state_dim": self.nets.state_dim,
            "n_actions": self.nets.n_actions,
            "arch": self.nets.arch,
            "lrs": {"model": self.opt_transition.param_groups[0]["lr"],
                    "value": self.opt_value.param_groups[0]["lr"]},
            "polyak_rate": self.polyak_rate,
            "temperature": self.temperature,
            "torch_rng": self.generator.get_state(),
            "tau_rng": self.tau_rng.bit_generator.state,
        }
        torch.save(blob, path)

    @classmethod
    def load(cls, path) -> "SedrlAgent":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        nets = make_agent_nets(
            blob["state_dim"], blob["n_actions"],
            rho=blob["rho"], alpha=blob["alpha"], **blob["arch"],
        )
        for name, mod in (("transition", nets.transition), ("reward", nets.reward),
                          ("value", nets.value), ("q", nets.q),
                          ("policy", nets.policy), ("value_target", nets.value_target)):
            mod.load_state_dict(blob["nets"][name])
        agent = cls(nets, model_lr=blob["lrs"]["model"], value_lr=blob["lrs"]["value"],
                    polyak_rate=blob["polyak_rate"], temperature=blob["temperature"])
        for name, opt in (("transition", agent.opt_transition),
                          ("reward", agent.opt_reward), ("value", agent.opt_value),
                          ("q", agent.opt_q)):
            opt.load_state_dict(blob["optim"][name])
        agent.generator.set_state(blob["torch_rng"])
        agent.tau_rng.bit_generator.state = blob["tau_rng"]
        return agent
