"""Neural Hawkes process with interventions (NHPI).

Encodes an event-action stream {(t_i, k_i, a_i)} with masked self-attention
and emits, for every position, the parameters of a decaying intensity:

    lambda_k(t) = softplus(mu_k + (eta_k - mu_k) exp(-zeta_k (t - t_i)))

with mu_k = relu(w_mu_k . h), eta_k = relu(w_eta_k . h) and
zeta_k = softplus(w_zeta_k . h) read off the hidden state h(t_i) of the most
recent position.  A learned begin-of-stream row at t = 0 anchors the
intensity before the first event, so empty prefixes and 0-event likelihoods
are well defined.

Entries with type 0 are decision markers: they carry a timestamp and an
action annotation, condition the encoder like any position, but are excluded
from the event term of the likelihood and never generated by thinning.

The whole module runs in float64; gradients come from reverse-mode autodiff
and are validated against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field
import math

import numpy as np
import torch
from torch import nn

from .tpp import EventSequence, ThinningBoundError, make_rng

DTYPE = torch.float64
EPS_FLOOR = 1e-9


class NonFiniteLossError(RuntimeError):
    """Training observed a NaN or infinite loss."""


@dataclass(frozen=True)
class NhpiConfig:
    """Architecture of the intensity model.

    `n_types` is the number of stochastic event types K; the event-type
    vocabulary additionally holds a decision-marker index (0) and a
    begin-of-stream index (K + 1).  `hidden_dim` is the width of the hidden
    states h(t_i) and therefore of the agent's latent states.
    """

    n_types: int
    embed_dim: int = 64       # event/time embedding width
    action_dim: int = 16      # action embedding width
    attn_layers: int = 2
    heads: int = 1
    key_dim: int = 16
    value_dim: int = 16
    ffn_hidden: int = 128
    hidden_dim: int = 64
    max_len: int = 512        # positions per window; oldest entries drop out

    def __post_init__(self):
        for name in ("n_types", "embed_dim", "action_dim", "attn_layers", "heads",
                     "key_dim", "value_dim", "ffn_hidden", "hidden_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def omega(self) -> np.ndarray:
        """Frequencies 1 / 10000^((m-1)/M) for m = 1..M; positive, decreasing."""
        m = np.arange(1, self.embed_dim + 1, dtype=float)
        return 10000.0 ** (-(m - 1) / self.embed_dim)


def temporal_encoding(t: float, i: int, config: NhpiConfig) -> torch.Tensor:
    """Trigonometric timestamp/position encoding.

    Component m (1-indexed) is cos(w_m t + w_m i) for even m and
    sin(w_m t + w_m i) for odd m.
    """
    omega = torch.as_tensor(config.omega(), dtype=DTYPE)
    phase = omega * (float(t) + float(i))
    enc = torch.where(
        torch.arange(1, config.embed_dim + 1) % 2 == 0,
        torch.cos(phase),
        torch.sin(phase),
    )
    return enc


class AttentionBlock(nn.Module):
    """Masked multi-head attention followed by a two-layer feed-forward map."""

    def __init__(self, in_dim: int, heads: int, key_dim: int, value_dim: int,
                 ffn_hidden: int, out_dim: int):
        super().__init__()
        self.heads = heads
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.proj_q = nn.Linear(in_dim, heads * key_dim, bias=False, dtype=DTYPE)
        self.proj_k = nn.Linear(in_dim, heads * key_dim, bias=False, dtype=DTYPE)
        self.proj_v = nn.Linear(in_dim, heads * value_dim, bias=False, dtype=DTYPE)
        self.ffn_in = nn.Linear(heads * value_dim, ffn_hidden, dtype=DTYPE)
        self.ffn_out = nn.Linear(ffn_hidden, out_dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        h, dk, dv = self.heads, self.key_dim, self.value_dim
        q = self.proj_q(x).view(b, n, h, dk).transpose(1, 2)
        k = self.proj_k(x).view(b, n, h, dk).transpose(1, 2)
        v = self.proj_v(x).view(b, n, h, dv).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dk)
        scores = scores.masked_fill(~causal_mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, h * dv)
        return self.ffn_out(torch.relu(self.ffn_in(out)))


@dataclass
class HiddenTrajectory:
    """Per-position hidden states of an encoded stream.

    `hidden[i]` depends only on entries 0..i (causality); `toggled[i]` is the
    same position re-encoded with its action annotation zeroed.
    """

    hidden: torch.Tensor     # (L, hidden_dim)
    toggled: torch.Tensor    # (L, hidden_dim)
    times: np.ndarray        # (L,)


@dataclass
class RolloutAnchor:
    """Frozen head parameters at the most recent position of a rollout."""

    mu: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    t: float

    def rates(self, t: float) -> np.ndarray:
        dt = max(t - self.t, 0.0)
        arg = self.mu + (self.eta - self.mu) * np.exp(-self.zeta * dt)
        return np.logaddexp(0.0, arg)  # softplus

    def bound(self) -> float:
        """sum_k softplus(max(mu_k, eta_k)); dominates since each rate is monotone."""
        return float(np.sum(np.logaddexp(0.0, np.maximum(self.mu, self.eta))))


class NhpiModel(nn.Module):
    """Attention encoder plus decaying-intensity heads."""

    def __init__(self, config: NhpiConfig, seed: int = 0):
        super().__init__()
        self.config = config
        k, m, n = config.n_types, config.embed_dim, config.action_dim
        self.event_embed = nn.Embedding(k + 2, m, dtype=DTYPE)  # 0 marker, 1..K, K+1 BOS
        self.action_embed = nn.Linear(k, n, dtype=DTYPE)
        dims = [m + n] + [config.hidden_dim] * config.attn_layers
        self.blocks = nn.ModuleList(
            AttentionBlock(dims[i], config.heads, config.key_dim, config.value_dim,
                           config.ffn_hidden, dims[i + 1])
            for i in range(config.attn_layers)
        )
        self.head_mu = nn.Linear(config.hidden_dim, k, bias=False, dtype=DTYPE)
        self.head_eta = nn.Linear(config.hidden_dim, k, bias=False, dtype=DTYPE)
        self.head_zeta = nn.Linear(config.hidden_dim, k, bias=False, dtype=DTYPE)
        self.register_buffer("omega", torch.as_tensor(config.omega(), dtype=DTYPE))
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    bound = 1.0 / math.sqrt(mod.weight.shape[1])
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    if mod.bias is not None:
                        mod.bias.zero_()
                elif isinstance(mod, nn.Embedding):
                    bound = 1.0 / math.sqrt(mod.embedding_dim)
                    mod.weight.uniform_(-bound, bound, generator=gen)

    # ------------------------------------------------------------------
    # encoding
    # ------------------------------------------------------------------

    def _window(self, seq: EventSequence) -> list[tuple[float, int, int]]:
        keep = self.config.max_len - 1
        return seq.events[-keep:] if len(seq.events) > keep else seq.events

    def _temporal(self, times: torch.Tensor) -> torch.Tensor:
        """times (B, N) -> encoding (B, N, M); position index is the window row."""
        n = times.shape[1]
        pos = torch.arange(n, dtype=DTYPE)
        phase = self.omega * (times + pos).unsqueeze(-1)
        parity = torch.arange(1, self.config.embed_dim + 1) % 2 == 0
        return torch.where(parity, torch.cos(phase), torch.sin(phase))

    def _action_onehot(self, actions: torch.Tensor) -> torch.Tensor:
        """(B, N) action indices in 0..K -> (B, N, K); 0 maps to the zero vector."""
        k = self.config.n_types
        out = torch.zeros(*actions.shape, k, dtype=DTYPE)
        mask = actions > 0
        if mask.any():
            out[mask] = torch.eye(k, dtype=DTYPE)[actions[mask] - 1]
        return out

    def forward(self, times: torch.Tensor, types: torch.Tensor,
                actions: torch.Tensor) -> torch.Tensor:
        """Encode padded entry arrays (B, L) into hidden rows (B, L+1, hidden).

        Row 0 is the begin-of-stream anchor at t = 0; row i >= 1 is entry i-1.
        Pad entries must hold finite times; rows past a sequence's length only
        ever appear as masked-out keys, so their values are irrelevant.
        """
        b, length = times.shape
        bos_t = torch.zeros(b, 1, dtype=DTYPE)
        bos_k = torch.full((b, 1), self.config.n_types + 1, dtype=torch.long)
        bos_a = torch.zeros(b, 1, dtype=torch.long)
        t = torch.cat([bos_t, times], dim=1)
        k = torch.cat([bos_k, types], dim=1)
        a = torch.cat([bos_a, actions], dim=1)
        x = torch.cat(
            [self.event_embed(k) + self._temporal(t), self.action_embed(self._action_onehot(a))],
            dim=-1,
        )
        n = length + 1
        causal = torch.tril(torch.ones(n, n, dtype=torch.bool)).view(1, 1, n, n)
        for block in self.blocks:
            x = block(x, causal)
        return x

    def encode(self, seq: EventSequence) -> torch.Tensor:
        """Hidden rows (L+1, hidden) of one stream; row 0 is the BOS anchor."""
        window = self._window(seq)
        times = torch.tensor([[e[0] for e in window]], dtype=DTYPE)
        types = torch.tensor([[e[1] for e in window]], dtype=torch.long)
        actions = torch.tensor([[e[2] for e in window]], dtype=torch.long)
        return self.forward(times, types, actions)[0]

    def latent_state(self, seq: EventSequence) -> np.ndarray:
        """Hidden vector of the last position (the BOS row for empty streams)."""
        with torch.no_grad():
            return self.encode(seq)[-1].numpy().copy()

    # ------------------------------------------------------------------
    # intensity heads
    # ------------------------------------------------------------------

    def decay_params(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-type (mu, eta, zeta) of the decaying intensity at hidden state h."""
        mu = torch.relu(self.head_mu(h))
        eta = torch.relu(self.head_eta(h))
        zeta = torch.nn.functional.softplus(self.head_zeta(h))
        return mu, eta, zeta

    def intensity_from(self, h: torch.Tensor, dt: torch.Tensor) -> torch.Tensor:
        """Rates at time offsets dt >= 0 from the position encoded by h.

        h (..., hidden) and dt (...) broadcast to rates (..., K).
        """
        mu, eta, zeta = self.decay_params(h)
        arg = mu + (eta - mu) * torch.exp(-zeta * dt.unsqueeze(-1))
        return torch.nn.functional.softplus(arg)

    # ------------------------------------------------------------------
    # rollout interface (shared with ground-truth stubs in tests)
    # ------------------------------------------------------------------

    def rollout_anchor(self, seq: EventSequence) -> RolloutAnchor:
        with torch.no_grad():
            h = self.encode(seq)[-1]
            mu, eta, zeta = self.decay_params(h)
        t = seq.events[-1][0] if seq.events else 0.0
        return RolloutAnchor(mu=mu.numpy().copy(), eta=eta.numpy().copy(),
                             zeta=zeta.numpy().copy(), t=t)


def intensity_head(model: NhpiModel, h: torch.Tensor, t_anchor: float, t: float) -> torch.Tensor:
    """Rates lambda_k(t) anchored at the position with hidden state h."""
    if t < t_anchor:
        raise ValueError(f"query time {t} precedes anchor {t_anchor}")
    dt = torch.as_tensor(t - t_anchor, dtype=DTYPE)
    return model.intensity_from(h, dt)


def encode_sequence(model: NhpiModel, seq: EventSequence, chunk: int = 32) -> HiddenTrajectory:
    """Hidden and action-toggled hidden states for every entry of a stream.

    toggled[i] re-encodes the stream with the action annotation zeroed at
    position i only; by causality this equals encoding the prefix 0..i with
    a_i = 0, which is the agent's pre-action state.
    """
    window = model._window(seq)
    if len(seq.events) > len(window):
        raise ValueError(f"sequence longer than max_len {model.config.max_len}")
    length = len(window)
    times = torch.tensor([[e[0] for e in window]], dtype=DTYPE)
    types = torch.tensor([[e[1] for e in window]], dtype=torch.long)
    actions = torch.tensor([[e[2] for e in window]], dtype=torch.long)
    with torch.no_grad():
        hidden = model.forward(times, types, actions)[0, 1:]
        rows = []
        for start in range(0, length, chunk):
            stop = min(start + chunk, length)
            b = stop - start
            act = actions.repeat(b, 1)
            act[torch.arange(b), torch.arange(start, stop)] = 0
            out = model.forward(times.repeat(b, 1), types.repeat(b, 1), act)
            rows.append(out[torch.arange(b), torch.arange(start, stop) + 1])
        toggled = torch.cat(rows, dim=0) if rows else hidden.clone()
    return HiddenTrajectory(hidden=hidden, toggled=toggled,
                            times=np.array([e[0] for e in window]))


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def pad_batch(model: NhpiModel, seqs: list[EventSequence]) -> dict:
    """Stack windowed streams into padded arrays plus masks."""
    windows = [model._window(s) for s in seqs]
    length = max((len(w) for w in windows), default=0)
    b = len(seqs)
    times = torch.zeros(b, length, dtype=DTYPE)
    types = torch.zeros(b, length, dtype=torch.long)
    actions = torch.zeros(b, length, dtype=torch.long)
    lengths = torch.tensor([len(w) for w in windows], dtype=torch.long)
    horizons = torch.tensor([s.horizon for s in seqs], dtype=DTYPE)
    for i, w in enumerate(windows):
        for j, (t, k, a) in enumerate(w):
            times[i, j] = t
            types[i, j] = k
            actions[i, j] = a
    return {"times": times, "types": types, "actions": actions,
            "lengths": lengths, "horizons": horizons}


def _gauss_legendre(n: int) -> tuple[torch.Tensor, torch.Tensor]:
    x, w = np.polynomial.legendre.leggauss(n)
    # map from [-1, 1] to [0, 1]
    return (torch.as_tensor((x + 1) / 2, dtype=DTYPE),
            torch.as_tensor(w / 2, dtype=DTYPE))


def nll_batch(
    model: NhpiModel,
    batch: dict,
    mc_samples: int = 50,
    generator: torch.Generator | None = None,
    integral: str = "mc",
    quad_nodes: int = 24,
) -> torch.Tensor:
    """Negative log-likelihood per sequence (differentiable).

        nll = -( sum_i log lambda_{k_i}(t_i) - integral_0^T lambda(t) dt )

    Event terms anchor each event at the preceding position; markers (type 0)
    are skipped.  integral="mc" draws `mc_samples` uniform times per sequence;
    integral="quadrature" uses per-interval Gauss-Legendre nodes, which is
    exact for constant rates and deterministic.
    """
    times, types, actions = batch["times"], batch["types"], batch["actions"]
    lengths, horizons = batch["lengths"], batch["horizons"]
    b, length = times.shape
    hidden = model.forward(times, types, actions)          # (B, L+1, H)
    valid = torch.arange(length).view(1, -1) < lengths.view(-1, 1)

    if length > 0:
        anchors = hidden[:, :-1]                           # anchor of entry i is row i
        prev_t = torch.cat([torch.zeros(b, 1, dtype=DTYPE), times[:, :-1]], dim=1)
        dt = (times - prev_t).clamp(min=0.0)
        lam = model.intensity_from(anchors, dt)            # (B, L, K)
        ev_mask = valid & (types > 0) & (times < horizons.view(-1, 1))
        k_idx = (types - 1).clamp(min=0)
        lam_event = lam.gather(-1, k_idx.unsqueeze(-1)).squeeze(-1)
        log_lam = torch.log(lam_event.clamp(min=EPS_FLOOR))
        event_term = (log_lam * ev_mask).sum(dim=1)
    else:
        event_term = torch.zeros(b, dtype=DTYPE)

    # +inf pad so searchsorted never anchors past a sequence's real entries
    times_inf = torch.where(valid, times, torch.full_like(times, float("inf")))
    times_ext = torch.cat([torch.zeros(b, 1, dtype=DTYPE),
                           torch.where(valid, times, torch.zeros_like(times))], dim=1)

    if integral == "mc":
        if generator is None:
            generator = torch.Generator()
        u = torch.rand(b, mc_samples, generator=generator, dtype=DTYPE) * horizons.view(-1, 1)
        idx = torch.searchsorted(times_inf, u.contiguous())          # rows 0..L
        t_anchor = times_ext.gather(1, idx)
        h_anchor = hidden.gather(1, idx.unsqueeze(-1).expand(-1, -1, hidden.shape[-1]))
        rates = model.intensity_from(h_anchor, (u - t_anchor).clamp(min=0.0))
        comp = rates.sum(-1).mean(dim=1) * horizons
    elif integral == "quadrature":
        nodes, weights = _gauss_legendre(quad_nodes)
        t_fill = torch.where(valid, times, horizons.view(-1, 1).expand_as(times))
        ext = torch.cat([torch.zeros(b, 1, dtype=DTYPE), t_fill,
                         horizons.view(-1, 1)], dim=1)               # (B, L+2)
        starts, ends = ext[:, :-1], ext[:, 1:]
        width = (ends - starts).clamp(min=0.0)                       # (B, L+1)
        pts = starts.unsqueeze(-1) + width.unsqueeze(-1) * nodes     # (B, L+1, Q)
        dt = (pts - starts.unsqueeze(-1)).clamp(min=0.0)
        rates = model.intensity_from(hidden.unsqueeze(2), dt)        # (B, L+1, Q, K)
        seg = (rates.sum(-1) * weights).sum(-1) * width              # (B, L+1)
        comp = seg.sum(dim=1)
    else:
        raise ValueError(f"unknown integral mode {integral!r}")
    return -(event_term - comp)


def nhpi_nll(
    model: NhpiModel,
    sequence: EventSequence,
    T: float | None = None,
    mc_samples: int = 50,
    rng_seed: int = 0,
    integral: str = "mc",
) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and parameter gradients for one stream."""
    seq = sequence
    if T is not None and T != sequence.horizon:
        seq = EventSequence(events=list(sequence.events), horizon=T)
    gen = torch.Generator().manual_seed(rng_seed)
    loss = nll_batch(model, pad_batch(model, [seq]), mc_samples=mc_samples,
                     generator=gen, integral=integral)[0]
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"nll is {loss.item()}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
             for name, p in model.named_parameters()}
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


@dataclass
class NhpiTrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    mc_samples: int = 50
    seed: int = 0
    integral: str = "mc"


def train_nhpi(model: NhpiModel, sequences, config: NhpiTrainConfig) -> list[float]:
    """Mini-batch maximum likelihood; returns the per-epoch mean NLL."""
    seqs = list(sequences)
    if not seqs:
        raise ValueError("empty trajectory buffer")
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    order_rng = np.random.Generator(np.random.Philox(config.seed))
    gen = torch.Generator().manual_seed(config.seed)
    curve = []
    for _ in range(config.epochs):
        perm = order_rng.permutation(len(seqs))
        total, count = 0.0, 0
        for start in range(0, len(seqs), config.batch_size):
            chunk = [seqs[i] for i in perm[start:start + config.batch_size]]
            nll = nll_batch(model, pad_batch(model, chunk),
                            mc_samples=config.mc_samples, generator=gen,
                            integral=config.integral)
            loss = nll.mean()
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"nll is {loss.item()}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(nll.detach().sum())
            count += len(chunk)
        curve.append(total / count)
    return curve


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def nhpi_thinning_sample(
    model,
    prefix: EventSequence,
    action_policy,
    T: float,
    rng_seed,
) -> EventSequence:
    """Roll the model forward from a prefix; returns the continuation.

    `model` needs only `rollout_anchor(seq) -> RolloutAnchor`; after each
    accepted event the stream is re-encoded so the anchor reflects it.
    `action_policy(seq, t, k) -> int` annotates each new event (None = no
    actions).  Thinning uses the per-anchor bound sum_k softplus(max(mu, eta));
    observing a rate above it is a programming error and raises.
    """
    rng = make_rng(rng_seed)
    seq = EventSequence(events=list(prefix.events), horizon=T)
    continuation = EventSequence(events=[], horizon=T)
    anchor = model.rollout_anchor(seq)
    t = max(anchor.t, prefix.events[-1][0] if prefix.events else 0.0)
    while True:
        bound = anchor.bound()
        if bound <= 0.0:
            break
        t += rng.exponential(1.0 / bound)
        if t >= T:
            break
        rates = anchor.rates(t)
        total = float(rates.sum())
        if total > bound * (1.0 + 1e-9):
            raise ThinningBoundError(f"rate {total} exceeds bound {bound} at t={t}")
        if rng.uniform() * bound <= total:
            k = int(rng.choice(len(rates), p=rates / total)) + 1
            a = int(action_policy(seq, t, k)) if action_policy is not None else 0
            seq.append(t, k, a)
            continuation.append(t, k, a)
            anchor = model.rollout_anchor(seq)
    return continuation


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(model: NhpiModel, path) -> None:
    torch.save({"config": asdict(model.config),
                "state_dict": model.state_dict()}, path)


def load_checkpoint(path) -> NhpiModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    model = NhpiModel(NhpiConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    return model
