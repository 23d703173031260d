"""Classical marked temporal point process machinery.

Multivariate Hawkes process with a shared exponential kernel:

    lambda_k(t) = max(0, mu_k + sum_{h: t_h < t} beta[k_h, k] * exp(-zeta (t - t_h)))

beta may carry negative entries (inhibition); the kernel sum is rectified at
zero.  Because every pair shares the decay rate zeta, the kernel sum of each
type collapses to a single exponential between events, which gives

- O(K) incremental intensity updates (`HawkesState`),
- a closed-form integral of the *rectified* intensity (used as the exact
  integral mode of the log-likelihood),
- a cheap, provably dominating thinning bound sum_k (mu_k + max(0, c_k)).

Also implements: the jump-SDE view of the same intensity (Euler integration),
Ogata thinning, Monte-Carlo estimation of integrated intensities, and a JSONL
trajectory format.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math

import numpy as np

# Floor inside logarithms: rectified intensities can be exactly 0 at an
# observed event, and training must never see a non-finite loss.
EPS_FLOOR = 1e-9

# Event-type index 0 is reserved for decision markers (entries that carry an
# action annotation but no physical event); they contribute no excitation.
NULL_TYPE = 0


class ThinningBoundError(RuntimeError):
    """A thinning proposal observed an intensity above its upper bound."""


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator from an integer seed; passes Generators through."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class HawkesParams:
    """Base rates, excitation matrix and shared decay of a Hawkes process.

    beta[j, k] is the jump that an event of type j adds to the intensity of
    type k.  Negative entries model inhibition; subcriticality is enforced on
    |beta| so the simulator cannot explode.
    """

    mu: np.ndarray
    beta: np.ndarray
    zeta: float

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.mu.ndim != 1:
            raise ValueError("mu must be a vector")
        k = self.mu.shape[0]
        if self.beta.shape != (k, k):
            raise ValueError(f"beta must be ({k}, {k}), got {self.beta.shape}")
        if not self.zeta > 0:
            raise ValueError("zeta must be positive")
        if np.any(self.mu < 0):
            raise ValueError("base rates must be nonnegative")
        if self.branching_ratio() >= 1.0:
            raise ValueError(
                f"spectral radius of |beta|/zeta is {self.branching_ratio():.3f} >= 1"
            )

    @property
    def n_types(self) -> int:
        return self.mu.shape[0]

    def branching_ratio(self) -> float:
        """Spectral radius of |beta| / zeta; < 1 means subcritical."""
        return float(np.max(np.abs(np.linalg.eigvals(np.abs(self.beta))))) / self.zeta

    def stationary_rates(self) -> np.ndarray:
        """Mean intensity of the linear (unrectified) process, (I - B^T/zeta)^-1 mu."""
        k = self.n_types
        return np.linalg.solve(np.eye(k) - self.beta.T / self.zeta, self.mu)


@dataclass(frozen=True)
class CountingIncrement:
    """A unit jump of the counting process of type j at time t."""

    t: float
    j: int


@dataclass
class EventSequence:
    """Ordered (t, k, a) triples over [0, horizon).

    k is the event type (1..K; 0 is reserved for decision markers), a the
    action annotation (0 = no action).  Timestamps are strictly increasing
    and below the horizon.
    """

    events: list[tuple[float, int, int]] = field(default_factory=list)
    horizon: float = 0.0

    def __len__(self) -> int:
        return len(self.events)

    def times(self) -> np.ndarray:
        return np.array([e[0] for e in self.events], dtype=float)

    def types(self) -> np.ndarray:
        return np.array([e[1] for e in self.events], dtype=int)

    def actions(self) -> np.ndarray:
        return np.array([e[2] for e in self.events], dtype=int)

    def append(self, t: float, k: int, a: int = 0) -> None:
        if self.events and t <= self.events[-1][0]:
            raise ValueError(f"timestamp {t} not after {self.events[-1][0]}")
        self.events.append((float(t), int(k), int(a)))

    def validate(self, n_types: int) -> None:
        """Raise ValueError on any violated invariant."""
        last = -math.inf
        for t, k, a in self.events:
            if not t > last:
                raise ValueError("timestamps must be strictly increasing")
            if not t < self.horizon:
                raise ValueError(f"event time {t} not below horizon {self.horizon}")
            if not 0 <= k <= n_types:
                raise ValueError(f"event type {k} outside 0..{n_types}")
            if not 0 <= a <= n_types:
                raise ValueError(f"action {a} outside 0..{n_types}")
            last = t


class HawkesState:
    """Incremental kernel state of a Hawkes process.

    Keeps the kernel sums c_k at an anchor time; between events each sum
    decays as c_k * exp(-zeta dt), so intensity queries, thinning bounds and
    exact rectified integrals are all O(K).
    """

    def __init__(self, params: HawkesParams):
        self.params = params
        self.t = 0.0
        self.c = np.zeros(params.n_types)

    def reset(self) -> None:
        self.t = 0.0
        self.c[:] = 0.0

    def _decayed(self, t: float) -> np.ndarray:
        if t < self.t - 1e-12:
            raise ValueError(f"query time {t} precedes anchor {self.t}")
        return self.c * math.exp(-self.params.zeta * max(t - self.t, 0.0))

    def add_event(self, t: float, k: int) -> None:
        """Advance the anchor to t and apply the jump of an event of type k."""
        self.c = self._decayed(t)
        if k != NULL_TYPE:
            self.c += self.params.beta[k - 1]
        self.t = t

    def intensity(self, t: float) -> np.ndarray:
        """Rectified intensity at t; events at exactly t are included."""
        return np.maximum(self.params.mu + self._decayed(t), 0.0)

    def total_bound(self, t: float) -> float:
        """Upper bound for the total intensity on [t, next event)."""
        return float(np.sum(self.params.mu + np.maximum(self._decayed(t), 0.0)))

    def integral_vector_to(self, t: float) -> np.ndarray:
        """Exact per-type integral of the rectified intensity over (anchor, t]."""
        delta = t - self.t
        if delta < 0:
            raise ValueError("integration endpoint precedes anchor")
        mu, zeta = self.params.mu, self.params.zeta
        return np.array([
            _rectified_exp_integral(mu[k], self.c[k], zeta, delta)
            for k in range(self.params.n_types)
        ])

    def integral_to(self, t: float) -> float:
        """Exact integral of the rectified total intensity over (anchor, t]."""
        return float(np.sum(self.integral_vector_to(t)))


def _rectified_exp_integral(mu: float, c: float, zeta: float, delta: float) -> float:
    """integral_0^delta max(0, mu + c e^{-zeta u}) du in closed form."""
    if delta <= 0.0:
        return 0.0
    if c >= 0.0 or mu + c >= 0.0:
        # Nonnegative throughout (decaying from above, or rising but never clipped).
        return mu * delta + c * (1.0 - math.exp(-zeta * delta)) / zeta
    if mu <= 0.0:
        return 0.0
    # Rising from below zero; positive only after the crossing point.
    u_star = math.log(-c / mu) / zeta
    if u_star >= delta:
        return 0.0
    return mu * (delta - u_star) + c * (math.exp(-zeta * u_star) - math.exp(-zeta * delta)) / zeta


def _event_pairs(history) -> list[tuple[float, int]]:
    if isinstance(history, EventSequence):
        return [(t, k) for t, k, _ in history.events]
    return [(e[0], e[1]) for e in history]


def hawkes_intensity(params: HawkesParams, history, t: float) -> np.ndarray:
    """Rectified intensity vector at time t.

    `history` is an EventSequence or a list of (t, k[, a]) tuples; decision
    markers (k = 0) carry no excitation.  An event at exactly t contributes
    its full jump, i.e. the returned value is the post-jump limit lambda(t+).
    Rejects t earlier than the last history timestamp.
    """
    pairs = _event_pairs(history)
    if pairs and t < pairs[-1][0]:
        raise ValueError(f"evaluation time {t} precedes last event {pairs[-1][0]}")
    s = np.zeros(params.n_types)
    for th, kh in pairs:
        if th > t or kh == NULL_TYPE:
            continue
        s += params.beta[kh - 1] * math.exp(-params.zeta * (t - th))
    return np.maximum(params.mu + s, 0.0)


class HawkesIntensity:
    """Callable (history, t) -> rates with an exact-integral fast path.

    Caches an incremental `HawkesState` keyed on the history object, so
    sequential evaluation (thinning, likelihood) costs O(K) per call instead
    of O(n K).  Any rewound or foreign history triggers a rebuild.
    """

    def __init__(self, params: HawkesParams):
        self.params = params
        self._hist_id = None
        self._n_seen = 0
        self._last_seen = None
        self._state = HawkesState(params)

    def _sync(self, history) -> HawkesState:
        pairs = _event_pairs(history)
        fresh = (
            self._hist_id != id(history)
            or len(pairs) < self._n_seen
            or (self._n_seen > 0 and pairs[self._n_seen - 1] != self._last_seen)
        )
        if fresh:
            self._state.reset()
            self._n_seen = 0
            self._hist_id = id(history)
        for t, k in pairs[self._n_seen:]:
            self._state.add_event(t, k)
        self._n_seen = len(pairs)
        self._last_seen = pairs[-1] if pairs else None
        return self._state

    def __call__(self, history, t: float) -> np.ndarray:
        state = self._sync(history)
        if t < state.t:
            raise ValueError(f"evaluation time {t} precedes last event {state.t}")
        return state.intensity(t)

    def bound(self, history, t: float) -> float:
        """Dominating total-intensity bound valid until the next event."""
        return self._sync(history).total_bound(t)

    def event_intensities(self, sequence: EventSequence, T: float) -> np.ndarray:
        """lambda_{k_i}(t_i) for every event below T, via one incremental sweep."""
        state = HawkesState(self.params)
        out = []
        for t, k, _ in sequence.events:
            if t >= T:
                break
            out.append(float(state.intensity(t)[k - 1]))
            state.add_event(t, k)
        return np.array(out)

    def total_intensities_at(self, sequence: EventSequence, ts: np.ndarray) -> np.ndarray:
        """Total intensity at each query time, anchored at the preceding event."""
        ts = np.asarray(ts, dtype=float)
        order = np.argsort(ts, kind="stable")
        state = HawkesState(self.params)
        events = sequence.events
        idx = 0
        out = np.empty(ts.shape)
        for pos in order:
            t = ts[pos]
            while idx < len(events) and events[idx][0] < t:
                state.add_event(events[idx][0], events[idx][1])
                idx += 1
            out[pos] = float(np.sum(state.intensity(t)))
        return out

    def exact_integral(self, sequence: EventSequence, T: float) -> float:
        """Closed-form integral of the rectified total intensity over [0, T]."""
        state = HawkesState(self.params)
        total = 0.0
        for t, k, _ in sequence.events:
            if t > T:
                break
            total += state.integral_to(t)
            state.add_event(t, k)
        total += state.integral_to(T)
        return total


def hawkes_intensity_fn(params: HawkesParams) -> HawkesIntensity:
    return HawkesIntensity(params)


def sde_intensity_trajectory(
    params: HawkesParams,
    increments: list[CountingIncrement],
    dt: float,
    T: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Euler integration of the jump-SDE form of the intensity.

        d lambda_k = zeta (mu_k - lambda_k) dt + sum_j beta[j, k] dN_j(t)

    The linear state starts at lambda(0) = mu; the jump of an increment in
    ((m-1) dt, m dt] lands on grid index m.  Returns (times, trajectory) with
    trajectory[m] = max(0, state at times[m]); rectification is applied to the
    output only, so the linear kernel memory matches the closed form.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    ts = [inc.t for inc in increments]
    if any(b < a for a, b in zip(ts, ts[1:])):
        raise ValueError("increments must be time-sorted")
    n = int(math.ceil(T / dt - 1e-12))
    times = dt * np.arange(n + 1)
    jumps: list[list[int]] = [[] for _ in range(n + 1)]
    for inc in increments:
        if inc.t <= 0 or inc.t > times[-1] + 1e-12:
            continue
        m = min(max(1, int(math.ceil(inc.t / dt - 1e-9))), n)
        jumps[m].append(inc.j)
    lam = np.empty((n + 1, params.n_types))
    state = params.mu.copy()
    lam[0] = state
    for m in range(1, n + 1):
        state = state + params.zeta * (params.mu - state) * dt
        for j in jumps[m]:
            state = state + params.beta[j - 1]
        lam[m] = state
    return times, np.maximum(lam, 0.0)


def intervened_intensity_step(
    params: HawkesParams,
    lam: np.ndarray,
    action_rate: np.ndarray,
    dt: float,
    jump_types: tuple[int, ...] = (),
) -> np.ndarray:
    """One Euler step of the intensity SDE with a continuous action-rate term.

        lambda <- lambda + a(t) dt + zeta (mu - lambda) dt + sum_{j in jumps} beta[j]
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    lam = np.asarray(lam, dtype=float)
    out = lam + np.asarray(action_rate, dtype=float) * dt + params.zeta * (params.mu - lam) * dt
    for j in jump_types:
        out = out + params.beta[j - 1]
    return np.maximum(out, 0.0)


def thinning_sample(intensity_fn, upper_bound_fn, T: float, rng_seed) -> EventSequence:
    """Ogata thinning: sample an event sequence on [0, T) from an intensity.

    `intensity_fn(history, t)` returns the per-type rates given the events
    so far; `upper_bound_fn(history, t)` must dominate the total intensity
    until the next accepted event.  A proposal that observes a total
    intensity above the bound raises ThinningBoundError.
    """
    rng = make_rng(rng_seed)
    seq = EventSequence(events=[], horizon=T)
    t = 0.0
    while True:
        bound = float(upper_bound_fn(seq.events, t))
        if bound <= 0.0:
            break
        t += rng.exponential(1.0 / bound)
        if t >= T:
            break
        rates = np.asarray(intensity_fn(seq.events, t), dtype=float)
        total = float(rates.sum())
        if total > bound * (1.0 + 1e-9):
            raise ThinningBoundError(
                f"intensity {total} exceeds bound {bound} at t={t}"
            )
        if rng.uniform() * bound <= total:
            k = int(rng.choice(len(rates), p=rates / total)) + 1
            seq.append(t, k, 0)
    return seq


def thin_next_event(
    state: HawkesState, t_from: float, T: float, rng: np.random.Generator
) -> tuple[float, int] | None:
    """Next event of the Hawkes process described by `state`, after t_from.

    Does not mutate the state; the caller applies `add_event` on acceptance.
    Returns None when no event occurs before T.
    """
    t = t_from
    while True:
        bound = state.total_bound(t)
        if bound <= 0.0:
            return None
        t += rng.exponential(1.0 / bound)
        if t >= T:
            return None
        rates = state.intensity(t)
        total = float(rates.sum())
        if total > bound * (1.0 + 1e-9):
            raise ThinningBoundError(
                f"intensity {total} exceeds bound {bound} at t={t}"
            )
        if rng.uniform() * bound <= total:
            k = int(rng.choice(len(rates), p=rates / total)) + 1
            return t, k


def mc_integral(f, T: float, n: int, rng_seed) -> float:
    """Unbiased Monte-Carlo estimate (T/n) sum_j f(u_j), u_j ~ Uniform(0, T)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = make_rng(rng_seed)
    u = rng.uniform(0.0, T, size=n)
    return float(T / n * sum(f(x) for x in u))


def log_likelihood(
    intensity_fn,
    sequence: EventSequence,
    T: float,
    mc_samples: int = 1000,
    rng_seed=0,
    integral: str = "mc",
) -> float:
    """Log-likelihood sum_i log lambda_{k_i}(t_i) - integral_0^T lambda(t) dt.

    integral="mc" estimates the compensator with `mc_samples` uniform times;
    integral="exact" uses the closed form, which requires `intensity_fn` to
    expose `exact_integral` (HawkesIntensity does).  Intensities are floored
    at EPS_FLOOR inside the logarithm.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    events = sequence.events
    if hasattr(intensity_fn, "event_intensities"):
        vals = intensity_fn.event_intensities(sequence, T)
        term = float(np.sum(np.log(np.maximum(vals, EPS_FLOOR))))
    else:
        term = 0.0
        for i, (t, k, _) in enumerate(events):
            if t >= T:
                break
            rates = intensity_fn(events[:i], t)
            term += math.log(max(float(rates[k - 1]), EPS_FLOOR))

    if integral == "exact":
        if not hasattr(intensity_fn, "exact_integral"):
            raise ValueError("intensity_fn has no exact_integral; use integral='mc'")
        comp = intensity_fn.exact_integral(sequence, T)
    elif integral == "mc":
        rng = make_rng(rng_seed)
        u = rng.uniform(0.0, T, size=mc_samples)
        if hasattr(intensity_fn, "total_intensities_at"):
            acc = float(np.sum(intensity_fn.total_intensities_at(sequence, u)))
        else:
            times = sequence.times()
            acc = 0.0
            for x in u:
                n_before = int(np.searchsorted(times, x, side="left"))
                acc += float(np.sum(intensity_fn(events[:n_before], x)))
        comp = T / mc_samples * acc
    else:
        raise ValueError(f"unknown integral mode {integral!r}")
    return term - comp


# ---------------------------------------------------------------------------
# JSONL trajectory format: one header line {"horizon": ..., "K": ...} per
# trajectory followed by one line {"t": ..., "k": ..., "a": ...} per event.
# Floats carry 17 significant digits so round-trips are bit-exact.
# ---------------------------------------------------------------------------

def _f17(x: float) -> str:
    return format(float(x), ".17g")


def write_jsonl(sequences, path, n_types: int, rewards=None) -> None:
    """Write trajectories as JSONL; optional per-event rewards add an "r" field."""
    seqs = list(sequences)
    if rewards is not None and len(rewards) != len(seqs):
        raise ValueError("rewards must align with sequences")
    with open(path, "w") as fh:
        for si, seq in enumerate(seqs):
            fh.write(f'{{"horizon": {_f17(seq.horizon)}, "K": {n_types}}}\n')
            rs = rewards[si] if rewards is not None else None
            if rs is not None and len(rs) != len(seq.events):
                raise ValueError("per-event rewards must align with events")
            for i, (t, k, a) in enumerate(seq.events):
                line = f'{{"t": {_f17(t)}, "k": {k}, "a": {a}'
                if rs is not None:
                    line += f', "r": {_f17(rs[i])}'
                fh.write(line + "}\n")


def read_jsonl(path) -> tuple[list[EventSequence], int]:
    """Read trajectories written by write_jsonl; returns (sequences, K)."""
    seqs: list[EventSequence] = []
    n_types = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "horizon" in obj:
                if n_types is None:
                    n_types = int(obj["K"])
                elif n_types != int(obj["K"]):
                    raise ValueError("inconsistent K across trajectory headers")
                seqs.append(EventSequence(events=[], horizon=float(obj["horizon"])))
            else:
                if not seqs:
                    raise ValueError("event line before any header")
                seqs[-1].events.append((float(obj["t"]), int(obj["k"]), int(obj["a"])))
    if n_types is None:
        raise ValueError("no trajectories in file")
    return seqs, n_types
