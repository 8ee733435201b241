"""Discrete-time episode simulator.

Each episode seed expands into three independent generator streams (quote
noise, fill uniforms, price shocks).  The vectorised engine draws each
stream in blocks; the scalar :func:`step` draws the same streams one step at
a time, so a hand-written replay reproduces any batched episode exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import (
    MarketState,
    ModelParams,
    QuotePolicySource,
    QuoteVector,
    TierParams,
    policy_entropy,
)


@dataclass(frozen=True)
class FillOutcome:
    dN_plus: tuple[int, ...]
    dN_minus: tuple[int, ...]

    def as_array(self) -> np.ndarray:
        out = np.empty(2 * len(self.dN_plus), dtype=np.int8)
        out[0::2] = self.dN_plus
        out[1::2] = self.dN_minus
        return out


@dataclass(frozen=True)
class RewardBreakdown:
    fill_flow: float
    mtm_alt: float
    inv_penalty: float
    entropy_reg: float


@dataclass(frozen=True)
class StepRecord:
    index: int
    state: MarketState
    quote: QuoteVector
    fills: FillOutcome
    reward: RewardBreakdown
    next_S: float
    next_q: int


@dataclass(frozen=True)
class Trajectory:
    params_fingerprint: str
    steps: tuple[StepRecord, ...]
    terminal: MarketState


def episode_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Quote, fill and price generators for one episode."""
    quote_ss, fill_ss, price_ss = np.random.SeedSequence(int(seed)).spawn(3)
    return (
        np.random.default_rng(quote_ss),
        np.random.default_rng(fill_ss),
        np.random.default_rng(price_ss),
    )


def _cap_bounds(q_cap) -> tuple[float, float]:
    if q_cap is None:
        return -math.inf, math.inf
    if np.ndim(q_cap) == 0:
        return -int(q_cap), int(q_cap)
    lo, hi = q_cap
    return int(lo), int(hi)


def gbm_factor(sigma: float, dt: float, z):
    """Exact driftless log-normal step multiplier for standard normal ``z``."""
    return np.exp(-0.5 * sigma * sigma * dt + sigma * math.sqrt(dt) * np.asarray(z))


def advance_price(S: float, sigma: float, dt: float, rng) -> float:
    if not S > 0 or not dt > 0:
        raise ValueError("advance_price needs S > 0 and dt > 0")
    return float(S * gbm_factor(sigma, dt, rng.standard_normal()))


def fill_probabilities(eps: np.ndarray, A2: np.ndarray, B2: np.ndarray, dt: float) -> np.ndarray:
    """Bernoulli-thinned per-step fill probability ``min(1, max(0, A - B eps) dt)``."""
    return np.minimum(1.0, np.maximum(0.0, A2 - B2 * eps) * dt)


def _uniforms_to_interleaved(u: np.ndarray) -> np.ndarray:
    # uniforms arrive as [bid_1..bid_K, ask_1..ask_K]
    K = u.shape[-1] // 2
    out = np.empty_like(u)
    out[..., 0::2] = u[..., :K]
    out[..., 1::2] = u[..., K:]
    return out


def simulate_fills(
    quote: QuoteVector,
    tiers: Sequence[TierParams],
    dt: float,
    rng,
    q: int | None = None,
    q_cap=None,
) -> FillOutcome:
    """Draw one step of fills: ``K`` bid uniforms then ``K`` ask uniforms.

    With ``q_cap`` set, a fill that would move the pre-step inventory ``q``
    outside the cap is rejected.
    """
    K = len(tiers)
    if quote.K != K:
        raise ValueError(f"quote has {quote.K} tiers, model has {K}")
    A2 = np.repeat([tr.A for tr in tiers], 2)
    B2 = np.repeat([tr.B for tr in tiers], 2)
    prob = fill_probabilities(quote.as_array(), A2, B2, dt)
    u = _uniforms_to_interleaved(rng.random(2 * K))
    fired = (u < prob).astype(np.int8)
    if q_cap is not None:
        if q is None:
            raise ValueError("an inventory cap needs the pre-step inventory")
        lo, hi = _cap_bounds(q_cap)
        z = np.array([tr.z for tr in tiers])
        fired[0::2] &= (q + z <= hi).astype(np.int8)
        fired[1::2] &= (q - z >= lo).astype(np.int8)
    return FillOutcome(tuple(int(x) for x in fired[0::2]), tuple(int(x) for x in fired[1::2]))


def _rewards(z, S, q, S_next, q_next, eps, fired, delta, dt, ent_reg):
    """Reward components, vectorised over leading axes (last axis = 2K)."""
    bid_fill = fired[..., 0::2]
    ask_fill = fired[..., 1::2]
    eps_b = eps[..., 0::2]
    eps_a = eps[..., 1::2]
    S_ = S[..., None]
    fill_flow = np.sum(z * ((S_ + eps_b) * bid_fill - (S_ - eps_a) * ask_fill), axis=-1)
    spread_rev = np.sum(z * (eps_b * bid_fill + eps_a * ask_fill), axis=-1)
    mtm_alt = spread_rev + (q_next * S_next - q * S)
    inv_penalty = delta * q.astype(float) ** 2 * dt
    entropy_reg = np.full(np.shape(fill_flow), ent_reg)
    return fill_flow, mtm_alt, inv_penalty, entropy_reg


def step(
    state: MarketState,
    quote: QuoteVector,
    p: ModelParams,
    rng,
    price_rng=None,
    q_cap=None,
) -> StepRecord:
    """Advance one step: fills from ``rng`` first, then the price shock.

    ``price_rng`` defaults to ``rng``; rollouts pass the episode's separate
    price stream.
    """
    if state.t + p.dt > p.T + 1e-12:
        raise ValueError(f"cannot step past the horizon: t={state.t} dt={p.dt} T={p.T}")
    fills = simulate_fills(quote, p.tiers, p.dt, rng, q=state.q, q_cap=q_cap)
    S_next = advance_price(state.S, p.sigma, p.dt, rng if price_rng is None else price_rng)
    fired = fills.as_array()
    z = p.z
    q_next = state.q + int(np.sum(z * (fired[0::2].astype(np.int64) - fired[1::2])))
    comps = _rewards(
        z,
        np.float64(state.S),
        np.int64(state.q),
        np.float64(S_next),
        np.int64(q_next),
        quote.as_array(),
        fired,
        p.delta,
        p.dt,
        p.gamma * policy_entropy(p) * p.dt,
    )
    reward = RewardBreakdown(*(float(c) for c in comps))
    index = int(round(state.t / p.dt))
    return StepRecord(index, state, quote, fills, reward, S_next, q_next)


@dataclass(eq=False)
class EpisodeBatch:
    """Arrays for ``n`` episodes of ``N`` steps; quote/fill axes interleaved."""

    params_fingerprint: str
    seeds: np.ndarray  # (n,)
    t: np.ndarray  # (N+1,)
    S: np.ndarray  # (n, N+1)
    q: np.ndarray  # (n, N+1)
    quotes: np.ndarray  # (n, N, 2K)
    fills: np.ndarray  # (n, N, 2K) int8
    fill_flow: np.ndarray  # (n, N)
    mtm_alt: np.ndarray
    inv_penalty: np.ndarray
    entropy_reg: np.ndarray
    means: np.ndarray | None = None  # (n, N, 2K) policy means that were sampled around

    def __len__(self) -> int:
        return self.S.shape[0]

    @property
    def n_steps(self) -> int:
        return self.quotes.shape[1]

    def returns(self, mode: str = "raw") -> np.ndarray:
        if mode == "raw":
            return self.mtm_alt.sum(axis=1)
        if mode == "regularized":
            return (self.fill_flow - self.inv_penalty + self.entropy_reg).sum(axis=1)
        raise ValueError(f"unknown return mode {mode!r}")

    def trajectory(self, i: int) -> Trajectory:
        steps = []
        N = self.n_steps
        for j in range(N):
            fired = self.fills[i, j]
            steps.append(
                StepRecord(
                    index=j,
                    state=MarketState(float(self.t[j]), float(self.S[i, j]), int(self.q[i, j])),
                    quote=QuoteVector.from_array(self.quotes[i, j]),
                    fills=FillOutcome(tuple(int(x) for x in fired[0::2]), tuple(int(x) for x in fired[1::2])),
                    reward=RewardBreakdown(
                        float(self.fill_flow[i, j]),
                        float(self.mtm_alt[i, j]),
                        float(self.inv_penalty[i, j]),
                        float(self.entropy_reg[i, j]),
                    ),
                    next_S=float(self.S[i, j + 1]),
                    next_q=int(self.q[i, j + 1]),
                )
            )
        terminal = MarketState(float(self.t[N]), float(self.S[i, N]), int(self.q[i, N]))
        return Trajectory(self.params_fingerprint, tuple(steps), terminal)


def time_grid(p: ModelParams) -> np.ndarray:
    N = p.n_steps
    return p.T * np.arange(N + 1) / N


def simulate_batch(
    policy: QuotePolicySource,
    p: ModelParams,
    seeds: Sequence[int],
    q_cap=None,
) -> EpisodeBatch:
    """Run one episode per seed in lockstep; identical to running them serially."""
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    n, N, K = seeds.size, p.n_steps, p.K
    Zq = np.empty((n, N, 2 * K))
    U = np.empty((n, N, 2 * K))
    Zp = np.empty((n, N))
    for i, seed in enumerate(seeds):
        gq, gf, gp = episode_streams(int(seed))
        Zq[i] = gq.standard_normal((N, 2 * K))
        U[i] = _uniforms_to_interleaved(gf.random((N, 2 * K)))
        Zp[i] = gp.standard_normal(N)

    t = time_grid(p)
    z = p.z
    z2 = np.repeat(z, 2)
    A2 = np.repeat(p.A, 2)
    B2 = np.repeat(p.B, 2)
    sd = np.sqrt(policy.variance)
    lo, hi = _cap_bounds(q_cap)
    ent_reg = p.gamma * policy_entropy(p) * p.dt

    S = np.empty((n, N + 1))
    q = np.empty((n, N + 1), dtype=np.int64)
    S[:, 0] = p.S0
    q[:, 0] = p.q0
    quotes = np.empty((n, N, 2 * K))
    fills = np.empty((n, N, 2 * K), dtype=np.int8)
    growth = gbm_factor(p.sigma, p.dt, Zp)
    sign = np.tile([1, -1], K)
    means = np.empty((n, N, 2 * K))
    for j in range(N):
        means[:, j] = policy.means(t[j], S[:, j], q[:, j])
        eps = means[:, j] + sd * Zq[:, j]
        fired = U[:, j] < fill_probabilities(eps, A2, B2, p.dt)
        if q_cap is not None:
            target = q[:, j, None] + sign * z2
            fired &= (target <= hi) & (target >= lo)
        quotes[:, j] = eps
        fills[:, j] = fired
        q[:, j + 1] = q[:, j] + (fired * sign * z2).sum(axis=1)
        S[:, j + 1] = S[:, j] * growth[:, j]

    fill_flow, mtm_alt, inv_penalty, entropy_reg = _rewards(
        z, S[:, :-1], q[:, :-1], S[:, 1:], q[:, 1:], quotes, fills, p.delta, p.dt, ent_reg
    )
    return EpisodeBatch(
        p.fingerprint(), seeds, t, S, q, quotes, fills, fill_flow, mtm_alt, inv_penalty, entropy_reg, means
    )


def rollout(policy: QuotePolicySource, p: ModelParams, seed: int, q_cap=None) -> Trajectory:
    return simulate_batch(policy, p, [seed], q_cap=q_cap).trajectory(0)


def episode_return(traj: Trajectory, mode: str = "raw") -> float:
    # same reduction as EpisodeBatch.returns so single and batched results agree bitwise
    if mode == "raw":
        return float(np.sum(np.array([s.reward.mtm_alt for s in traj.steps])))
    if mode == "regularized":
        r = np.array([[s.reward.fill_flow, s.reward.inv_penalty, s.reward.entropy_reg] for s in traj.steps])
        return float(np.sum(r[:, 0] - r[:, 1] + r[:, 2]))
    raise ValueError(f"unknown return mode {mode!r}")


def batch_returns(
    policy: QuotePolicySource,
    p: ModelParams,
    n: int,
    base_seed: int,
    mode: str = "raw",
    q_cap=None,
    chunk: int = 2000,
) -> np.ndarray:
    """Returns of ``n`` episodes seeded ``base_seed + i``, in seed order."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = []
    for start in range(0, n, chunk):
        seeds = base_seed + np.arange(start, min(n, start + chunk))
        out.append(simulate_batch(policy, p, seeds, q_cap=q_cap).returns(mode))
    return np.concatenate(out)


def trajectory_header(K: int) -> list[str]:
    cols = ["index", "t", "S", "q"]
    for k in range(1, K + 1):
        cols += [f"eps_bid_{k}", f"eps_ask_{k}"]
    for k in range(1, K + 1):
        cols += [f"fill_bid_{k}", f"fill_ask_{k}"]
    return cols + ["fill_flow", "mtm_alt", "inv_penalty", "entropy_reg"]


def trajectory_rows(traj: Trajectory) -> list[list]:
    rows = []
    for s in traj.steps:
        row = [s.index, s.state.t, s.state.S, s.state.q]
        row += list(s.quote.as_array())
        row += [int(x) for x in s.fills.as_array()]
        r = s.reward
        row += [r.fill_flow, r.mtm_alt, r.inv_penalty, r.entropy_reg]
        rows.append(row)
    return rows
