"""Actor-critic training: a value network on one-step TD errors and a
range-limited Gaussian actor on the score-function policy gradient."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, MarketState, policy_entropy
from .nets import (
    NetworkSpec,
    ParamStore,
    StateScaling,
    ValueNetwork,
    backward,
    default_value_scale,
    forward,
    init_network,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    save_checkpoint,
)
from .policy_iteration import EvalSummary, NonFiniteLossError, evaluate_policy
from .sim import EpisodeBatch, StepRecord, simulate_batch

REVENUE_MODES = ("mean", "sampled")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ActorNetwork:
    """Quote means ``lo + (hi - lo) * sigmoid(net(features))`` per coordinate."""

    def __init__(self, store: ParamStore, scaling: StateScaling, lo, hi):
        self.store = store
        self.scaling = scaling
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if self.lo.shape != (store.spec.output_width,) or self.hi.shape != self.lo.shape:
            raise ValueError("range bounds must match the actor output width")
        if np.any(self.lo >= self.hi):
            raise ValueError("every range needs lo < hi")

    def raw(self, t, S, q, record: bool = False):
        return forward(self.store, self.scaling.features(t, S, q), record=record)

    def squash(self, raw: np.ndarray) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * _sigmoid(raw)

    def means(self, t, S, q) -> np.ndarray:
        raw, _ = self.raw(t, S, q)
        return self.squash(raw)

    def squash_slope(self, M: np.ndarray) -> np.ndarray:
        """``dM/draw`` written in terms of the squashed output."""
        return (M - self.lo) * (self.hi - M) / (self.hi - self.lo)

    def with_store(self, store: ParamStore) -> "ActorNetwork":
        return ActorNetwork(store, self.scaling, self.lo, self.hi)

    def save(self, path, extra: dict | None = None) -> Path:
        meta = {"role": "actor", "scaling": self.scaling.to_dict(), "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        meta.update(extra or {})
        return save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path) -> "ActorNetwork":
        store, meta = load_checkpoint(path)
        if meta.get("role") != "actor":
            raise ValueError(f"{path} does not hold an actor network")
        return cls(store, StateScaling(**meta["scaling"]), meta["lo"], meta["hi"])


def default_actor_range(p: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """``[0, A_k/B_k]`` on both sides of every tier."""
    return np.zeros(2 * p.K), np.repeat(p.A / p.B, 2)


def actor_mean(actor: ActorNetwork, state: MarketState) -> np.ndarray:
    return actor.means(state.t, [state.S], [state.q])[0]


class ActorPolicy:
    """Fixed-covariance Gaussian quoting around the actor's means."""

    def __init__(self, actor: ActorNetwork, p: ModelParams):
        self.actor = actor
        self.variance = p.policy_variance()

    def means(self, t, S, q) -> np.ndarray:
        S = np.atleast_1d(np.asarray(S, dtype=float))
        q = np.atleast_1d(np.asarray(q, dtype=float))
        keys = np.stack([S, q], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        return self.actor.means(float(t), uniq[:, 0], uniq[:, 1])[inverse.reshape(-1)]


@dataclass(frozen=True)
class ACTrainConfig:
    episodes: int = 2000
    critic_lr: float = 1e-3
    actor_lr: float = 1e-3
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None
    seed: int = 0
    critic_init_seed: int = 1
    actor_init_seed: int = 2
    eval_every: int = 500
    eval_episodes: int = 100
    eval_seed: int = 2_000_000
    family: str = "conv_residual"
    optimizer: str = "adam"
    revenue: str = "sampled"
    value_scale: float | None = None

    def __post_init__(self) -> None:
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if self.critic_lr < 0 or self.actor_lr < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.revenue not in REVENUE_MODES:
            raise ValueError(f"revenue must be one of {REVENUE_MODES}")
        if (self.lo is None) != (self.hi is None):
            raise ValueError("give both lo and hi or neither")
        if self.lo is not None:
            object.__setattr__(self, "lo", tuple(float(x) for x in self.lo))
            object.__setattr__(self, "hi", tuple(float(x) for x in self.hi))
            if len(self.lo) != len(self.hi) or any(a >= b for a, b in zip(self.lo, self.hi)):
                raise ValueError("actor range needs lo_k < hi_k for every coordinate")
        if self.eval_every < 0 or self.eval_episodes < 2:
            raise ValueError("eval_every must be >= 0 and eval_episodes >= 2")

    def ranges(self, p: ModelParams) -> tuple[np.ndarray, np.ndarray]:
        if self.lo is None:
            return default_actor_range(p)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if lo.size == p.K:  # one range per tier, shared by both sides
            lo, hi = np.repeat(lo, 2), np.repeat(hi, 2)
        if lo.size != 2 * p.K:
            raise ValueError("actor range length must be K or 2K")
        return lo, hi


@dataclass(frozen=True)
class ACEpisodeRow:
    episode: int
    critic_loss: float
    mean_td: float
    mean_abs_td: float
    policy_loss: float
    raw_return: float
    reg_return: float


@dataclass(eq=False)
class ACReport:
    rows: list[ACEpisodeRow] = field(default_factory=list)
    evaluations: list[tuple[int, EvalSummary]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    critic: ValueNetwork | None = None
    actor: ActorNetwork | None = None

    def raw_returns(self) -> np.ndarray:
        return np.array([r.raw_return for r in self.rows])


@dataclass(frozen=True, eq=False)
class TDTerms:
    deltas: np.ndarray  # (n, N)
    means: np.ndarray  # (n, N, 2K) actor means at the visited states
    values: np.ndarray  # (n, N+1) critic values, terminal pinned to 0


def _episode_arrays(ep, p: ModelParams):
    if isinstance(ep, StepRecord):
        ep = [ep]
    if isinstance(ep, EpisodeBatch):
        if ep.params_fingerprint != p.fingerprint():
            raise ValueError("episode was generated under different model parameters")
        t = np.broadcast_to(ep.t, ep.S.shape)
        return t, ep.S, ep.q.astype(float), ep.quotes, ep.fills.astype(float), True
    steps = list(ep)
    t = np.array([[s.state.t for s in steps] + [steps[-1].state.t + p.dt]])
    S = np.array([[s.state.S for s in steps] + [steps[-1].next_S]])
    q = np.array([[s.state.q for s in steps] + [steps[-1].next_q]], dtype=float)
    quotes = np.array([[s.quote.as_array() for s in steps]])
    fills = np.array([[s.fills.as_array() for s in steps]], dtype=float)
    # a hand-built step list ends where it ends; only a full episode pins V(T) = 0
    ends_at_horizon = abs(t[0, -1] - p.T) < 1e-9
    return t, S, q, quotes, fills, ends_at_horizon


def _critic_values(V, t, S, q, record):
    vals, tape = (V.forward(t, S, q, record=record) if isinstance(V, ValueNetwork) else (np.asarray(V(t, S, q), float).reshape(-1), None))
    return vals, tape


def td_terms(V, actor, episode, p: ModelParams, revenue: str = "mean", critic_tape: bool = False):
    """TD errors of one or more episodes (or a list of steps).

    ``delta_i = f_i . c_i + [q_{i+1} S_{i+1} - q_i S_i] - (delta q_i^2 - gamma H) dt
    + V(t_{i+1}) - V(t_i)`` where ``f`` holds the fill sizes in quote order, ``c``
    is the actor mean (``revenue="mean"``) or the quoted spread
    (``revenue="sampled"``), and ``V`` vanishes at the horizon.
    ``actor`` may be an :class:`ActorNetwork` or a callable ``(t, S, q) -> means``.
    """
    if revenue not in REVENUE_MODES:
        raise ValueError(f"revenue must be one of {REVENUE_MODES}")
    t, S, q, quotes, fills, pinned = _episode_arrays(episode, p)
    n, N1 = S.shape
    N = N1 - 1
    vals, tape = _critic_values(V, t.ravel(), S.ravel(), q.ravel(), critic_tape)
    values = vals.reshape(n, N1).copy()
    if pinned:
        values[:, N] = 0.0
    means_fn = actor.means if isinstance(actor, ActorNetwork) else actor
    M = np.asarray(means_fn(t[:, :N].ravel(), S[:, :N].ravel(), q[:, :N].ravel()), dtype=float)
    M = M.reshape(n, N, -1)
    z2 = np.repeat(p.z, 2).astype(float)
    price = M if revenue == "mean" else quotes
    spread = np.sum(z2 * fills * price, axis=2)
    mtm = q[:, 1:] * S[:, 1:] - q[:, :N] * S[:, :N]
    flow = (p.delta * q[:, :N] ** 2 - p.gamma * policy_entropy(p)) * p.dt
    deltas = spread + mtm - flow + values[:, 1:] - values[:, :N]
    terms = TDTerms(deltas, M, values)
    return (terms, tape, pinned) if critic_tape else terms


def td_error(V, actor, step: StepRecord, p: ModelParams, revenue: str = "mean") -> float:
    """TD error of a single step (the critic is evaluated at both ends)."""
    return float(td_terms(V, actor, [step], p, revenue).deltas[0, 0])


def td_errors(V, actor, episode, p: ModelParams, revenue: str = "mean") -> np.ndarray:
    return td_terms(V, actor, episode, p, revenue).deltas


def critic_gradient(V: ValueNetwork, actor, episode, p: ModelParams, revenue: str = "mean"):
    """``(loss, grads, deltas)`` for ``L = 1/2 sum delta_i^2`` through both critic terms."""
    terms, tape, pinned = td_terms(V, actor, episode, p, revenue, critic_tape=True)
    d = terms.deltas
    n, N = d.shape
    loss = 0.5 * float(np.sum(d * d))
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"critic loss is not finite ({loss})")
    up = np.zeros((n, N + 1))
    up[:, :N] -= d
    up[:, 1:] += d
    if pinned:
        up[:, N] = 0.0
    return loss, V.gradient(tape, up.ravel()), d


def critic_update(V: ValueNetwork, episode, p: ModelParams, lr: float | None = None, opt=None, actor=None, revenue: str = "mean"):
    """One descent step on the critic loss.

    With ``opt`` omitted this is the plain step ``theta - lr * sum delta grad delta``.
    Returns ``(V', opt', loss)``.
    """
    if actor is None:
        raise ValueError("the TD error needs the actor means")
    loss, grads, _ = critic_gradient(V, actor, episode, p, revenue)
    if opt is None:
        opt = make_optimizer("sgd", lr, V.store)
    store, opt = optimizer_step(opt, V.store, grads)
    return V.with_store(store), opt, loss


def actor_gradient(actor: ActorNetwork, episode, deltas: np.ndarray, p: ModelParams):
    """``sum_i delta_i grad log pi(eps_i)`` and the diagnostic ``sum_i delta_i log pi(eps_i)``."""
    t, S, q, quotes, _, _ = _episode_arrays(episode, p)
    n, N = deltas.shape
    raw, tape = actor.raw(t[:, :N].ravel(), S[:, :N].ravel(), q[:, :N].ravel(), record=True)
    M = actor.squash(raw)
    var = p.policy_variance()
    eps = quotes.reshape(n * N, -1)
    score_M = (eps - M) / var
    w = np.asarray(deltas, dtype=float).reshape(-1, 1)
    grads = backward(tape, w * score_M * actor.squash_slope(M), actor.store.spec)
    logp = -0.5 * np.sum(np.log(2 * np.pi * var) + (eps - M) ** 2 / var, axis=1)
    return grads, float(np.sum(w[:, 0] * logp))


def actor_update(actor: ActorNetwork, episode, deltas, p: ModelParams, lr: float | None = None, opt=None):
    """Ascent step ``phi + beta * sum_i delta_i grad log pi``. Returns ``(actor', opt', policy_loss)``."""
    grads, pl = actor_gradient(actor, episode, deltas, p)
    neg = {k: -g for k, g in grads.arrays.items()}
    if opt is None:
        opt = make_optimizer("sgd", lr, actor.store)
    store, opt = optimizer_step(opt, actor.store, neg)
    return actor.with_store(store), opt, pl


def episode_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


def initial_networks(cfg: ACTrainConfig, p: ModelParams) -> tuple[ValueNetwork, ActorNetwork]:
    scaling = StateScaling.from_params(p)
    scale = cfg.value_scale if cfg.value_scale is not None else default_value_scale(p)
    critic = ValueNetwork(init_network(NetworkSpec(family=cfg.family), cfg.critic_init_seed), scaling, scale)
    lo, hi = cfg.ranges(p)
    actor_spec = NetworkSpec(family=cfg.family, output_width=2 * p.K)
    actor = ActorNetwork(init_network(actor_spec, cfg.actor_init_seed), scaling, lo, hi)
    return critic, actor


def train_actor_critic(
    cfg: ACTrainConfig, p: ModelParams, checkpoint_dir: Path | str | None = None, progress=None
) -> ACReport:
    """Sequential episodes: roll out, update the critic, then the actor with the same TD errors."""
    V, actor = initial_networks(cfg, p)
    c_opt = make_optimizer(cfg.optimizer, cfg.critic_lr, V.store)
    a_opt = make_optimizer(cfg.optimizer, cfg.actor_lr, actor.store)
    report = ACReport()
    for ep in range(cfg.episodes):
        batch = simulate_batch(ActorPolicy(actor, p), p, [episode_seed(cfg.seed, ep)])
        loss, c_grads, d = critic_gradient(V, actor, batch, p, cfg.revenue)
        store, c_opt = optimizer_step(c_opt, V.store, c_grads)
        V = V.with_store(store)
        a_grads, pl = actor_gradient(actor, batch, d, p)
        store, a_opt = optimizer_step(a_opt, actor.store, {k: -g for k, g in a_grads.arrays.items()})
        actor = actor.with_store(store)
        for g in store.arrays.values():
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(f"actor parameters became non-finite at episode {ep}")
        report.rows.append(
            ACEpisodeRow(
                ep,
                loss,
                float(d.mean()),
                float(np.abs(d).mean()),
                pl,
                float(batch.returns("raw")[0]),
                float(batch.returns("regularized")[0]),
            )
        )
        if cfg.eval_every and (ep + 1) % cfg.eval_every == 0:
            ev = evaluate_policy(ActorPolicy(actor, p), p, cfg.eval_episodes, cfg.eval_seed)
            report.evaluations.append((ep + 1, ev))
            if checkpoint_dir is not None:
                base = Path(checkpoint_dir)
                meta = {"episode": ep + 1, "params_fingerprint": p.fingerprint()}
                report.checkpoints.append(str(actor.save(base / f"ac_actor_ep{ep + 1}.json", meta)))
                V.save(base / f"ac_critic_ep{ep + 1}.json", meta)
        if progress is not None:
            progress(report.rows[-1])
    report.critic, report.actor = V, actor
    return report


def spread_slopes(actor_or_means, p: ModelParams, q_grid, t: float = 0.0, S: float = 1.0) -> np.ndarray:
    """Least-squares slope of each quote mean against ``q`` at fixed ``(t, S)``; shape ``(2K,)``."""
    q_grid = np.asarray(q_grid, dtype=float)
    fn = actor_or_means.means if hasattr(actor_or_means, "means") else actor_or_means
    M = np.asarray(fn(float(t), np.full(q_grid.size, float(S)), q_grid), dtype=float)
    qc = q_grid - q_grid.mean()
    return (qc @ (M - M.mean(axis=0))) / (qc @ qc)
