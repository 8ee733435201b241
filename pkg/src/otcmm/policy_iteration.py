"""Policy iteration: fit a value network by the martingale loss, then rebuild
the Gaussian quote policy from it, and repeat."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, ValuePolicy, policy_entropy
from .nets import (
    NetworkSpec,
    ParamStore,
    StateScaling,
    ValueNetwork,
    default_value_scale,
    init_network,
    make_optimizer,
    optimizer_step,
)
from .sim import EpisodeBatch, Trajectory, simulate_batch


LOSSES = ("martingale", "reward_to_go")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PITrainConfig:
    outer_iterations: int = 5
    paths_per_epoch: int = 10
    epochs_per_iteration: int = 50
    learning_rate: float = 1e-3
    terminal_weight: float = 1.0
    eval_episodes: int = 100
    seed: int = 0
    eval_seed: int = 1_000_000
    init_seed: int = 0
    family: str = "conv_residual"
    optimizer: str = "adam"
    value_scale: float | None = None
    q_cap: tuple[int, int] | None = None
    quote_means: str = "live"
    loss: str = "martingale"

    def __post_init__(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.quote_means not in ("live", "policy"):
            raise ValueError("quote_means must be 'live' or 'policy'")
        if self.outer_iterations < 1 or self.paths_per_epoch < 1:
            raise ValueError("outer_iterations and paths_per_epoch must be at least 1")
        if self.epochs_per_iteration < 1:
            raise ValueError("epochs_per_iteration must be at least 1")
        if self.learning_rate < 0 or self.terminal_weight < 0:
            raise ValueError("learning_rate and terminal_weight must be nonnegative")
        if self.eval_episodes < 2:
            raise ValueError("eval_episodes must be at least 2")
        if self.q_cap is not None:
            object.__setattr__(self, "q_cap", tuple(int(x) for x in self.q_cap))


@dataclass(frozen=True, eq=False)
class EvalSummary:
    raw: np.ndarray
    regularized: np.ndarray

    @property
    def raw_mean(self) -> float:
        return float(self.raw.mean())

    @property
    def raw_std(self) -> float:
        return float(self.raw.std(ddof=1))

    @property
    def reg_mean(self) -> float:
        return float(self.regularized.mean())

    @property
    def reg_std(self) -> float:
        return float(self.regularized.std(ddof=1))

    @property
    def reg_stderr(self) -> float:
        return self.reg_std / math.sqrt(self.regularized.size)


@dataclass(eq=False)
class PIIterationReport:
    iteration: int
    losses: list[float]
    evaluation: EvalSummary
    checkpoint: str | None = None


@dataclass(eq=False)
class PIRun:
    reports: list[PIIterationReport]
    initial: EvalSummary
    value: ValueNetwork
    monotone: bool = field(default=True)


@dataclass(frozen=True, eq=False)
class MartingaleLoss:
    loss: float
    deltas: np.ndarray  # (n, N) rate residuals
    grads: ParamStore | None


def _as_arrays(trajectories, p: ModelParams):
    """Normalise an EpisodeBatch or a list of Trajectory into aligned arrays."""
    fp = p.fingerprint()
    if isinstance(trajectories, EpisodeBatch):
        if trajectories.params_fingerprint != fp:
            raise ValueError("trajectories were generated under different model parameters")
        b = trajectories
        return b.t, b.S, b.q.astype(np.int64), b.fills.astype(float)
    trajs = [trajectories] if isinstance(trajectories, Trajectory) else list(trajectories)
    if not trajs:
        raise ValueError("no trajectories supplied")
    for tr in trajs:
        if tr.params_fingerprint != fp:
            raise ValueError("trajectories were generated under different model parameters")
    N = len(trajs[0].steps)
    if any(len(tr.steps) != N for tr in trajs):
        raise ValueError("trajectories must have equal length")
    t = np.array([s.state.t for s in trajs[0].steps] + [trajs[0].terminal.t])
    S = np.array([[s.state.S for s in tr.steps] + [tr.terminal.S] for tr in trajs])
    q = np.array([[s.state.q for s in tr.steps] + [tr.terminal.q] for tr in trajs], dtype=np.int64)
    fills = np.array([[s.fills.as_array() for s in tr.steps] for tr in trajs], dtype=float)
    return t, S, q, fills


def ml_loss(
    V,
    trajectories,
    p: ModelParams,
    terminal_weight: float = 1.0,
    with_grad: bool = True,
    quote_means: np.ndarray | None = None,
) -> MartingaleLoss:
    """Martingale loss of a value function along sampled paths.

    ``delta_i = [V(t_{i+1}) - V(t_i) + R_i] / dt`` with
    ``R_i = sum_k z_k (S_i + m^b_k) dN+_k - z_k (S_i - m^a_k) dN-_k
    - delta q_i^2 dt + gamma * entropy * dt`` where the quote means ``m`` are the
    closed-form means computed from ``V`` itself.  The loss is
    ``1/2 sum delta_i^2 dt + terminal_weight/2 sum V(T)^2``.

    Passing ``quote_means`` of shape ``(n, N, 2K)`` fixes ``m`` to those values
    (typically the means of the policy that generated the paths) instead.

    ``V`` may be any ``(t, S, q)`` handle; the parameter gradient is returned
    only for a :class:`ValueNetwork`.
    """
    t, S, q, fills = _as_arrays(trajectories, p)
    n, N1 = S.shape
    N, K, dt = N1 - 1, p.K, p.dt
    z = p.z.astype(float)
    zi = p.z

    # node values at every (path, step), then q +- z_k at the pre-step nodes
    T_all = np.broadcast_to(t, (n, N1)).ravel()
    S_pre = np.repeat(S[:, :N].reshape(-1), K)
    T_pre = np.repeat(np.broadcast_to(t[:N], (n, N)).reshape(-1), K)
    q_pre = q[:, :N].reshape(-1, 1)
    tt = np.concatenate([T_all, T_pre, T_pre])
    ss = np.concatenate([S.ravel(), S_pre, S_pre])
    qq = np.concatenate([q.ravel(), (q_pre + zi).ravel(), (q_pre - zi).ravel()])

    net = isinstance(V, ValueNetwork)
    if net:
        vals, tape = V.forward(tt, ss, qq, record=with_grad)
    else:
        vals, tape = np.asarray(V(tt, ss, qq), dtype=float).reshape(-1), None
    nodes = vals[: n * N1].reshape(n, N1)
    off = n * N1
    v_up = vals[off : off + n * N * K].reshape(n, N, K)
    v_dn = vals[off + n * N * K :].reshape(n, N, K)

    v0 = nodes[:, :N, None]
    S_ = S[:, :N, None]
    live = quote_means is None
    if live:
        half = p.A / (2.0 * p.B)
        m_b = half - (v_up - v0 + z * S_) / (2.0 * z)
        m_a = half - (v_dn - v0 - z * S_) / (2.0 * z)
    else:
        quote_means = np.asarray(quote_means, dtype=float)
        if quote_means.shape != (n, N, 2 * K):
            raise ValueError(f"quote_means must have shape {(n, N, 2 * K)}")
        m_b, m_a = quote_means[..., 0::2], quote_means[..., 1::2]
    dNp, dNm = fills[..., 0::2], fills[..., 1::2]
    revenue = np.sum(z * (S_ + m_b) * dNp - z * (S_ - m_a) * dNm, axis=2)
    flow = (p.gamma * policy_entropy(p) - p.delta * q[:, :N].astype(float) ** 2) * dt
    R = revenue + flow
    delta = (nodes[:, 1:] - nodes[:, :N] + R) / dt
    v_T = nodes[:, N]
    loss = 0.5 * float(np.sum(delta**2)) * dt + 0.5 * terminal_weight * float(np.sum(v_T**2))
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"martingale loss is not finite ({loss})")

    grads = None
    if net and with_grad:
        g = delta  # dL/d(delta) * dt cancels one 1/dt
        d_nodes = np.zeros((n, N1))
        d_nodes[:, 1:] += g
        d_nodes[:, N] += terminal_weight * v_T
        if live:
            d_nodes[:, :N] += g * (-1.0 + 0.5 * np.sum(dNp + dNm, axis=2))
            d_up = -0.5 * g[..., None] * dNp
            d_dn = -0.5 * g[..., None] * dNm
        else:
            d_nodes[:, :N] -= g
            d_up = np.zeros((n, N, K))
            d_dn = np.zeros((n, N, K))
        upstream = np.concatenate([d_nodes.ravel(), d_up.ravel(), d_dn.ravel()])
        grads = V.gradient(tape, upstream)
    return MartingaleLoss(loss, delta, grads)


def reward_to_go_loss(V: ValueNetwork, batch: EpisodeBatch, p: ModelParams, with_grad: bool = True) -> MartingaleLoss:
    """Regression of ``V(t_i)`` on the realised regularised reward-to-go.

    ``1/2 sum_i (V(t_i) - G_i)^2 dt`` with ``G_i = sum_{j >= i} r_j``; its
    minimiser is the value of the policy that generated ``batch``.  The
    returned residuals are ``V(t_i) - G_i``.
    """
    if batch.params_fingerprint != p.fingerprint():
        raise ValueError("trajectories were generated under different model parameters")
    r = batch.fill_flow - batch.inv_penalty + batch.entropy_reg
    G = np.cumsum(r[:, ::-1], axis=1)[:, ::-1]
    n, N = G.shape
    t = np.broadcast_to(batch.t[:N], (n, N))
    vals, tape = V.forward(t.ravel(), batch.S[:, :N].ravel(), batch.q[:, :N].ravel(), record=with_grad)
    resid = vals.reshape(n, N) - G
    loss = 0.5 * float(np.sum(resid**2)) * p.dt
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"reward-to-go loss is not finite ({loss})")
    grads = V.gradient(tape, (resid * p.dt).ravel()) if with_grad else None
    return MartingaleLoss(loss, resid, grads)


def epoch_seeds(seed: int, iteration: int, epoch: int, m: int) -> np.ndarray:
    """Rollout seeds for one epoch, a pure function of ``(seed, iteration, epoch)``."""
    return np.random.SeedSequence([seed, iteration, epoch]).generate_state(m).astype(np.int64)


def train_value(
    V: ValueNetwork,
    policy,
    cfg: PITrainConfig,
    p: ModelParams,
    iteration: int = 0,
) -> tuple[ValueNetwork, list[float]]:
    """Fit ``V`` to the frozen ``policy``: per epoch, fresh paths and one optimiser step."""
    opt = make_optimizer(cfg.optimizer, cfg.learning_rate, V.store)
    losses = []
    for epoch in range(cfg.epochs_per_iteration):
        seeds = epoch_seeds(cfg.seed, iteration, epoch, cfg.paths_per_epoch)
        batch = simulate_batch(policy, p, seeds, q_cap=cfg.q_cap)
        if cfg.loss == "reward_to_go":
            res = reward_to_go_loss(V, batch, p)
        else:
            frozen = batch.means if cfg.quote_means == "policy" else None
            res = ml_loss(V, batch, p, cfg.terminal_weight, quote_means=frozen)
        if not all(np.all(np.isfinite(g)) for g in res.grads.arrays.values()):
            raise NonFiniteLossError(f"non-finite gradient at iteration {iteration}, epoch {epoch}")
        losses.append(res.loss)
        store, opt = optimizer_step(opt, V.store, res.grads)
        V = V.with_store(store)
    return V, losses


def improved_policy(V, p: ModelParams) -> ValuePolicy:
    """The closed-form Gaussian policy built from ``V`` at every state."""
    return ValuePolicy(V, p)


def evaluate_policy(policy, p: ModelParams, n: int, seed: int, q_cap=None) -> EvalSummary:
    chunks_raw, chunks_reg = [], []
    for start in range(0, n, 2000):
        seeds = seed + np.arange(start, min(n, start + 2000))
        b = simulate_batch(policy, p, seeds, q_cap=q_cap)
        chunks_raw.append(b.returns("raw"))
        chunks_reg.append(b.returns("regularized"))
    return EvalSummary(np.concatenate(chunks_raw), np.concatenate(chunks_reg))


def initial_value_network(cfg: PITrainConfig, p: ModelParams, spec: NetworkSpec | None = None) -> ValueNetwork:
    spec = spec or NetworkSpec(family=cfg.family)
    scale = cfg.value_scale if cfg.value_scale is not None else default_value_scale(p)
    return ValueNetwork(init_network(spec, cfg.init_seed), StateScaling.from_params(p), scale)


def improvement_is_monotone(evals: list[EvalSummary], k: float = 2.0) -> bool:
    """Each regularised mean is at least the previous one minus ``k`` combined standard errors."""
    for a, b in zip(evals, evals[1:]):
        if b.reg_mean < a.reg_mean - k * math.hypot(a.reg_stderr, b.reg_stderr):
            return False
    return True


def policy_iteration(
    cfg: PITrainConfig,
    p: ModelParams,
    V0: ValueNetwork | None = None,
    checkpoint_dir: Path | str | None = None,
    progress=None,
) -> PIRun:
    """Alternate value fitting and policy rebuilding for ``cfg.outer_iterations`` rounds.

    Every round's improved policy is evaluated on the same frozen seed set;
    monotonicity of the regularised means is checked, not assumed.
    """
    V = V0 if V0 is not None else initial_value_network(cfg, p)
    policy = improved_policy(V, p)
    initial = evaluate_policy(policy, p, cfg.eval_episodes, cfg.eval_seed, cfg.q_cap)
    reports = []
    for it in range(1, cfg.outer_iterations + 1):
        V, losses = train_value(V, policy, cfg, p, iteration=it)
        policy = improved_policy(V, p)
        ev = evaluate_policy(policy, p, cfg.eval_episodes, cfg.eval_seed, cfg.q_cap)
        ckpt = None
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"pi_value_iter{it}.json"
            V.save(path, {"iteration": it, "params_fingerprint": p.fingerprint()})
            ckpt = str(path)
        reports.append(PIIterationReport(it, losses, ev, ckpt))
        if progress is not None:
            progress(reports[-1])
    evals = [initial] + [r.evaluation for r in reports]
    return PIRun(reports, initial, V, improvement_is_monotone(evals))
