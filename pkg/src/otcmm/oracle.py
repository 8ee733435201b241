"""Independent numerical references for the quoting model.

* grid maximisation of the one-sided variational objective (Gibbs density),
* the closed-form entropy-regularised supremum,
* a backward solve of the dynamic-programming recursion on an inventory
  lattice when the price is frozen (``sigma = 0``),
* exact lattice evaluation of an arbitrary quoting policy,
* Monte Carlo policy evaluation and the policy-improvement check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    ModelParams,
    QuotePolicySource,
    TierParams,
    ValuePolicy,
    policy_entropy,
)
from .sim import batch_returns


@dataclass(frozen=True)
class EpsGrid:
    lo: float
    hi: float
    step: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError("grid needs lo < hi")
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if (self.hi - self.lo) / self.step < 100:
            raise ValueError("grid must have at least 100 points")

    def points(self) -> np.ndarray:
        n = int(math.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        return self.lo + self.step * np.arange(n)

    @classmethod
    def around(cls, center: float, sd: float, half_width: float = 12.0, n: int = 20001) -> "EpsGrid":
        """Grid over ``center +- half_width * sd`` with about ``n`` points."""
        lo, hi = center - half_width * sd, center + half_width * sd
        return cls(lo, hi, (hi - lo) / (n - 1))


def side_objective(tier: TierParams, H, eps):
    """Unclamped one-sided payoff rate ``(A - B eps)(z eps + H)``."""
    eps = np.asarray(eps, dtype=float)
    out = (tier.A - tier.B * eps) * (tier.z * eps + H)
    return float(out) if out.ndim == 0 else out


def side_vertex(tier: TierParams, H: float) -> float:
    return tier.A / (2.0 * tier.B) - H / (2.0 * tier.z)


@dataclass(frozen=True, eq=False)
class GibbsOptimum:
    eps: np.ndarray
    density: np.ndarray  # probability mass per grid point
    mean: float
    variance: float
    gaussian_mean: float
    gaussian_variance: float
    tv_distance: float


def grid_variational_optimum(tier: TierParams, H: float, gamma: float, grid: EpsGrid) -> GibbsOptimum:
    """Discrete Gibbs density ``p_j ~ exp(f(eps_j)/gamma)`` and its moments.

    The total-variation distance is taken against the Gaussian with mean
    ``A/(2B) - H/(2z)`` and variance ``gamma/(2zB)`` discretised on the same
    grid.
    """
    eps = grid.points()
    g_mean = side_vertex(tier, H)
    g_var = gamma / (2.0 * tier.z * tier.B)
    g_sd = math.sqrt(g_var)
    if eps[0] > g_mean - 8 * g_sd or eps[-1] < g_mean + 8 * g_sd:
        raise ValueError("grid does not cover the mean +- 8 standard deviations")
    logw = side_objective(tier, H, eps) / gamma
    w = np.exp(logw - logw.max())
    dens = w / w.sum()
    if dens[0] + dens[-1] > 1e-10:
        raise ValueError("grid too narrow: boundary mass exceeds 1e-10")
    mean = float(np.sum(dens * eps))
    var = float(np.sum(dens * (eps - mean) ** 2))
    g = np.exp(-0.5 * (eps - g_mean) ** 2 / g_var)
    g /= g.sum()
    tv = 0.5 * float(np.abs(dens - g).sum())
    return GibbsOptimum(eps, dens, mean, var, g_mean, g_var, tv)


def side_sup_value(tier: TierParams, H, gamma: float):
    """``sup_pi E_pi[f] + gamma * entropy(pi)`` for one side, i.e. ``gamma ln int exp(f/gamma)``."""
    zB = tier.z * tier.B
    m = side_vertex(tier, np.asarray(H, dtype=float))
    return zB * m * m + tier.A * np.asarray(H, dtype=float) + 0.5 * gamma * np.log(np.pi * gamma / zB)


def exact_sup_value(tier: TierParams, H_plus: float, H_minus: float, gamma: float) -> float:
    return float(side_sup_value(tier, H_plus, gamma) + side_sup_value(tier, H_minus, gamma))


def side_entropy_bonus(tier: TierParams, gamma: float) -> float:
    """``gamma`` times the entropy of one quote coordinate of the optimal Gaussian."""
    return 0.5 * gamma * (1.0 + math.log(math.pi * gamma / (tier.z * tier.B)))


def numerical_policy_entropy(p: ModelParams, n: int = 20001, half_width: float = 12.0) -> float:
    """Sum over quote coordinates of ``-int phi ln phi`` by the trapezoidal rule."""
    total = 0.0
    for var in p.tier_variances():
        sd = math.sqrt(var)
        x = np.linspace(-half_width * sd, half_width * sd, n)
        log_phi = -0.5 * x * x / var - 0.5 * math.log(2.0 * math.pi * var)
        total += 2.0 * float(np.trapezoid(-np.exp(log_phi) * log_phi, x))
    return total


class QTable:
    """A value table ``V[i, q - q_min]`` on the simulator's time grid, price frozen.

    Lookups ignore ``S``; inventories outside the table are clamped to its
    edge, and times are rounded to the nearest grid index.
    """

    def __init__(self, V: np.ndarray, q_min: int, q_max: int, T: float, S0: float):
        V = np.asarray(V, dtype=float)
        if V.ndim != 2 or V.shape[1] != q_max - q_min + 1 or V.shape[0] < 2:
            raise ValueError("table shape does not match the inventory range")
        self.V = V
        self.q_min, self.q_max = int(q_min), int(q_max)
        self.T, self.S0 = float(T), float(S0)
        self.n_steps = V.shape[0] - 1
        self.dt = self.T / self.n_steps

    @property
    def q_values(self) -> np.ndarray:
        return np.arange(self.q_min, self.q_max + 1)

    @property
    def times(self) -> np.ndarray:
        return self.T * np.arange(self.n_steps + 1) / self.n_steps

    def _lookup(self, i, q):
        i = np.clip(i, 0, self.n_steps + 1)
        qi = np.clip(np.asarray(q, dtype=np.int64), self.q_min, self.q_max) - self.q_min
        padded = np.vstack([self.V, np.zeros((1, self.V.shape[1]))])
        return padded[i, qi]

    def value(self, t, S, q):
        i = np.rint(np.asarray(t, dtype=float) / self.dt).astype(np.int64)
        shape = np.broadcast(np.asarray(t), np.asarray(S), np.asarray(q)).shape
        i, q = np.broadcast_arrays(i, np.asarray(q))
        out = self._lookup(i, q).reshape(shape)
        return float(out) if out.ndim == 0 else out

    __call__ = value

    def continuation(self, t, S, q):
        """Value one step later, ``V(t + dt, S, q)``; zero beyond the horizon."""
        i = np.rint(np.asarray(t, dtype=float) / self.dt).astype(np.int64) + 1
        shape = np.broadcast(np.asarray(t), np.asarray(S), np.asarray(q)).shape
        i, q = np.broadcast_arrays(i, np.asarray(q))
        out = self._lookup(i, q).reshape(shape)
        return float(out) if out.ndim == 0 else out

    def rows(self) -> list[list]:
        """``(t, q, V)`` rows, time-major."""
        out = []
        for i, t in enumerate(self.times):
            for j, q in enumerate(self.q_values):
                out.append([float(t), int(q), float(self.V[i, j])])
        return out


class LatticeValue(QTable):
    """Dynamic-programming value on ``[q_min, q_max]``; zero at the horizon."""

    def __init__(self, V, q_min, q_max, T, S0):
        super().__init__(V, q_min, q_max, T, S0)
        if np.any(self.V[-1] != 0.0):
            raise ValueError("lattice value must vanish at the horizon")


def _require_frozen_price(p: ModelParams, q_min: int, q_max: int) -> None:
    if p.sigma != 0:
        raise ValueError("the lattice oracle only handles a frozen price (sigma = 0)")
    if not q_min <= p.q0 <= q_max:
        raise ValueError("q0 must lie inside the lattice")


def _edge_masks(p: ModelParams, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    z = p.z[None, :]
    up = q[:, None] + z
    down = q[:, None] - z
    return up, down, up <= q.max(), down >= q.min()


def hjb_backward_solve(p: ModelParams, q_min: int, q_max: int) -> LatticeValue:
    """Explicit backward recursion for the optimal entropy-regularised value.

    ``V[i] = V[i+1] + dt * (sum of per-side suprema - delta q^2)`` with the
    increments taken from ``V[i+1]``.  A side whose fill would leave the
    lattice has zero intensity and contributes only its entropy bonus.

    The supremum uses the unclamped linear intensity, so it grows like ``H^2``;
    with a stiff inventory penalty the recursion can blow up before ``t = 0``,
    which is reported as a ``FloatingPointError``.
    """
    _require_frozen_price(p, q_min, q_max)
    q = np.arange(q_min, q_max + 1)
    N = p.n_steps
    V = np.zeros((N + 1, q.size))
    up, down, up_ok, down_ok = _edge_masks(p, q)
    zS = p.z[None, :] * p.S0
    bonus = np.array([side_entropy_bonus(tr, p.gamma) for tr in p.tiers])[None, :]
    penalty = p.delta * q.astype(float) ** 2
    for i in range(N - 1, -1, -1):
        nxt = V[i + 1]
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > 1e150:
            raise FloatingPointError(
                f"lattice value diverged at t={(i + 1) * p.dt:.6g}: the unclamped quadratic "
                f"supremum blows up for delta={p.delta!r} on [{q_min}, {q_max}]"
            )
        Hp = nxt[np.clip(up, q_min, q_max) - q_min] - nxt[:, None] + zS
        Hm = nxt[np.clip(down, q_min, q_max) - q_min] - nxt[:, None] - zS
        rate = np.zeros(q.size)
        for k, tr in enumerate(p.tiers):
            rate += np.where(up_ok[:, k], side_sup_value(tr, Hp[:, k], p.gamma), bonus[0, k])
            rate += np.where(down_ok[:, k], side_sup_value(tr, Hm[:, k], p.gamma), bonus[0, k])
        V[i] = nxt + p.dt * (rate - penalty)
    return LatticeValue(V, q_min, q_max, p.T, p.S0)


def optimal_lattice_policy(lattice: QTable, p: ModelParams) -> ValuePolicy:
    """Gaussian policy whose means use the next-step lattice value (the solve's own maximiser)."""
    return ValuePolicy(lattice.continuation, p)


def lattice_policy_evaluation(policy: QuotePolicySource, p: ModelParams, q_min: int, q_max: int) -> LatticeValue:
    """Expected regularised return of ``policy`` on the lattice (frozen price).

    Uses ``E[(A - B eps)(z eps + H)] = f(m) - zB v`` for a Gaussian quote with
    mean ``m`` and variance ``v``; blocked sides contribute nothing.
    """
    _require_frozen_price(p, q_min, q_max)
    q = np.arange(q_min, q_max + 1)
    N = p.n_steps
    V = np.zeros((N + 1, q.size))
    up, down, up_ok, down_ok = _edge_masks(p, q)
    zS = p.z[None, :] * p.S0
    var = np.asarray(policy.variance, dtype=float)
    zB = (p.z * p.B)[None, :]
    ent = p.gamma * policy_entropy(p)
    penalty = p.delta * q.astype(float) ** 2
    S = np.full(q.size, p.S0)
    for i in range(N - 1, -1, -1):
        nxt = V[i + 1]
        if not np.all(np.isfinite(nxt)) or np.max(np.abs(nxt)) > 1e150:
            raise FloatingPointError(
                f"lattice value diverged at t={(i + 1) * p.dt:.6g}: the unclamped quadratic "
                f"supremum blows up for delta={p.delta!r} on [{q_min}, {q_max}]"
            )
        Hp = nxt[np.clip(up, q_min, q_max) - q_min] - nxt[:, None] + zS
        Hm = nxt[np.clip(down, q_min, q_max) - q_min] - nxt[:, None] - zS
        m = policy.means(i * p.dt, S, q)
        mb, ma = m[:, 0::2], m[:, 1::2]
        A, B, z = p.A[None, :], p.B[None, :], p.z[None, :]
        gain_b = (A - B * mb) * (z * mb + Hp) - zB * var[0::2][None, :]
        gain_a = (A - B * ma) * (z * ma + Hm) - zB * var[1::2][None, :]
        rate = np.sum(np.where(up_ok, gain_b, 0.0) + np.where(down_ok, gain_a, 0.0), axis=1)
        V[i] = nxt + p.dt * (rate + ent - penalty)
    return LatticeValue(V, q_min, q_max, p.T, p.S0)


def mc_policy_eval(
    policy: QuotePolicySource, p: ModelParams, n: int, seed: int, q_cap=None
) -> tuple[float, float]:
    """Mean and standard error of the regularised return over ``n`` seeded episodes."""
    if n < 100:
        raise ValueError("Monte Carlo evaluation needs at least 100 episodes")
    r = batch_returns(policy, p, n, seed, mode="regularized", q_cap=q_cap)
    return float(r.mean()), float(r.std(ddof=1) / math.sqrt(n))


@dataclass(frozen=True)
class ImprovementReport:
    old_mean: float
    new_mean: float
    old_stderr: float
    new_stderr: float
    stderr: float
    passed: bool

    @property
    def improvement(self) -> float:
        return self.new_mean - self.old_mean


def policy_improvement_check(
    V_handle, p: ModelParams, episodes: int, seed: int, baseline: QuotePolicySource, q_cap=None
) -> ImprovementReport:
    """Compare the Gaussian policy built from ``V_handle`` against ``baseline``.

    Both are evaluated on the same episode seeds.  Passes when
    ``new_mean >= old_mean - 2 * stderr`` with ``stderr`` the combined
    standard error of the two means.
    """
    new_policy = ValuePolicy(V_handle, p)
    old_mean, old_se = mc_policy_eval(baseline, p, episodes, seed, q_cap=q_cap)
    new_mean, new_se = mc_policy_eval(new_policy, p, episodes, seed, q_cap=q_cap)
    se = math.hypot(old_se, new_se)
    return ImprovementReport(old_mean, new_mean, old_se, new_se, se, new_mean >= old_mean - 2.0 * se)


def k1_instance(**overrides) -> ModelParams:
    """Single-tier frozen-price instance used for oracle cross-checks (cap ``|q| <= 5``)."""
    base = dict(
        sigma=0.0, gamma=0.1, delta=0.1, T=1.0, dt=0.01, S0=1.0, q0=0, tiers=(TierParams(1, 2.0, 1.0),)
    )
    base.update(overrides)
    return ModelParams(**base)


K1_CAP = (-5, 5)
