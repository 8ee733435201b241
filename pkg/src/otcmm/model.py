"""Model constants, fill intensities and the closed-form Gaussian quote policy.

Quote vectors of length ``2K`` use the interleaved layout
``[bid_1, ask_1, bid_2, ask_2, ..., bid_K, ask_K]`` everywhere in the package.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

# (t, S, q) -> V, broadcasting over numpy arrays
ValueFunctionHandle = Callable[..., "np.ndarray | float"]


@dataclass(frozen=True)
class TierParams:
    """One order-size tier: size ``z`` and linear intensity ``A - B*eps``."""

    z: int
    A: float
    B: float

    def __post_init__(self) -> None:
        if int(self.z) != self.z or self.z < 1:
            raise ValueError(f"tier size z must be a positive integer, got {self.z!r}")
        if not (math.isfinite(self.A) and self.A > 0):
            raise ValueError(f"tier intercept A must be positive, got {self.A!r}")
        if not (math.isfinite(self.B) and self.B > 0):
            raise ValueError(f"tier slope B must be positive, got {self.B!r}")
        object.__setattr__(self, "z", int(self.z))
        object.__setattr__(self, "A", float(self.A))
        object.__setattr__(self, "B", float(self.B))

    @property
    def zero_intensity_spread(self) -> float:
        return self.A / self.B


@dataclass(frozen=True)
class ModelParams:
    sigma: float = 0.05
    gamma: float = 0.01
    delta: float = 0.01
    T: float = 1.0
    dt: float = 0.01
    S0: float = 1.0
    q0: int = 0
    tiers: tuple[TierParams, ...] = field(default_factory=lambda: DESK_TIERS)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tiers", tuple(self.tiers))
        if not self.tiers:
            raise ValueError("at least one tier is required")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be nonnegative, got {self.sigma!r}")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma!r}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta!r}")
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")
        ratio = self.T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ValueError(f"T/dt must be a positive integer, got {ratio!r}")
        if not self.S0 > 0:
            raise ValueError(f"S0 must be positive, got {self.S0!r}")
        if int(self.q0) != self.q0:
            raise ValueError(f"q0 must be an integer, got {self.q0!r}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be an unsigned integer, got {self.seed!r}")
        object.__setattr__(self, "q0", int(self.q0))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def K(self) -> int:
        return len(self.tiers)

    @property
    def z(self) -> np.ndarray:
        return np.array([tr.z for tr in self.tiers], dtype=np.int64)

    @property
    def A(self) -> np.ndarray:
        return np.array([tr.A for tr in self.tiers])

    @property
    def B(self) -> np.ndarray:
        return np.array([tr.B for tr in self.tiers])

    def tier_variances(self) -> np.ndarray:
        """Per-tier quote variance ``gamma / (2 z B)``."""
        return self.gamma / (2.0 * self.z * self.B)

    def policy_variance(self) -> np.ndarray:
        """Diagonal of the ``2K`` quote covariance in interleaved order."""
        return np.repeat(self.tier_variances(), 2)

    def replace(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tiers"] = [asdict(tr) for tr in self.tiers]
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


DESK_TIERS = tuple(
    TierParams(z, a, b)
    for z, a, b in zip([10, 20, 30, 40, 50, 60], [20, 18, 15, 12, 10, 8], [1, 1, 1, 1, 1, 1])
)


def desk_params(**overrides) -> ModelParams:
    """The desk configuration used throughout the experiments."""
    return ModelParams(**overrides)


@dataclass(frozen=True)
class MarketState:
    t: float
    S: float
    q: int

    def __post_init__(self) -> None:
        if not self.S > 0:
            raise ValueError(f"reference price must be positive, got {self.S!r}")
        if self.t < 0:
            raise ValueError(f"time must be nonnegative, got {self.t!r}")


@dataclass(frozen=True)
class QuoteVector:
    bid: tuple[float, ...]
    ask: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "bid", tuple(float(x) for x in self.bid))
        object.__setattr__(self, "ask", tuple(float(x) for x in self.ask))
        if len(self.bid) != len(self.ask):
            raise ValueError("bid and ask must have the same number of tiers")

    @property
    def K(self) -> int:
        return len(self.bid)

    def as_array(self) -> np.ndarray:
        out = np.empty(2 * self.K)
        out[0::2] = self.bid
        out[1::2] = self.ask
        return out

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "QuoteVector":
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size % 2:
            raise ValueError("interleaved quote array must have even length")
        return cls(tuple(x[0::2]), tuple(x[1::2]))


@dataclass(frozen=True, eq=False)
class GaussianQuotePolicy:
    """Diagonal Gaussian over the ``2K`` interleaved spreads."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float).copy()
        var = np.asarray(self.variance, dtype=float).copy()
        if mean.shape != var.shape or mean.ndim != 1 or mean.size % 2:
            raise ValueError("mean and variance must be equal-length vectors of even length")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def K(self) -> int:
        return self.mean.size // 2

    def bid_means(self) -> np.ndarray:
        return self.mean[0::2]

    def ask_means(self) -> np.ndarray:
        return self.mean[1::2]


def fill_intensity(tier: TierParams, eps):
    """Clamped linear arrival rate ``max(0, A - B*eps)``."""
    lam = np.maximum(0.0, tier.A - tier.B * np.asarray(eps, dtype=float))
    return float(lam) if lam.ndim == 0 else lam


def h_plus(V: ValueFunctionHandle, s: MarketState, tier: TierParams) -> float:
    """Value increment of a buy fill, ``V(q+z) - V(q) + z S``."""
    return float(V(s.t, s.S, s.q + tier.z) - V(s.t, s.S, s.q) + tier.z * s.S)


def h_minus(V: ValueFunctionHandle, s: MarketState, tier: TierParams) -> float:
    """Value increment of a sell fill, ``V(q-z) - V(q) - z S``."""
    return float(V(s.t, s.S, s.q - tier.z) - V(s.t, s.S, s.q) - tier.z * s.S)


def optimal_means(A, B, z, H_plus, H_minus) -> np.ndarray:
    """Gaussian means ``A/(2B) - H/(2z)``, interleaved along the last axis.

    ``H_plus`` and ``H_minus`` have shape ``(..., K)``; tier arrays broadcast.
    """
    H_plus = np.asarray(H_plus, dtype=float)
    H_minus = np.asarray(H_minus, dtype=float)
    half = np.asarray(A, dtype=float) / (2.0 * np.asarray(B, dtype=float))
    z = np.asarray(z, dtype=float)
    out = np.empty(H_plus.shape[:-1] + (2 * H_plus.shape[-1],))
    out[..., 0::2] = half - H_plus / (2.0 * z)
    out[..., 1::2] = half - H_minus / (2.0 * z)
    return out


def gaussian_policy(V: ValueFunctionHandle, s: MarketState, p: ModelParams) -> GaussianQuotePolicy:
    hp = [h_plus(V, s, tr) for tr in p.tiers]
    hm = [h_minus(V, s, tr) for tr in p.tiers]
    mean = optimal_means(p.A, p.B, p.z, hp, hm)
    return GaussianQuotePolicy(mean, p.policy_variance())


def policy_entropy(p: ModelParams) -> float:
    """Differential entropy of the ``2K``-dimensional optimal quote Gaussian."""
    return p.K * (1.0 + LOG_2PI) + float(np.sum(np.log(p.tier_variances())))


def sample_quotes(pol: GaussianQuotePolicy, rng: np.random.Generator) -> QuoteVector:
    z = rng.standard_normal(pol.mean.size)
    return QuoteVector.from_array(pol.mean + np.sqrt(pol.variance) * z)


def log_density(pol: GaussianQuotePolicy, x) -> float:
    x = x.as_array() if isinstance(x, QuoteVector) else np.asarray(x, dtype=float)
    if x.shape != pol.mean.shape:
        raise ValueError(f"quote dimension {x.shape} does not match policy dimension {pol.mean.shape}")
    r = x - pol.mean
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * pol.variance) + r * r / pol.variance))


def zero_value(t, S, q):
    """The value function identically equal to zero."""
    return np.zeros(np.broadcast(np.asarray(t), np.asarray(S), np.asarray(q)).shape)


class QuotePolicySource(Protocol):
    """A state-dependent Gaussian quoting rule, evaluated for many states at once."""

    variance: np.ndarray

    def means(self, t: float, S: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Return interleaved means of shape ``(len(S), 2K)``."""
        ...


class ValuePolicy:
    """Closed-form Gaussian policy induced by a value function handle."""

    def __init__(self, V: ValueFunctionHandle, p: ModelParams):
        self.V = V
        self.p = p
        self.variance = p.policy_variance()

    def means(self, t, S, q) -> np.ndarray:
        p = self.p
        S = np.atleast_1d(np.asarray(S, dtype=float))
        q = np.atleast_1d(np.asarray(q, dtype=np.int64))
        # Many episodes share a state (always when sigma = 0): evaluate unique ones.
        keys = np.stack([S, q.astype(float)], axis=1)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        uS, uq = uniq[:, 0], uniq[:, 1].astype(np.int64)
        z = p.z
        n, K = uS.size, p.K
        qs = np.concatenate([uq, (uq[:, None] + z).ravel(), (uq[:, None] - z).ravel()])
        Ss = np.concatenate([uS, np.repeat(uS, K), np.repeat(uS, K)])
        vals = np.asarray(self.V(float(t), Ss, qs), dtype=float).reshape(-1)
        v0 = vals[:n, None]
        vp = vals[n : n + n * K].reshape(n, K)
        vm = vals[n + n * K :].reshape(n, K)
        hp = vp - v0 + z * uS[:, None]
        hm = vm - v0 - z * uS[:, None]
        return optimal_means(p.A, p.B, z, hp, hm)[inverse]

    def at(self, s: MarketState) -> GaussianQuotePolicy:
        return GaussianQuotePolicy(self.means(s.t, [s.S], [s.q])[0], self.variance)


class FixedPolicy:
    """State-independent Gaussian with a fixed mean vector."""

    def __init__(self, mean, variance):
        self.mean = np.asarray(mean, dtype=float)
        self.variance = np.asarray(variance, dtype=float)
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance shapes differ")
        if np.any(self.variance < 0):
            raise ValueError("variances must be nonnegative")

    def means(self, t, S, q) -> np.ndarray:
        n = np.atleast_1d(np.asarray(S)).size
        return np.broadcast_to(self.mean, (n, self.mean.size)).copy()


def zero_intensity_policy(p: ModelParams) -> FixedPolicy:
    """Deterministic quotes at ``A/B`` on every side, so no fill ever occurs.

    The entropy bonus in the rewards is still the model constant; this is a
    diagnostic override, not a member of the Gaussian family.
    """
    return FixedPolicy(np.repeat(p.A / p.B, 2), np.zeros(2 * p.K))
