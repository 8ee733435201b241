import dataclasses
import math

import numpy as np
import pytest

from otcmm.actor_critic import (
    ACTrainConfig,
    ActorNetwork,
    ActorPolicy,
    actor_gradient,
    actor_mean,
    actor_update,
    critic_gradient,
    critic_update,
    default_actor_range,
    initial_networks,
    spread_slopes,
    td_error,
    td_errors,
    train_actor_critic,
)
from otcmm.model import (
    GaussianQuotePolicy,
    MarketState,
    ModelParams,
    QuoteVector,
    TierParams,
    ValuePolicy,
    fill_intensity,
    desk_params,
    policy_entropy,
    sample_quotes,
    zero_value,
)
from otcmm.nets import NetworkSpec, ParamStore, StateScaling, ValueNetwork, init_network
from otcmm.oracle import K1_CAP, hjb_backward_solve, k1_instance, optimal_lattice_policy
from otcmm.policy_iteration import ml_loss
from otcmm.sim import rollout, simulate_batch, step

SMALL = NetworkSpec(family="mlp", embed_width=8, head_widths=(8, 8, 8))


def per_time(policy):
    """Adapt a scalar-time means() to arrays of times."""

    def means(t, S, q):
        t, S, q = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (t, S, q))
        out = np.empty((t.size, policy.variance.size))
        for u in np.unique(t):
            sel = t == u
            out[sel] = policy.means(float(u), S[sel], q[sel].astype(np.int64))
        return out

    return means


def small_actor(p, seed=2, lo=None, hi=None):
    d_lo, d_hi = default_actor_range(p)
    spec = NetworkSpec(family="mlp", embed_width=8, head_widths=(8, 8, 8), output_width=2 * p.K)
    return ActorNetwork(init_network(spec, seed), StateScaling.from_params(p), d_lo if lo is None else lo, d_hi if hi is None else hi)


def small_critic(p, seed=1):
    return ValueNetwork(init_network(SMALL, seed), StateScaling.from_params(p), 1.0)


def with_raw_bias(actor, value):
    arr = {k: v.copy() for k, v in actor.store.arrays.items()}
    for k in arr:
        arr[k][:] = 0.0
    arr["head3.b"][:] = value
    return actor.with_store(ParamStore(actor.store.spec, arr))


# ---- actor mean

def test_squash_midpoint_and_asymptote():
    p = desk_params()
    actor = small_actor(p)
    s = MarketState(0.0, 1.0, 0)
    lo, hi = default_actor_range(p)
    np.testing.assert_allclose(actor_mean(with_raw_bias(actor, 0.0), s), (lo + hi) / 2, rtol=1e-15)
    np.testing.assert_allclose(actor_mean(with_raw_bias(actor, 60.0), s), hi, rtol=1e-12)
    np.testing.assert_allclose(actor_mean(with_raw_bias(actor, -60.0), s), lo, atol=1e-12)


def test_default_range_keeps_intensity_nonnegative():
    p = desk_params()
    actor = ActorNetwork(init_network(NetworkSpec(output_width=12), 4), StateScaling.from_params(p), *default_actor_range(p))
    rng = np.random.default_rng(0)
    n = 10_000
    t = rng.uniform(0, p.T, n).round(2)
    S = rng.uniform(0.5, 1.5, n)
    q = rng.integers(-500, 501, n)
    M = np.vstack([actor.means(u, S[t == u], q[t == u]) for u in np.unique(t)])
    lo, hi = default_actor_range(p)
    assert np.all(M >= lo) and np.all(M <= hi)
    for k, tier in enumerate(p.tiers):
        assert np.all(fill_intensity(tier, M[:, 2 * k : 2 * k + 2]) >= 0)


def test_actor_range_validation():
    p = desk_params()
    with pytest.raises(ValueError):
        small_actor(p, lo=np.ones(12), hi=np.ones(12))
    with pytest.raises(ValueError):
        ACTrainConfig(lo=(1.0,), hi=(0.5,))
    with pytest.raises(ValueError):
        ACTrainConfig(episodes=0)
    lo, hi = ACTrainConfig(lo=(0.0,) * 6, hi=tuple(p.A)).ranges(p)
    assert lo.shape == hi.shape == (12,)


# ---- TD error

def test_td_error_zero_without_flows():
    p = ModelParams(sigma=0.0, delta=0.0, gamma=1e-300, tiers=(TierParams(1, 2.0, 1.0),))
    far = QuoteVector((5.0,), (5.0,))
    rec = step(MarketState(0.0, 1.0, 0), far, p, np.random.default_rng(0))
    actor = lambda t, S, q: np.full((np.size(t), 2), 5.0)
    assert td_error(zero_value, actor, rec, p) == pytest.approx(0.0, abs=1e-290)


class ScriptedUniforms:
    def random(self, n):
        u = np.ones(n)
        u[0] = 0.0
        return u

    def standard_normal(self):
        return 0.0


def test_td_error_single_bid_fill_by_hand():
    p = desk_params(sigma=0.0)
    quote = QuoteVector((9.5,) + (100.0,) * 5, (100.0,) * 6)
    rec = step(MarketState(0.0, 1.0, 0), quote, p, ScriptedUniforms())
    means = per_time(ValuePolicy(zero_value, p))
    expected = 10 * 9.5 + (10 * 1.0 - 0.0) - (p.delta * 0**2 - p.gamma * policy_entropy(p)) * p.dt
    assert td_error(zero_value, means, rec, p) == pytest.approx(expected, rel=1e-12)


def test_bellman_consistency_on_oracle():
    p = k1_instance()
    lat = hjb_backward_solve(p, *K1_CAP)
    pol = optimal_lattice_policy(lat, p)
    b = simulate_batch(pol, p, np.arange(100), q_cap=K1_CAP)
    d = td_errors(lat.value, per_time(pol), b, p).ravel()
    assert d.size == 10_000
    assert abs(d.mean()) < 3 * d.std(ddof=1) / math.sqrt(d.size)


def test_td_matches_martingale_numerator():
    p = k1_instance()
    V = lambda t, S, q: (1.0 - np.asarray(t)) * (0.3 - 0.1 * np.asarray(q, float) ** 2) + 0.0 * np.asarray(S)
    pol = ValuePolicy(V, p)
    traj = rollout(pol, p, 4, q_cap=K1_CAP)
    td = td_errors(V, per_time(pol), traj.steps, p)
    ml = ml_loss(V, traj, p, terminal_weight=0.0).deltas * p.dt
    np.testing.assert_allclose(td, ml, rtol=1e-10, atol=1e-12)


# ---- critic update

def test_critic_update_fixed_points():
    p = k1_instance()
    V = small_critic(p)
    actor = small_actor(p)
    ep = simulate_batch(ActorPolicy(actor, p), p, [3])
    V2, _, _ = critic_update(V, ep, p, lr=0.0, actor=actor)
    assert V2.store.equals(V.store)
    # a constant-zero critic on a flow-free step has delta = 0 and zero gradient
    q = ModelParams(sigma=0.0, delta=0.0, gamma=1e-300, tiers=(TierParams(1, 2.0, 1.0),))
    rec = step(MarketState(0.0, 1.0, 0), QuoteVector((5.0,), (5.0,)), q, np.random.default_rng(0))
    Z = ValueNetwork(V.store.zeros_like(), StateScaling.from_params(q), 1.0)
    Z2, _, loss = critic_update(Z, [rec], q, lr=0.5, actor=lambda t, S, q_: np.full((np.size(t), 2), 5.0))
    assert loss == 0.0 and Z2.store.equals(Z.store)


def test_critic_single_step_matches_finite_differences():
    p = k1_instance()
    V = small_critic(p, 6)
    store = V.store
    arr = {k: v + 0.1 * np.random.default_rng(1).standard_normal(v.shape) for k, v in store.arrays.items()}
    V = V.with_store(ParamStore(store.spec, arr))
    actor = small_actor(p)
    traj = rollout(ActorPolicy(actor, p), p, 0)
    rec = [traj.steps[10]]
    lr = 1e-3
    V2, _, _ = critic_update(V, rec, p, lr=lr, actor=actor)

    def half_sq(W):
        return 0.5 * td_error(W, actor, rec[0], p) ** 2

    h = 1e-6
    for key in ("embed.W", "head2.b", "head3.b"):
        idx = (0,) * V.store.arrays[key].ndim
        a = {k: v.copy() for k, v in V.store.arrays.items()}
        a[key][idx] += h
        up = half_sq(V.with_store(ParamStore(store.spec, a)))
        a[key][idx] -= 2 * h
        dn = half_sq(V.with_store(ParamStore(store.spec, a)))
        fd = (up - dn) / (2 * h)
        step_taken = V2.store.arrays[key][idx] - V.store.arrays[key][idx]
        assert step_taken == pytest.approx(-lr * fd, rel=1e-4, abs=1e-12)


def test_critic_loss_is_half_sum_of_squares():
    p = k1_instance()
    V = small_critic(p)
    actor = small_actor(p)
    ep = simulate_batch(ActorPolicy(actor, p), p, [0])
    loss, grads, d = critic_gradient(V, actor, ep, p)
    assert d.shape == (1, p.n_steps)
    assert loss == pytest.approx(0.5 * float(np.sum(d**2)))


# ---- actor update

def test_actor_update_fixed_points():
    p = k1_instance()
    actor = small_actor(p)
    ep = simulate_batch(ActorPolicy(actor, p), p, [1])
    a2, _, _ = actor_update(actor, ep, np.zeros((1, p.n_steps)), p, lr=0.1)
    assert a2.store.equals(actor.store)

    # quotes placed exactly on the actor's means, evaluated as the gradient sees them
    N = p.n_steps
    t = np.broadcast_to(ep.t[:N], (1, N)).ravel()
    M = actor.squash(actor.raw(t, ep.S[:, :N].ravel(), ep.q[:, :N].ravel())[0])
    exact = dataclasses.replace(ep, quotes=M.reshape(1, N, -1))
    a3, _, _ = actor_update(actor, exact, np.ones((1, p.n_steps)), p, lr=0.1)
    assert a3.store.equals(actor.store)


def test_score_has_zero_mean():
    p = desk_params()
    actor = small_actor(p)
    M = actor_mean(actor, MarketState(0.0, 1.0, 0))
    pol = GaussianQuotePolicy(M, p.policy_variance())
    rng = np.random.default_rng(0)
    n = 100_000
    sd = np.sqrt(p.policy_variance())
    eps = M + sd * rng.standard_normal((n, M.size))
    score = (eps - M) / p.policy_variance()
    se = score.std(axis=0, ddof=1) / math.sqrt(n)
    assert np.all(np.abs(score.mean(axis=0)) < 4 * se)
    assert sample_quotes(pol, np.random.default_rng(0)).as_array().shape == (12,)


def test_actor_gradient_direction():
    p = k1_instance()
    actor = small_actor(p)
    ep = simulate_batch(ActorPolicy(actor, p), p, [2])
    d = np.random.default_rng(0).standard_normal((1, p.n_steps))
    g, _ = actor_gradient(actor, ep, d, p)
    a2, _, _ = actor_update(actor, ep, d, p, lr=1e-3)
    # ascent: the parameters move along +gradient
    delta = a2.store.arrays["head3.b"] - actor.store.arrays["head3.b"]
    np.testing.assert_allclose(delta, 1e-3 * g.arrays["head3.b"], rtol=1e-12)


def test_bandit_moves_toward_myopic_optimum():
    p = ModelParams(sigma=0.0, gamma=0.2, delta=0.0, T=0.25, dt=0.25, tiers=(TierParams(1, 2.0, 1.0),))
    _, actor = initial_networks(ACTrainConfig(family="mlp"), p)
    tier = p.tiers[0]
    # V = 0: H+ = z S and H- = -z S, so the myopic means are A/(2B) -/+ S/2
    target = np.array([tier.A / (2 * tier.B) - 0.5, tier.A / (2 * tier.B) + 0.5])
    s0 = MarketState(0.0, 1.0, 0)
    start = np.abs(actor_mean(actor, s0) - target)
    opt, tail = None, []
    for u in range(200):
        b = simulate_batch(ActorPolicy(actor, p), p, np.arange(u * 256, (u + 1) * 256))
        d = td_errors(zero_value, actor, b, p, revenue="sampled")
        actor, opt, _ = actor_update(actor, b, d / 256, p, lr=0.05, opt=opt)
        if u >= 150:
            tail.append(actor_mean(actor, s0))
    end = np.abs(np.mean(tail, axis=0) - target)
    assert np.all(end < 0.5 * start), (start, end)


# ---- training loop

def test_single_episode_gives_one_row():
    p = k1_instance()
    rep = train_actor_critic(ACTrainConfig(episodes=1, family="mlp", eval_every=0), p)
    assert len(rep.rows) == 1
    r = rep.rows[0]
    assert all(math.isfinite(x) for x in (r.critic_loss, r.mean_td, r.policy_loss, r.raw_return))


def test_training_is_deterministic(tmp_path):
    p = k1_instance()
    cfg = ACTrainConfig(episodes=6, family="mlp", eval_every=3, eval_episodes=10)
    a = train_actor_critic(cfg, p, checkpoint_dir=tmp_path)
    b = train_actor_critic(cfg, p)
    assert a.rows == b.rows
    assert a.actor.store.equals(b.actor.store) and a.critic.store.equals(b.critic.store)
    assert [e for e, _ in a.evaluations] == [3, 6]
    assert len(a.checkpoints) == 2
    assert ActorNetwork.load(a.checkpoints[-1]).store.equals(a.actor.store)


def test_spread_slopes_of_linear_means():
    p = k1_instance()
    fn = lambda t, S, q: np.stack([1.0 + 0.01 * np.asarray(q), 2.0 - 0.02 * np.asarray(q)], axis=1)
    np.testing.assert_allclose(spread_slopes(fn, p, np.linspace(-100, 100, 21)), [0.01, -0.02], rtol=1e-12)
