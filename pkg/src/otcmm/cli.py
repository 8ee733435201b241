"""Command-line driver: ``otcmm <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Every subcommand writes CSVs whose bytes depend only on the configuration
text and the seed; SVGs are rendered from those CSVs when figures are on.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .actor_critic import ActorNetwork, ActorPolicy, spread_slopes, train_actor_critic
from .config import ConfigError, ExperimentConfig, parse_config
from .csvio import numeric_column, read_csv, write_csv
from .kde import kde
from .model import ValuePolicy, policy_entropy, zero_intensity_policy, zero_value
from .nets import NetworkSpec, ValueNetwork, load_checkpoint
from .oracle import (
    K1_CAP,
    EpsGrid,
    exact_sup_value,
    grid_variational_optimum,
    hjb_backward_solve,
    k1_instance,
    mc_policy_eval,
    numerical_policy_entropy,
    optimal_lattice_policy,
)
from .policy_iteration import initial_value_network, policy_iteration, train_value
from .sim import simulate_batch, trajectory_header, trajectory_rows
from .svgplot import emit_plot, line_svg

BUILTIN_POLICIES = ("closed-form-zero", "zero-intensity")


class CLIError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


class Run:
    """Resolved configuration, seed and output directory for one invocation."""

    def __init__(self, args):
        if args.config is not None:
            cfg = parse_config(args.config)
        else:
            cfg = ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        self.cfg = cfg
        self.seed = cfg.model.seed
        self.hash = cfg.hash()
        self.out = Path(args.out if args.out is not None else cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.episodes = args.episodes

    def csv(self, name: str, header, rows, extra: dict | None = None) -> Path:
        return write_csv(self.out / name, header, rows, self.hash, self.seed, extra)

    def plot(self, csv_path: Path, kind: str, column: str | None = None) -> None:
        if not self.cfg.figures:
            return
        try:
            emit_plot(csv_path, kind, csv_path.with_suffix(".svg"), column)
        except ValueError as exc:
            _log(f"skipped figure for {csv_path.name}: {exc}")


def load_policy(spec: str | None, p):
    """Resolve ``--checkpoint``: a built-in baseline name or a critic/actor checkpoint file."""
    if spec is None or spec == "closed-form-zero":
        return ValuePolicy(zero_value, p), "closed-form-zero"
    if spec == "zero-intensity":
        return zero_intensity_policy(p), "zero-intensity"
    path = Path(spec)
    if not path.exists():
        raise CLIError(f"checkpoint not found: {spec} (or use one of {BUILTIN_POLICIES})")
    _, meta = load_checkpoint(path)
    role = meta.get("role")
    if role == "critic":
        return ValuePolicy(ValueNetwork.load(path), p), path.name
    if role == "actor":
        actor = ActorNetwork.load(path)
        if actor.lo.size != 2 * p.K:
            raise CLIError(f"{spec}: actor has {actor.lo.size // 2} tiers, model has {p.K}")
        return ActorPolicy(actor, p), path.name
    raise CLIError(f"{spec}: unknown checkpoint role {role!r}")


# ---------------------------------------------------------------- simulate

def cmd_simulate(run: Run, checkpoint: str | None) -> None:
    cfg, p = run.cfg, run.cfg.model
    policy, name = load_policy(checkpoint, p)
    n = run.episodes or cfg.simulate.episodes
    seeds = run.seed + np.arange(n)
    raw, reg = [], []
    for start in range(0, n, 2000):
        batch = simulate_batch(policy, p, seeds[start : start + 2000], q_cap=cfg.simulate.q_cap)
        raw.append(batch.returns("raw"))
        reg.append(batch.returns("regularized"))
        for i in range(min(cfg.simulate.trajectories - start, len(batch))):
            run.csv(
                f"trajectory_{start + i:05d}.csv",
                trajectory_header(p.K),
                trajectory_rows(batch.trajectory(i)),
                {"policy": name, "episode_seed": int(seeds[start + i])},
            )
    raw, reg = np.concatenate(raw), np.concatenate(reg)
    ret = run.csv(
        "returns.csv",
        ["episode", "seed", "raw_return", "regularized_return"],
        [[i, int(s), float(a), float(b)] for i, (s, a, b) in enumerate(zip(seeds, raw, reg))],
        {"policy": name},
    )
    sd = lambda x: float(x.std(ddof=1)) if x.size > 1 else 0.0
    run.csv(
        "summary.csv",
        ["statistic", "raw_return", "regularized_return"],
        [
            ["episodes", n, n],
            ["mean", float(raw.mean()), float(reg.mean())],
            ["std", sd(raw), sd(reg)],
            ["stderr", sd(raw) / math.sqrt(n), sd(reg) / math.sqrt(n)],
            ["min", float(raw.min()), float(reg.min())],
            ["max", float(raw.max()), float(reg.max())],
        ],
        {"policy": name},
    )
    run.plot(ret, "histogram+kde", "raw_return")
    _log(f"simulate: {n} episodes under {name}; mean raw return {raw.mean():.6g}, regularized {reg.mean():.6g}")


# ---------------------------------------------------------------- train-pi

def _eval_row(label, ev):
    return [label, ev.raw_mean, ev.raw_std, ev.reg_mean, ev.reg_std, ev.reg_stderr]


def compare_families(run: Run) -> Path:
    """Train each network family for the same epochs against the same frozen policy."""
    cfg, p = run.cfg, run.cfg.model
    epochs = cfg.network.compare_epochs
    policy = ValuePolicy(zero_value, p)
    curves = {}
    for fam in ("mlp", "conv_residual"):
        pcfg = replace(cfg.pi, family=fam, epochs_per_iteration=epochs)
        V = initial_value_network(pcfg, p, NetworkSpec(family=fam))
        _, losses = train_value(V, policy, pcfg, p, iteration=0)
        curves[fam] = np.asarray(losses)
        _log(f"train-pi: family comparison, {fam} done")
    norms = {fam: float(np.max(c)) for fam, c in curves.items()}
    rows = [
        [e + 1] + [float(curves[f][e] / norms[f]) for f in curves] + [float(curves[f][e]) for f in curves]
        for e in range(epochs)
    ]
    header = ["epoch", "mlp_normalized", "conv_residual_normalized", "mlp_loss", "conv_residual_loss"]
    extra = {f"norm_{f}": v for f, v in norms.items()}
    path = run.csv("pi_family_compare.csv", header, rows, extra)
    if run.cfg.figures:
        x = np.arange(1, epochs + 1)
        svg = line_svg(x, {f: curves[f] / norms[f] for f in curves}, "normalized martingale loss", "epoch", "loss / max")
        path.with_suffix(".svg").write_text(svg)
    return path


def cmd_train_pi(run: Run, checkpoint: str | None) -> None:
    cfg, p = run.cfg, run.cfg.model
    pcfg = cfg.pi_config()
    if run.episodes:
        pcfg = replace(pcfg, eval_episodes=run.episodes)
    V0 = None
    if checkpoint is not None:
        V0 = ValueNetwork.load(checkpoint)
    ckdir = run.out / "checkpoints"
    ckdir.mkdir(exist_ok=True)

    def progress(rep):
        _log(
            f"train-pi: iteration {rep.iteration}: loss {rep.losses[0]:.4g} -> {rep.losses[-1]:.4g}, "
            f"regularized mean {rep.evaluation.reg_mean:.6g}"
        )

    res = policy_iteration(pcfg, p, V0=V0, checkpoint_dir=ckdir, progress=progress)
    loss_rows = [[r.iteration, e + 1, float(v)] for r in res.reports for e, v in enumerate(r.losses)]
    run.csv("pi_losses.csv", ["iteration", "epoch", "loss"], loss_rows)
    evals = [(0, res.initial)] + [(r.iteration, r.evaluation) for r in res.reports]
    run.csv(
        "pi_eval.csv",
        ["iteration", "raw_mean", "raw_std", "regularized_mean", "regularized_std", "regularized_stderr"],
        [_eval_row(i, ev) for i, ev in evals],
        {"monotone": res.monotone},
    )
    ret_rows = [
        [i, j, float(a), float(b)] for i, ev in evals for j, (a, b) in enumerate(zip(ev.raw, ev.regularized))
    ]
    run.csv("pi_returns.csv", ["iteration", "episode", "raw_return", "regularized_return"], ret_rows)
    if cfg.figures:
        # One loss curve per iteration, epochs on the x axis.
        its = sorted({r.iteration for r in res.reports})
        wide = [[e + 1] + [float(res.reports[i - 1].losses[e]) for i in its] for e in range(pcfg.epochs_per_iteration)]
        path = run.csv("pi_losses_by_iteration.csv", ["epoch"] + [f"iteration_{i}" for i in its], wide)
        run.plot(path, "line")
    if cfg.network.compare_families:
        compare_families(run)
    _log(f"train-pi: done; monotone={res.monotone}; outputs in {run.out}")


# ---------------------------------------------------------------- train-ac

def spread_rows(policy, p, t: float, S_values, q_values):
    rows = []
    for S in S_values:
        M = policy.means(float(t), np.full(len(q_values), float(S)), np.asarray(q_values, dtype=float))
        for q, m in zip(q_values, M):
            rows.append([float(t), float(S), int(q)] + [float(x) for x in m])
    return rows


def spread_header(K: int) -> list[str]:
    cols = ["t", "S", "q"]
    for k in range(1, K + 1):
        cols += [f"bid_{k}", f"ask_{k}"]
    return cols


def write_slopes(run: Run, policy, name: str, prefix: str) -> np.ndarray:
    p, r = run.cfg.model, run.cfg.report
    q_grid = np.linspace(r.slope_q_min, r.slope_q_max, r.slope_q_points)
    slopes = spread_slopes(policy, p, q_grid, t=r.t, S=r.probe_S)
    rows = [
        [k + 1, float(p.z[k]), float(slopes[2 * k]), float(slopes[2 * k + 1]), bool(slopes[2 * k] > 0 and slopes[2 * k + 1] < 0)]
        for k in range(p.K)
    ]
    run.csv(
        f"{prefix}slopes.csv",
        ["tier", "z", "bid_slope", "ask_slope", "bid_up_ask_down"],
        rows,
        {"policy": name, "t": r.t, "S": r.probe_S, "q_min": r.slope_q_min, "q_max": r.slope_q_max},
    )
    return slopes


def cmd_train_ac(run: Run, checkpoint: str | None) -> None:
    cfg, p = run.cfg, run.cfg.model
    acfg = cfg.ac_config()
    if run.episodes:
        acfg = replace(acfg, episodes=run.episodes)
    if checkpoint is not None:
        raise CLIError("train-ac starts from freshly initialised networks; --checkpoint is not accepted")
    ckdir = run.out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    every = max(1, acfg.episodes // 20)

    def progress(row):
        if (row.episode + 1) % every == 0:
            _log(f"train-ac: episode {row.episode + 1}/{acfg.episodes}, raw return {row.raw_return:.6g}")

    rep = train_actor_critic(acfg, p, checkpoint_dir=ckdir, progress=progress)
    fields = ["episode", "critic_loss", "mean_td", "mean_abs_td", "policy_loss", "raw_return", "regularized_return"]
    path = run.csv(
        "ac_episodes.csv",
        fields,
        [[r.episode, r.critic_loss, r.mean_td, r.mean_abs_td, r.policy_loss, r.raw_return, r.reg_return] for r in rep.rows],
    )
    run.plot(path, "line", "raw_return")
    run.csv(
        "ac_eval.csv",
        ["episode", "raw_mean", "raw_std", "regularized_mean", "regularized_std", "regularized_stderr"],
        [_eval_row(e, ev) for e, ev in rep.evaluations],
    )
    rep.actor.save(ckdir / "ac_actor_final.json", {"episode": acfg.episodes, "params_fingerprint": p.fingerprint()})
    rep.critic.save(ckdir / "ac_critic_final.json", {"episode": acfg.episodes, "params_fingerprint": p.fingerprint()})
    policy = ActorPolicy(rep.actor, p)
    r = cfg.report
    run.csv(
        "ac_spreads.csv",
        spread_header(p.K),
        spread_rows(policy, p, r.t, [r.probe_S], np.linspace(r.q_min, r.q_max, r.q_points).round().astype(int)),
    )
    write_slopes(run, rep.actor, "ac_actor_final.json", "ac_")
    _log(f"train-ac: done; outputs in {run.out}")


# ---------------------------------------------------------------- oracle-check

def cmd_oracle_check(run: Run) -> None:
    desk = run.cfg.model
    checks = []

    def check(name, value, reference, tol, rel=False):
        err = abs(value - reference) / (abs(reference) if rel else 1.0)
        checks.append([name, float(value), float(reference), float(err), float(tol), bool(err < tol)])

    for k, tier in enumerate(desk.tiers, start=1):
        sd = math.sqrt(desk.gamma / (2 * tier.z * tier.B))
        opt = grid_variational_optimum(tier, 0.0, desk.gamma, EpsGrid.around(tier.A / (2 * tier.B), sd))
        check(f"gibbs_tv_tier{k}", opt.tv_distance, 0.0, 1e-3)
        check(f"gibbs_variance_tier{k}", opt.variance, opt.gaussian_variance, 1e-5)
    check("entropy_identity", numerical_policy_entropy(desk), policy_entropy(desk), 1e-4)

    tier = desk.tiers[0]
    Hp, Hm = 0.3 * tier.z, -0.2 * tier.z
    numeric = 0.0
    for H in (Hp, Hm):
        m, sd = tier.A / (2 * tier.B) - H / (2 * tier.z), math.sqrt(desk.gamma / (2 * tier.z * tier.B))
        x = EpsGrid.around(m, sd).points()
        f = (tier.A - tier.B * x) * (tier.z * x + H) / desk.gamma
        top = f.max()
        numeric += desk.gamma * (top + math.log(float(np.trapezoid(np.exp(f - top), x))))
    check("sup_value_tier1", exact_sup_value(tier, Hp, Hm, desk.gamma), numeric, 1e-4, rel=True)

    p = k1_instance()
    lat = hjb_backward_solve(p, *K1_CAP)
    run.csv("oracle_lattice.csv", ["t", "q", "V"], lat.rows(), {"q_min": K1_CAP[0], "q_max": K1_CAP[1]})
    n = run.episodes or 10_000
    mean, se = mc_policy_eval(optimal_lattice_policy(lat, p), p, n, run.seed, q_cap=K1_CAP)
    v0 = lat.value(0.0, p.S0, p.q0)
    checks.append(["hjb_vs_mc_zscore", mean, float(v0), abs(mean - v0) / se, 3.0, bool(abs(mean - v0) < 3 * se)])
    run.csv("oracle_checks.csv", ["check", "value", "reference", "error", "tolerance", "passed"], checks, {"mc_episodes": n})
    failed = [c[0] for c in checks if not c[-1]]
    _log(f"oracle-check: {len(checks) - len(failed)}/{len(checks)} passed" + (f"; failed: {failed}" if failed else ""))
    if failed:
        raise CLIError("oracle checks failed: " + ", ".join(failed))


# ---------------------------------------------------------------- spread-report

def cmd_spread_report(run: Run, checkpoint: str | None) -> None:
    p, r = run.cfg.model, run.cfg.report
    policy, name = load_policy(checkpoint, p)
    S_values = np.linspace(r.S_min, r.S_max, r.S_points)
    q_values = np.linspace(r.q_min, r.q_max, r.q_points).round().astype(int)
    run.csv("spreads.csv", spread_header(p.K), spread_rows(policy, p, r.t, S_values, q_values), {"policy": name})

    M = policy.means(float(r.t), np.array([r.probe_S]), np.array([float(r.probe_q)]))[0]
    totals = M[0::2] + M[1::2]
    narrowing = bool(np.all(np.diff(totals) < 0))
    run.csv(
        "spread_probe.csv",
        ["tier", "z", "bid", "ask", "total_spread"],
        [[k + 1, float(p.z[k]), float(M[2 * k]), float(M[2 * k + 1]), float(totals[k])] for k in range(p.K)],
        {"policy": name, "t": r.t, "S": r.probe_S, "q": r.probe_q, "narrower_with_size": narrowing},
    )
    write_slopes(run, policy, name, "spread_")
    _log(f"spread-report: {len(S_values) * len(q_values)} grid points; larger tiers narrower at probe: {narrowing}")


# ---------------------------------------------------------------- kde / plot

def cmd_kde(run: Run, csv_path: str, column: str | None, bandwidth: float | None) -> None:
    _, header, rows = read_csv(csv_path)
    if not rows:
        raise CLIError(f"{csv_path}: no data rows")
    name, values = numeric_column(header, rows, column)
    res = kde(values, bandwidth)
    stem = Path(csv_path).stem
    run.csv(
        f"{stem}_{name}_kde.csv",
        ["x", "density"],
        [[float(a), float(b)] for a, b in zip(res.points, res.density)],
        {"source": Path(csv_path).name, "column": name, "bandwidth": float(res.bandwidth), "n": len(values)},
    )
    _log(f"kde: {len(values)} values of {name}, bandwidth {res.bandwidth:.6g}, integral {res.integral():.6f}")


def cmd_plot(run: Run, csv_path: str, kind: str, column: str | None) -> None:
    out = run.out / (Path(csv_path).stem + ".svg")
    emit_plot(csv_path, kind, out, column)
    _log(f"plot: wrote {out}")


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="master seed; overrides [model] seed")
    common.add_argument("--out", help="output directory; overrides [output] dir")
    common.add_argument("--episodes", type=int, help="episode count override for the subcommand")

    parser = argparse.ArgumentParser(prog="otcmm", description="Entropy-regularized OTC market-making experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    ck_help = f"policy source: {' | '.join(BUILTIN_POLICIES)} | path to a critic or actor checkpoint"

    s = sub.add_parser("simulate", parents=[common], help="roll out a policy, write returns and trajectories")
    s.add_argument("--checkpoint", default="closed-form-zero", help=ck_help)
    s = sub.add_parser("train-pi", parents=[common], help="policy iteration with the martingale loss")
    s.add_argument("--checkpoint", help="initial critic checkpoint")
    s = sub.add_parser("train-ac", parents=[common], help="actor-critic training")
    s.add_argument("--checkpoint", help=argparse.SUPPRESS)
    sub.add_parser("oracle-check", parents=[common], help="closed-form and lattice cross-checks")
    s = sub.add_parser("spread-report", parents=[common], help="quote means over price and inventory grids")
    s.add_argument("--checkpoint", default="closed-form-zero", help=ck_help)
    s = sub.add_parser("kde", parents=[common], help="Gaussian kernel density of one CSV column")
    s.add_argument("csv")
    s.add_argument("--column")
    s.add_argument("--bandwidth", type=float)
    s = sub.add_parser("plot", parents=[common], help="render a CSV as SVG")
    s.add_argument("csv")
    s.add_argument("--kind", choices=("line", "histogram+kde"), default="line")
    s.add_argument("--column")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.episodes is not None and args.episodes < 1:
        print("error: --episodes must be at least 1", file=sys.stderr)
        return 2
    try:
        run = Run(args)
        cmd = args.command
        if cmd == "simulate":
            cmd_simulate(run, args.checkpoint)
        elif cmd == "train-pi":
            cmd_train_pi(run, args.checkpoint)
        elif cmd == "train-ac":
            cmd_train_ac(run, args.checkpoint)
        elif cmd == "oracle-check":
            cmd_oracle_check(run)
        elif cmd == "spread-report":
            cmd_spread_report(run, args.checkpoint)
        elif cmd == "kde":
            cmd_kde(run, args.csv, args.column, args.bandwidth)
        elif cmd == "plot":
            cmd_plot(run, args.csv, args.kind, args.column)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CLIError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
