"""Experiment configuration: an INI file with one section per component.

Every key is optional; omitted keys take the desk defaults.  Parsing collects
every problem before failing, and each message names the offending line.
"""
from __future__ import annotations

import configparser
import hashlib
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .actor_critic import ACTrainConfig
from .model import ModelParams, TierParams, desk_params
from .nets import FAMILIES
from .policy_iteration import LOSSES, PITrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class SimulateSettings:
    episodes: int = 100
    trajectories: int = 1
    q_cap: tuple[int, int] | None = None


@dataclass(frozen=True)
class ReportSettings:
    t: float = 0.0
    S_min: float = 0.5
    S_max: float = 1.5
    S_points: int = 11
    q_min: int = -300
    q_max: int = 300
    q_points: int = 13
    probe_S: float = 1.0
    probe_q: int = 50
    slope_q_min: int = -100
    slope_q_max: int = 100
    slope_q_points: int = 21


@dataclass(frozen=True)
class NetworkSettings:
    pi_family: str = "conv_residual"
    ac_family: str = "conv_residual"
    compare_families: bool = False
    compare_epochs: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelParams = field(default_factory=desk_params)
    pi: PITrainConfig = field(default_factory=PITrainConfig)
    ac: ACTrainConfig = field(default_factory=ACTrainConfig)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    simulate: SimulateSettings = field(default_factory=SimulateSettings)
    report: ReportSettings = field(default_factory=ReportSettings)
    output_dir: str = "out"
    figures: bool = True

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Route one master seed to the model and both trainers."""
        return replace(
            self,
            model=self.model.replace(seed=int(seed)),
            pi=replace(self.pi, seed=int(seed)),
            ac=replace(self.ac, seed=int(seed)),
        )

    def pi_config(self) -> PITrainConfig:
        return replace(self.pi, family=self.network.pi_family)

    def ac_config(self) -> ACTrainConfig:
        return replace(self.ac, family=self.network.ac_family)

    def hash(self) -> str:
        return hashlib.sha256(serialize_config(self).encode()).hexdigest()[:16]


# key -> kind; kinds: int, float, bool, str, floats, ints, optional variants
_MODEL_KEYS = {
    "sigma": "float", "gamma": "float", "delta": "float", "T": "float", "dt": "float",
    "S0": "float", "q0": "int", "seed": "int", "z": "ints", "A": "floats", "B": "floats",
}
_PI_KEYS = {
    "outer_iterations": "int", "paths_per_epoch": "int", "epochs_per_iteration": "int",
    "learning_rate": "float", "terminal_weight": "float", "eval_episodes": "int",
    "eval_seed": "int", "init_seed": "int", "optimizer": "str", "value_scale": "float?",
    "q_cap": "ints?", "quote_means": "str", "loss": "str",
}
_AC_KEYS = {
    "episodes": "int", "critic_lr": "float", "actor_lr": "float", "lo": "floats?", "hi": "floats?",
    "critic_init_seed": "int", "actor_init_seed": "int", "eval_every": "int",
    "eval_episodes": "int", "eval_seed": "int", "optimizer": "str", "revenue": "str",
    "value_scale": "float?",
}
_NETWORK_KEYS = {
    "pi_family": "str", "ac_family": "str", "compare_families": "bool",
    "compare_epochs": "int",
}
_SIM_KEYS = {"episodes": "int", "trajectories": "int", "q_cap": "ints?"}
_REPORT_KEYS = {f.name: ("int" if f.type in ("int", int) else "float") for f in fields(ReportSettings)}
_OUTPUT_KEYS = {"dir": "str", "figures": "bool"}

SECTIONS = {
    "model": _MODEL_KEYS,
    "pi": _PI_KEYS,
    "ac": _AC_KEYS,
    "network": _NETWORK_KEYS,
    "simulate": _SIM_KEYS,
    "report": _REPORT_KEYS,
    "output": _OUTPUT_KEYS,
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]\s*$")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    where: dict[tuple[str, str | None], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(("#", ";")):
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, None), no)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip()), no)
    return where


def _convert(kind: str, raw: str):
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    raw = raw.strip()
    if optional and raw.lower() in ("", "none"):
        return None
    if kind == "int":
        val = float(raw)
        if not val.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(val)
    if kind == "float":
        val = float(raw)
        if not math.isfinite(val):
            raise ValueError(f"expected a finite number, got {raw!r}")
        return val
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "str":
        return raw
    parts = [x for x in re.split(r"[,\s]+", raw) if x]
    if not parts:
        raise ValueError("expected a comma-separated list")
    if kind == "ints":
        return tuple(_convert("int", x) for x in parts)
    return tuple(_convert("float", x) for x in parts)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    where = _line_index(text)
    problems: list[str] = []

    def at(section: str, key: str | None = None) -> str:
        no = where.get((section, key)) or where.get((section, None))
        return f"{source}:{no}" if no else source

    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str  # keys are case-sensitive (T, S0, A, B)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from None

    values: dict[str, dict] = {name: {} for name in SECTIONS}
    for section in cp.sections():
        if section not in SECTIONS:
            problems.append(f"{at(section)}: unknown section [{section}]")
            continue
        spec = SECTIONS[section]
        for key, raw in cp.items(section):
            if key not in spec:
                problems.append(f"{at(section, key)}: unknown key '{key}' in [{section}]")
                continue
            try:
                values[section][key] = _convert(spec[key], raw)
            except ValueError as exc:
                problems.append(f"{at(section, key)}: [{section}] {key}: {exc}")

    model = _build_model(values["model"], at, problems)
    network = _build(NetworkSettings, values["network"], "network", at, problems)
    if network is not None:
        for key in ("pi_family", "ac_family"):
            if getattr(network, key) not in FAMILIES:
                problems.append(f"{at('network', key)}: [network] {key}: must be one of {FAMILIES}")
    pi_vals = dict(values["pi"])
    for key, choices in (("optimizer", ("adam", "sgd")), ("quote_means", ("live", "policy")), ("loss", LOSSES)):
        if key in pi_vals and pi_vals[key] not in choices:
            problems.append(f"{at('pi', key)}: [pi] {key}: must be one of {choices}")
            pi_vals.pop(key)
    pi = _build(PITrainConfig, pi_vals, "pi", at, problems)
    ac_vals = dict(values["ac"])
    if "optimizer" in ac_vals and ac_vals["optimizer"] not in ("adam", "sgd"):
        problems.append(f"{at('ac', 'optimizer')}: [ac] optimizer: must be one of ('adam', 'sgd')")
        ac_vals.pop("optimizer")
    ac = _build(ACTrainConfig, ac_vals, "ac", at, problems)
    if ac is not None and model is not None and ac.lo is not None and len(ac.lo) not in (model.K, 2 * model.K):
        problems.append(f"{at('ac', 'lo')}: [ac] lo/hi: need K={model.K} or 2K={2 * model.K} entries")
    sim = _build(SimulateSettings, values["simulate"], "simulate", at, problems)
    if sim is not None:
        if sim.episodes < 1:
            problems.append(f"{at('simulate', 'episodes')}: [simulate] episodes: must be at least 1")
        if sim.trajectories < 0:
            problems.append(f"{at('simulate', 'trajectories')}: [simulate] trajectories: must be nonnegative")
        for cap, sec in ((sim.q_cap, "simulate"), (pi.q_cap if pi else None, "pi")):
            if cap is not None and (len(cap) != 2 or cap[0] >= cap[1]):
                problems.append(f"{at(sec, 'q_cap')}: [{sec}] q_cap: give 'lo, hi' with lo < hi")
    report = _build(ReportSettings, values["report"], "report", at, problems)
    if report is not None:
        for lo, hi, n in (("S_min", "S_max", "S_points"), ("q_min", "q_max", "q_points"), ("slope_q_min", "slope_q_max", "slope_q_points")):
            if getattr(report, lo) >= getattr(report, hi):
                problems.append(f"{at('report', lo)}: [report] {lo} must be below {hi}")
            if getattr(report, n) < 2:
                problems.append(f"{at('report', n)}: [report] {n} must be at least 2")
        if report.S_min <= 0 or report.probe_S <= 0:
            problems.append(f"{at('report', 'S_min')}: [report] reference prices must be positive")
    out = values["output"]
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(
        model=model,
        pi=pi,
        ac=ac,
        network=network,
        simulate=sim,
        report=report,
        output_dir=out.get("dir", "out"),
        figures=out.get("figures", True),
    )
    return cfg.with_seed(model.seed)


def _build(cls, vals: dict, section: str, at, problems: list[str]):
    try:
        return cls(**vals)
    except (ValueError, TypeError) as exc:
        problems.append(f"{at(section)}: [{section}] {exc}")
        return None


def _build_model(vals: dict, at, problems: list[str]) -> ModelParams | None:
    defaults = desk_params()
    z = vals.pop("z", tuple(defaults.z.tolist()))
    A = vals.pop("A", tuple(defaults.A.tolist()))
    B = vals.pop("B", tuple(defaults.B.tolist()))
    ok = True
    if not (len(z) == len(A) == len(B)):
        problems.append(
            f"{at('model', 'z')}: [model] tier lists differ in length (z={len(z)}, A={len(A)}, B={len(B)})"
        )
        ok = False
    tiers = []
    if ok:
        for k, (zk, ak, bk) in enumerate(zip(z, A, B), start=1):
            try:
                tiers.append(TierParams(zk, ak, bk))
            except ValueError as exc:
                problems.append(f"{at('model', 'z')}: [model] tier {k}: {exc}")
                ok = False
    T = vals.get("T", defaults.T)
    dt = vals.get("dt", defaults.dt)
    if T > 0 and dt > 0:
        ratio = T / dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            problems.append(f"{at('model', 'dt')}: [model] dt={dt!r} does not divide T={T!r} into whole steps")
            ok = False
    if not ok:
        return None
    try:
        return ModelParams(tiers=tuple(tiers), **vals)
    except ValueError as exc:
        problems.append(f"{at('model')}: [model] {exc}")
        return None


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"{path}: file not found"])
    return parse_config_text(path.read_text(), str(path))


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text; ``parse_config_text(serialize_config(c)) == c``."""
    m = cfg.model
    sections = {
        "model": {
            "sigma": m.sigma, "gamma": m.gamma, "delta": m.delta, "T": m.T, "dt": m.dt,
            "S0": m.S0, "q0": m.q0, "seed": m.seed,
            "z": [t.z for t in m.tiers], "A": [t.A for t in m.tiers], "B": [t.B for t in m.tiers],
        },
        "pi": {k: getattr(cfg.pi, k) for k in _PI_KEYS},
        "ac": {k: getattr(cfg.ac, k) for k in _AC_KEYS},
        "network": {k: getattr(cfg.network, k) for k in _NETWORK_KEYS},
        "simulate": {k: getattr(cfg.simulate, k) for k in _SIM_KEYS},
        "report": {k: getattr(cfg.report, k) for k in _REPORT_KEYS},
        "output": {"dir": cfg.output_dir, "figures": cfg.figures},
    }
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in items.items()]
        lines.append("")
    return "\n".join(lines)
