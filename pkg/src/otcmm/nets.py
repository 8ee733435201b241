"""Value and actor networks built on :mod:`otcmm.autodiff`.

Two families are supported:

``mlp``
    affine embedding to ``embed_width`` -> ReLU -> four-layer head.
``conv_residual``
    affine embedding -> ReLU -> ``residual_blocks`` residual blocks -> head.
    A block treats its ``embed_width`` vector as a one-channel signal:
    conv(1->2, k=3, pad=1) -> ReLU -> flatten(2*E) -> projection(2E->E) -> ReLU
    -> conv(1->2) -> flatten -> projection(2E->E), added to the block input and
    rectified.  Projections carry no bias, so a block whose second conv is
    zeroed is exactly the identity on its (non-negative) input.

The head is three hidden affine layers (``head_widths``) plus the output layer.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

FAMILIES = ("mlp", "conv_residual")


@dataclass(frozen=True)
class NetworkSpec:
    family: str = "conv_residual"
    input_width: int = 3
    embed_width: int = 128
    residual_blocks: int = 2
    conv_in: int = 1
    conv_out: int = 2
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    head_widths: tuple[int, ...] = (128, 64, 32)
    output_width: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown network family {self.family!r}; expected one of {FAMILIES}")
        widths = (self.input_width, self.embed_width, self.output_width, *self.head_widths)
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be at least 1")
        if len(self.head_widths) != 3:
            raise ValueError("the head has four linear layers: give three hidden widths")
        if self.family == "conv_residual":
            if self.conv_in != 1:
                raise ValueError("residual blocks reshape to a single input channel")
            if self.stride != 1 or 2 * self.padding != self.kernel - 1:
                raise ValueError("conv must preserve length (stride 1, padding (kernel-1)/2)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_widths"] = list(self.head_widths)
        return d

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        E = self.embed_width
        shapes: dict[str, tuple[int, ...]] = {
            "embed.W": (E, self.input_width),
            "embed.b": (E,),
        }
        if self.family == "conv_residual":
            C, k = self.conv_out, self.kernel
            for i in range(self.residual_blocks):
                shapes[f"block{i}.conv1.W"] = (C, 1, k)
                shapes[f"block{i}.conv1.b"] = (C,)
                shapes[f"block{i}.proj1.W"] = (E, C * E)
                shapes[f"block{i}.conv2.W"] = (C, 1, k)
                shapes[f"block{i}.conv2.b"] = (C,)
                shapes[f"block{i}.proj2.W"] = (E, C * E)
        widths = (E, *self.head_widths, self.output_width)
        for j in range(4):
            shapes[f"head{j}.W"] = (widths[j + 1], widths[j])
            shapes[f"head{j}.b"] = (widths[j + 1],)
        return shapes

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


class ParamStore:
    """Named parameter arrays for one :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, arrays: dict[str, np.ndarray], init_seed: int | None = None):
        shapes = spec.param_shapes()
        if set(arrays) != set(shapes):
            raise ValueError("parameter names do not match the network spec")
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {shape}")
        self.spec = spec
        self.arrays = {name: np.asarray(arrays[name], dtype=float) for name in shapes}
        self.init_seed = init_seed

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, {k: v.copy() for k, v in self.arrays.items()}, self.init_seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, vec: np.ndarray) -> "ParamStore":
        out, i = {}, 0
        for name, arr in self.arrays.items():
            out[name] = np.asarray(vec[i : i + arr.size], dtype=float).reshape(arr.shape).copy()
            i += arr.size
        return ParamStore(self.spec, out, self.init_seed)

    def zeros_like(self) -> "ParamStore":
        return ParamStore(self.spec, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def equals(self, other: "ParamStore") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays
        )


def init_network(spec: NetworkSpec, seed: int) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(1.0 / fan_in) if name == "head3.W" else np.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ParamStore(spec, arrays, init_seed=seed)


class _NullTape(ad.GradTape):
    """Forward-only evaluation: nothing is retained for a backward sweep."""

    def __init__(self, collect_masks: bool = False):
        super().__init__()
        if collect_masks:
            self.masks = []

    def record(self, value, backward_fn):
        return ad.Node(value)

    def param(self, name, value):
        return ad.Node(value, param=name)

    def input(self, value):
        return ad.Node(np.asarray(value, dtype=float))


def forward(
    store: ParamStore, x, record: bool = True, _tape: ad.GradTape | None = None
) -> tuple[np.ndarray, ad.GradTape | None]:
    """Evaluate the network on a batch ``x`` of shape ``(n, input_width)``.

    Returns the ``(n, output_width)`` output and, when ``record`` is true, the
    tape for :func:`backward`.  The store is never modified.
    """
    spec = store.spec
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.input_width:
        raise ValueError(f"input width {x.shape[1]} != {spec.input_width}")
    if not np.all(np.isfinite(x)):
        raise ValueError("network input contains non-finite values")
    tape = _tape if _tape is not None else (ad.GradTape() if record else _NullTape())
    P = {name: tape.param(name, arr) for name, arr in store.arrays.items()}
    n, E = x.shape[0], spec.embed_width
    h = ad.relu(tape, ad.linear(tape, tape.input(x), P["embed.W"], P["embed.b"]))
    if spec.family == "conv_residual":
        C = spec.conv_out
        for i in range(spec.residual_blocks):
            pre = f"block{i}."
            u = ad.reshape(tape, h, (n, 1, E))
            u = ad.relu(tape, ad.conv1d(tape, u, P[pre + "conv1.W"], P[pre + "conv1.b"], spec.padding))
            u = ad.reshape(tape, u, (n, C * E))
            u = ad.relu(tape, ad.linear(tape, u, P[pre + "proj1.W"]))
            u = ad.reshape(tape, u, (n, 1, E))
            u = ad.conv1d(tape, u, P[pre + "conv2.W"], P[pre + "conv2.b"], spec.padding)
            u = ad.reshape(tape, u, (n, C * E))
            u = ad.linear(tape, u, P[pre + "proj2.W"])
            h = ad.relu(tape, ad.add(tape, h, u))
    for j in range(4):
        h = ad.linear(tape, h, P[f"head{j}.W"], P[f"head{j}.b"])
        if j < 3:
            h = ad.relu(tape, h)
    if not record:
        return h.value, None
    tape.output = h
    return h.value, tape


def backward(tape: ad.GradTape, upstream, spec: NetworkSpec) -> ParamStore:
    """Reverse sweep: gradient of ``sum(upstream * output)`` per parameter."""
    return ParamStore(spec, tape.backward(upstream))


def value_and_grad(store: ParamStore, x, upstream_fn):
    """Forward, build the upstream from the output, and backward in one call."""
    out, tape = forward(store, x)
    upstream = upstream_fn(out)
    return out, backward(tape, upstream, store.spec)


@dataclass
class FDReport:
    worst_rel_error: float
    worst_param: str
    checked: int
    tolerance: float
    passed: bool
    directional_rel_error: float = 0.0


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(
    store: ParamStore,
    x,
    tolerance: float = 1e-4,
    h: float = 1e-4,
    upstream=None,
    max_per_tensor: int | None = 8,
    seed: int = 0,
    grads: ParamStore | None = None,
    floor: float = 1e-6,
    max_refine: int = 4,
) -> FDReport:
    """Compare reverse-mode gradients against central finite differences.

    Checks up to ``max_per_tensor`` randomly chosen entries of every tensor
    (``None`` checks all of them) plus one random unit direction through the
    whole parameter vector.  ``grads`` may be supplied to audit an externally
    computed gradient.

    A central difference straddling a ReLU kink measures nothing useful, so
    when the activation pattern at ``theta +- h`` differs from the one at
    ``theta`` the step is divided by ten (at most ``max_refine`` times).
    """
    rng = np.random.default_rng(seed)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out, tape = forward(store, x)
    if upstream is None:
        upstream = rng.standard_normal(out.shape)
    upstream = np.broadcast_to(np.asarray(upstream, dtype=float), out.shape)
    if grads is None:
        grads = backward(tape, upstream, store.spec)

    def objective(arrays):
        probe = _NullTape(collect_masks=True)
        y, _ = forward(ParamStore(store.spec, arrays), x, record=False, _tape=probe)
        return float(np.sum(upstream * y)), probe.masks

    _, base_masks = objective(store.arrays)

    def same(masks):
        return all(np.array_equal(a, b) for a, b in zip(masks, base_masks))

    def central(shift):
        step = h
        for _ in range(max_refine + 1):
            fp, mp = objective({k: v + step * shift[k] if k in shift else v for k, v in store.arrays.items()})
            fm, mm = objective({k: v - step * shift[k] if k in shift else v for k, v in store.arrays.items()})
            if same(mp) and same(mm):
                break
            step /= 10.0
        return (fp - fm) / (2 * step)

    worst, worst_name, checked = 0.0, "", 0
    for name, arr in store.arrays.items():
        idx = np.arange(arr.size)
        if max_per_tensor is not None and arr.size > max_per_tensor:
            idx = rng.choice(arr.size, size=max_per_tensor, replace=False)
        for flat_i in idx:
            pos = np.unravel_index(flat_i, arr.shape)
            unit = np.zeros(arr.shape)
            unit[pos] = 1.0
            fd = central({name: unit})
            err = _rel_err(fd, float(grads[name][pos]), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}{[int(i) for i in pos]}"

    direction = {k: rng.standard_normal(v.shape) for k, v in store.arrays.items()}
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
    direction = {k: d / norm for k, d in direction.items()}
    fd_dir = central(direction)
    ad_dir = float(sum(np.sum(grads[k] * direction[k]) for k in store.arrays))
    dir_err = _rel_err(fd_dir, ad_dir, floor)
    passed = worst < tolerance and dir_err < tolerance
    return FDReport(worst, worst_name, checked, tolerance, passed, dir_err)


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    learning_rate: float
    step: int = 0
    m: dict | None = field(default=None, repr=False)
    v: dict | None = field(default=None, repr=False)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")


def make_optimizer(kind: str, learning_rate: float, store: ParamStore) -> OptimizerState:
    if kind == "adam":
        zeros = {k: np.zeros_like(v) for k, v in store.arrays.items()}
        return OptimizerState("adam", learning_rate, 0, zeros, {k: z.copy() for k, z in zeros.items()})
    return OptimizerState(kind, learning_rate)


def optimizer_step(
    opt: OptimizerState, store: ParamStore, grads: ParamStore | dict
) -> tuple[ParamStore, OptimizerState]:
    """One descent step. Returns new store and state; the inputs are untouched."""
    g = grads.arrays if isinstance(grads, ParamStore) else grads
    for name, arr in store.arrays.items():
        if name not in g or g[name].shape != arr.shape:
            raise ValueError(f"gradient for {name} missing or misshapen")
    lr = opt.learning_rate
    if opt.kind == "sgd":
        new = {k: v - lr * g[k] for k, v in store.arrays.items()}
        return ParamStore(store.spec, new, store.init_seed), OptimizerState("sgd", lr, opt.step + 1)
    t = opt.step + 1
    b1, b2 = opt.beta1, opt.beta2
    m, v, new = {}, {}, {}
    for k, p in store.arrays.items():
        m[k] = b1 * opt.m[k] + (1 - b1) * g[k]
        v[k] = b2 * opt.v[k] + (1 - b2) * g[k] * g[k]
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        new[k] = p - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    state = OptimizerState("adam", lr, t, m, v, b1, b2, opt.eps)
    return ParamStore(store.spec, new, store.init_seed), state


CHECKPOINT_FORMAT = "otcmm-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> Path:
    """Write a self-describing JSON checkpoint (shape manifest + values)."""
    path = Path(path)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": store.spec.to_dict(),
        "spec_hash": store.spec.spec_hash(),
        "init_seed": store.init_seed,
        "meta": meta or {},
        "shapes": {k: list(v.shape) for k, v in store.arrays.items()},
        "params": {k: v.ravel().tolist() for k, v in store.arrays.items()},
    }
    path.write_text(json.dumps(doc, separators=(",", ":")))
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an otcmm checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    spec_d = dict(doc["spec"])
    spec_d["head_widths"] = tuple(spec_d["head_widths"])
    spec = NetworkSpec(**spec_d)
    if spec.spec_hash() != doc["spec_hash"]:
        raise ValueError("checkpoint spec hash mismatch")
    arrays = {
        k: np.asarray(doc["params"][k], dtype=float).reshape(doc["shapes"][k]) for k in doc["shapes"]
    }
    return ParamStore(spec, arrays, doc.get("init_seed")), doc.get("meta", {})


@dataclass(frozen=True)
class StateScaling:
    """Feature map ``(t, S, q) -> (t/T, S/S0, q/q_scale)``."""

    T: float
    S0: float
    q_scale: float = 100.0

    @classmethod
    def from_params(cls, p, q_scale: float = 100.0) -> "StateScaling":
        return cls(p.T, p.S0, q_scale)

    def features(self, t, S, q) -> np.ndarray:
        t, S, q = np.broadcast_arrays(
            np.asarray(t, dtype=float), np.asarray(S, dtype=float), np.asarray(q, dtype=float)
        )
        return np.stack([t.ravel() / self.T, S.ravel() / self.S0, q.ravel() / self.q_scale], axis=1)

    def to_dict(self) -> dict:
        return asdict(self)


def default_value_scale(p) -> float:
    """Revenue scale ``T * sum_k z_k A_k^2 / (2 B_k)`` used to normalise critic outputs."""
    return float(p.T * np.sum(p.z * p.A**2 / (2.0 * p.B)))


class ValueNetwork:
    """``V(t, S, q) = value_scale * net(features(t, S, q))``; a value function handle."""

    def __init__(self, store: ParamStore, scaling: StateScaling, value_scale: float = 1.0):
        if store.spec.output_width != 1:
            raise ValueError("a value network has a scalar output")
        self.store = store
        self.scaling = scaling
        self.value_scale = float(value_scale)

    def __call__(self, t, S, q):
        shape = np.broadcast(np.asarray(t), np.asarray(S), np.asarray(q)).shape
        vals, _ = self.forward(t, S, q, record=False)
        vals = vals.reshape(shape)
        return float(vals) if vals.ndim == 0 else vals

    def forward(self, t, S, q, record: bool = True):
        out, tape = forward(self.store, self.scaling.features(t, S, q), record=record)
        return self.value_scale * out[:, 0], tape

    def gradient(self, tape, dL_dV) -> ParamStore:
        """Parameter gradient given ``dL/dV`` for each evaluated state."""
        up = self.value_scale * np.asarray(dL_dV, dtype=float).reshape(-1, 1)
        return backward(tape, up, self.store.spec)

    def with_store(self, store: ParamStore) -> "ValueNetwork":
        return ValueNetwork(store, self.scaling, self.value_scale)

    def save(self, path, extra: dict | None = None) -> Path:
        meta = {"role": "critic", "scaling": self.scaling.to_dict(), "value_scale": self.value_scale}
        meta.update(extra or {})
        return save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path) -> "ValueNetwork":
        store, meta = load_checkpoint(path)
        if meta.get("role") != "critic":
            raise ValueError(f"{path} does not hold a value network")
        return cls(store, StateScaling(**meta["scaling"]), meta["value_scale"])
