"""Network assembly for every adaptation strategy and injection mode.

A network is a stack of layer slots. Hidden slots use the hidden activation
(sigmoid by default) and the last slot is a linear output layer. Depending on
the strategy, some slots carry speaker machinery:

    bias / scale / affine   factored slots with bias and/or scaling adapters
    level                   bias adapter on one slot, scaling adapter on the next
    bottle                  bottleneck slots U diag(W_A s_A) V + residual (+ bias)
    lhuc                    per-speaker amplitudes after the activation
    full_finetune           per-speaker copies of the designated slots
    none                    vanilla network

In ``linear`` injection mode the transformation sits on the output layer,
where everything downstream is linear. ``level`` then puts the bias code on
the last hidden layer and the scaling code on the output layer. ``bottle``
needs a square slot for its residual, so in linear mode an extra m x m linear
bottleneck slot is inserted in front of the output layer.

Parameter names are ``"{slot}.{kind}"`` (e.g. ``"2.W_A"``). One scaling code
and one bias code per speaker drive every slot through per-slot projections.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .layers import (
    Activation,
    BiasAdapter,
    BottleneckLayer,
    DenseLayer,
    ScalingAdapter,
    SpeakerCode,
    bottleneck_forward,
    dense_forward,
    factored_forward,
    fold_lhuc,
    layer_backward,
    lhuc_forward,
)
from .numeric import Rng, ShapeError

__all__ = [
    "STRATEGIES",
    "FOLDABLE",
    "ConfigError",
    "UnknownSpeakerError",
    "InjectionMode",
    "Strategy",
    "NetworkConfig",
    "LayerPlan",
    "ParamRegistry",
    "Network",
    "build_network",
    "register_speaker",
    "forward",
    "forward_batch",
    "count_params",
    "param_shapes",
    "fold_speaker",
    "save_network",
    "load_network",
    "param_group",
]

STRATEGIES = ("none", "bias", "scale", "affine", "level", "bottle", "lhuc", "full_finetune")
FOLDABLE = ("none", "bias", "scale", "affine", "level", "lhuc", "full_finetune")

_REQUIRED_SIZES = {
    "none": (),
    "bias": ("q",),
    "scale": ("p",),
    "affine": ("p", "q"),
    "level": ("p", "q"),
    "bottle": ("p", "q", "n"),
    "lhuc": (),
    "full_finetune": (),
}

SHARED_KINDS = ("W", "c")
ADAPTER_KINDS = ("W_A", "W_b", "U", "V")


class ConfigError(ValueError):
    """Invalid network, strategy or experiment configuration."""


class UnknownSpeakerError(KeyError):
    pass


class InjectionMode(str, Enum):
    NONLINEAR = "nonlinear"
    LINEAR = "linear"


@dataclass(frozen=True)
class Strategy:
    name: str
    p: int | None = None
    q: int | None = None
    n: int | None = None

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.name!r}; expected one of {STRATEGIES}")
        need = _REQUIRED_SIZES[self.name]
        for key in ("p", "q", "n"):
            value = getattr(self, key)
            if key in need:
                if value is None or int(value) < 1:
                    raise ConfigError(f"strategy {self.name!r} needs a positive size {key}")
            elif value is not None:
                raise ConfigError(f"strategy {self.name!r} does not take size {key}")

    @classmethod
    def standard(cls, name: str, divisor: int = 1, bottleneck: int | None = None) -> "Strategy":
        """Reference sizes for a 1024-wide network (equal code budget of 64), optionally shrunk by ``divisor``."""
        sizes = {
            "none": {},
            "bias": {"q": 64},
            "scale": {"p": 64},
            "affine": {"p": 32, "q": 32},
            "level": {"p": 32, "q": 32},
            "bottle": {"p": 64, "q": 32, "n": 512},
            "lhuc": {},
            "full_finetune": {},
        }
        if name not in sizes:
            raise ConfigError(f"unknown strategy {name!r}")
        kw = {k: max(1, v // divisor) for k, v in sizes[name].items()}
        if name == "bottle" and bottleneck is not None:
            kw["n"] = bottleneck
        return cls(name, **kw)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    output_dim: int
    hidden_width: int = 1024
    depth: int = 5
    strategy: Strategy = field(default_factory=lambda: Strategy("none"))
    mode: InjectionMode = InjectionMode.NONLINEAR
    layers: tuple[int, ...] | None = None
    activations: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", InjectionMode(self.mode))
        if isinstance(self.strategy, dict):
            object.__setattr__(self, "strategy", Strategy(**self.strategy))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(i) for i in self.layers))
        if self.activations is not None:
            object.__setattr__(self, "activations", tuple(Activation(a).value for a in self.activations))
        for key in ("input_dim", "output_dim", "hidden_width", "depth"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "strategy": self.strategy.to_dict(),
            "mode": self.mode.value,
            "layers": None if self.layers is None else list(self.layers),
            "activations": None if self.activations is None else list(self.activations),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if isinstance(d.get("strategy"), str):
            d["strategy"] = Strategy.standard(d["strategy"])
        elif isinstance(d.get("strategy"), dict):
            d["strategy"] = Strategy(**d["strategy"])
        return cls(**d)


@dataclass(frozen=True)
class LayerPlan:
    index: int
    kind: str  # "dense" or "bottleneck"
    in_dim: int
    out_dim: int
    activation: Activation
    scale: bool = False
    bias: bool = False
    lhuc: bool = False
    finetune: bool = False

    @property
    def param_kinds(self) -> tuple[str, ...]:
        kinds = ("U", "V", "c") if self.kind == "bottleneck" else ("W", "c")
        if self.scale:
            kinds += ("W_A",)
        if self.bias:
            kinds += ("W_b",)
        return kinds

    @property
    def core_kinds(self) -> tuple[str, ...]:
        """The slot's own weights, i.e. what a fine-tuned copy replaces."""
        return ("U", "V", "c") if self.kind == "bottleneck" else ("W", "c")


def param_group(name: str) -> str:
    kind = name.split(".", 1)[1]
    return "shared" if kind in SHARED_KINDS else "adapters"


def default_layers(cfg: NetworkConfig) -> tuple[int, ...]:
    L = cfg.depth
    name = cfg.strategy.name
    if name == "none":
        return ()
    if cfg.mode is InjectionMode.LINEAR:
        if name == "level":
            return (L - 1, L)
        return (L,)
    if name == "level":
        b = math.ceil(L / 2) - 1
        return (b, b + 1)
    if name == "bottle":
        first = 0 if cfg.input_dim == cfg.hidden_width else 1
        return tuple(range(first, L))
    return tuple(range(L))


def make_plan(cfg: NetworkConfig) -> list[LayerPlan]:
    L, m = cfg.depth, cfg.hidden_width
    name = cfg.strategy.name
    extra = 1 if (name == "bottle" and cfg.mode is InjectionMode.LINEAR) else 0
    n_slots = L + 1 + extra
    if cfg.activations is not None:
        if len(cfg.activations) != n_slots:
            raise ConfigError(f"activations lists {len(cfg.activations)} entries, network has {n_slots} layers")
        acts = [Activation(a) for a in cfg.activations]
    else:
        acts = [Activation.SIGMOID] * L + [Activation.LINEAR] * (1 + extra)

    dims = [cfg.input_dim] + [m] * (L + extra) + [cfg.output_dim]
    slots = [
        dict(index=i, kind="dense", in_dim=dims[i], out_dim=dims[i + 1], activation=acts[i])
        for i in range(n_slots)
    ]

    if extra:
        if cfg.layers is not None and tuple(cfg.layers) != (L,):
            raise ConfigError("bottle in linear mode always uses the inserted slot before the output layer")
        targets = (L,)
    else:
        targets = cfg.layers if cfg.layers is not None else default_layers(cfg)
    for i in targets:
        if not 0 <= i < n_slots:
            raise ConfigError(f"injection layer {i} out of range for {n_slots} layers")
    if name == "none" and targets:
        raise ConfigError("strategy 'none' takes no injection layers")
    if name != "none" and not targets:
        raise ConfigError(f"strategy {name!r} needs at least one injection layer")

    if name == "level":
        if len(targets) != 2 or targets[0] == targets[1]:
            raise ConfigError("level strategy needs exactly two distinct layers: (bias layer, scaling layer)")
        slots[targets[0]]["bias"] = True
        slots[targets[1]]["scale"] = True
    else:
        for i in targets:
            s = slots[i]
            if name in ("bias", "affine"):
                s["bias"] = True
            if name in ("scale", "affine"):
                s["scale"] = True
            if name == "bottle":
                if s["in_dim"] != s["out_dim"]:
                    raise ConfigError(
                        f"bottleneck residual needs equal input/output width at layer {i} "
                        f"({s['in_dim']} != {s['out_dim']})"
                    )
                s.update(kind="bottleneck", scale=True, bias=True)
            if name == "lhuc":
                s["lhuc"] = True
            if name == "full_finetune":
                s["finetune"] = True

    if cfg.mode is InjectionMode.LINEAR and targets:
        # everything from the scaling/bias injection onwards must be linear
        start = targets[1] if name == "level" else min(targets)
        if any(acts[i] is not Activation.LINEAR for i in range(start, n_slots)):
            raise ConfigError("linear injection mode needs linear activations from the injection layer onwards")

    return [LayerPlan(**s) for s in slots]


class ParamRegistry:
    """Shared parameters plus everything owned by individual speakers.

    Speaker codes are stored as stacked rows (one row per registered speaker)
    so that mixed-speaker batches gather codes with one indexing operation.
    Lookups of unregistered speakers raise; nothing is created implicitly.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params
        self.speakers: list[str] = []
        self.index: dict[str, int] = {}
        self.codes: dict[str, np.ndarray] = {}
        self.copies: dict[str, dict[str, np.ndarray]] = {}
        self.layer_cache: dict = {}

    def row(self, speaker: str) -> int:
        try:
            return self.index[speaker]
        except KeyError:
            raise UnknownSpeakerError(f"speaker {speaker!r} is not registered") from None

    def code(self, speaker: str) -> SpeakerCode:
        k = self.row(speaker)
        lhuc = {int(name.split(".")[1]): arr[k].copy() for name, arr in self.codes.items() if name.startswith("lhuc.")}
        return SpeakerCode(
            s_A=self.codes["s_A"][k].copy() if "s_A" in self.codes else None,
            s_b=self.codes["s_b"][k].copy() if "s_b" in self.codes else None,
            lhuc=lhuc,
            layers={n: v.copy() for n, v in self.copies.get(speaker, {}).items()},
        )


@dataclass
class Network:
    config: NetworkConfig
    plan: list[LayerPlan]
    registry: ParamRegistry

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.registry.params

    @property
    def speakers(self) -> list[str]:
        return list(self.registry.speakers)

    def code_shapes(self) -> dict[str, int]:
        s = self.config.strategy
        shapes: dict[str, int] = {}
        if s.p is not None:
            shapes["s_A"] = s.p
        if s.q is not None:
            shapes["s_b"] = s.q
        for slot in self.plan:
            if slot.lhuc:
                shapes[f"lhuc.{slot.index}"] = slot.out_dim
        return shapes

    def finetune_names(self, layers=None) -> list[str]:
        idx = [s.index for s in self.plan if s.finetune] if layers is None else list(layers)
        return [f"{i}.{k}" for i in idx for k in self.plan[i].core_kinds]


def _param_shape(kind: str, slot: LayerPlan, strategy: Strategy) -> tuple[int, ...]:
    if kind == "W":
        return (slot.out_dim, slot.in_dim)
    if kind == "c":
        return (slot.out_dim,)
    if kind == "V":
        return (strategy.n, slot.in_dim)
    if kind == "U":
        return (slot.out_dim, strategy.n)
    if kind == "W_A":
        return (strategy.n if slot.kind == "bottleneck" else slot.out_dim, strategy.p)
    if kind == "W_b":
        return (slot.out_dim, strategy.q)
    raise AssertionError(kind)


def param_shapes(cfg: NetworkConfig, plan: list[LayerPlan] | None = None) -> dict[str, tuple[int, ...]]:
    """Shape of every stored parameter, without allocating anything."""
    plan = make_plan(cfg) if plan is None else plan
    return {
        f"{slot.index}.{kind}": _param_shape(kind, slot, cfg.strategy)
        for slot in plan for kind in slot.param_kinds
    }


def _init_param(rng: Rng, name: str, slot: LayerPlan, strategy: Strategy) -> np.ndarray:
    kind = name.split(".", 1)[1]
    shape = _param_shape(kind, slot, strategy)
    r = rng.spawn(f"param:{name}")
    if kind == "c":
        return np.zeros(shape)
    if kind == "W_A":
        w = r.normal(shape, std=0.01)
        w[:, 0] = 1.0
        return w
    if kind == "W_b":
        return r.normal(shape, std=0.01)
    # W, V, U: variance 1/fan_in
    return r.normal(shape, std=1.0 / math.sqrt(shape[1]))


def build_network(cfg: NetworkConfig) -> Network:
    """Deterministically construct a network (no speakers registered yet)."""
    plan = make_plan(cfg)
    if cfg.strategy.name == "bottle" and cfg.strategy.n is None:
        raise ConfigError("bottle strategy needs a bottleneck width n")
    rng = Rng(cfg.seed)
    params = {}
    for slot in plan:
        for kind in slot.param_kinds:
            name = f"{slot.index}.{kind}"
            params[name] = _init_param(rng, name, slot, cfg.strategy)
    net = Network(cfg, plan, ParamRegistry(params))
    for name, width in net.code_shapes().items():
        net.registry.codes[name] = np.zeros((0, width))
    return net


def initial_code(net: Network, speaker: str, seed: int | None = None) -> dict[str, np.ndarray]:
    """Identity scaling (first basis vector), small random bias code, unit LHUC."""
    rng = Rng(net.config.seed if seed is None else seed).spawn(f"speaker:{speaker}")
    out = {}
    for name, width in net.code_shapes().items():
        if name == "s_A":
            v = np.zeros(width)
            v[0] = 1.0
        elif name == "s_b":
            v = rng.normal(width, std=0.1)
        else:
            v = np.ones(width)
        out[name] = v
    return out


def register_speaker(
    net: Network,
    speaker: str,
    code: SpeakerCode | dict | None = None,
    copy_layers: bool | list[int] | None = None,
    seed: int | None = None,
) -> None:
    """Add a speaker with an explicit or freshly initialized code.

    ``copy_layers`` selects slots whose weights the speaker gets private
    copies of: ``True`` means the strategy's designated slots (the default for
    ``full_finetune``), a list names slots explicitly.
    """
    reg = net.registry
    if speaker in reg.index:
        raise ValueError(f"speaker {speaker!r} is already registered")
    values = initial_code(net, speaker, seed)
    if isinstance(code, SpeakerCode):
        given = {"s_A": code.s_A, "s_b": code.s_b, **{f"lhuc.{i}": a for i, a in code.lhuc.items()}}
        code = {k: v for k, v in given.items() if v is not None}
    for name, v in (code or {}).items():
        if name not in values:
            raise ConfigError(f"strategy {net.config.strategy.name!r} has no code component {name!r}")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != values[name].shape:
            raise ShapeError(f"code {name} has shape {v.shape}, expected {values[name].shape}")
        values[name] = v
    for name, v in values.items():
        reg.codes[name] = np.vstack([reg.codes[name], v[None, :]])
    reg.index[speaker] = len(reg.speakers)
    reg.speakers.append(speaker)

    if copy_layers is None:
        copy_layers = net.config.strategy.name == "full_finetune"
    if copy_layers is True:
        names = net.finetune_names()
    elif copy_layers:
        names = net.finetune_names(copy_layers)
    else:
        names = []
    if names:
        reg.copies[speaker] = {n: net.params[n].copy() for n in names}
    reg.layer_cache.clear()


# ---------------------------------------------------------------- forward / backward


def _layer_objects(net: Network, owner: str | None):
    """Layer and adapter objects wrapping the live parameter arrays.

    Arrays are updated in place during training, so the wrappers stay valid
    until the set of arrays changes (registration, loading).
    """
    cache = net.registry.layer_cache
    if owner not in cache:
        reg = net.registry
        params = reg.params if owner is None else {**reg.params, **reg.copies[owner]}
        objs = []
        for slot in net.plan:
            p = lambda k: params[f"{slot.index}.{k}"]  # noqa: E731
            sa = ScalingAdapter(p("W_A")) if slot.scale else None
            ba = BiasAdapter(p("W_b")) if slot.bias else None
            if slot.kind == "bottleneck":
                layer = BottleneckLayer(p("U"), p("V"), p("c"), slot.activation)
            else:
                layer = DenseLayer(p("W"), p("c"), slot.activation)
            objs.append((layer, sa, ba))
        cache[owner] = objs
    return cache[owner]


def _run(net: Network, X: np.ndarray, rows: np.ndarray, codes, owner: str | None):
    h = X
    caches = []
    for slot, (layer, sa, ba) in zip(net.plan, _layer_objects(net, owner)):
        i = slot.index
        s_A = codes["s_A"][rows] if slot.scale else None
        s_b = codes["s_b"][rows] if slot.bias else None
        if slot.kind == "bottleneck":
            h, cache = bottleneck_forward(layer, sa, ba, SpeakerCode(s_A, s_b), h)
        else:
            if slot.lhuc:
                h, cache = lhuc_forward(layer, codes[f"lhuc.{i}"][rows], h)
            elif sa is not None or ba is not None:
                h, cache = factored_forward(layer, sa, ba, SpeakerCode(s_A, s_b), h)
            else:
                h, cache = dense_forward(layer, h)
        caches.append((slot, layer, cache))
    return h, caches


def _backward(caches, rows: np.ndarray, n_speakers: int, d_out: np.ndarray, codes):
    pgrads: dict[str, np.ndarray] = {}
    cgrads: dict[str, np.ndarray] = {}
    g = d_out
    for slot, layer, cache in reversed(caches):
        grads = layer_backward(layer, cache, g)
        for kind in slot.param_kinds:
            pgrads[f"{slot.index}.{kind}"] = grads[kind]
        for key, name in (("s_A", "s_A"), ("s_b", "s_b"), ("a", f"lhuc.{slot.index}")):
            if key in grads:
                acc = cgrads.setdefault(name, np.zeros((n_speakers, codes[name].shape[1])))
                np.add.at(acc, rows, grads[key])
        g = grads["h"]
    return pgrads, cgrads


def _groups(net: Network, rows: np.ndarray):
    """Split batch rows by which parameter view they use (shared or a speaker's copies)."""
    reg = net.registry
    if not reg.copies:
        return [(None, np.arange(rows.shape[0]))]
    owners = np.array([reg.speakers[k] if reg.speakers[k] in reg.copies else "" for k in rows], dtype=object)
    out = []
    for owner in sorted(set(owners.tolist())):
        out.append((owner or None, np.nonzero(owners == owner)[0]))
    return out


def forward_and_grad(net: Network, X, rows, d_loss_fn):
    """Forward a batch, then backpropagate ``d_loss_fn(pred, sel)``.

    Returns ``(pred, param_grads, code_grads, copy_grads)`` where copy_grads
    maps speaker -> {param name: grad}. ``d_loss_fn`` receives predictions for
    a subset of rows and their indices in the batch.
    """
    reg = net.registry
    rows = np.asarray(rows, dtype=np.int64)
    pred = np.empty((rows.shape[0], _out_dim(net)))
    pgrads: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in reg.params.items()}
    cgrads = {k: np.zeros_like(v) for k, v in reg.codes.items()}
    copy_grads: dict[str, dict[str, np.ndarray]] = {}
    for owner, sel in _groups(net, rows):
        out, caches = _run(net, X[sel], rows[sel], reg.codes, owner)
        pred[sel] = out
        if d_loss_fn is None:
            continue
        pg, cg = _backward(caches, rows[sel], len(reg.speakers), d_loss_fn(out, sel), reg.codes)
        for k, v in cg.items():
            cgrads[k] += v
        for k, v in pg.items():
            if owner is not None and k in reg.copies[owner]:
                copy_grads.setdefault(owner, {})[k] = v
            else:
                pgrads[k] += v
    return pred, pgrads, cgrads, copy_grads


def _out_dim(net: Network) -> int:
    return net.plan[-1].out_dim


def _rows_for(net: Network, speakers, batch: int) -> np.ndarray:
    if net.config.strategy.name == "none":
        return np.zeros(batch, dtype=np.int64)
    reg = net.registry
    if speakers is None:
        raise UnknownSpeakerError("a speaker id is required for an adaptive network")
    if isinstance(speakers, str):
        return np.full(batch, reg.row(speakers), dtype=np.int64)
    rows = np.array([reg.row(s) for s in speakers], dtype=np.int64)
    if rows.shape[0] != batch:
        raise ShapeError(f"{rows.shape[0]} speaker ids for a batch of {batch}")
    return rows


def forward_batch(net: Network, X, speakers) -> np.ndarray:
    """Outputs for rows of ``X``; ``speakers`` is one id or one id per row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.config.input_dim:
        raise ShapeError(f"inputs of shape {X.shape} do not match input_dim {net.config.input_dim}")
    rows = _rows_for(net, speakers, X.shape[0])
    pred, *_ = forward_and_grad(net, X, rows, None)
    return pred


def forward(net: Network, x, speaker: str | None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return forward_batch(net, x[None, :], speaker)[0]
    return forward_batch(net, x, speaker)


# ---------------------------------------------------------------- accounting / folding / io


def count_params(net: Network | NetworkConfig) -> dict[str, int]:
    """Shared, adapter and one-speaker parameter counts.

    Accepts a built network or just its config (nothing is allocated then).
    """
    if isinstance(net, NetworkConfig):
        cfg, plan = net, make_plan(net)
    else:
        cfg, plan = net.config, net.plan
    sizes = {k: math.prod(v) for k, v in param_shapes(cfg, plan).items()}
    shared = sum(v for k, v in sizes.items() if param_group(k) == "shared")
    adapters = sum(v for k, v in sizes.items() if param_group(k) == "adapters")
    s = cfg.strategy
    per_speaker = (s.p or 0) + (s.q or 0)
    per_speaker += sum(slot.out_dim for slot in plan if slot.lhuc)
    per_speaker += sum(sizes[f"{slot.index}.{k}"] for slot in plan if slot.finetune for k in slot.core_kinds)
    return {"shared": shared, "adapters": adapters, "per_speaker": per_speaker}


def fold_speaker(net: Network, speaker: str) -> Network:
    """Bake one speaker's transformation into an adapter-free network."""
    strat = net.config.strategy.name
    if strat not in FOLDABLE:
        raise ConfigError(f"strategy {strat!r} cannot be folded into plain layers")
    reg = net.registry
    k = reg.row(speaker) if strat != "none" else None
    params = {**net.params, **reg.copies.get(speaker, {})}
    folded: dict[str, np.ndarray] = {}
    for slot in net.plan:
        i = slot.index
        W = params[f"{i}.W"].copy()
        c = params[f"{i}.c"].copy()
        if slot.scale:
            W = (params[f"{i}.W_A"] @ reg.codes["s_A"][k])[:, None] * W
        if slot.bias:
            c = c + params[f"{i}.W_b"] @ reg.codes["s_b"][k]
        folded[f"{i}.W"], folded[f"{i}.c"] = W, c
    for slot in net.plan:
        if not slot.lhuc:
            continue
        i = slot.index
        a = reg.codes[f"lhuc.{i}"][k]
        if i + 1 < len(net.plan):
            folded[f"{i + 1}.W"] = fold_lhuc(folded[f"{i + 1}.W"], a)
        elif slot.activation is Activation.LINEAR:
            folded[f"{i}.W"] = a[:, None] * folded[f"{i}.W"]
            folded[f"{i}.c"] = a * folded[f"{i}.c"]
        else:
            raise ConfigError("LHUC on a nonlinear output layer has no following layer to fold into")
    cfg = replace(
        net.config,
        strategy=Strategy("none"),
        mode=InjectionMode.NONLINEAR,
        layers=None,
        activations=tuple(s.activation.value for s in net.plan),
    )
    out = Network(cfg, make_plan(cfg), ParamRegistry(folded))
    return out


FORMAT = "spkcodes-network/1"


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def save_network(net: Network, path) -> None:
    """Write config, parameters and speakers as one JSON document.

    Python's float repr round-trips exactly, so loading is bit-exact.
    """
    reg = net.registry
    doc = {
        "format": FORMAT,
        "config": net.config.to_dict(),
        "params": {k: _arr(v) for k, v in reg.params.items()},
        "speakers": list(reg.speakers),
        "codes": {k: _arr(v) for k, v in reg.codes.items()},
        "copies": {s: {k: _arr(v) for k, v in d.items()} for s, d in reg.copies.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_network(path) -> Network:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ConfigError(f"{path} is not a {FORMAT} document")
    cfg = NetworkConfig.from_dict(doc["config"])
    net = Network(cfg, make_plan(cfg), ParamRegistry({k: _unarr(v) for k, v in doc["params"].items()}))
    reg = net.registry
    reg.speakers = list(doc["speakers"])
    reg.index = {s: i for i, s in enumerate(reg.speakers)}
    reg.codes = {k: _unarr(v) for k, v in doc["codes"].items()}
    reg.copies = {s: {k: _unarr(v) for k, v in d.items()} for s, d in doc["copies"].items()}
    reg.layer_cache.clear()
    return net
