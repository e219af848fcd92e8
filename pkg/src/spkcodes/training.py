"""Loss, Adam, multi-speaker training, unseen-speaker adaptation and gradient checks."""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .layers import SpeakerCode
from .model import (
    ConfigError,
    Network,
    forward_and_grad,
    param_group,
    register_speaker,
)
from .numeric import Rng, ShapeError, finite_diff_grad

__all__ = [
    "TrainConfig",
    "AdaptConfig",
    "TrainHistory",
    "Adam",
    "mse_loss",
    "rmse",
    "train_multispeaker",
    "adapt_speaker",
    "analytic_gradients",
    "compare_gradients",
    "gradcheck",
    "randomize_parameters",
    "parameter_checksum",
]

SELECTORS = ("codes_only", "codes_and_layer_k", "full_finetune_layers")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 20
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "betas": list(self.betas), "eps": self.eps, "patience": self.patience,
            "seed": self.seed, "shuffle": self.shuffle,
        }


@dataclass(frozen=True)
class AdaptConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    trainable: str = "codes_only"
    layer_k: int | None = None

    def __post_init__(self):
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig(**self.train))
        if self.trainable not in SELECTORS:
            raise ConfigError(f"trainable must be one of {SELECTORS}, got {self.trainable!r}")
        if self.trainable == "codes_and_layer_k" and self.layer_k is None:
            raise ConfigError("codes_and_layer_k needs layer_k")

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "trainable": self.trainable, "layer_k": self.layer_k}


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list, compare=False)
    best_epoch: int = -1

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "valid_loss", "seconds"])
        for i, (tr, va, s) in enumerate(zip(self.train_loss, self.valid_loss, self.seconds), start=1):
            w.writerow([i, f"{tr:.17g}", f"{va:.17g}", f"{s:.6f}"])
        return buf.getvalue()


class Adam:
    """Adaptive-moment gradient descent over named arrays, updated in place."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for key, p in params.items():
            g = grads[key]
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(p)
                self.v[key] = np.zeros_like(p)
            v = self.v[key]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(np.mean((pred - target) ** 2))


def rmse(pred, target) -> float:
    return float(np.sqrt(mse_loss(pred, target)))


# Trainable tensors are addressed by keys:
#   ("param", name)          shared or adapter parameter
#   ("code", name, row)      one speaker's code vector (row of the stacked codes),
#                            or the whole stack when row is None
#   ("copy", speaker, name)  one speaker's private layer copy


def _view(net: Network, key) -> np.ndarray:
    reg = net.registry
    if key[0] == "param":
        return reg.params[key[1]]
    if key[0] == "code":
        return reg.codes[key[1]] if key[2] is None else reg.codes[key[1]][key[2]]
    return reg.copies[key[1]][key[2]]


def _pick(key, pg, cg, xg) -> np.ndarray:
    if key[0] == "param":
        return pg[key[1]]
    if key[0] == "code":
        return cg[key[1]] if key[2] is None else cg[key[1]][key[2]]
    return xg[key[1]][key[2]]


def _batch_step(net, keys, X, Y, rows):
    n = Y.size

    def d_loss(out, sel):
        return 2.0 * (out - Y[sel]) / n

    pred, pg, cg, xg = forward_and_grad(net, X, rows, d_loss)
    grads = {k: _pick(k, pg, cg, xg) for k in keys}
    return mse_loss(pred, Y), grads


def _loss(net, X, Y, rows) -> float:
    pred, *_ = forward_and_grad(net, X, rows, None)
    return mse_loss(pred, Y)


def _fit(net: Network, keys: list, X, Y, rows, valid, cfg: TrainConfig) -> TrainHistory:
    history = TrainHistory()
    if cfg.epochs == 0 or not keys:
        return history
    params = {k: _view(net, k) for k in keys}
    opt = Adam(cfg.lr, cfg.betas, cfg.eps)
    shuffle_rng = Rng(cfg.seed).spawn("shuffle")
    best = np.inf
    best_state = {k: v.copy() for k, v in params.items()}
    since_best = 0
    N = X.shape[0]
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(N) if cfg.shuffle else np.arange(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = _batch_step(net, keys, X[idx], Y[idx], rows[idx])
            opt.step(params, grads)
            total += loss * idx.shape[0]
        train_loss = total / N
        score = _loss(net, *valid) if valid is not None else _loss(net, X, Y, rows)
        history.train_loss.append(train_loss)
        history.valid_loss.append(score)
        history.seconds.append(time.perf_counter() - t0)
        if not np.isfinite(score):
            break
        if score < best:
            best = score
            history.best_epoch = epoch + 1
            best_state = {k: v.copy() for k, v in params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    for k, v in params.items():
        v[...] = best_state[k]
    return history


def _rows(net: Network, speakers) -> np.ndarray:
    if net.config.strategy.name == "none":
        return np.zeros(len(speakers), dtype=np.int64)
    return np.array([net.registry.row(s) for s in speakers], dtype=np.int64)


def _shared_keys(net: Network) -> list:
    return [("param", name) for name in net.params]


def train_multispeaker(net: Network, data, cfg: TrainConfig) -> tuple[Network, TrainHistory]:
    """Jointly fit shared parameters and every seen speaker's own parameters.

    ``data`` is a :class:`SpeakerDataset` (train split for fitting, valid split
    for early stopping) or a tuple ``(X, Y, speakers)`` used for both.
    The network is updated in place and returned.
    """
    if isinstance(data, tuple):
        X, Y, spk = data
        valid_split = None
    else:
        X, Y, spk = data.select("train")
        valid_split = data.select("valid")
    if X.shape[0] == 0:
        raise ValueError("empty training set")
    rows = _rows(net, spk)
    valid = None
    if valid_split is not None and valid_split[0].shape[0] > 0:
        valid = (valid_split[0], valid_split[1], _rows(net, valid_split[2]))

    reg = net.registry
    seen = sorted(set(rows.tolist()))
    keys = _shared_keys(net)
    if len(seen) == len(reg.speakers):
        keys += [("code", name, None) for name in reg.codes]
    else:
        keys += [("code", name, k) for name in reg.codes for k in seen]
    keys += [("copy", s, name) for s in reg.copies if reg.index[s] in seen for name in reg.copies[s]]
    history = _fit(net, keys, X, Y, rows, valid, cfg)
    return net, history


def adapt_speaker(
    net: Network,
    new_speaker: str,
    adaptation_data,
    cfg: AdaptConfig,
    valid=None,
) -> SpeakerCode:
    """Register ``new_speaker`` and fit only its own parameters.

    ``adaptation_data`` and ``valid`` are ``(X, Y)`` pairs from the one new
    speaker. Shared parameters and other speakers' codes are never touched.
    """
    X, Y = (np.asarray(a, dtype=np.float64) for a in adaptation_data[:2])
    if X.shape[0] == 0:
        raise ValueError("adaptation data is empty")
    if len(adaptation_data) > 2 and len(set(np.asarray(adaptation_data[2]).tolist()) - {new_speaker}):
        raise ValueError("adaptation data must come from the adapted speaker only")
    if new_speaker in net.registry.index:
        raise ValueError(f"speaker {new_speaker!r} is already registered")

    strategy = net.config.strategy.name
    if cfg.trainable == "full_finetune_layers":
        if strategy != "full_finetune":
            raise ConfigError("full_finetune_layers needs the full_finetune strategy")
        copy_layers = True
    elif cfg.trainable == "codes_and_layer_k":
        if strategy in ("none", "full_finetune"):
            raise ConfigError(f"strategy {strategy!r} has no codes to adapt")
        if not 0 <= cfg.layer_k < len(net.plan):
            raise ConfigError(f"layer_k={cfg.layer_k} out of range")
        copy_layers = [cfg.layer_k]
    else:
        if strategy in ("none", "full_finetune"):
            raise ConfigError(f"strategy {strategy!r} has no codes to adapt")
        copy_layers = False

    register_speaker(net, new_speaker, copy_layers=copy_layers, seed=cfg.train.seed)
    reg = net.registry
    k = reg.row(new_speaker)
    keys = [("code", name, k) for name in reg.codes]
    keys += [("copy", new_speaker, name) for name in reg.copies.get(new_speaker, {})]
    rows = np.full(X.shape[0], k, dtype=np.int64)
    v = None
    if valid is not None and np.asarray(valid[0]).shape[0] > 0:
        Xv = np.asarray(valid[0], dtype=np.float64)
        v = (Xv, np.asarray(valid[1], dtype=np.float64), np.full(Xv.shape[0], k, dtype=np.int64))
    _fit(net, keys, X, Y, rows, v, cfg.train)
    return reg.code(new_speaker)


# ---------------------------------------------------------------- gradient checking


def _group_of(key) -> str:
    if key[0] == "param":
        return param_group(key[1])
    return "codes" if key[0] == "code" else "speaker_layers"


def _frame_keys(net: Network, speaker: str) -> list:
    reg = net.registry
    keys = _shared_keys(net)
    if net.config.strategy.name != "none":
        k = reg.row(speaker)
        keys += [("code", name, k) for name in reg.codes]
        keys += [("copy", speaker, name) for name in reg.copies.get(speaker, {})]
    return keys


def _frame_arrays(net, frame):
    x, target, speaker = frame
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(target, dtype=np.float64))
    k = net.registry.row(speaker) if net.config.strategy.name != "none" else 0
    return X, Y, np.full(X.shape[0], k, dtype=np.int64)


def analytic_gradients(net: Network, frame) -> dict:
    """Backprop gradients of the frame's MSE for every trainable tensor."""
    X, Y, rows = _frame_arrays(net, frame)
    keys = _frame_keys(net, frame[2])
    _, grads = _batch_step(net, keys, X, Y, rows)
    return {k: g.copy() for k, g in grads.items()}


def compare_gradients(net: Network, frame, analytic: dict, eps: float = 1e-6) -> dict:
    """Central-difference check of ``analytic``; max relative error per group.

    The error of one tensor is ``max|analytic - numeric|`` divided by the
    largest gradient magnitude in that tensor.
    """
    X, Y, rows = _frame_arrays(net, frame)
    per_tensor = {}
    groups: dict[str, float] = {}
    for key, a in analytic.items():
        view = _view(net, key)

        def f(values, view=view):
            saved = view.copy()
            view[...] = values
            try:
                return _loss(net, X, Y, rows)
            finally:
                view[...] = saved

        numeric = finite_diff_grad(f, view.copy(), eps)
        scale = max(np.max(np.abs(a)), np.max(np.abs(numeric)), 1e-12)
        err = float(np.max(np.abs(a - numeric)) / scale)
        name = ":".join(str(p) for p in key)
        per_tensor[name] = err
        g = _group_of(key)
        groups[g] = max(groups.get(g, 0.0), err)
    return {"groups": groups, "tensors": per_tensor, "max": max(groups.values(), default=0.0)}


def gradcheck(net: Network, frame, eps: float = 1e-6) -> dict:
    return compare_gradients(net, frame, analytic_gradients(net, frame), eps)


def randomize_parameters(net: Network, seed: int, scale: float = 1.0) -> None:
    """Overwrite every parameter, code and layer copy with N(0, scale^2) draws."""
    rng = Rng(seed)
    reg = net.registry
    for name in sorted(reg.params):
        reg.params[name][...] = rng.normal(reg.params[name].shape, std=scale)
    for name in sorted(reg.codes):
        reg.codes[name][...] = rng.normal(reg.codes[name].shape, std=scale)
    for spk in sorted(reg.copies):
        for name in sorted(reg.copies[spk]):
            reg.copies[spk][name][...] = rng.normal(reg.copies[spk][name].shape, std=scale)


def parameter_checksum(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()
