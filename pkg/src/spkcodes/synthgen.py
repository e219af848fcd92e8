"""Synthetic multi-speaker regression data.

Each speaker k maps inputs through a shared frozen function g and its own
multiplicative and additive factors::

    y = alpha_k * g(x) + beta_k + noise

``g`` is a random two-hidden-layer tanh network (width 16), standardized so
every output has zero mean and unit variance over the input box. Scale-mode
data has ``beta = 0``; bias-mode data has ``alpha = 1``.

Seen speakers get train/valid/test splits. Unseen speakers get an ``adapt``
pool (the largest adaptation size; smaller sizes are its prefixes) plus
valid/test splits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numeric import Rng

__all__ = [
    "GenConfig",
    "BaseFunction",
    "SpeakerLatent",
    "SpeakerDataset",
    "generate",
    "oracle_rmse_floor",
    "save_dataset",
    "load_dataset",
]

MODES = ("scale", "bias", "affine")
SEEN_SPLITS = ("train", "valid", "test")
UNSEEN_SPLITS = ("adapt", "valid", "test")
G_WIDTH = 16


@dataclass(frozen=True)
class GenConfig:
    num_seen_speakers: int = 16
    num_unseen_speakers: int = 4
    train_frames: int = 200
    valid_frames: int = 20
    test_frames: int = 40
    adapt_frames: tuple[int, ...] = (10, 40, 160)
    input_dim: int = 8
    output_dim: int = 6
    mode: str = "affine"
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "adapt_frames", tuple(int(a) for a in self.adapt_frames))
        if self.mode not in MODES:
            raise ValueError(f"variation mode must be one of {MODES}, got {self.mode!r}")
        for key in ("num_seen_speakers", "num_unseen_speakers", "train_frames", "valid_frames",
                    "test_frames", "input_dim", "output_dim"):
            if int(getattr(self, key)) < 1:
                raise ValueError(f"{key} must be >= 1")
        if not self.adapt_frames or min(self.adapt_frames) < 1:
            raise ValueError("adapt_frames must list positive sizes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapt_frames"] = list(self.adapt_frames)
        return d


@dataclass
class BaseFunction:
    """Frozen tanh network shared by all speakers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    std: np.ndarray

    def __call__(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ W.T + b)
        out = h @ self.weights[-1].T + self.biases[-1]
        return (out - self.mean) / self.std

    @classmethod
    def draw(cls, rng: Rng, input_dim: int, output_dim: int) -> "BaseFunction":
        dims = [input_dim, G_WIDTH, G_WIDTH, output_dim]
        gains = [2.0, 1.5, 1.0]
        weights, biases = [], []
        for i, gain in enumerate(gains):
            weights.append(rng.normal((dims[i + 1], dims[i]), std=gain / np.sqrt(dims[i])))
            biases.append(rng.normal(dims[i + 1], std=0.5))
        raw = cls(weights, biases, np.zeros(output_dim), np.ones(output_dim))
        ref = raw(rng.uniform((4096, input_dim), -1.0, 1.0))
        return cls(weights, biases, ref.mean(axis=0), ref.std(axis=0))

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BaseFunction":
        return cls(
            [np.array(w) for w in d["weights"]],
            [np.array(b) for b in d["biases"]],
            np.array(d["mean"]),
            np.array(d["std"]),
        )


@dataclass
class SpeakerLatent:
    alpha: np.ndarray
    beta: np.ndarray


@dataclass
class SpeakerDataset:
    config: GenConfig
    X: np.ndarray
    Y: np.ndarray
    speakers: np.ndarray  # object array of speaker ids, one per frame
    splits: np.ndarray  # object array of split tags, one per frame
    seen: list[str]
    unseen: list[str]
    latents: dict[str, SpeakerLatent]
    base: BaseFunction
    _checksum: str | None = field(default=None, repr=False)

    def select(self, split: str, speakers=None, limit: int | None = None):
        """Frames of one split for the seen speakers (or the given ones).

        ``limit`` keeps the first ``limit`` frames of each speaker, which is
        how nested adaptation sets are formed.
        """
        if speakers is None:
            speakers = self.seen
        elif isinstance(speakers, str):
            speakers = [speakers]
        idx = []
        for spk in speakers:
            rows = np.nonzero((self.speakers == spk) & (self.splits == split))[0]
            idx.append(rows if limit is None else rows[:limit])
        idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
        return self.X[idx], self.Y[idx], self.speakers[idx]

    def predict_oracle(self, X: np.ndarray, speakers) -> np.ndarray:
        """Noise-free targets from the true base function and latents."""
        G = self.base(X)
        speakers = np.broadcast_to(np.asarray(speakers, dtype=object), (X.shape[0],))
        alpha = np.stack([self.latents[s].alpha for s in speakers])
        beta = np.stack([self.latents[s].beta for s in speakers])
        return alpha * G + beta

    @property
    def checksum(self) -> str:
        if self._checksum is None:
            meta, frames = _serialize(self)
            self._checksum = _digest(meta, frames)
        return self._checksum

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for spk, split in zip(self.speakers, self.splits):
            out.setdefault(spk, {}).setdefault(split, 0)
            out[spk][split] += 1
        return out


def _speaker_ids(cfg: GenConfig) -> tuple[list[str], list[str]]:
    seen = [f"s{i:02d}" for i in range(cfg.num_seen_speakers)]
    unseen = [f"u{i:02d}" for i in range(cfg.num_unseen_speakers)]
    return seen, unseen


def generate(cfg: GenConfig) -> SpeakerDataset:
    root = Rng(cfg.seed)
    base = BaseFunction.draw(root.spawn("base"), cfg.input_dim, cfg.output_dim)
    seen, unseen = _speaker_ids(cfg)
    latents = {}
    for spk in seen + unseen:
        r = root.spawn(f"latent:{spk}")
        alpha = np.exp(r.normal(cfg.output_dim, std=0.4))
        beta = r.normal(cfg.output_dim, std=0.5)
        if cfg.mode == "scale":
            beta = np.zeros(cfg.output_dim)
        elif cfg.mode == "bias":
            alpha = np.ones(cfg.output_dim)
        latents[spk] = SpeakerLatent(alpha, beta)

    plan = [(s, split, n) for s in seen for split, n in
            zip(SEEN_SPLITS, (cfg.train_frames, cfg.valid_frames, cfg.test_frames))]
    plan += [(s, split, n) for s in unseen for split, n in
             zip(UNSEEN_SPLITS, (max(cfg.adapt_frames), cfg.valid_frames, cfg.test_frames))]
    Xs, Ys, spks, splits = [], [], [], []
    for spk, split, n in plan:
        r = root.spawn(f"frames:{spk}:{split}")
        X = r.uniform((n, cfg.input_dim), -1.0, 1.0)
        lat = latents[spk]
        Y = lat.alpha * base(X) + lat.beta
        if cfg.noise_sigma > 0:
            Y = Y + r.normal((n, cfg.output_dim), std=cfg.noise_sigma)
        Xs.append(X)
        Ys.append(Y)
        spks += [spk] * n
        splits += [split] * n
    return SpeakerDataset(
        cfg,
        np.vstack(Xs),
        np.vstack(Ys),
        np.array(spks, dtype=object),
        np.array(splits, dtype=object),
        seen,
        unseen,
        latents,
        base,
    )


def oracle_rmse_floor(cfg: GenConfig) -> float:
    """RMSE of the predictor that knows g and every latent: the noise level."""
    return float(cfg.noise_sigma)


def _serialize(ds: SpeakerDataset) -> tuple[bytes, bytes]:
    cfg = ds.config
    meta = {
        "format": "spkcodes-dataset/1",
        "config": cfg.to_dict(),
        "seen": ds.seen,
        "unseen": ds.unseen,
        "latents": {s: {"alpha": l.alpha.tolist(), "beta": l.beta.tolist()} for s, l in ds.latents.items()},
        "base_function": ds.base.to_dict(),
        "manifest": ds.counts(),
    }
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["speaker", "split"] + [f"x{i}" for i in range(cfg.input_dim)]
               + [f"y{i}" for i in range(cfg.output_dim)])
    for spk, split, x, y in zip(ds.speakers, ds.splits, ds.X, ds.Y):
        w.writerow([spk, split] + [f"{v:.17g}" for v in x] + [f"{v:.17g}" for v in y])
    return json.dumps(meta, indent=1).encode(), buf.getvalue().encode()


def _digest(meta: bytes, frames: bytes) -> str:
    h = hashlib.sha256()
    h.update(meta)
    h.update(frames)
    return h.hexdigest()


def save_dataset(ds: SpeakerDataset, directory) -> dict[str, str]:
    """Write ``meta.json`` and ``frames.csv``; returns file checksums."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta, frames = _serialize(ds)
    (directory / "meta.json").write_bytes(meta)
    (directory / "frames.csv").write_bytes(frames)
    return {
        "meta.json": hashlib.sha256(meta).hexdigest(),
        "frames.csv": hashlib.sha256(frames).hexdigest(),
        "dataset": _digest(meta, frames),
    }


def load_dataset(directory) -> SpeakerDataset:
    directory = Path(directory)
    meta_bytes = (directory / "meta.json").read_bytes()
    frames_bytes = (directory / "frames.csv").read_bytes()
    meta = json.loads(meta_bytes)
    cfg = GenConfig(**meta["config"])
    rows = list(csv.reader(io.StringIO(frames_bytes.decode())))[1:]
    d_in, d_out = cfg.input_dim, cfg.output_dim
    values = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float64).reshape(len(rows), d_in + d_out)
    ds = SpeakerDataset(
        cfg,
        values[:, :d_in],
        values[:, d_in:],
        np.array([r[0] for r in rows], dtype=object),
        np.array([r[1] for r in rows], dtype=object),
        list(meta["seen"]),
        list(meta["unseen"]),
        {s: SpeakerLatent(np.array(l["alpha"]), np.array(l["beta"])) for s, l in meta["latents"].items()},
        BaseFunction.from_dict(meta["base_function"]),
    )
    ds._checksum = _digest(meta_bytes, frames_bytes)
    return ds
