"""Experiment runner behind the command-line interface.

An experiment spec is a JSON document::

    {
      "data": {"path": "runs/data"}            or {"gen": {...GenConfig fields...}},
      "network": {"hidden_width": 32, "depth": 3, "strategy": "affine", "mode": "nonlinear"},
      "train": {...TrainConfig fields...},
      "adapt": {"train": {...}, "trainable": "codes_only"},
      "strategies": ["bias", "scale", "affine", "level", "bottle"],
      "modes": ["nonlinear", "linear"],
      "adapt_sizes": [10, 40, 160],
      "sizes": [1, 4, 16, 64],
      "size_divisor": 4,
      "checkpoint": "runs/train-001/model-seed0.json"
    }

Strategy sizes default to the standard sizes divided by ``size_divisor``
with the bottleneck width set to half the hidden width; ``strategy_sizes``
overrides them per strategy.

Seeds come from the command line. Each seed fixes network initialization,
minibatch order and adaptation initialization for one run; the dataset is
shared by every cell of an invocation.
"""

from __future__ import annotations

import csv
import io
import json
import time
from fractions import Fraction
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .model import (
    STRATEGIES,
    ConfigError,
    InjectionMode,
    NetworkConfig,
    Strategy,
    build_network,
    count_params,
    forward_batch,
    load_network,
    register_speaker,
    save_network,
)
from .synthgen import GenConfig, SpeakerDataset, generate, load_dataset
from .training import (
    AdaptConfig,
    TrainConfig,
    adapt_speaker,
    gradcheck,
    analytic_gradients,
    compare_gradients,
    randomize_parameters,
    rmse,
    train_multispeaker,
)

REPORT_FORMAT = "spkcodes-report/1"
DEFAULT_STRATEGIES = ("bias", "scale", "affine", "level", "bottle")
DEFAULT_MODES = ("nonlinear", "linear")
GRADCHECK_TOL = 1e-5

_SPEC_KEYS = {
    "data", "network", "train", "adapt", "strategies", "modes", "adapt_sizes",
    "sizes", "size_divisor", "strategy_sizes", "checkpoint",
}
_NETWORK_KEYS = {"hidden_width", "depth", "strategy", "mode", "layers", "activations"}


@dataclass
class ExperimentSpec:
    data: dict
    network: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    strategies: list[str] = field(default_factory=lambda: list(DEFAULT_STRATEGIES))
    modes: list[str] = field(default_factory=lambda: list(DEFAULT_MODES))
    adapt_sizes: list[int] = field(default_factory=lambda: [10, 40, 160])
    sizes: list[int] = field(default_factory=lambda: [1, 4, 16, 64])
    size_divisor: int = 4
    strategy_sizes: dict = field(default_factory=dict)
    checkpoint: str | list[str] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        unknown = set(d) - _SPEC_KEYS
        if unknown:
            raise ConfigError(f"unknown experiment field(s): {', '.join(sorted(unknown))}")
        if "data" not in d:
            raise ConfigError("missing field 'data'")
        data = d["data"]
        if not isinstance(data, dict) or not ({"path", "gen"} & set(data)):
            raise ConfigError("field 'data' needs either 'path' or 'gen'")
        net = dict(d.get("network", {}))
        bad = set(net) - _NETWORK_KEYS
        if bad:
            raise ConfigError(f"unknown network field(s): {', '.join(sorted(bad))}")
        spec = cls(data=data, network=net)
        try:
            if "train" in d:
                spec.train = TrainConfig(**d["train"])
            if "adapt" in d:
                spec.adapt = AdaptConfig(**d["adapt"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        for key in ("strategies", "modes", "adapt_sizes", "sizes", "size_divisor",
                    "strategy_sizes", "checkpoint"):
            if key in d:
                setattr(spec, key, d[key])
        for s in spec.strategies:
            if s not in STRATEGIES or s == "none":
                raise ConfigError(f"unknown strategy {s!r}")
        for m in spec.modes:
            if m not in {i.value for i in InjectionMode}:
                raise ConfigError(f"unknown injection mode {m!r}")
        return spec


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentSpec.from_dict(doc)


def gen_config_from(d: dict, seed: int | None = None) -> GenConfig:
    names = [f.name for f in fields(GenConfig)]
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown dataset field(s): {', '.join(sorted(unknown))}")
    missing = [n for n in names if n != "seed" and n not in d]
    if missing:
        raise ConfigError(f"missing dataset field(s): {', '.join(missing)}")
    d = dict(d)
    if seed is not None:
        d["seed"] = seed
    elif "seed" not in d:
        raise ConfigError("missing dataset field(s): seed (give it in the config or via --seed)")
    try:
        return GenConfig(**d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def resolve_dataset(spec: ExperimentSpec, seeds: list[int]) -> SpeakerDataset:
    if "path" in spec.data:
        path = Path(spec.data["path"])
        if not (path / "meta.json").exists():
            raise ConfigError(f"no dataset at {path}")
        return load_dataset(path)
    gen = spec.data["gen"]
    return generate(gen_config_from(gen, None if "seed" in gen else seeds[0]))


def strategy_for(spec: ExperimentSpec, name: str, size: int | None = None) -> Strategy:
    width = int(spec.network.get("hidden_width", 32))
    if name in spec.strategy_sizes:
        st = Strategy(name, **spec.strategy_sizes[name])
    else:
        st = Strategy.standard(name, spec.size_divisor, bottleneck=max(1, width // 2))
    if size is not None:
        if name != "scale":
            raise ConfigError("code-size sweeps use the scale strategy")
        st = Strategy("scale", p=size)
    return st


def network_config(spec, ds: SpeakerDataset, strategy: Strategy, mode: str, seed: int) -> NetworkConfig:
    net = spec.network
    return NetworkConfig(
        input_dim=ds.config.input_dim,
        output_dim=ds.config.output_dim,
        hidden_width=int(net.get("hidden_width", 32)),
        depth=int(net.get("depth", 3)),
        strategy=strategy,
        mode=mode,
        layers=net.get("layers"),
        activations=net.get("activations"),
        seed=seed,
    )


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**cfg.to_dict(), "seed": seed})


def evaluate(predict, ds: SpeakerDataset, split: str, speakers, model_ids=None) -> dict:
    """Per-speaker RMSE and their mean for any ``predict(X, speaker_id)``.

    ``model_ids`` maps a data speaker to the id the predictor knows it by.
    """
    per = {}
    for spk in speakers:
        X, Y, _ = ds.select(split, spk)
        if X.shape[0] == 0:
            continue
        mid = spk if model_ids is None else model_ids[spk]
        per[spk] = rmse(predict(X, mid), Y)
    return {"per_speaker": per, "mean": float(np.mean(list(per.values()))) if per else float("nan")}


def _net_predictor(net):
    return lambda X, spk: forward_batch(net, X, spk)


def train_seen(ds: SpeakerDataset, spec: ExperimentSpec, strategy: Strategy, mode: str, seed: int):
    net = build_network(network_config(spec, ds, strategy, mode, seed))
    for spk in ds.seen:
        register_speaker(net, spk, copy_layers=False, seed=seed)
    net, history = train_multispeaker(net, ds, _with_seed(spec.train, seed))
    return net, history


def seen_metrics(net, ds) -> dict:
    pred = _net_predictor(net)
    return {f"{split}_rmse": evaluate(pred, ds, split, ds.seen)["mean"] for split in ("train", "valid", "test")}


def adapt_unseen(net, ds: SpeakerDataset, spec: ExperimentSpec, sizes, seed: int) -> dict:
    """Adapt every unseen speaker at every size; returns test RMSE per size."""
    cfg = spec.adapt
    if net.config.strategy.name == "full_finetune":
        cfg = AdaptConfig(cfg.train, "full_finetune_layers")
    cfg = AdaptConfig(_with_seed(cfg.train, seed), cfg.trainable, cfg.layer_k)
    out = {}
    for n in sizes:
        ids = {}
        for u in ds.unseen:
            Xa, Ya, _ = ds.select("adapt", u, limit=n)
            Xv, Yv, _ = ds.select("valid", u)
            ids[u] = f"{u}@{n}"
            adapt_speaker(net, ids[u], (Xa, Ya), cfg, valid=(Xv, Yv))
        res = evaluate(_net_predictor(net), ds, "test", ds.unseen, ids)
        out[str(n)] = {"test_rmse": res["mean"], "per_speaker": res["per_speaker"]}
    return out


def _cell(args) -> tuple[dict, float]:
    ds, spec, name, mode, seed, size, adapt_sizes = args
    t0 = time.perf_counter()
    cell = {"strategy": name, "mode": mode, "seed": seed}
    try:
        strategy = strategy_for(spec, name, size)
        cell["sizes"] = {k: v for k, v in strategy.to_dict().items() if k != "name"}
        net, history = train_seen(ds, spec, strategy, mode, seed)
        cell["params"] = count_params(net)
        cell["epochs_run"] = history.epochs_run
        cell["best_epoch"] = history.best_epoch
        cell["seen"] = seen_metrics(net, ds)
        if adapt_sizes:
            cell["adapted"] = adapt_unseen(net, ds, spec, adapt_sizes, seed)
        cell["status"] = "ok"
    except (ConfigError, ValueError, FloatingPointError) as exc:
        cell["status"] = "failed"
        cell["reason"] = f"{type(exc).__name__}: {exc}"
    return cell, time.perf_counter() - t0


def _map(fn, jobs, threads: int):
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def _median(values):
    values = [v for v in values if v is not None and np.isfinite(v)]
    return float(np.median(values)) if values else float("nan")


def run_compare(spec: ExperimentSpec, seeds: list[int], threads: int = 1) -> dict:
    if len(spec.strategies) < 1 or len(spec.strategies) * len(spec.modes) < 2:
        raise ConfigError("compare needs at least two strategy/mode cells")
    ds = resolve_dataset(spec, seeds)
    jobs = [(ds, spec, s, m, seed, None, spec.adapt_sizes)
            for s in spec.strategies for m in spec.modes for seed in seeds]
    results = _map(_cell, jobs, threads)
    cells = [c for c, _ in results]
    summary = []
    for s in spec.strategies:
        for m in spec.modes:
            group = [c for c in cells if c["strategy"] == s and c["mode"] == m and c["status"] == "ok"]
            row = {"strategy": s, "mode": m,
                   "seen_test_rmse": _median([c["seen"]["test_rmse"] for c in group])}
            for n in spec.adapt_sizes:
                row[f"adapt{n}_test_rmse"] = _median([c["adapted"][str(n)]["test_rmse"] for c in group])
            summary.append(row)
    return {
        "format": REPORT_FORMAT,
        "command": "compare",
        "dataset_checksum": ds.checksum,
        "dataset_config": ds.config.to_dict(),
        "network": spec.network,
        "train": spec.train.to_dict(),
        "adapt": spec.adapt.to_dict(),
        "seeds": list(seeds),
        "cells": cells,
        "summary": summary,
    }, [t for _, t in results]


def spearman(x, y) -> float:
    """Rank correlation; exact rational arithmetic when neither input has ties.

    With four points a single adjacent swap gives exactly -4/5, which a
    floating-point Pearson-of-ranks evaluates to -0.7999999999999999.
    """
    x, y = list(x), list(y)
    if len(set(x)) == len(x) and len(set(y)) == len(y):
        n = len(x)
        rx = {v: i for i, v in enumerate(sorted(x))}
        ry = {v: i for i, v in enumerate(sorted(y))}
        d2 = sum((rx[a] - ry[b]) ** 2 for a, b in zip(x, y))
        return float(1 - Fraction(6 * d2, n * (n * n - 1)))
    return float(spearmanr(x, y).statistic)


def run_sweep(spec: ExperimentSpec, seeds: list[int], threads: int = 1) -> dict:
    ds = resolve_dataset(spec, seeds)
    mode = spec.network.get("mode", "nonlinear")
    jobs = [(ds, spec, "scale", mode, seed, size, ()) for size in spec.sizes for seed in seeds]
    results = _map(_cell, jobs, threads)
    cells = [c for c, _ in results]
    medians = []
    for size in spec.sizes:
        vals = [c["seen"]["valid_rmse"] for c in cells if c["sizes"].get("p") == size and c["status"] == "ok"]
        medians.append(_median(vals))
    rho = spearman(spec.sizes, medians) if len(spec.sizes) > 1 else float("nan")
    return {
        "format": REPORT_FORMAT,
        "command": "sweep",
        "dataset_checksum": ds.checksum,
        "dataset_config": ds.config.to_dict(),
        "network": spec.network,
        "train": spec.train.to_dict(),
        "seeds": list(seeds),
        "sizes": list(spec.sizes),
        "cells": cells,
        "median_valid_rmse": medians,
        "spearman_size_vs_rmse": rho,
    }, [t for _, t in results]


def run_train(spec: ExperimentSpec, seeds: list[int], out: Path) -> dict:
    ds = resolve_dataset(spec, seeds)
    name = spec.network.get("strategy", "affine")
    strategy = Strategy(**name) if isinstance(name, dict) else strategy_for(spec, name)
    mode = spec.network.get("mode", "nonlinear")
    cells, timings = [], []
    for seed in seeds:
        t0 = time.perf_counter()
        net, history = train_seen(ds, spec, strategy, mode, seed)
        ckpt = out / f"model-seed{seed}.json"
        save_network(net, ckpt)
        (out / f"history-seed{seed}.csv").write_text(history.to_csv())
        cells.append({
            "strategy": strategy.name, "sizes": strategy.to_dict(), "mode": mode, "seed": seed,
            "status": "ok", "checkpoint": ckpt.name, "params": count_params(net),
            "epochs_run": history.epochs_run, "best_epoch": history.best_epoch,
            "seen": seen_metrics(net, ds),
        })
        timings.append(time.perf_counter() - t0)
    return {"format": REPORT_FORMAT, "command": "train", "dataset_checksum": ds.checksum,
            "seeds": list(seeds), "cells": cells}, timings


def _checkpoints(spec: ExperimentSpec) -> list[Path]:
    if spec.checkpoint is None:
        raise ConfigError("missing field 'checkpoint'")
    paths = [spec.checkpoint] if isinstance(spec.checkpoint, str) else list(spec.checkpoint)
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"checkpoint {p} does not exist")
    return [Path(p) for p in paths]


def run_adapt(spec: ExperimentSpec, seeds: list[int], out: Path) -> dict:
    ds = resolve_dataset(spec, seeds)
    cells, timings = [], []
    for path in _checkpoints(spec):
        for seed in seeds:
            t0 = time.perf_counter()
            net = load_network(path)
            adapted = adapt_unseen(net, ds, spec, spec.adapt_sizes, seed)
            name = f"{path.stem}-adapted-seed{seed}.json"
            save_network(net, out / name)
            cells.append({"checkpoint": path.name, "seed": seed, "status": "ok",
                          "adapted_checkpoint": name, "adapted": adapted})
            timings.append(time.perf_counter() - t0)
    return {"format": REPORT_FORMAT, "command": "adapt", "dataset_checksum": ds.checksum,
            "seeds": list(seeds), "cells": cells}, timings


def run_eval(spec: ExperimentSpec, seeds: list[int]) -> dict:
    ds = resolve_dataset(spec, seeds)
    cells, timings = [], []
    for path in _checkpoints(spec):
        t0 = time.perf_counter()
        net = load_network(path)
        pred = _net_predictor(net)
        cell = {"checkpoint": path.name, "status": "ok", "seen": evaluate(pred, ds, "test", ds.seen)}
        adapted = [s for s in net.speakers if "@" in s and s.split("@")[0] in ds.unseen]
        by_size: dict[str, dict] = {}
        for sid in adapted:
            base, n = sid.split("@")
            by_size.setdefault(n, {})[base] = sid
        cell["adapted"] = {
            n: evaluate(pred, ds, "test", sorted(ids), ids) for n, ids in sorted(by_size.items(), key=lambda kv: int(kv[0]))
        }
        cells.append(cell)
        timings.append(time.perf_counter() - t0)
    return {"format": REPORT_FORMAT, "command": "eval", "dataset_checksum": ds.checksum, "cells": cells}, timings


def run_gradcheck(seed: int = 0, inject_bug: bool = False, eps: float = 1e-6) -> dict:
    """Finite-difference check of every strategy in both injection modes (width 4, depth 2)."""
    rows = []
    for name in [s for s in STRATEGIES if s != "none"]:
        for mode in DEFAULT_MODES:
            st = Strategy.standard(name, 16, bottleneck=2)
            net = build_network(NetworkConfig(3, 2, 4, 2, st, mode, seed=seed))
            register_speaker(net, "a")
            register_speaker(net, "b")
            randomize_parameters(net, seed + 1)
            frame = (np.array([0.3, -0.5, 0.9]), np.array([0.1, -0.2]), "a")
            if inject_bug:
                grads = analytic_gradients(net, frame)
                key = next(iter(grads))
                g = grads[key].reshape(-1)
                j = int(np.argmax(np.abs(g)))
                g[j] = -g[j]
                res = compare_gradients(net, frame, grads, eps)
            else:
                res = gradcheck(net, frame, eps)
            rows.append({"strategy": name, "mode": mode, "groups": res["groups"], "max": res["max"],
                         "pass": bool(res["max"] < GRADCHECK_TOL)})
    return {"format": REPORT_FORMAT, "command": "gradcheck", "tolerance": GRADCHECK_TOL,
            "cells": rows, "pass": all(r["pass"] for r in rows)}


def run_bench(spec: ExperimentSpec | None, seeds: list[int], batch: int = 256, repeats: int = 20) -> dict:
    width = int(spec.network.get("hidden_width", 32)) if spec else 32
    depth = int(spec.network.get("depth", 3)) if spec else 3
    strategies = spec.strategies if spec else list(DEFAULT_STRATEGIES)
    modes = spec.modes if spec else list(DEFAULT_MODES)
    rows = []
    for name in strategies:
        for mode in modes:
            st = Strategy.standard(name, 4, bottleneck=max(1, width // 2))
            net = build_network(NetworkConfig(8, 6, width, depth, st, mode, seed=seeds[0]))
            register_speaker(net, "a")
            X = np.zeros((batch, 8))
            forward_batch(net, X, "a")
            t0 = time.perf_counter()
            for _ in range(repeats):
                forward_batch(net, X, "a")
            dt = (time.perf_counter() - t0) / repeats
            rows.append({"strategy": name, "mode": mode, "batch": batch,
                         "seconds_per_batch": dt, "frames_per_second": batch / dt})
    return {"format": REPORT_FORMAT, "command": "bench", "cells": rows}


# ---------------------------------------------------------------- report files


def new_run_dir(out: Path, command: str) -> Path:
    """Create ``out/<command>-NNN`` with the next free number; never reuses one."""
    out.mkdir(parents=True, exist_ok=True)
    n = 1
    while True:
        d = out / f"{command}-{n:03d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            n += 1


def flat_rows(report: dict) -> list[dict]:
    rows = []
    for c in report.get("cells", []):
        base = {k: c.get(k) for k in ("strategy", "mode", "seed", "checkpoint") if k in c}
        base["status"] = c.get("status", "ok")
        if "sizes" in c:
            base["sizes"] = " ".join(f"{k}={v}" for k, v in c["sizes"].items() if k != "name")
        if "params" in c:
            base.update({f"params_{k}": v for k, v in c["params"].items()})
        if "seen" in c:
            seen = c["seen"]
            metrics = {k: v for k, v in seen.items() if k.endswith("_rmse")} or {"test_rmse": seen["mean"]}
            rows.append({**base, "set": "seen", **metrics})
        for n, a in (c.get("adapted") or {}).items():
            rows.append({**base, "set": f"adapt{n}", "test_rmse": a.get("test_rmse", a.get("mean"))})
        if c.get("status") != "ok" and "reason" in c:
            rows.append({**base, "set": "", "reason": c["reason"]})
        if "groups" in c:
            rows.append({**base, "set": "", "max_rel_error": c["max"], "pass": c["pass"]})
        if "seconds_per_batch" in c:
            rows.append({**base, "set": "", "seconds_per_batch": c["seconds_per_batch"]})
    return rows


def to_csv(rows: list[dict]) -> str:
    cols: list[str] = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def text_table(report: dict) -> str:
    """Aligned table of per-(strategy, mode) medians with parameter counts."""
    if report["command"] == "sweep":
        header = ["p", "median_valid_rmse"]
        body = [[str(s), f"{m:.4f}"] for s, m in zip(report["sizes"], report["median_valid_rmse"])]
        footer = f"spearman(size, rmse) = {report['spearman_size_vs_rmse']:.3f}"
    elif report["command"] == "compare":
        sizes = [k for k in report["summary"][0] if k.startswith("adapt")] if report["summary"] else []
        header = ["strategy", "mode", "seen_test"] + [k.replace("_test_rmse", "") for k in sizes] + ["adapters", "per_spk"]
        body = []
        for row in report["summary"]:
            cell = next((c for c in report["cells"] if c["strategy"] == row["strategy"]
                         and c["mode"] == row["mode"] and "params" in c), {})
            params = cell.get("params", {})
            body.append([row["strategy"], row["mode"], f"{row['seen_test_rmse']:.4f}"]
                        + [f"{row[k]:.4f}" for k in sizes]
                        + [str(params.get("adapters", "-")), str(params.get("per_speaker", "-"))])
        footer = f"dataset {report['dataset_checksum'][:16]}  seeds {report['seeds']}"
    else:
        rows = flat_rows(report)
        if not rows:
            return ""
        header = list(rows[0].keys())
        body = [[_fmt(r.get(k)) for k in header] for r in rows]
        footer = ""
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in body]
    if footer:
        lines.append(footer)
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return "" if v is None else str(v)


def write_files(run: Path, report: dict, timings: list[float] | None = None) -> None:
    (run / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    (run / "summary.csv").write_text(to_csv(flat_rows(report)))
    (run / "table.txt").write_text(text_table(report))
    if timings is not None:
        (run / "timings.csv").write_text(
            "cell,seconds\n" + "".join(f"{i},{t:.3f}\n" for i, t in enumerate(timings))
        )


def write_report(out: Path, command: str, report: dict, timings: list[float] | None = None) -> Path:
    """Write a report into a fresh run directory; wall-times go to timings.csv only."""
    run = new_run_dir(out, command)
    write_files(run, report, timings)
    return run
