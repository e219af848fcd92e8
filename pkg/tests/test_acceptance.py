"""Acceptance criteria 1-11, each at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line (also collected into the pytest
terminal summary). The statistical criteria (7, 8, 9) train desk-scale
models with the preset in ``configs/desk.json`` and take a few minutes.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from spkcodes.cli import run
from spkcodes.experiments import (
    ExperimentSpec,
    adapt_unseen,
    resolve_dataset,
    run_compare,
    run_sweep,
    seen_metrics,
    strategy_for,
    train_seen,
)
from spkcodes.layers import (
    BiasAdapter,
    BottleneckLayer,
    DenseLayer,
    ScalingAdapter,
    SpeakerCode,
    bottleneck_forward,
    dense_forward,
    factored_forward,
    fold_lhuc,
)
from spkcodes.model import (
    FOLDABLE,
    NetworkConfig,
    Strategy,
    build_network,
    count_params,
    fold_speaker,
    forward,
    forward_batch,
    register_speaker,
)
from spkcodes.numeric import Rng
from spkcodes.training import (
    AdaptConfig,
    TrainConfig,
    adapt_speaker,
    gradcheck,
    parameter_checksum,
    randomize_parameters,
)

DESK = json.loads((Path(__file__).resolve().parents[1] / "configs" / "desk.json").read_text())
SEEDS = [0, 1, 2]
ACTS = ("sigmoid", "linear")
CODE_STRATEGIES = ("bias", "scale", "affine", "level", "bottle", "lhuc")


def record(log, n, title, ok, detail, elapsed, limit):
    within = elapsed < limit
    status = "PASS" if ok and within else "FAIL"
    line = f"{status} criterion {n:2d} {title}: {detail} [{elapsed:.2f}s / limit {limit:g}s]"
    print(line)
    log.append((n, line))
    assert ok, line
    assert within, line


def desk_spec(**overrides) -> ExperimentSpec:
    doc = json.loads(json.dumps(DESK))
    gen_mode = overrides.pop("data_mode", None)
    if gen_mode:
        doc["data"]["gen"]["mode"] = gen_mode
    doc.update(overrides)
    return ExperimentSpec.from_dict(doc)


# ---------------------------------------------------------------- 1


def test_criterion_01_lhuc_fold(acceptance_log):
    t0 = time.perf_counter()
    r = Rng(101)
    worst = 0.0
    for i in range(100):
        m = 2 + i % 7
        act = ACTS[i % 2]
        W, a, h, c = r.normal((m, m)), r.normal(m), r.normal(m), r.normal(m)
        folded = dense_forward(DenseLayer(fold_lhuc(W, a), c, act), h)[0]
        two_step = dense_forward(DenseLayer(W, c, act), a * h)[0]
        worst = max(worst, float(np.max(np.abs(folded - two_step))))
    record(acceptance_log, 1, "LHUC folding equivalence", worst <= 1e-12,
           f"max |diff| {worst:.2e} <= 1e-12 over 100 instances", time.perf_counter() - t0, 1.0)


# ---------------------------------------------------------------- 2


def test_criterion_02_neutral_adapters(acceptance_log):
    t0 = time.perf_counter()
    r = Rng(202)
    worst = 0.0
    for i in range(100):
        m, d, p, q = 1 + i % 8, 1 + (i * 3) % 8, 1 + i % 4, 1 + i % 3
        act = ACTS[i % 2]
        layer = DenseLayer(r.normal((m, d)), r.normal(m), act)
        h = r.normal(d)
        W_A = r.normal((m, p), std=0.3)
        W_A[:, 0] = 1.0
        e1 = np.eye(p)[0]
        out, _ = factored_forward(layer, ScalingAdapter(W_A), BiasAdapter(r.normal((m, q))),
                                  SpeakerCode(s_A=e1, s_b=np.zeros(q)), h)
        worst = max(worst, float(np.max(np.abs(out - dense_forward(layer, h)[0]))))

        n = 1 + i % 4
        hb = r.normal(m)
        c = r.normal(m)
        bl = BottleneckLayer(r.normal((m, n)), r.normal((n, m)), c, act)
        out, _ = bottleneck_forward(bl, ScalingAdapter(np.zeros((n, p))), BiasAdapter(r.normal((m, q))),
                                    SpeakerCode(s_A=r.normal(p), s_b=np.zeros(q)), hb)
        residual = dense_forward(DenseLayer(np.eye(m), c, act), hb)[0]
        worst = max(worst, float(np.max(np.abs(out - residual))))
        if act == "linear":
            bl0 = BottleneckLayer(bl.U, bl.V, np.zeros(m), "linear")
            out, _ = bottleneck_forward(bl0, ScalingAdapter(np.zeros((n, p))), None,
                                        SpeakerCode(s_A=r.normal(p)), hb)
            worst = max(worst, float(np.max(np.abs(out - hb))))
    record(acceptance_log, 2, "neutral-adapter reduction", worst <= 1e-12,
           f"max |diff| {worst:.2e} <= 1e-12 over 100 factored + 100 bottleneck instances",
           time.perf_counter() - t0, 1.0)


# ---------------------------------------------------------------- 3


def test_criterion_03_gradient_oracle(acceptance_log):
    t0 = time.perf_counter()
    worst, worst_cell, missing = 0.0, "", []
    for name in CODE_STRATEGIES + ("full_finetune",):
        for mode in ("nonlinear", "linear"):
            st = Strategy.standard(name, 16, bottleneck=2)
            net = build_network(NetworkConfig(4, 3, 4, 2, st, mode, seed=3))
            register_speaker(net, "a")
            register_speaker(net, "b")
            randomize_parameters(net, 31)
            frame = (Rng(7).normal(4), Rng(8).normal(3), "b")
            res = gradcheck(net, frame, eps=1e-6)
            want = {"shared", "speaker_layers"} if name == "full_finetune" else {"shared", "codes"}
            if name not in ("lhuc", "full_finetune"):
                want.add("adapters")
            if set(res["groups"]) != want:
                missing.append(f"{name}/{mode}")
            if res["max"] > worst:
                worst, worst_cell = res["max"], f"{name}/{mode}"
    ok = worst < 1e-5 and not missing
    detail = f"max relative error {worst:.2e} < 1e-5 (worst {worst_cell}), 14 strategy/mode cells"
    if missing:
        detail += f"; missing groups in {missing}"
    record(acceptance_log, 3, "gradient oracle", ok, detail, time.perf_counter() - t0, 30.0)


# ---------------------------------------------------------------- 4


def test_criterion_04_fold_soundness(acceptance_log):
    t0 = time.perf_counter()
    worst, cells = 0.0, 0
    for name in FOLDABLE:
        if name == "none":
            continue
        for mode in ("nonlinear", "linear"):
            net = build_network(NetworkConfig(5, 3, 8, 3, Strategy.standard(name, 16), mode, seed=4))
            register_speaker(net, "a")
            register_speaker(net, "b")
            randomize_parameters(net, 41, 0.7)
            X = Rng(42).normal((100, 5))
            folded = fold_speaker(net, "a")
            worst = max(worst, float(np.max(np.abs(forward_batch(folded, X, None) - forward_batch(net, X, "a")))))
            cells += 1
    record(acceptance_log, 4, "fold_speaker soundness", worst <= 1e-12,
           f"max |diff| {worst:.2e} <= 1e-12 on 100 inputs x {cells} strategy/mode cells",
           time.perf_counter() - t0, 5.0)


# ---------------------------------------------------------------- 5


def test_criterion_05_adaptation_freeze(acceptance_log):
    t0 = time.perf_counter()
    broken = []
    for name in CODE_STRATEGIES:
        for mode in ("nonlinear", "linear"):
            net = build_network(NetworkConfig(5, 3, 8, 2, Strategy.standard(name, 16, bottleneck=4), mode, seed=5))
            for s in ("a", "b", "c"):
                register_speaker(net, s)
            randomize_parameters(net, 51, 0.5)
            shared = parameter_checksum(net.params)
            others = parameter_checksum(net.registry.codes)
            X = Rng(52).normal((20, 5))
            Y = Rng(53).normal((20, 3))
            adapt_speaker(net, "new", (X, Y), AdaptConfig(TrainConfig(epochs=10, batch_size=8, lr=1e-2)))
            before_new = {k: v[:3] for k, v in net.registry.codes.items()}
            if parameter_checksum(net.params) != shared or parameter_checksum(before_new) != others:
                broken.append(f"{name}/{mode}")
    record(acceptance_log, 5, "adaptation freeze", not broken,
           "shared parameters and other speakers' codes bit-identical for "
           f"{len(CODE_STRATEGIES) * 2} strategy/mode cells" + (f"; changed: {broken}" if broken else ""),
           time.perf_counter() - t0, 10.0)


# ---------------------------------------------------------------- 6 and 11 share one comparison run


@pytest.fixture(scope="module")
def determinism_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("determinism")
    doc = json.loads(json.dumps(DESK))
    doc["data"]["gen"].update(num_seen_speakers=6, train_frames=100)
    doc["train"]["epochs"] = 12
    doc["adapt"]["train"]["epochs"] = 12
    cfg = root / "spec.json"
    cfg.write_text(json.dumps(doc))
    t0 = time.perf_counter()
    codes = [run(["compare", "--config", str(cfg), "--out", str(root / "runs"), "--seed", "0"]) for _ in range(2)]
    return root / "runs", codes, time.perf_counter() - t0


def test_criterion_06_determinism(acceptance_log, determinism_runs):
    out, codes, elapsed = determinism_runs
    a = (out / "compare-001" / "report.json").read_bytes()
    b = (out / "compare-002" / "report.json").read_bytes()
    same_csv = (out / "compare-001" / "summary.csv").read_bytes() == (out / "compare-002" / "summary.csv").read_bytes()
    cells = len(json.loads(a)["cells"])
    ok = codes == [0, 0] and a == b and same_csv
    record(acceptance_log, 6, "determinism", ok,
           f"two compare runs ({cells} cells each) gave byte-identical report.json and summary.csv",
           elapsed, 120.0)


# ---------------------------------------------------------------- 7


def test_criterion_07_code_size_sweep(acceptance_log):
    t0 = time.perf_counter()
    report, _ = run_sweep(desk_spec(data_mode="scale"), SEEDS)
    rho = report["spearman_size_vs_rmse"]
    medians = ", ".join(f"p={s}: {m:.4f}" for s, m in zip(report["sizes"], report["median_valid_rmse"]))
    record(acceptance_log, 7, "code-size sweep trend", rho <= -0.8,
           f"spearman {rho:.3f} <= -0.8 (median valid RMSE {medians})", time.perf_counter() - t0, 300.0)


# ---------------------------------------------------------------- 8


def test_criterion_08_bias_alone_is_poor_in_linear_mode(acceptance_log):
    t0 = time.perf_counter()
    spec = desk_spec(data_mode="scale", strategies=["bias", "scale", "affine"], modes=["linear"], adapt_sizes=[])
    report, _ = run_compare(spec, SEEDS)
    med = {row["strategy"]: row["seen_test_rmse"] for row in report["summary"]}
    budgets = {c["strategy"]: c["params"]["per_speaker"] for c in report["cells"]}
    ok = med["bias"] > med["affine"] and med["bias"] > med["scale"] and len(set(budgets.values())) == 1
    record(acceptance_log, 8, "bias-only is poor in linear mode", ok,
           f"median test RMSE bias {med['bias']:.4f} > affine {med['affine']:.4f} and scale {med['scale']:.4f}; "
           f"code size {budgets['bias']} for all", time.perf_counter() - t0, 300.0)


# ---------------------------------------------------------------- 9


def test_criterion_09_adaptation_gap(acceptance_log):
    t0 = time.perf_counter()
    spec = desk_spec()
    ds = resolve_dataset(spec, SEEDS)
    strategy = strategy_for(spec, "affine")
    seen, adapted = [], {n: [] for n in spec.adapt_sizes}
    for seed in SEEDS:
        net, _ = train_seen(ds, spec, strategy, "nonlinear", seed)
        seen.append(seen_metrics(net, ds)["test_rmse"])
        for n, res in adapt_unseen(net, ds, spec, spec.adapt_sizes, seed).items():
            adapted[int(n)].append(res["test_rmse"])
    seen_med = float(np.median(seen))
    ad_med = {n: float(np.median(v)) for n, v in adapted.items()}
    ok = all(v >= seen_med for v in ad_med.values())
    sizes = ", ".join(f"n={n}: {v:.4f}" for n, v in ad_med.items())
    record(acceptance_log, 9, "adaptation harder than multi-speaker", ok,
           f"median adapted-unseen RMSE ({sizes}) >= seen {seen_med:.4f}", time.perf_counter() - t0, 600.0)


# ---------------------------------------------------------------- 10


def _affinity(mode, probes=50, seed=10):
    r = Rng(seed)
    net = build_network(NetworkConfig(5, 3, 6, 2, Strategy("bias", q=4), mode, seed=seed))
    randomize_parameters(net, seed + 1)
    register_speaker(net, "a")
    x, delta = r.normal(5), r.normal(4)
    ref, worst = None, 0.0
    for _ in range(probes):
        s = r.normal(4)
        net.registry.codes["s_b"][0] = s
        y0 = forward(net, x, "a")
        net.registry.codes["s_b"][0] = s + delta
        diff = forward(net, x, "a") - y0
        ref = diff if ref is None else ref
        worst = max(worst, float(np.max(np.abs(diff - ref))))
    return worst


def test_criterion_10_linear_injection_affinity(acceptance_log):
    t0 = time.perf_counter()
    lin, nonlin = _affinity("linear"), _affinity("nonlinear")
    record(acceptance_log, 10, "linear-injection affinity", lin <= 1e-10 and nonlin > 1e-3,
           f"linear max deviation {lin:.2e} <= 1e-10; nonlinear {nonlin:.2e} > 1e-3 (50 probes)",
           time.perf_counter() - t0, 1.0)


# ---------------------------------------------------------------- 11


def _reference_counts(name, mode, m=1024, L=5, d_in=8, d_out=6):
    """Hand arithmetic for the standard sizes on an m-wide net with L hidden layers."""
    dense = (m * d_in + m) + (L - 1) * (m * m + m) + (d_out * m + d_out)
    if name in ("bias", "scale"):
        rows = L * m if mode == "nonlinear" else d_out
        return {"shared": dense, "adapters": rows * 64, "per_speaker": 64}
    if name == "affine":
        rows = L * m if mode == "nonlinear" else d_out
        return {"shared": dense, "adapters": rows * (32 + 32), "per_speaker": 64}
    if name == "level":
        adapters = m * 32 + m * 32 if mode == "nonlinear" else m * 32 + d_out * 32
        return {"shared": dense, "adapters": adapters, "per_speaker": 64}
    if name == "bottle":
        per_slot = m * 512 + 512 * m + 512 * 64 + m * 32
        if mode == "nonlinear":  # slots 1..L-1 (slot 0 maps d_in -> m, no residual)
            shared = (m * d_in + m) + (L - 1) * m + (d_out * m + d_out)
            return {"shared": shared, "adapters": (L - 1) * per_slot, "per_speaker": 96}
        return {"shared": dense + m, "adapters": per_slot, "per_speaker": 96}
    if name == "lhuc":
        return {"shared": dense, "adapters": 0, "per_speaker": L * m if mode == "nonlinear" else d_out}
    raise AssertionError(name)


def test_criterion_11_parameter_accounting(acceptance_log, determinism_runs):
    t0 = time.perf_counter()
    bad = []
    for name in ("bias", "scale", "affine", "level", "bottle", "lhuc"):
        for mode in ("nonlinear", "linear"):
            cfg = NetworkConfig(8, 6, 1024, 5, Strategy.standard(name), mode)
            if count_params(cfg) != _reference_counts(name, mode):
                bad.append(f"{name}/{mode}: {count_params(cfg)} vs {_reference_counts(name, mode)}")
    small = build_network(NetworkConfig(4, 2, 3, 1, Strategy("none")))
    hand = {"shared": (3 * 4 + 3) + (2 * 3 + 2), "adapters": 0, "per_speaker": 0}
    if count_params(small) != hand:
        bad.append(f"width-3: {count_params(small)}")
    out, _, _ = determinism_runs
    report = json.loads((out / "compare-001" / "report.json").read_text())
    unrecorded = [c["strategy"] for c in report["cells"] if set(c.get("params", {})) != {"shared", "adapters", "per_speaker"}]
    if unrecorded:
        bad.append(f"cells without counts: {unrecorded}")
    record(acceptance_log, 11, "parameter accounting", not bad,
           "m=1024 standard configs (12 strategy/mode cells) and the width-3 net match hand counts; "
           f"{len(report['cells'])} report cells carry counts" + (f"; mismatches {bad}" if bad else ""),
           time.perf_counter() - t0, 1.0)
