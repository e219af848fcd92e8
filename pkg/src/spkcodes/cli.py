"""``spkcodes`` command line.

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments as ex
from .model import ConfigError
from .synthgen import generate, save_dataset

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spkcodes", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate a synthetic multi-speaker dataset",
        "train": "train a multi-speaker model on the seen speakers",
        "adapt": "adapt a trained checkpoint to every unseen speaker",
        "eval": "report per-speaker test RMSE of checkpoints",
        "sweep": "scaling-code size sweep",
        "compare": "strategy x injection-mode comparison grid",
        "gradcheck": "finite-difference gradient check of every strategy",
        "bench": "forward-pass timing per strategy",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path, required=name not in ("gradcheck", "bench"))
        sp.add_argument("--out", type=Path, default=Path("runs"))
        sp.add_argument("--seed", type=_seed_list, default=None,
                        help="comma- or space-separated seeds (default 0)")
        sp.add_argument("--threads", type=int, default=1)
        if name == "gradcheck":
            sp.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)
    return p


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise ConfigError(f"config {path} does not exist")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _gen_data(args) -> int:
    doc = _load_json(args.config)
    if "data" in doc:
        doc = doc["data"].get("gen", doc["data"])
    seed = args.seed[0] if args.seed else None
    cfg = ex.gen_config_from(doc, seed)
    args.out.mkdir(parents=True, exist_ok=True)
    if (args.out / "meta.json").exists():
        raise ConfigError(f"{args.out} already holds a dataset; refusing to overwrite")
    ds = generate(cfg)
    sums = save_dataset(ds, args.out)
    manifest = {"checksums": sums, "frames": ds.counts()}
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"dataset {sums['dataset']} -> {args.out}")
    return EXIT_OK


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    seeds = args.seed or [0]
    try:
        if args.command == "gen-data":
            return _gen_data(args)
        if args.command == "gradcheck":
            report = ex.run_gradcheck(seeds[0], inject_bug=args.inject_bug)
            run_dir = ex.write_report(args.out, "gradcheck", report)
            for row in report["cells"]:
                flag = "ok" if row["pass"] else "FAIL"
                print(f"{row['strategy']:14s} {row['mode']:10s} max rel err {row['max']:.2e}  {flag}")
            print(f"report -> {run_dir}")
            return EXIT_OK if report["pass"] else EXIT_RUNTIME
        spec = ex.load_spec(args.config) if args.config else None
        if args.command == "bench":
            report, timings = ex.run_bench(spec, seeds), None
        elif args.command in ("train", "adapt"):
            run_dir = ex.new_run_dir(args.out, args.command)
            fn = ex.run_train if args.command == "train" else ex.run_adapt
            report, timings = fn(spec, seeds, run_dir)
            ex.write_files(run_dir, report, timings)
            print(ex.text_table(report), end="")
            print(f"report -> {run_dir}")
            return EXIT_OK
        elif args.command == "eval":
            report, timings = ex.run_eval(spec, seeds)
        elif args.command == "sweep":
            report, timings = ex.run_sweep(spec, seeds, args.threads)
        else:
            report, timings = ex.run_compare(spec, seeds, args.threads)
        run_dir = ex.write_report(args.out, args.command, report, timings)
        print(ex.text_table(report), end="")
        print(f"report -> {run_dir}")
        return EXIT_OK
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
