"""Synthetic benchmark: generate, preprocess, train transformer and RNN, compare.

    python scripts/run_benchmark.py --out bench --seed 0
    python scripts/run_benchmark.py --out bench --skip-rnn --epochs 5
"""
import argparse
import json
import time
from pathlib import Path

from enginefault.cli import load_config, run


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="bench")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--config", help="optional YAML config layered under the flags")
    ap.add_argument("--skip-rnn", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--out", str(out), "--seed", str(args.seed), "--epochs", str(args.epochs)]
    base = load_config(args.config) if args.config else {}
    timings = {}
    for cmd in ("generate", "preprocess"):
        t0 = time.perf_counter()
        if run(cmd, base, common) != 0:
            raise SystemExit(f"{cmd} failed")
        timings[cmd] = time.perf_counter() - t0

    results = {}
    for kind in ("transformer",) if args.skip_rnn else ("transformer", "rnn"):
        tree = {**base, "paths": {**base.get("paths", {}), "run": f"run_{kind}"}}
        t0 = time.perf_counter()
        if run("train", tree, common + ["--model", kind]) != 0:
            raise SystemExit(f"train {kind} failed")
        timings[f"train_{kind}"] = time.perf_counter() - t0
        report = json.loads((out / f"run_{kind}" / "report.json").read_text())
        results[kind] = {
            "test_window_accuracy": report["window_accuracy"],
            "test_step_accuracy": report["step_accuracy"],
            "best_epoch": report["best_epoch"],
            "median_latency": report["latency"]["median"],
        }

    summary = {"results": results, "seconds": {k: round(v, 1) for k, v in timings.items()}}
    (out / "benchmark.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
