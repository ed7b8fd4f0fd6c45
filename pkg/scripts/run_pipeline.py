"""Synthetic corpus -> preprocessing -> 10-fold and leave-one-subject-out cross-validation.

Runs the same schedule as the acceptance suite through the command-line entry
points and leaves every report under ``--out``.

    python scripts/run_pipeline.py --out runs/synth --separation 2.0
"""
import argparse
import time
from pathlib import Path

from pdhybrid.cli import main

SCHEDULE = ["--set", "learning_rate=0.001", "--set", "dtype=float32", "--set", "seed=7", "--set", "split_seed=7"]


def run(argv: list[str]) -> None:
    t0 = time.perf_counter()
    code = main(["-v", *argv])
    print(f"[{argv[0]}] exit {code} in {time.perf_counter() - t0:.0f} s")
    if code:
        raise SystemExit(code)


def parse() -> argparse.Namespace:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--kfold-epochs", type=int, default=2)
    p.add_argument("--loocv-epochs", type=int, default=1)
    p.add_argument("--skip-loocv", action="store_true")
    return p.parse_args()


if __name__ == "__main__":
    args = parse()
    args.out.mkdir(parents=True, exist_ok=True)
    spec = args.out / "spec.txt"
    spec.write_text(f"n_pd = 20\nn_hc = 20\nduration_s = 60.0\nseed = {args.seed}\nseparation = {args.separation}\n")
    run(["synth", "--spec", str(spec), "--out", str(args.out / "raw")])
    run(["preprocess", "--in", str(args.out / "raw" / "manifest.json"), "--out", str(args.out / "seg")])
    k = args.kfold_epochs
    run(["crossval", "--data", str(args.out / "seg"), *SCHEDULE, "--set", f"max_epochs={k}",
         "--set", f"early_stop_patience={k}", "--out", str(args.out / "kfold10")])
    if not args.skip_loocv:
        e = args.loocv_epochs
        run(["crossval", "--data", str(args.out / "seg"), "--strategy", "loocv", *SCHEDULE,
             "--set", f"max_epochs={e}", "--set", f"early_stop_patience={e}", "--out", str(args.out / "loocv")])
