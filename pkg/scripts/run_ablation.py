"""Five-architecture ablation on a preprocessed corpus (see run_pipeline.py for producing one).

    python scripts/run_ablation.py --data runs/synth/seg --out runs/synth/ablation
"""
import argparse

from pdhybrid.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=2)
    args = p.parse_args()
    raise SystemExit(main([
        "-v", "ablation", "--data", args.data, "--out", args.out,
        "--set", "learning_rate=0.001", "--set", "dtype=float32", "--set", "seed=7", "--set", "split_seed=7",
        "--set", f"max_epochs={args.epochs}", "--set", f"early_stop_patience={args.epochs}",
    ]))
