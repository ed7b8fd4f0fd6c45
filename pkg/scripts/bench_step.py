"""Time one training step and one evaluation pass of the default model.

    python scripts/bench_step.py --dtype float32 --batch 16
"""
import argparse
import time

import numpy as np

from pdhybrid import autodiff as ad
from pdhybrid.model import HybridConfig, HybridModel
from pdhybrid.optim import OptimizerState, optimizer_step

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args()
    dtype = np.dtype(args.dtype).type
    model = HybridModel.init(HybridConfig(), seed=0, dtype=dtype)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.batch, 32, 512)).astype(dtype)
    y = (rng.random(args.batch) < 0.5).astype(dtype)
    opt, params = OptimizerState("adam", 1e-3), model.parameter_list()
    steps = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        with ad.Tape() as tape:
            loss = ad.bce_loss(model.forward(ad.Tensor(x), mode="train", rng=rng), ad.Tensor(y))
        ad.backward(loss, tape)
        optimizer_step(params, opt)
        steps.append(time.perf_counter() - t0)
    t0 = time.perf_counter()
    model.predict_proba(x)
    ev = time.perf_counter() - t0
    print(f"{args.dtype} batch {args.batch}: train step {min(steps):.3f} s "
          f"({1e3 * min(steps) / args.batch:.1f} ms/segment), eval {1e3 * ev / args.batch:.1f} ms/segment")
