"""Stage-2 keypoint-loss weight sweep from one shared stage-1 checkpoint.

Selection uses validation balanced accuracy only; test numbers are printed
so the choice can be audited, not to make it.

    python3 scripts/lambda_sweep.py --lambdas 1 10 100 1000
"""

import argparse
import time

import numpy as np

from aesnet import dataset as D
from aesnet import explain as X
from aesnet import network as N
from aesnet import retrieval as R
from aesnet import training as TR


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--stage1", type=int, default=120)
    ap.add_argument("--stage2", type=int, default=40)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[1.0, 10.0, 100.0, 1000.0])
    ap.add_argument("--checkpoint", help="reuse a stage-1 checkpoint")
    args = ap.parse_args()
    samples = D.generate_synth(D.SynthConfig(count=250, seed=args.seed))
    tr, va, te = D.split(samples, D.SplitSpec(seed=args.seed))
    size = (96, 64)
    A, V, E = (TR.prepare(s, size) for s in (tr, va, te))
    t = time.time()
    if args.checkpoint:
        m1 = N.load(args.checkpoint)
    else:
        cfg = TR.TrainConfig(stage1_epochs=args.stage1, stage2_epochs=args.stage2, seed=args.seed)
        m1, _ = TR.train_stage1(N.build(N.NetworkConfig(seed=args.seed)), A, V, cfg)
    print(f"stage 1: val mse {TR.evaluate(m1, V)['mse']:.2e} ({time.time() - t:.0f}s)", flush=True)
    for lk in args.lambdas:
        m = N.from_bytes(N.to_bytes(m1))
        cfg = TR.TrainConfig(stage1_epochs=args.stage1, stage2_epochs=args.stage2, lambda_k=lk, seed=args.seed)
        m, rec = TR.train_stage2(m, A, V, cfg)
        best = max(rec, key=lambda r: (r.val_bacc, r.val_acc, -r.epoch))
        ev = TR.evaluate(m, E)
        index = R.build_index(m, tr + va)
        adj = R.adjacency_score(index, zip(ev["embeddings"], [s.ordinal_label for s in te]), 3)
        frac = np.array([X.positive_mass_fraction(X.lrp(m, img), D.breast_regions(s.geometry, *size))
                         for s, img in zip(te, E.images)])
        print(f"lambda_k={lk:g}: val bacc {best.val_bacc:.3f} mse {best.val_mse:.2e} (epoch {best.epoch}) | "
              f"test bacc {ev['bacc']:.3f} mse {ev['mse']:.2e} adjacency {adj:.3f} "
              f"lrp>=0.6 {np.mean(frac >= 0.6):.2f}", flush=True)


if __name__ == "__main__":
    main()
