"""Test balanced accuracy of the four SVM rows as keypoint annotation noise grows.

    python3 scripts/svm_noise_sweep.py --seed 42 --noise 0 1 2 4 8
"""

import argparse

from aesnet import cli
from aesnet import dataset as D


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--count", type=int, default=250)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 1.0, 2.0, 4.0, 8.0])
    args = ap.parse_args()
    samples = D.generate_synth(D.SynthConfig(count=args.count, seed=args.seed))
    for px in args.noise:
        cfg = cli.load_config(None, args.seed)
        cfg.get("svm").noise_px = px
        train, val, test = D.split(samples, cfg.get("split"))
        rows = cli._run_baselines(cfg, train + val, test, None)
        print(f"noise {px:4.1f}px  " + "  ".join(f"{r['model']} {r['balanced_accuracy']:.3f}" for r in rows),
              flush=True)


if __name__ == "__main__":
    main()
