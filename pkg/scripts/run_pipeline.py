"""Run gen-data -> train -> baseline -> eval -> retrieve -> explain with one config.

    python3 scripts/run_pipeline.py --config configs/seed42.ini --out runs/seed42
"""

import argparse
import json
import sys
import time
from pathlib import Path

from aesnet import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="configs/seed42.ini")
    ap.add_argument("--out", default="runs/seed42")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    out = Path(args.out)
    common = ["--config", args.config] + (["--seed", str(args.seed)] if args.seed is not None else [])
    d, m, b = str(out / "data"), str(out / "train"), str(out / "baseline")
    steps = [
        ["gen-data", "--out", d],
        ["train", "--data", d, "--out", m],
        ["baseline", "--data", d, "--model", m, "--out", b],
        ["eval", "--data", d, "--model", m, "--baseline", b, "--out", str(out / "eval")],
        ["retrieve", "--data", d, "--model", m, "--out", str(out / "retrieve")],
        ["explain", "--data", d, "--model", m, "--out", str(out / "explain")],
    ]
    for step in steps:
        t = time.time()
        code = cli.main(step + common + ["-v"])
        print(f"{step[0]}: exit {code} in {time.time() - t:.0f}s", flush=True)
        if code:
            return code
    print((out / "eval" / "report.txt").read_text())
    print("adjacency", json.loads((out / "retrieve" / "retrieval.json").read_text())["adjacency"])
    print("lrp share", json.loads((out / "explain" / "explain.json").read_text())["share_above_threshold"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
