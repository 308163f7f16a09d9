#!/usr/bin/env python3
"""Drive the full reference pipeline through the CLI into runs/reference/.

build-toy -> distill -> calibrate -> quantize -> eval, all from
configs/reference.toml. Every artifact lands under --out.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from zsq.cli import main as zsq_main  # noqa: E402


def run(argv):
    print("+ zsq " + " ".join(argv))
    rc = zsq_main(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/reference.toml")
    parser.add_argument("--out", default="runs/reference")
    parser.add_argument("--iters", type=int, default=500)
    parser.add_argument("--count", type=int, default=4, help="distilled batches")
    args = parser.parse_args()

    out = args.out
    os.makedirs(out, exist_ok=True)
    model = os.path.join(out, "reference.zsq")
    distilled = os.path.join(out, "distilled")
    calib = os.path.join(out, "calibration.json")
    quantized = os.path.join(out, "reference.q.zsq")

    run(["build-toy", "--config", args.config, "--out", model])
    run([
        "distill", "--model", model, "--iters", str(args.iters), "--batch", "8",
        "--loss", "mean-std", "--seed", "0", "--count", str(args.count), "--out", distilled,
    ])
    run([
        "calibrate", "--model", model, "--source", "distilled", "--data", distilled,
        "--method", "percentile", "--p", "99.99", "--out", calib,
    ])
    run(["quantize", "--model", model, "--calibration", calib, "--bits", "8", "--out", quantized])
    run([
        "eval", "--model", model, "--quantized", quantized, "--config", args.config,
        "--out", os.path.join(out, "eval-report"),
    ])
    print(f"pipeline complete; artifacts under {out}")


if __name__ == "__main__":
    main()
