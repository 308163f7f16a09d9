#!/usr/bin/env python3
"""Run the loss-mode x iteration-count ablation grid on the reference model."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from zsq.cli import main as zsq_main  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/reference.toml")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--iters", default="10,50,100,250,500,1000")
    parser.add_argument("--modes", default="mean,mean-std")
    parser.add_argument("--count", type=int, default=2)
    args = parser.parse_args()

    model = os.path.join(args.out, "reference.zsq")
    rc = zsq_main(["build-toy", "--config", args.config, "--out", model])
    if rc != 0:
        sys.exit(rc)
    rc = zsq_main([
        "ablation", "--model", model, "--config", args.config,
        "--iters", args.iters, "--modes", args.modes,
        "--count", str(args.count), "--out", args.out,
    ])
    sys.exit(rc)


if __name__ == "__main__":
    main()
