"""Closed-loop step latency of a checkpoint on a synthetic forward walk.

Without --checkpoint a full-size network is trained briefly first. Run it on
an otherwise idle machine; the numbers are wall-clock.
"""
import argparse

import numpy as np

from kinpred.experiments import latency_benchmark, synthetic_sequence
from kinpred.model import load_model, reference_model
from kinpred.network import load_checkpoint
from kinpred.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", help="model description file (default: the bundled 20-DoF humanoid)")
    ap.add_argument("--checkpoint")
    ap.add_argument("--seconds", type=float, default=10.0, help="length of the test walk")
    ap.add_argument("--no-refine", action="store_true")
    args = ap.parse_args()
    model = load_model(args.model) if args.model else reference_model()
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
    else:
        ckpt = train(model, [synthetic_sequence(model, "forward_walk", 20.0, 1)], TrainConfig(epochs=5)).checkpoint
    seq = synthetic_sequence(model, "forward_walk", args.seconds, 9)
    ms = latency_benchmark(model, ckpt, seq, refine=not args.no_refine) * 1e3
    print(f"{len(ms)} steps: median {np.median(ms):.2f} ms, p95 {np.percentile(ms, 95):.2f} ms, max {ms.max():.2f} ms")


if __name__ == "__main__":
    main()
