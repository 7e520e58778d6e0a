"""Overfit oracle: full-size network on one 200-frame walk clip, scored on that same clip."""
import argparse

from kinpred.experiments import overfit
from kinpred.network import save_checkpoint
from kinpred.model import load_model, reference_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="model description file (default: the bundled 20-DoF humanoid)")
    ap.add_argument("--frames", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--open-loop", action="store_true", help="score with true past states in the buffer")
    ap.add_argument("--out", help="save the checkpoint here")
    args = ap.parse_args()
    model = load_model(args.model) if args.model else reference_model()
    res = overfit(model, frames=args.frames, epochs=args.epochs, seed=args.seed,
                  closed_loop=not args.open_loop)
    for name, value in res.report[1].items():
        print(f"{name:>10} {value:.4f}")
    print(f"final loss {res.log[-1]['L_total']:.3e}, {res.seconds:.0f} s")
    if args.out:
        save_checkpoint(args.out, res.checkpoint)


if __name__ == "__main__":
    main()
