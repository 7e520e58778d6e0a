"""FK/DK loss ablation: first-step linear vRMSE on held-out side-stepping, buffer disabled."""
import argparse
import json

from kinpred.experiments import ABLATIONS, loss_ablation
from kinpred.model import load_model, reference_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="model description file (default: the bundled 20-DoF humanoid)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=["none", "fkdk"], choices=sorted(ABLATIONS))
    ap.add_argument("--train-seconds", type=float, default=30.0)
    ap.add_argument("--json", help="write per-seed results here")
    args = ap.parse_args()
    model = load_model(args.model) if args.model else reference_model()
    res = loss_ablation(model, seeds=args.seeds, variants=args.variants,
                        train_seconds=args.train_seconds)
    for v, med in res.medians().items():
        print(f"{v:>5}: median vRMSE_lin(t=1) {med:.4f} m/s")
    print(f"{res.seconds:.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"seeds": res.seeds, "vrmse_lin": res.vrmse_lin, "seconds": res.seconds}, fh, indent=2)


if __name__ == "__main__":
    main()
