"""Buffer ablation on stand/walk transitions: refined buffer, unrefined buffer, inertial only."""
import argparse
import json

from kinpred.experiments import buffer_ablation
from kinpred.model import load_model, reference_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="model description file (default: the bundled 20-DoF humanoid)")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--kind", default="side_step", choices=["side_step", "forward_walk"])
    ap.add_argument("--json", help="write per-seed results here")
    args = ap.parse_args()
    model = load_model(args.model) if args.model else reference_model()
    res = buffer_ablation(model, seeds=args.seeds, kind=args.kind)
    for name, med in res.medians().items():
        print(f"{name:>16}: median first-step vMAE {med:.2f} deg/s")
    print(f"{res.seconds:.0f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"seeds": res.seeds, "vmae": res.vmae, "seconds": res.seconds}, fh, indent=2)


if __name__ == "__main__":
    main()
