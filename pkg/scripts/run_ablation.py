"""Train and evaluate the toy ablations (MVS-RoPE vs collision, two-stage vs
one-stage, cross-modal completion). Resumable; reuses finished runs.

    python scripts/run_ablation.py --root runs/ablation
"""

import argparse
import json

from echomotion.experiments import AblationSettings, collect, verdicts


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default="runs/ablation")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--no-samples", action="store_true", help="skip the sampling-based completion metrics")
    args = ap.parse_args()
    s = AblationSettings(root=args.root, seeds=tuple(int(x) for x in args.seeds.split(",")))
    results = collect(s, evaluate_samples=not args.no_samples)
    for crit, (ok, msg) in sorted(verdicts(results).items()):
        print(f"criterion {crit}: {'PASS' if ok else 'FAIL'} {msg}")
    print(json.dumps(results.get("completion", {}), indent=1))


if __name__ == "__main__":
    main()
