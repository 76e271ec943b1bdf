"""Train, search and evaluate on the synthetic corruption benchmark over several seeds.

    python scripts/run_robustness.py --seeds 0 1 2 --out runs/robustness
"""

import argparse
import json
import logging

from attn_tta.config import load_config
from attn_tta.experiments import FAMILIES, run_robustness, severity_inversions


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", "-c")
    ap.add_argument("--set", "-s", action="append", default=[])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--families", nargs="+", default=list(FAMILIES))
    ap.add_argument("--out", default="runs/robustness")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, args.set)
    summary = run_robustness(cfg, args.seeds, args.families, args.out)
    table = {}
    for fam in summary.per_seed[0].reports:
        table[fam] = {k: round(summary.mean(fam, k), 2) for k in
                      ("mca", "mca_baseline", "clean_accuracy", "clean_accuracy_baseline")}
    print(json.dumps(table, indent=2))
    for name, curve in summary.mean_severity().items():
        inv = severity_inversions(curve)
        print(f"{name:<18}" + " ".join(f"{v:6.2f}" for v in curve.values())
              + (f"   inversions {inv}" if inv else ""))


if __name__ == "__main__":
    main()
