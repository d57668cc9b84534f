"""Full conditioning ablation (rows A-F) on the 50-scene synthetic dataset.

Equivalent to `raydiff --out DIR ablate`; this wrapper adds a log file and
the rerun policy for boundary failures (see README).
"""

import argparse
import sys
from dataclasses import replace

from raydiff.ablation import AblationConfig, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--rows", default="ABCDEF")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--stage1-steps", type=int, default=AblationConfig.stage1_steps)
    ap.add_argument("--stage2-steps", type=int, default=AblationConfig.stage2_steps)
    ap.add_argument("--no-pplc", action="store_true")
    args = ap.parse_args()
    cfg = replace(AblationConfig(), seed=args.seed, stage1_steps=args.stage1_steps, stage2_steps=args.stage2_steps)
    rep = run_ablation(cfg, args.out, rows=tuple(args.rows), with_pplc=not args.no_pplc, log=lambda s: print(s, flush=True))
    print(rep.table_text())
    return 0 if all(c.passed for c in rep.checks) else 1


if __name__ == "__main__":
    sys.exit(main())
