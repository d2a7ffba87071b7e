"""Run every ablation ladder on the standard synthetic scenario and print the tables.

Usage: python3 scripts/run_ablations.py [--seeds 3] [--ladders loss,branch,noise,tokenizer] [--out ablation.csv]
"""

import argparse
import time

from bida.config import desk_protocol
from bida.synthdata import make_domain_pair
from bida.trainer import run_ablation, write_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--ladders", default="loss,branch,noise,tokenizer")
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()

    source, (target,) = make_domain_pair(seed=args.data_seed)
    started = time.time()
    rows = run_ablation(desk_protocol(), source, target, tuple(args.ladders.split(",")), tuple(range(args.seeds)),
                        progress=lambda lad, name, seed, oa: print(f"{lad:9s} {name:22s} seed {seed} OA {oa:.4f}",
                                                                   flush=True))
    write_ablation(rows, args.out)
    print()
    ladder = None
    for r in rows:
        if r.ladder != ladder:
            ladder = r.ladder
            print(f"[{ladder}]")
        print(f"  {r.name:22s} {100 * r.mean:6.2f}  " + " ".join(f"{100 * v:6.2f}" for v in r.oas))
    print(f"\n{(time.time() - started) / 60:.1f} min; table written to {args.out}")


if __name__ == "__main__":
    main()
