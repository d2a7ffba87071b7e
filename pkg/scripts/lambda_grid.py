"""Grid search over (lambda1, lambda2) with short runs; writes the OA surface as CSV.

Usage: python3 scripts/lambda_grid.py [--epochs 8] [--grid 1e-2,1e-1,1] [--out surface.csv]
"""

import argparse

from bida.config import LAMBDA_GRID, desk_protocol
from bida.synthdata import make_domain_pair
from bida.trainer import lambda_grid_search, write_surface


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--grid", default=",".join(str(v) for v in LAMBDA_GRID))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="surface.csv")
    args = ap.parse_args()

    grid = tuple(float(v) for v in args.grid.split(","))
    source, (target,) = make_domain_pair()
    res = lambda_grid_search(desk_protocol(seed=args.seed), source, target, grid, epochs=args.epochs)
    write_surface(res, args.out)
    print("lambda1 \\ lambda2  " + "  ".join(f"{v:>7g}" for v in grid))
    for l1, row in zip(grid, res.surface):
        print(f"{l1:>17g}  " + "  ".join(f"{100 * v:7.2f}" for v in row))
    print(f"best (lambda1, lambda2) = {res.best}")


if __name__ == "__main__":
    main()
