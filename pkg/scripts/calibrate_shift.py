"""Measure how much the standard domain shift costs a source-only classifier.

Trains the classification-only model on the source scene and reports OA on
held-out source pixels and on the shifted target scene, per seed.

Usage: python3 scripts/calibrate_shift.py [--seeds 3] [--data-seed 7]
"""

import argparse

import numpy as np

from bida.config import desk_protocol
from bida.synthdata import extract_patches, make_domain_pair, normalize_bands
from bida.trainer import Trainer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--held-out", type=int, default=400)
    args = ap.parse_args()

    source, (target,) = make_domain_pair(seed=args.data_seed)
    coords = source.labeled_coords()
    pick = np.random.default_rng(99).choice(len(coords), args.held_out, replace=False)
    held = extract_patches(normalize_bands(source), coords[pick])
    drops = []
    for seed in range(args.seeds):
        tr = Trainer(desk_protocol(seed=seed, source_only=True, no_mmd=True, no_distill=True, no_ars=True),
                     source, target)
        tr.fit()
        s, t = tr.evaluate(held.data, held.labels).oa, tr.evaluate().oa
        drops.append(s - t)
        print(f"seed {seed}: source OA {100 * s:.2f}  target OA {100 * t:.2f}  drop {100 * (s - t):.2f} pts")
    print(f"mean drop {100 * np.mean(drops):.2f} pts")


if __name__ == "__main__":
    main()
