"""Heading hit counts of every fusion strategy on engineered score volumes."""

import argparse

from pplt.harness.trend import bin_hit, trend_sample
from pplt.pof import STRATEGIES, fuse


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=200)
    args = ap.parse_args()
    hits = dict.fromkeys(STRATEGIES, 0)
    for seed in range(args.samples):
        s_pano, s_1, idx = trend_sample(seed)
        for name in STRATEGIES:
            hits[name] += bin_hit(fuse(name, s_pano, s_1)[1], idx, s_pano.angle_bins)
    for name in STRATEGIES:
        print(f"{name:12s} {hits[name]:4d}/{args.samples}")


if __name__ == "__main__":
    main()
