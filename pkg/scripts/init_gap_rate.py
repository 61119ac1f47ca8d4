"""Fraction of random initializations that satisfy every gap condition.

Uses ``m = 4 m* ceil(log m*) + 8`` students by default and reports how often
the row-wise, column-wise, threshold and magnitude conditions all hold.
"""

import argparse
import math

from softmoe.dynamics import alignment_snapshot, check_init_conditions
from softmoe.model import init_student, make_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--d", type=int, default=10_000)
    ap.add_argument("--m-star", type=int, default=5)
    ap.add_argument("--m", type=int, default=None)
    ap.add_argument("--seeds", type=int, default=200)
    ap.add_argument("--delta-s", type=float, default=1e-3)
    args = ap.parse_args()
    ms = args.m_star
    m = args.m if args.m is not None else 4 * ms * math.ceil(math.log(ms)) + 8
    teacher = make_teacher(ms, args.d)
    counts = {"rowwise": 0, "colwise": 0, "threshold": 0, "magnitude": 0, "all": 0}
    for seed in range(args.seeds):
        params = init_student(m, args.d, seed)
        rep = check_init_conditions(alignment_snapshot(params, teacher), params, args.delta_s)
        counts["rowwise"] += bool(rep.rowwise_ok.all())
        counts["colwise"] += bool(rep.colwise_ok.all())
        counts["threshold"] += bool(rep.threshold_ok.all())
        counts["magnitude"] += bool(rep.magnitude_ok.all())
        counts["all"] += rep.all_gaps_ok
    print(f"d = {args.d}, m* = {ms}, m = {m}, delta_s = {args.delta_s}, seeds = {args.seeds}")
    for name, c in counts.items():
        p = c / args.seeds
        se = math.sqrt(p * (1 - p) / args.seeds)
        print(f"  {name:9s} {c:4d}  rate {p:.3f} +/- {se:.3f}")


if __name__ == "__main__":
    main()
