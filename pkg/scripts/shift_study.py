"""Tabulate resolution-dependent timestep shifts and check their identities numerically."""

import argparse
import math

import numpy as np

from flowlab.sample import DEFAULT_SHIFT_1024, shift_time, uncertainty_sigma
from flowlab.trajectories import RF


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--base", type=int, default=256 * 256, help="pixel count the schedule was tuned at")
    ap.add_argument("--targets", default="65536,262144,589824,1048576", help="comma-separated target pixel counts")
    args = ap.parse_args()

    t = np.linspace(0.05, 0.95, 19)
    lam = RF().lam
    print(f"{'pixels':>8} {'alpha':>7} {'t=0.25':>8} {'t=0.5':>8} {'t=0.75':>8} {'max dlambda err':>16} {'max sigma err':>14}")
    for m in (int(v) for v in args.targets.split(",")):
        alpha = math.sqrt(m / args.base)
        tm = shift_time(t, args.base, m)
        lam_err = np.max(np.abs(lam(tm) - lam(t) + 2 * math.log(alpha)))
        sig_err = np.max(np.abs(uncertainty_sigma(tm, m) - uncertainty_sigma(t, args.base)))
        mids = shift_time(np.array([0.25, 0.5, 0.75]), args.base, m)
        print(f"{m:>8} {alpha:7.3f} {mids[0]:8.4f} {mids[1]:8.4f} {mids[2]:8.4f} {lam_err:16.2e} {sig_err:14.2e}")
    print(f"\nalpha used for 1024^2 sampling by default: {DEFAULT_SHIFT_1024}")


if __name__ == "__main__":
    main()
