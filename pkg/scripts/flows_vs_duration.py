"""Settling time and saturation fractions of the median DL curve per flow count.

Runs in virtual time over a simulated link where one flow is capped below
the link capacity. Prints one row per flow count.
"""

import argparse
import tempfile

from tcpspeed.campaigns import flows_vs_duration

S = 10**9


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--flows", type=int, nargs="+", default=[1, 3, 5, 7, 9])
    ap.add_argument("--repetitions", type=int, default=3)
    ap.add_argument("--duration", type=float, default=15)
    ap.add_argument("--out", help="keep run directories here (default: temporary)")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        curves = flows_vs_duration(args.out or tmp, args.flows, repetitions=args.repetitions,
                                   duration_s=args.duration)
    checkpoints = sorted(curves[0].fraction_pct)
    print("flows  runs  saturation_mbps  settling_s  " + "  ".join(f"pct@{t // S}s" for t in checkpoints))
    for c in curves:
        pct = "  ".join(f"{c.fraction_pct[t]:7.1f}" for t in checkpoints)
        print(f"{c.flows:5d}  {c.runs_count:4d}  {c.saturation_bps / 1e6:15.2f}  {c.settling_ns / S:10.2f}  {pct}")


if __name__ == "__main__":
    main()
