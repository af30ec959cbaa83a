"""Time-of-day series from periodic short runs over a link with a daily load cycle."""

import argparse
import tempfile

from tcpspeed.campaigns import diurnal


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--hours", type=float, default=50)
    ap.add_argument("--interval-min", type=float, default=30)
    ap.add_argument("--bucket-min", type=float)
    ap.add_argument("--out", help="keep run directories here (default: temporary)")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        res = diurnal(args.out or tmp, args.hours, args.interval_min, bucket_min=args.bucket_min)
    print("relative_hour  rate_mbps  runs")
    for r in res.rows:
        print(f"{r.relative_hour:13.2f}  {r.rate_bps / 1e6:9.3f}  {r.runs_count:4d}")
    period = "none" if res.period_h is None else f"{res.period_h:.1f} h"
    print(f"{res.runs_count} runs, dominant period {period}")


if __name__ == "__main__":
    main()
