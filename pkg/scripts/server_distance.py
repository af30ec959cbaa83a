"""Curve distance between a near and a far server, per flow count.

Both simulated links are identical apart from the one-way delay. The near
server is the reference.
"""

import argparse
import tempfile

from tcpspeed.campaigns import server_distance


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--flows", type=int, nargs="+", default=[3, 5, 7, 9])
    ap.add_argument("--repetitions", type=int, default=2)
    ap.add_argument("--duration", type=float, default=15)
    ap.add_argument("--far-delay-ms", type=float, default=60)
    ap.add_argument("--out", help="keep run directories here (default: temporary)")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        dist = server_distance(args.out or tmp, args.flows, repetitions=args.repetitions,
                               duration_s=args.duration, far_delay_ms=args.far_delay_ms)
    print("flows  distance_pct  points")
    for n, d in sorted(dist.items()):
        print(f"{n:5d}  {d.rms_pct:12.2f}  {d.points_count:6d}")


if __name__ == "__main__":
    main()
