"""Rewrite tests/golden from the fixed fixture run.

Only run this after an intentional change to the file formats; the golden
files are compared byte for byte by the test suite.
"""

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from builders import golden_run  # noqa: E402

from tcpspeed.results import write_run  # noqa: E402


def main() -> None:
    rec, stats, trace = golden_run()
    paths = write_run(rec, None, stats, trace, ROOT / "tests" / "golden")
    for p in paths.values():
        print(p.relative_to(ROOT))


if __name__ == "__main__":
    main()
