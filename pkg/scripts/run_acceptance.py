"""Run the acceptance criteria outside pytest and print one line per criterion.

    python scripts/run_acceptance.py            # all twelve
    python scripts/run_acceptance.py --only 1 4 9
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import test_acceptance as acc  # noqa: E402


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--only", type=int, nargs="+", choices=sorted(acc.CRITERIA), metavar="N",
                    help="criterion numbers to run (default: all)")
    args = ap.parse_args(argv)
    failed = 0
    for n in args.only or sorted(acc.CRITERIA):
        ok, detail = acc.CRITERIA[n]()
        print(acc.format_line(n, ok, detail), flush=True)
        failed += not ok
    print(f"{failed} failed" if failed else "all passed")
    return int(failed > 0)


if __name__ == "__main__":
    sys.exit(main())
