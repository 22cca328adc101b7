"""Two-moons toy: decision boundaries for the five regimes over three seeds.

    python3 scripts/demo2d.py --out runs/demo2d
"""

import argparse
from pathlib import Path

from mtor.cli import cmd_demo2d


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/demo2d"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int, default=None)
    args = p.parse_args()
    cmd_demo2d(args.out, [int(s) for s in args.seeds.split(",")], args.steps)


if __name__ == "__main__":
    main()
