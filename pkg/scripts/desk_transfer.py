"""Desk-scale source -> fogged-target transfer over several seeds.

    python3 scripts/desk_transfer.py --out runs/transfer --seeds 0,1,2

Writes transfer.csv (seed, variant, target_map, seconds) and transfer.json
with per-variant medians under --out.
"""

import argparse
import json
from pathlib import Path

import torch

from mtor.experiments import TRANSFER_VARIANTS, transfer_experiment


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("runs/transfer"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="source_only,mtor_r,mtor_full", help=f"from {','.join(TRANSFER_VARIANTS)}")
    p.add_argument("--config", action="append", default=[])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    torch.set_num_threads(1)
    summary = transfer_experiment(
        args.out, [int(s) for s in args.seeds.split(",")], args.variants.split(","), args.set, args.config
    )
    print(json.dumps(summary["medians"], indent=2))


if __name__ == "__main__":
    main()
