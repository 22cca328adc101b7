"""Lambda and alpha sensitivity sweeps adapting from one shared source model.

    python3 scripts/run_sweeps.py --out runs

Produces <out>/runs/sweep_lambda/sweep_lambda.{csv,png} and the alpha pair.
"""

import argparse
import os
import time
from dataclasses import replace
from pathlib import Path

from mtor import cli
from mtor.config import load_config


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("."), help="output root")
    p.add_argument("--config", action="append", default=[])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--parallel", type=int, default=1)
    args = p.parse_args()
    os.environ[cli.ENV_OUTPUT_ROOT] = str(args.out)
    t0 = time.perf_counter()
    cfg = load_config(args.config, args.set)
    cli.cmd_gen_data(cfg)
    lam = cli.cmd_sweep(replace(cfg, run_id="sweep_lambda"), "lambda", list(cli.DEFAULT_SWEEPS["lambda"]), args.parallel)
    shared = lam / "pretrain" / "checkpoints" / "final.pt"
    alpha = cli.cmd_sweep(replace(cfg, run_id="sweep_alpha"), "alpha", list(cli.DEFAULT_SWEEPS["alpha"]),
                          args.parallel, init_from=shared)  # fmt: skip
    for root, param in ((lam, "lambda"), (alpha, "alpha")):
        print((root / f"sweep_{param}.csv").read_text())
    print(f"total {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
