"""Run bundled ablation grids (or grid files) and write one CSV plus manifest per grid."""

import argparse
import logging
import time

from vlffd.ablation import BUILTIN_GRIDS, load_grid, run_ablation
from vlffd.config import RunConfig, load_run_config


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("grids", nargs="*", default=["table6"], help=f"paths or bundled names {BUILTIN_GRIDS}")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    base = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        base = base.with_overrides({"seed": args.seed})
    for name in args.grids:
        grid = load_grid(name)
        t0 = time.perf_counter()
        report = run_ablation(grid, base, progress=print)
        csv_path, _ = report.write(args.out)
        print(report.csv_text(), end="")
        print(f"{grid.name}: {time.perf_counter() - t0:.0f}s -> {csv_path}")


if __name__ == "__main__":
    main()
