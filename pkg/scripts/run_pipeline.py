#!/usr/bin/env python3
"""Run the full desk pipeline: generate -> train -> evaluate [-> sweep].

Thin wrapper over the ``netfx`` CLI so a whole experiment lives in one
config file and one output directory:

    python3 scripts/run_pipeline.py -c experiment.ini -o runs/exp1
    python3 scripts/run_pipeline.py -c experiment.ini -o runs/exp1 --sweep

Artifacts land in subdirectories (bundle/, train/, eval/, sweep/), each
with the echoed config next to its outputs.  Every stage is deterministic
given the config, so rerunning into a fresh directory reproduces the first
run byte for byte.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from netfx.cli import main as netfx_main


def run(stage: str, argv: list[str]) -> None:
    print(f"== {stage}: netfx {' '.join(argv)}", flush=True)
    rc = netfx_main(argv)
    if rc != 0:
        print(f"{stage} failed with exit code {rc}", file=sys.stderr)
        raise SystemExit(rc)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-c", "--config", required=True, help="experiment config (ini)")
    ap.add_argument("-o", "--out", required=True, help="root output directory")
    ap.add_argument("--sweep", action="store_true",
                    help="also run the interference-strength sweep stage")
    ap.add_argument("--jobs", type=int, default=1,
                    help="worker processes for evaluate/sweep repetitions")
    args = ap.parse_args()

    root = Path(args.out)
    bundle = root / "bundle"
    run("generate", ["generate", "-c", args.config, "-o", str(bundle)])
    run("train", ["train", "-c", args.config, "-b", str(bundle), "-o", str(root / "train")])
    run("evaluate", ["evaluate", "-c", args.config, "-b", str(bundle),
                     "-o", str(root / "eval"), "--jobs", str(args.jobs)])
    if args.sweep:
        run("sweep", ["sweep", "-c", args.config, "-o", str(root / "sweep"),
                      "--jobs", str(args.jobs)])
    print(f"pipeline complete: {root}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
