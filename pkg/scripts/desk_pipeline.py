"""Desk-scale run on the synthetic cube: ANN -> conversion -> 6-bit Q-STDB -> energy.

    python scripts/desk_pipeline.py [--seed N] [--out DIR]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from qstdb.config import load_config
from qstdb.pipeline import cmd_run

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "desk.json")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    cfg.seed = args.seed
    t0 = time.perf_counter()
    run = cmd_run(cfg, args.out)
    s = json.loads((run / "metrics.json").read_text())
    print(f"run directory: {run}")
    print(f"ANN OA        {s['ann']['oa']:.4f}")
    print(f"converted OA  {s['converted']['oa']:.4f}  (T={cfg.snn.timesteps}, before Q-STDB)")
    print(f"Q-STDB OA     {s['qstdb']['oa']:.4f}  ({cfg.snn.bits}-bit weights)")
    for k, v in s["energy"]["ratios"].items():
        print(f"energy {k:<18} {v:.2f}x")
    print(f"wall time     {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
