"""Indian Pines reproduction: CNN-3D, 40/60 split, 6-bit Q-STDB at T=5.

Target overall accuracy is 0.970 or better. Expect several hours on a CPU.
Convert the public .mat files first with scripts/convert_mat.py, then:

    python scripts/indian_pines.py data/indian_pines [--seed N] [--out DIR]
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from qstdb.config import load_config
from qstdb.pipeline import cmd_run

ROOT = Path(__file__).resolve().parents[1]
TARGET_OA = 0.970


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset", help="stem of the converted .hsij/.hsib/.lbl files")
    ap.add_argument("--config", default=ROOT / "configs" / "indian_pines_cnn3d.json")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    cfg.dataset.path = args.dataset
    cfg.seed = args.seed
    run = cmd_run(cfg, args.out)
    s = json.loads((run / "metrics.json").read_text())
    oa = s["qstdb"]["oa"]
    print(json.dumps({k: s[k] for k in ("ann", "converted", "qstdb", "energy")}, indent=2))
    print(f"Q-STDB OA {oa:.4f} (target >= {TARGET_OA})")
    sys.exit(0 if oa >= TARGET_OA else 1)


if __name__ == "__main__":
    main()
