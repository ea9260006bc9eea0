"""Convert a public .mat hyperspectral scene into the package's cube format.

    python scripts/convert_mat.py Indian_pines_corrected.mat Indian_pines_gt.mat data/indian_pines
    python scripts/convert_mat.py Salinas.mat Salinas_gt.mat data/salinas --discard 107-112,153-167,223

The first array of at least 3 dimensions in the cube file is taken as
[height, width, bands]; the first 2-D integer array in the ground-truth file
as the label grid (0 = unlabeled). Needs scipy, which the package itself
does not depend on.
"""

import argparse

import numpy as np
from scipy.io import loadmat

from qstdb.data import HsiCube, write_cube


def first_array(path, ndim):
    for key, value in loadmat(path).items():
        if not key.startswith("__") and isinstance(value, np.ndarray) and value.ndim == ndim:
            return key, value
    raise SystemExit(f"{path}: no {ndim}-D array found")


def parse_ranges(text):
    out = []
    for part in filter(None, text.split(",")):
        lo, _, hi = part.partition("-")
        out.extend(range(int(lo), int(hi or lo) + 1))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("cube")
    ap.add_argument("labels")
    ap.add_argument("out", help="output stem")
    ap.add_argument("--discard", default="", help="0-based band indices/ranges recorded in the header, e.g. 107-112,223")
    args = ap.parse_args()

    ck, cube = first_array(args.cube, 3)
    lk, labels = first_array(args.labels, 2)
    stem = write_cube(args.out, HsiCube(cube.astype(np.float64)), labels.astype(np.uint16),
                      discard_bands=parse_ranges(args.discard))
    print(f"{ck} {cube.shape} + {lk} -> {stem}.hsij ({int((labels > 0).sum())} labelled pixels)")


if __name__ == "__main__":
    main()
