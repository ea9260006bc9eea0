"""Hyperspectral cube files, preprocessing, patch extraction and splitting.

On-disk format for a cube named ``<stem>``:

* ``<stem>.hsij`` JSON header ``{"height", "width", "bands", "dtype": "f32le",
  "band_order": "bip"}`` plus optional ``"discard_bands"`` (0-based indices)
* ``<stem>.hsib`` little-endian float32 values in (row, col, band) order
* ``<stem>.lbl``  little-endian uint16 labels in (row, col) order, 0 = unlabeled
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qstdb.errors import ConfigurationError, InputError

log = logging.getLogger(__name__)


@dataclass
class HsiCube:
    values: np.ndarray  # [height, width, bands]
    discard_bands: tuple = ()

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class PatchDataset:
    patches: np.ndarray  # [n, 1, bands, p, p]
    labels: np.ndarray  # [n], classes 1..K
    coords: np.ndarray  # [n, 2] (row, col) of the centre pixel
    patch_size: int
    num_classes: int
    split: str = "all"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def targets(self) -> np.ndarray:
        """0-based class indices for the network."""
        return self.labels.astype(np.int64) - 1

    def subset(self, idx, split: str) -> "PatchDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PatchDataset(self.patches[idx], self.labels[idx], self.coords[idx], self.patch_size,
                            self.num_classes, split)


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".hsij", ".hsib", ".lbl") else p


def write_cube(path, cube: HsiCube, labels: np.ndarray, discard_bands=()) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    h, w, b = cube.values.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise InputError(f"label grid {labels.shape} does not match cube {h}x{w}")
    header = {"height": h, "width": w, "bands": b, "dtype": "f32le", "band_order": "bip"}
    if discard_bands:
        header["discard_bands"] = [int(i) for i in discard_bands]
    stem.with_suffix(".hsij").write_text(json.dumps(header, indent=2))
    stem.with_suffix(".hsib").write_bytes(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())
    stem.with_suffix(".lbl").write_bytes(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    return stem


def load_cube(path):
    """Read and validate a cube; declared band discards are applied."""
    stem = _stem(path)
    try:
        header = json.loads(stem.with_suffix(".hsij").read_text())
    except FileNotFoundError:
        raise InputError(f"missing header {stem.with_suffix('.hsij')}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{stem.with_suffix('.hsij')}: invalid JSON at byte {exc.pos}") from None
    for key in ("height", "width", "bands"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise InputError(f"header field {key!r} must be a positive integer")
    if header.get("dtype", "f32le") != "f32le":
        raise InputError(f"unknown dtype {header.get('dtype')!r} at header; only 'f32le' is supported")
    if header.get("band_order", "bip") != "bip":
        raise InputError(f"unsupported band order {header.get('band_order')!r}")
    h, w, b = header["height"], header["width"], header["bands"]

    raw = stem.with_suffix(".hsib").read_bytes()
    need = h * w * b * 4
    if len(raw) != need:
        raise InputError(f"{stem.with_suffix('.hsib')}: expected {need} bytes for {h}x{w}x{b} f32, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(h, w, b)
    bad = np.flatnonzero(~np.isfinite(values.ravel()))
    if bad.size:
        raise InputError(f"{stem.with_suffix('.hsib')}: non-finite value at byte offset {int(bad[0]) * 4}")

    raw = stem.with_suffix(".lbl").read_bytes()
    if len(raw) != h * w * 2:
        raise InputError(f"{stem.with_suffix('.lbl')}: expected {h * w * 2} bytes for {h}x{w} u16, got {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(h, w)

    discard = tuple(sorted(set(int(i) for i in header.get("discard_bands", []))))
    if any(i < 0 or i >= b for i in discard):
        raise InputError(f"discard_bands {discard} out of range for {b} bands")
    if discard:
        values = np.delete(values, discard, axis=2)
    return HsiCube(values, discard), labels


def normalize(cube: HsiCube) -> HsiCube:
    """Per-band standardisation to zero mean and unit population variance."""
    v = cube.values
    mean = v.mean(axis=(0, 1))
    std = v.std(axis=(0, 1))
    # constant bands are detected exactly; their std can round to a tiny nonzero value
    varying = v.max(axis=(0, 1)) > v.min(axis=(0, 1))
    safe = np.where(varying, std, 1.0)
    out = np.where(varying, (v - mean) / safe, 0.0)
    return HsiCube(out, cube.discard_bands)


def extract_patches(cube: HsiCube, labels: np.ndarray, p: int) -> PatchDataset:
    """One zero-padded p x p patch per labelled pixel, laid out as [1, bands, p, p]."""
    if p < 1 or p % 2 == 0:
        raise ConfigurationError(f"patch size must be odd, got {p}")
    labels = np.asarray(labels)
    if labels.shape != cube.values.shape[:2]:
        raise InputError("label grid does not match the cube")
    r = p // 2
    padded = np.pad(cube.values, ((r, r), (r, r), (0, 0)))
    rows, cols = np.nonzero(labels)
    patches = np.empty((rows.size, 1, cube.bands, p, p))
    for i, (y, x) in enumerate(zip(rows, cols)):
        patches[i, 0] = padded[y : y + p, x : x + p].transpose(2, 0, 1)
    k = int(labels.max()) if labels.size else 0
    return PatchDataset(patches, labels[rows, cols].astype(np.int64), np.stack([rows, cols], axis=1), p, k)


def split(dataset: PatchDataset, train_fraction: float = 0.40, seed: int = 0):
    """Stratified random split; each class sends floor(fraction * n) samples to train."""
    if len(dataset) == 0:
        raise InputError("cannot split an empty dataset")
    if not 0 < train_fraction < 1:
        raise ConfigurationError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(idx.size)]
        if idx.size < 2:
            log.warning("class %d has %d sample(s); assigning to the training split", c, idx.size)
            train.extend(idx)
            continue
        n = int(np.floor(train_fraction * idx.size))
        train.extend(idx[:n])
        test.extend(idx[n:])
    return dataset.subset(np.sort(train), "train"), dataset.subset(np.sort(test), "test")


def class_signatures(classes: int, bands: int) -> np.ndarray:
    """Smooth, distinct spectra: one Gaussian bump per class at a shifted band position."""
    axis = np.arange(bands)
    width = max(bands / (2.0 * classes), 1.0)
    centers = (np.arange(classes) + 1) * bands / (classes + 1)
    return 0.2 + np.exp(-0.5 * ((axis[None, :] - centers[:, None]) / width) ** 2)


def generate_synthetic(classes: int = 3, bands: int = 16, samples_per_class: int = 100,
                       noise_sigma: float = 0.1, seed: int = 0, tile: int = 5):
    """Grid image of ``tile x tile`` blocks, each filled with one class spectrum
    plus i.i.d. Gaussian noise and labelled only at its centre pixel, so every
    patch of size <= ``tile`` sees a single class."""
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    if tile % 2 == 0:
        raise ConfigurationError("tile size must be odd")
    rng = np.random.default_rng(seed)
    sig = class_signatures(classes, bands)
    n = classes * samples_per_class
    order = rng.permutation(np.repeat(np.arange(classes), samples_per_class))
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    values = np.zeros((rows * tile, cols * tile, bands))
    labels = np.zeros((rows * tile, cols * tile), dtype=np.int64)
    noise = rng.normal(0.0, noise_sigma, values.shape) if noise_sigma > 0 else np.zeros(values.shape)
    c = tile // 2
    for i, k in enumerate(order):
        y, x = divmod(i, cols)
        values[y * tile : (y + 1) * tile, x * tile : (x + 1) * tile] = sig[k]
        labels[y * tile + c, x * tile + c] = k + 1
    return HsiCube(values + noise), labels
