"""Checkpoint directories: ``manifest.json`` plus one raw little-endian float64
blob per weight tensor (``<layer>.bin``)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qstdb.errors import InputError
from qstdb.network import NetworkSpec, check_weights
from qstdb.neuron import LifParams
from qstdb.quantization import QuantParams, calibrate_params

FORMAT = "qstdb-checkpoint/1"


@dataclass
class Checkpoint:
    spec: NetworkSpec
    weights: dict
    lif: dict | None = None
    quant: dict = field(default_factory=dict)  # layer -> QuantParams used at inference
    meta: dict = field(default_factory=dict)

    @property
    def mode(self) -> str:
        return self.spec.mode

    def with_inference_quant(self, bits: int | None) -> "Checkpoint":
        """Attach per-tensor scale-quantization parameters for inference export."""
        quant = {} if bits is None else {k: calibrate_params(w, bits, "scale") for k, w in self.weights.items()}
        return Checkpoint(self.spec, self.weights, self.lif, quant, dict(self.meta))


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    check_weights(ckpt.spec, ckpt.weights)
    tensors = []
    for name in ckpt.spec.weight_shapes():
        w = np.ascontiguousarray(ckpt.weights[name], dtype="<f8")
        fname = f"{name}.bin"
        (d / fname).write_bytes(w.tobytes())
        q = ckpt.quant.get(name)
        tensors.append({"name": name, "shape": list(w.shape), "dtype": "f64le", "file": fname,
                        "quant": q.to_dict() if q is not None else None})
    manifest = {
        "format": FORMAT,
        "mode": ckpt.spec.mode,
        "spec": ckpt.spec.to_dict(),
        "tensors": tensors,
        "lif": None if ckpt.lif is None else {
            k: {"leak": p.leak, "threshold": p.threshold} for k, p in ckpt.lif.items()
        },
        "meta": ckpt.meta,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise InputError(f"{d} is not a checkpoint (no manifest.json)")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise InputError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")
    spec = NetworkSpec.from_dict(manifest["spec"])
    weights, quant = {}, {}
    for t in manifest["tensors"]:
        raw = (d / t["file"]).read_bytes()
        shape = tuple(t["shape"])
        need = 8 * int(np.prod(shape))
        if len(raw) != need:
            raise InputError(f"{d / t['file']}: expected {need} bytes, got {len(raw)}")
        weights[t["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if t.get("quant"):
            quant[t["name"]] = QuantParams.from_dict(t["quant"])
    check_weights(spec, weights)
    lif = None
    if manifest.get("lif") is not None:
        lif = {k: LifParams(float(v["leak"]), None if v["threshold"] is None else float(v["threshold"]))
               for k, v in manifest["lif"].items()}
    return Checkpoint(spec, weights, lif, quant, manifest.get("meta", {}))
