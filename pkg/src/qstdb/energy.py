"""FLOPs and compute-energy model for iso-architecture ANNs and SNNs.

ANN energy charges every FLOP as a MAC. SNN energy charges the first layer
once as MACs (direct-coded analog input is constant over time, so one
timestep of MACs suffices) and every later weighted layer as accumulates
scaled by the spiking activity of the spikes that layer consumes. Memory
traffic, pooling and threshold comparisons are not modelled.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from qstdb.errors import InputError
from qstdb.network import LayerSpec, NetworkSpec


@dataclass(frozen=True)
class EnergyConstants:
    """Per-operation energies in pJ (45 nm CMOS) and bit-scaling exponents.

    With ``anchors="table"`` the 32- and 6-bit values are returned verbatim and
    other widths scale from the 32-bit anchor. ``anchors="power_law"`` applies
    the exponent law at every width, including 6 bits.
    """

    mac_32: float = 3.2
    ac_32: float = 0.1
    mac_6: float = 0.26
    ac_6: float = 0.02
    mac_exponent: float = 1.25
    ac_exponent: float = 1.0
    anchors: str = "table"


def op_energy(kind: str, bits: int, c: EnergyConstants = EnergyConstants()) -> float:
    """Energy of one MAC or AC at ``bits`` precision, in pJ."""
    kind = kind.upper()
    if kind not in ("MAC", "AC"):
        raise InputError(f"operation kind must be MAC or AC, got {kind!r}")
    if bits < 2:
        raise InputError(f"bit precision must be >= 2, got {bits}")
    if c.anchors == "table":
        if bits == 32:
            return c.mac_32 if kind == "MAC" else c.ac_32
        if bits == 6:
            return c.mac_6 if kind == "MAC" else c.ac_6
    if kind == "MAC":
        return c.mac_32 * (bits / 32) ** c.mac_exponent
    return c.ac_32 * (bits / 32) ** c.ac_exponent


def flops_layer(layer: LayerSpec, mode: str = "ann", zeta: float | None = None):
    """FLOPs of one layer: exact integer in ANN mode, activity-scaled in SNN mode.

    Padded positions count, since the accumulation runs over the whole kernel
    window. Pooling and dropout layers contribute 0.
    """
    if layer.kind == "conv3d":
        co, do, ho, wo = layer.out_shape
        n = int(np.prod(layer.kernel)) * ho * wo * do * co * layer.in_shape[0]
    elif layer.kind == "conv2d":
        co, ho, wo = layer.out_shape
        kx, ky = layer.kernel
        n = kx * ky * ho * wo * co * layer.in_shape[0]
    elif layer.kind in ("linear", "classifier"):
        n = layer.in_shape[0] * layer.out_shape[0]
    else:
        n = 0
    if mode == "ann":
        return n
    if zeta is None:
        raise InputError(f"layer {layer.name}: spiking activity is required for SNN FLOPs")
    return n * float(zeta)


@dataclass
class ActivityProfile:
    """Average spike count per neuron over the T-step window, per spiking layer."""

    zeta: dict
    neurons: dict
    timesteps: int
    samples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ActivityProfile":
        return cls(dict(d["zeta"]), dict(d["neurons"]), int(d["timesteps"]), int(d.get("samples", 0)))


def measure_activity(records, T: int) -> ActivityProfile:
    """``records`` is an iterable of dicts ``{layer: spikes[T, B, ...]}`` (e.g.
    ``SnnRecord.spikes``). zeta = total spikes / (neurons * samples)."""
    totals, neurons, samples = {}, {}, {}
    for rec in records:
        for name, s in rec.items():
            s = np.asarray(s)
            if s.shape[0] != T:
                raise InputError(f"layer {name}: record has {s.shape[0]} steps, expected {T}")
            totals[name] = totals.get(name, 0.0) + float(s.sum())
            neurons[name] = int(np.prod(s.shape[2:]))
            samples[name] = samples.get(name, 0) + s.shape[1]
    if not totals:
        raise InputError("no spike records to profile")
    zeta = {k: totals[k] / (neurons[k] * samples[k]) for k in totals}
    return ActivityProfile(zeta, neurons, T, max(samples.values()))


@dataclass
class LayerEnergy:
    name: str
    F_ann: int
    F_snn: float
    zeta: float | None
    op_kind: str
    e_ann_pj: float
    e_snn_pj: float


@dataclass
class EnergyReport:
    layers: list
    ann_bits: int
    snn_bits: int
    E_ann: float
    E_snn: float
    E_ann_lowbit: float
    E_snn_last_mac: float
    ratios: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for row in d["layers"]:
            for key in ("e_ann_pj", "e_snn_pj"):
                row[key] = sig4(row[key])
        for key in ("E_ann", "E_snn", "E_ann_lowbit", "E_snn_last_mac"):
            d[key] = sig4(d[key])
        d["ratios"] = {k: sig4(v) for k, v in d["ratios"].items()}
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "F_ann", "F_snn", "zeta", "op_kind", "e_pj"])
            for row in self.layers:
                zeta = "" if row.zeta is None else row.zeta
                w.writerow([row.name, row.F_ann, row.F_snn, zeta, row.op_kind, sig4(row.e_snn_pj)])


def sig4(x: float) -> float:
    return float(f"{x:.4g}")


def presynaptic_activity(spec: NetworkSpec, profile: ActivityProfile) -> dict:
    """Map every weighted layer after the first to the zeta of the spikes it consumes."""
    out, source = {}, None
    for layer in spec.layers:
        if layer.has_weights and source is not None:
            if source not in profile.zeta:
                raise InputError(f"activity profile has no entry for layer {source}")
            out[layer.name] = profile.zeta[source]
        if layer.kind in ("conv3d", "conv2d", "linear"):
            source = layer.name
    return out


def energy_totals(spec: NetworkSpec, profile: ActivityProfile | dict, ann_bits: int = 32, snn_bits: int = 6,
                  constants: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """Per-layer FLOPs/energies and ANN vs SNN totals.

    ``profile`` is either an :class:`ActivityProfile` of spiking-layer outputs
    or a dict giving the input activity of each weighted layer directly.
    ``E_snn`` charges the last layer as accumulates; ``E_snn_last_mac`` is
    the alternative that charges it as activity-scaled MACs.
    """
    weighted = spec.weighted_layers
    zetas = presynaptic_activity(spec, profile) if isinstance(profile, ActivityProfile) else dict(profile)
    e_mac_ann = op_energy("MAC", ann_bits, constants)
    e_mac_snn = op_energy("MAC", snn_bits, constants)
    e_ac_snn = op_energy("AC", snn_bits, constants)
    rows = []
    for i, layer in enumerate(weighted):
        f_ann = flops_layer(layer, "ann")
        if i == 0:
            zeta, f_snn, kind, e_snn = None, float(f_ann), "MAC", f_ann * e_mac_snn
        else:
            if layer.name not in zetas:
                raise InputError(f"activity profile does not cover layer {layer.name}")
            zeta = float(zetas[layer.name])
            f_snn = flops_layer(layer, "snn", zeta)
            kind, e_snn = "AC", f_snn * e_ac_snn
        rows.append(LayerEnergy(layer.name, f_ann, f_snn, zeta, kind, f_ann * e_mac_ann, e_snn))
    e_ann = sum(r.e_ann_pj for r in rows)
    e_snn = sum(r.e_snn_pj for r in rows)
    e_ann_low = sum(r.F_ann for r in rows) * e_mac_snn
    last = rows[-1]
    e_snn_last_mac = e_snn - last.e_snn_pj + (last.F_snn * e_mac_snn if len(rows) > 1 else last.e_snn_pj)
    ratios = {
        f"ann{ann_bits}_over_snn{snn_bits}": e_ann / e_snn,
        f"ann{snn_bits}_over_snn{snn_bits}": e_ann_low / e_snn,
        f"ann{ann_bits}_over_ann{snn_bits}": e_ann / e_ann_low,
    }
    return EnergyReport(rows, ann_bits, snn_bits, e_ann, e_snn, e_ann_low, e_snn_last_mac, ratios)
