"""Discrete-time IF/LIF neurons with soft reset, the non-leaky output
accumulator, and direct input encoding.

One step of a hidden layer::

    u[t] = leak * u[t-1] + I[t] - threshold * o[t-1]
    z[t] = u[t] / threshold - 1
    o[t] = 1 if z[t] > 0 else 0
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qstdb.errors import ConfigurationError, InputError
from qstdb.quantization import QuantParams, calibrate_params, fake_quantize

MIN_THRESHOLD = 1e-6


@dataclass
class LifParams:
    """Per-layer leak and threshold shared by every neuron of the layer."""

    leak: float = 1.0
    threshold: float | None = None

    def checked_threshold(self) -> float:
        if self.threshold is None:
            raise ConfigurationError("threshold is unset; calibrate the layer first")
        if self.threshold <= 0:
            raise ConfigurationError(f"threshold must be positive, got {self.threshold}")
        return float(self.threshold)


@dataclass
class LifLayerState:
    u: np.ndarray
    o_prev: np.ndarray = field(default=None)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.o_prev is None:
            self.o_prev = np.zeros_like(self.u)

    @classmethod
    def zeros(cls, shape) -> "LifLayerState":
        return cls(np.zeros(shape), np.zeros(shape))


def quantize_potential(u: np.ndarray, bits: int | None) -> np.ndarray:
    """Per-tensor symmetric fake quantization of membrane potentials."""
    if bits is None:
        return u
    return fake_quantize(u, calibrate_params(u, bits, "scale"))


def lif_step(state: LifLayerState, weighted_input, params: LifParams, potential_bits: int | None = None):
    """Advance one timestep; returns ``(new_state, spikes, z)``."""
    v = params.checked_threshold()
    u = params.leak * state.u + weighted_input - v * state.o_prev
    u = quantize_potential(u, potential_bits)
    z = u / v - 1.0
    spikes = (z > 0).astype(np.float64)
    return LifLayerState(u, spikes), spikes, z


def if_step(state: LifLayerState, weighted_input, threshold: float):
    new_state, spikes, _ = lif_step(state, weighted_input, LifParams(1.0, threshold))
    return new_state, spikes


def output_accumulate(u, weighted_input) -> np.ndarray:
    """Non-leaky, non-spiking integration used by the classifier layer."""
    return u + weighted_input


def encode_params(patch, bits: int | None, scheme: str = "affine") -> QuantParams | None:
    if bits is None:
        return None
    return calibrate_params(patch, bits, scheme)


def direct_encode(patch, T: int, params: QuantParams | None = None) -> list:
    """Present the same (optionally fake-quantized) analog patch at every step."""
    if T < 1:
        raise ConfigurationError(f"number of timesteps must be >= 1, got {T}")
    x = np.asarray(patch, dtype=np.float64)
    if params is not None:
        x = fake_quantize(x, params)
    return [x] * T


# Spike-trace bitstream: magic, u16 name length, name bytes, u64 neurons, u32 T,
# then T*neurons bits packed little-endian within each byte, time-major.
_MAGIC = b"SPKT"


def write_spike_trace(path, layer: str, spikes: np.ndarray) -> None:
    """``spikes`` has shape [T, neurons...] with entries in {0, 1}."""
    spikes = np.asarray(spikes)
    T = spikes.shape[0]
    flat = spikes.reshape(T, -1)
    if not np.isin(flat, (0, 1)).all():
        raise InputError("spike trace entries must be 0 or 1")
    name = layer.encode()
    bits = np.packbits(flat.astype(np.uint8).ravel(), bitorder="little")
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<H", len(name)) + name + struct.pack("<QI", flat.shape[1], T))
        f.write(bits.tobytes())


def read_spike_trace(path):
    """Returns ``(layer, spikes[T, neurons])``."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: not a spike trace (bad magic at byte 0)")
    (n,) = struct.unpack_from("<H", data, 4)
    layer = data[6 : 6 + n].decode()
    neurons, T = struct.unpack_from("<QI", data, 6 + n)
    off = 6 + n + 12
    need = (neurons * T + 7) // 8
    if len(data) - off != need:
        raise InputError(f"{path}: payload at byte {off} has {len(data) - off} bytes, expected {need}")
    bits = np.unpackbits(np.frombuffer(data, np.uint8, offset=off), bitorder="little")[: neurons * T]
    return layer, bits.reshape(T, neurons).astype(np.float64)
