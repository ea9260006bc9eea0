"""ANN-to-SNN initialisation: copy weights, set leaks to 1, and calibrate each
layer's threshold from the distribution of its per-step weighted inputs.

Layers are calibrated in order; layer l is measured on spikes produced by the
already-calibrated layers 1..l-1, not on ANN activations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from qstdb.errors import ConfigurationError, InputError
from qstdb.network import NetworkSpec, check_weights, kernel_forward
from qstdb.neuron import MIN_THRESHOLD, LifLayerState, LifParams, lif_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationConfig:
    batch_size: int = 50
    timesteps: int = 100
    percentile: float = 99.7
    scale: float = 0.8

    def __post_init__(self):
        if not 0 < self.percentile <= 100:
            raise ConfigurationError(f"percentile must lie in (0, 100], got {self.percentile}")
        if self.scale <= 0:
            raise ConfigurationError(f"threshold scale must be positive, got {self.scale}")
        if self.timesteps < 1 or self.batch_size < 1:
            raise ConfigurationError("calibration batch size and timesteps must be >= 1")


def init_snn_from_ann(ann_spec: NetworkSpec, ann_weights: dict, snn_spec: NetworkSpec | None = None):
    """Weights copied verbatim, leak 1.0 everywhere, thresholds unset."""
    check_weights(ann_spec, ann_weights)
    if snn_spec is None:
        snn_spec = ann_spec.with_mode("snn")
    if snn_spec.weight_shapes() != ann_spec.weight_shapes():
        raise ConfigurationError("ANN and SNN architectures differ; cannot transfer weights")
    weights = {k: np.array(v, dtype=np.float64, copy=True) for k, v in ann_weights.items()}
    lif = {layer.name: LifParams(1.0, None) for layer in snn_spec.spiking_layers}
    return snn_spec, weights, lif


def percentile_of_repeated(values: np.ndarray, repeats: int, q: float) -> float:
    """``np.percentile(np.repeat(values, repeats), q)`` without materialising the repeats."""
    a = np.sort(np.ravel(values))
    n = a.size * repeats
    pos = q / 100.0 * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(a[lo // repeats] + (a[hi // repeats] - a[lo // repeats]) * frac)


def calibrate_thresholds(spec: NetworkSpec, weights: dict, batch, cfg: CalibrationConfig = CalibrationConfig()):
    """Returns ``(lif, report)``; ``report`` has one dict per spiking layer with
    ``layer``, ``samples_seen``, ``percentile_value`` and ``threshold``."""
    check_weights(spec, weights)
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == len(spec.input_shape):
        x = x[None]
    if x.shape[0] == 0:
        raise InputError("calibration batch is empty")
    if x.shape[1:] != spec.input_shape:
        raise ConfigurationError(f"calibration batch shape {x.shape} does not match network input {spec.input_shape}")
    T, B = cfg.timesteps, x.shape[0]
    lif, report = {}, []
    cur = None  # [T, B, ...] spikes/drive from the previous layer; None = constant analog input
    for layer in spec.layers:
        if layer.kind == "classifier":
            break
        if layer.kind == "dropout":
            continue
        h = x.reshape((B,) + layer.in_shape) if cur is None else cur.reshape((T * B,) + layer.in_shape)
        if layer.kind == "avgpool2d":
            cur = kernel_forward(layer, None, h).reshape((T, B) + layer.out_shape)
            continue
        drive = kernel_forward(layer, weights[layer.name], h)
        if cur is None:
            value = percentile_of_repeated(drive, T, cfg.percentile)
            drive = np.broadcast_to(drive, (T,) + drive.shape)
        else:
            drive = drive.reshape((T, B) + layer.out_shape)
            value = float(np.percentile(drive, cfg.percentile))
        threshold = value * cfg.scale
        if not threshold > 0:
            log.warning("layer %s: calibrated threshold %g is not positive; clamping to %g",
                        layer.name, threshold, MIN_THRESHOLD)
            threshold = MIN_THRESHOLD
        params = LifParams(1.0, threshold)
        lif[layer.name] = params
        report.append({"layer": layer.name, "samples_seen": int(drive.size),
                       "percentile_value": value, "threshold": threshold})
        state = LifLayerState.zeros((B,) + layer.out_shape)
        spikes = []
        for t in range(T):
            state, o, _ = lif_step(state, drive[t], params)
            spikes.append(o)
        cur = np.stack(spikes)
    return lif, report
