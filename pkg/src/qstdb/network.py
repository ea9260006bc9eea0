"""Layer graphs for CNN-3D / CNN-32H and their ANN and SNN forward passes.

A network is an ordered list of :class:`LayerSpec`. Each layer knows its
per-sample input and output shapes after propagation; a layer reshapes its
input to ``in_shape`` on entry, which is how 3-D feature maps fold into 2-D
channels (``[C, D, H, W] -> [C*D, H, W]``) and how features are flattened
before a linear layer.

The SNN forward is evaluated layer by layer over the whole time window: every
layer's weighted inputs for all T steps are computed in one batched kernel
call, then the neuron recurrence is stepped in time. This is equivalent to
the step-by-step order because layer l at step t only depends on layer l-1 at
step t and on its own past.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from qstdb.errors import ConfigurationError
from qstdb.neuron import LifLayerState, LifParams, direct_encode, encode_params, lif_step, output_accumulate
from qstdb.quantization import QuantParams, fake_quantize_tensor
from qstdb.tensor_core import (
    ConvGeometry,
    avgpool2d_backward,
    avgpool2d_forward,
    conv2d_backward,
    conv2d_forward,
    conv3d_backward,
    conv3d_forward,
    dropout_mask,
    linear_backward,
    linear_forward,
)

log = logging.getLogger(__name__)

KINDS = ("conv3d", "conv2d", "avgpool2d", "dropout", "linear", "classifier")
WEIGHTED = ("conv3d", "conv2d", "linear", "classifier")


@dataclass
class LayerSpec:
    name: str
    kind: str
    out_channels: int = 0
    kernel: tuple = ()
    stride: tuple = ()
    padding: tuple = ()
    rate: float = 0.0
    activation: str = "none"
    in_shape: tuple = ()
    out_shape: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"layer {self.name}: unknown kind {self.kind!r}")
        for key in ("kernel", "stride", "padding", "in_shape", "out_shape"):
            setattr(self, key, tuple(int(v) for v in getattr(self, key)))

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHTED

    @property
    def spiking(self) -> bool:
        return self.activation == "lif"

    def geometry(self) -> ConvGeometry:
        return ConvGeometry(self.kernel, self.stride, self.padding, self.in_shape[0], self.out_channels)

    def weight_shape(self) -> tuple:
        if self.kind in ("conv3d", "conv2d"):
            return self.geometry().weight_shape()
        if self.kind in ("linear", "classifier"):
            return (self.out_channels, self.in_shape[0])
        return ()

    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape()[1:]))


def _propagate_layer(layer: LayerSpec, shape: tuple) -> tuple:
    """Fill ``layer.in_shape``/``out_shape`` from the incoming per-sample shape."""
    kind = layer.kind
    if kind == "conv3d":
        if len(shape) != 4:
            raise ConfigurationError(f"{layer.name}: conv3d needs a [C, D, H, W] input, got {shape}")
        layer.in_shape = shape
        geom = layer.geometry()
        layer.out_shape = (layer.out_channels,) + geom.output_extents(shape[1:])
    elif kind in ("conv2d", "avgpool2d"):
        if len(shape) == 4:
            shape = (shape[0] * shape[1],) + shape[2:]
        if len(shape) != 3:
            raise ConfigurationError(f"{layer.name}: {kind} needs a [C, H, W] input, got {shape}")
        layer.in_shape = shape
        if kind == "conv2d":
            layer.out_shape = (layer.out_channels,) + layer.geometry().output_extents(shape[1:])
        else:
            out = []
            for name, n, k, s in zip(("height", "width"), shape[1:], layer.kernel, layer.stride):
                if k > n or (n - k) % s:
                    raise ConfigurationError(f"{layer.name}: {name} axis, window {k}/stride {s} does not cover {n}")
                out.append((n - k) // s + 1)
            layer.out_shape = (shape[0],) + tuple(out)
    elif kind == "dropout":
        if not 0.0 <= layer.rate < 1.0:
            raise ConfigurationError(f"{layer.name}: dropout rate {layer.rate} outside [0, 1)")
        layer.in_shape = layer.out_shape = shape
    else:
        layer.in_shape = (int(np.prod(shape)),)
        layer.out_shape = (layer.out_channels,)
    return layer.out_shape


@dataclass
class NetworkSpec:
    name: str
    input_shape: tuple
    num_classes: int
    layers: list
    mode: str = "ann"
    timesteps: int = 5

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.mode not in ("ann", "snn"):
            raise ConfigurationError(f"mode must be 'ann' or 'snn', got {self.mode!r}")
        self.propagate()

    def propagate(self) -> None:
        shape = self.input_shape
        trace = [f"input {shape}"]
        for layer in self.layers:
            try:
                shape = _propagate_layer(layer, shape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"shape propagation failed: {exc}\n  trace: " + " -> ".join(trace)) from None
            trace.append(f"{layer.name} {shape}")
        last = self.layers[-1]
        if last.kind != "classifier" or last.out_shape != (self.num_classes,):
            raise ConfigurationError(f"network must end in a classifier with {self.num_classes} outputs")

    @property
    def weighted_layers(self) -> list:
        return [layer for layer in self.layers if layer.has_weights]

    @property
    def spiking_layers(self) -> list:
        return [layer for layer in self.layers if layer.kind in ("conv3d", "conv2d", "linear")]

    def weight_shapes(self) -> dict:
        return {layer.name: layer.weight_shape() for layer in self.weighted_layers}

    def with_mode(self, mode: str, timesteps: int | None = None) -> "NetworkSpec":
        spec = copy.deepcopy(self)
        spec.mode = mode
        if timesteps is not None:
            spec.timesteps = timesteps
        hidden = "relu" if mode == "ann" else "lif"
        for layer in spec.layers:
            if layer.kind in ("conv3d", "conv2d", "linear"):
                layer.activation = hidden
        spec.__post_init__()
        return spec

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        for layer in d["layers"]:
            for key in ("kernel", "stride", "padding", "in_shape", "out_shape"):
                layer[key] = list(layer[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(**layer) for layer in d["layers"]]
        return cls(d["name"], tuple(d["input_shape"]), int(d["num_classes"]), layers,
                   d.get("mode", "ann"), int(d.get("timesteps", 5)))


def _hidden(kind, name, mode, **kw) -> LayerSpec:
    return LayerSpec(name, kind, activation="relu" if mode == "ann" else "lif", **kw)


def build_cnn3d(bands: int, num_classes: int, patch: int = 5, mode: str = "ann", timesteps: int = 5) -> NetworkSpec:
    """Six 3-D convolutions followed by a linear classifier."""
    if bands < 16:
        raise ConfigurationError(f"CNN-3D needs at least 16 bands, got {bands}")
    rows = [
        (20, (3, 3, 3), (1, 1, 1), (0, 0, 0)),
        (40, (3, 1, 1), (2, 1, 1), (1, 0, 0)),
        (84, (3, 3, 3), (1, 1, 1), (1, 0, 0)),
        (84, (3, 1, 1), (2, 1, 1), (1, 0, 0)),
        (84, (3, 1, 1), (1, 1, 1), (1, 0, 0)),
        (84, (2, 1, 1), (2, 1, 1), (1, 0, 0)),
    ]
    layers = [
        _hidden("conv3d", f"conv{i + 1}", mode, out_channels=c, kernel=k, stride=s, padding=p)
        for i, (c, k, s, p) in enumerate(rows)
    ]
    layers.append(LayerSpec("classifier", "classifier", out_channels=num_classes))
    return NetworkSpec("cnn3d", (1, bands, patch, patch), num_classes, layers, mode, timesteps)


def build_cnn32h(bands: int, num_classes: int, patch: int = 3, hidden: int = 128,
                 mode: str = "ann", timesteps: int = 5) -> NetworkSpec:
    """Hybrid 3-D/2-D network: one 3-D conv, two 2-D convs, average pool,
    dropout, a hidden linear layer and the classifier.

    With small patches the valid 3x3 2-D convolutions would shrink the map
    below the 4x4 pooling window; those convolutions then get padding 1 and the
    pooling window is clamped to the map extent. Both adaptations are logged.
    """
    spectral = ConvGeometry((18, 3, 3), (7, 1, 1), (0, 0, 0), 1, 90)
    _, h, _ = spectral.output_extents((bands, patch, patch))
    pool = 4
    pads = []
    for _ in range(2):
        pad = 1 if h - 2 < pool else 0
        if pad:
            log.warning("cnn32h: 2-D conv extent %d would fall below the %dx%d pool window; using padding 1", h, pool, pool)
        h = h - 2 + 2 * pad
        pads.append(pad)
    if h < pool:
        log.warning("cnn32h: clamping the pooling window from %d to the %dx%d feature map", pool, h, h)
        pool = h
    layers = [
        _hidden("conv3d", "conv1", mode, out_channels=90, kernel=(18, 3, 3), stride=(7, 1, 1), padding=(0, 0, 0)),
        _hidden("conv2d", "conv2", mode, out_channels=64, kernel=(3, 3), stride=(1, 1), padding=(pads[0],) * 2),
        _hidden("conv2d", "conv3", mode, out_channels=128, kernel=(3, 3), stride=(1, 1), padding=(pads[1],) * 2),
        LayerSpec("pool", "avgpool2d", kernel=(pool, pool), stride=(pool, pool)),
        LayerSpec("dropout", "dropout", rate=0.2),
        _hidden("linear", "fc1", mode, out_channels=hidden),
        LayerSpec("classifier", "classifier", out_channels=num_classes),
    ]
    return NetworkSpec("cnn32h", (1, bands, patch, patch), num_classes, layers, mode, timesteps)


def build_mlp(in_features: int, hidden: list, num_classes: int, mode: str = "ann", timesteps: int = 5) -> NetworkSpec:
    layers = [_hidden("linear", f"fc{i + 1}", mode, out_channels=h) for i, h in enumerate(hidden)]
    layers.append(LayerSpec("classifier", "classifier", out_channels=num_classes))
    return NetworkSpec("mlp", (in_features,), num_classes, layers, mode, timesteps)


def build_network(architecture: str, bands: int, num_classes: int, **kw) -> NetworkSpec:
    builders = {"cnn3d": build_cnn3d, "cnn32h": build_cnn32h}
    if architecture not in builders:
        raise ConfigurationError(f"unknown architecture {architecture!r}; expected one of {sorted(builders)}")
    return builders[architecture](bands, num_classes, **kw)


def init_weights(spec: NetworkSpec, rng: np.random.Generator) -> dict:
    """He-normal initialisation; there are no biases."""
    return {
        layer.name: rng.normal(0.0, np.sqrt(2.0 / layer.fan_in()), layer.weight_shape())
        for layer in spec.weighted_layers
    }


def check_weights(spec: NetworkSpec, weights: dict) -> None:
    for name, shape in spec.weight_shapes().items():
        if name not in weights:
            raise ConfigurationError(f"missing weights for layer {name}")
        if tuple(weights[name].shape) != shape:
            raise ConfigurationError(f"layer {name}: weight shape {weights[name].shape} != {shape}")


def kernel_forward(layer: LayerSpec, w, x):
    if layer.kind == "conv3d":
        return conv3d_forward(x, w, layer.geometry())
    if layer.kind == "conv2d":
        return conv2d_forward(x, w, layer.geometry())
    if layer.kind in ("linear", "classifier"):
        return linear_forward(x, w)
    if layer.kind == "avgpool2d":
        return avgpool2d_forward(x, layer.kernel, layer.stride)
    raise ConfigurationError(f"{layer.name}: no kernel for {layer.kind}")


def kernel_backward(layer: LayerSpec, w, x, grad):
    """Returns ``(grad_input, grad_weight)``; ``grad_weight`` is None for pooling."""
    if layer.kind == "conv3d":
        return conv3d_backward(grad, x, w, layer.geometry())
    if layer.kind == "conv2d":
        return conv2d_backward(grad, x, w, layer.geometry())
    if layer.kind in ("linear", "classifier"):
        return linear_backward(grad, x, w)
    if layer.kind == "avgpool2d":
        return avgpool2d_backward(grad, x, layer.kernel, layer.stride), None
    raise ConfigurationError(f"{layer.name}: no kernel for {layer.kind}")


def _batched(spec: NetworkSpec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        return x[None], False
    if x.shape[1:] != spec.input_shape:
        raise ConfigurationError(f"input shape {x.shape} does not match network input {spec.input_shape}")
    return x, True


# ---------------------------------------------------------------------------
# ANN mode


def ann_forward(spec: NetworkSpec, weights: dict, x, training: bool = False,
                rng: np.random.Generator | None = None, cache: list | None = None):
    """Logits for a sample or a batch. ``cache`` (a list) collects what
    :func:`ann_backward` needs."""
    check_weights(spec, weights)
    h, batched = _batched(spec, x)
    B = h.shape[0]
    for layer in spec.layers:
        h = h.reshape((B,) + layer.in_shape)
        aux = None
        if layer.kind == "dropout":
            if training and layer.rate > 0:
                aux = dropout_mask(h.shape, layer.rate, rng)
                y = h * aux
            else:
                y = h
        else:
            y = kernel_forward(layer, weights.get(layer.name), h)
            if layer.activation == "relu":
                aux = y > 0
                y = np.where(aux, y, 0.0)
        if cache is not None:
            cache.append((h, aux))
        h = y
    return h if batched else h[0]


def ann_backward(spec: NetworkSpec, weights: dict, cache: list, grad_logits) -> dict:
    grads = {}
    g = np.asarray(grad_logits, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        h, aux = cache[i]
        g = g.reshape(h.shape[:1] + layer.out_shape)
        if layer.kind == "dropout":
            gx = g * aux if aux is not None else g
        else:
            if layer.activation == "relu":
                g = np.where(aux, g, 0.0)
            gx, gw = kernel_backward(layer, weights.get(layer.name), h, g)
            if gw is not None:
                grads[layer.name] = gw
        g = gx
    return grads


def ann_predict(spec: NetworkSpec, weights: dict, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [ann_forward(spec, weights, x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


# ---------------------------------------------------------------------------
# SNN mode


@dataclass(frozen=True)
class QuantConfig:
    """Forward-path quantization of an SNN.

    ``weight_bits``/``input_bits`` of None disable fake quantization.
    ``potential_bits`` fake-quantizes membrane potentials after every update.
    """

    weight_bits: int | None = None
    scheme: str = "affine"
    input_bits: int | None = None
    potential_bits: int | None = None

    @classmethod
    def training(cls, bits: int | None) -> "QuantConfig":
        return cls(bits, "affine", bits, None)

    @classmethod
    def inference(cls, bits: int | None, potential_bits: int | None = 6) -> "QuantConfig":
        return cls(bits, "scale", bits, potential_bits)


@dataclass
class SnnRecord:
    """Everything the backward pass and the profiler need from a forward pass.

    Per layer, arrays carry a leading time axis ``[T, B, ...]``. ``inputs``
    holds each weighted layer's input stacked as ``[T*B, *in_shape]``.
    """

    T: int
    batch: int
    inputs: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    z: dict = field(default_factory=dict)
    spikes: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    wq: dict = field(default_factory=dict)
    qparams: dict = field(default_factory=dict)
    input_q: list = field(default_factory=list)


def quantized_weights(spec: NetworkSpec, weights: dict, quant: QuantConfig):
    wq, qp = {}, {}
    for layer in spec.weighted_layers:
        wq[layer.name], qp[layer.name] = fake_quantize_tensor(weights[layer.name], quant.weight_bits, quant.scheme)
    return wq, qp


def encode_batch(x, T: int, bits: int | None, scheme: str):
    """Direct encoding of a batch; each sample is its own per-tensor quantization unit."""
    params = [encode_params(sample, bits, scheme) for sample in x]
    enc = np.stack([direct_encode(sample, 1, p)[0] for sample, p in zip(x, params)])
    return enc, params


def check_lif(spec: NetworkSpec, lif: dict) -> None:
    for layer in spec.spiking_layers:
        p = lif.get(layer.name) if lif else None
        if p is None or p.threshold is None:
            raise ConfigurationError(f"layer {layer.name}: LIF parameters are not initialised (run calibration)")
        p.checked_threshold()


def snn_forward(spec: NetworkSpec, weights: dict, lif: dict, x, T: int | None = None,
                quant: QuantConfig = QuantConfig(), training: bool = False,
                rng: np.random.Generator | None = None, keep: bool = True):
    """Unroll the SNN for T steps on direct-encoded input.

    Returns ``(u_out, record)`` where ``u_out`` is the classifier potential
    after the last step. Average pooling acts on spikes and passes real-valued
    drive to the next layer. Dropout masks are drawn once per sample and shared
    by all timesteps.
    """
    T = spec.timesteps if T is None else T
    if T < 1:
        raise ConfigurationError(f"number of timesteps must be >= 1, got {T}")
    check_weights(spec, weights)
    check_lif(spec, lif)
    x, batched = _batched(spec, x)
    B = x.shape[0]
    rec = SnnRecord(T, B)
    rec.wq, rec.qparams = quantized_weights(spec, weights, quant)
    enc, rec.input_q = encode_batch(x, T, quant.input_bits, quant.scheme)

    cur = None  # [T, B, ...] output of the previous layer; None means "constant encoded input"
    u_out = None
    for layer in spec.layers:
        if cur is None:
            h = enc.reshape((B,) + layer.in_shape)
        else:
            h = cur.reshape((T * B,) + layer.in_shape)
        if layer.kind == "dropout":
            mask = dropout_mask((B,) + layer.in_shape, layer.rate, rng) if training and layer.rate > 0 else None
            if keep:
                rec.masks[layer.name] = mask
            if cur is None:
                raise ConfigurationError("dropout cannot be the first layer")
            cur = cur if mask is None else cur * mask[None]
            continue
        if layer.kind == "avgpool2d":
            if cur is None:
                raise ConfigurationError("pooling cannot be the first layer")
            cur = kernel_forward(layer, None, h).reshape((T, B) + layer.out_shape)
            continue

        drive = kernel_forward(layer, rec.wq[layer.name], h)
        if cur is None:
            # constant input: the weighted input is identical at every step
            drive = np.broadcast_to(drive, (T,) + drive.shape)
            h = np.broadcast_to(h, (T,) + h.shape).reshape((T * B,) + layer.in_shape)
        else:
            drive = drive.reshape((T, B) + layer.out_shape)
        if keep:
            rec.inputs[layer.name] = h

        if layer.kind == "classifier":
            u = np.zeros((B,) + layer.out_shape)
            for t in range(T):
                u = output_accumulate(u, drive[t])
            u_out = u
            break

        params = lif[layer.name]
        state = LifLayerState.zeros((B,) + layer.out_shape)
        us, zs, os_ = [], [], []
        for t in range(T):
            state, spikes, z = lif_step(state, drive[t], params, quant.potential_bits)
            us.append(state.u)
            zs.append(z)
            os_.append(spikes)
        cur = np.stack(os_)
        rec.spikes[layer.name] = cur
        if keep:
            rec.u[layer.name] = np.stack(us)
            rec.z[layer.name] = np.stack(zs)
    return (u_out if batched else u_out[0]), rec


def snn_predict(spec: NetworkSpec, weights: dict, lif: dict, x, T: int | None = None,
                quant: QuantConfig = QuantConfig(), batch_size: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    preds = []
    for i in range(0, len(x), batch_size):
        u, _ = snn_forward(spec, weights, lif, x[i : i + batch_size], T, quant, keep=False)
        preds.append(u.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def default_lif(spec: NetworkSpec, threshold: float | None = None) -> dict:
    return {layer.name: LifParams(1.0, threshold) for layer in spec.spiking_layers}


__all__ = [
    "LayerSpec", "NetworkSpec", "QuantConfig", "QuantParams", "SnnRecord",
    "build_cnn3d", "build_cnn32h", "build_mlp", "build_network", "init_weights",
    "ann_forward", "ann_backward", "ann_predict", "snn_forward", "snn_predict",
]
