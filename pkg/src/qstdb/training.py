"""ANN training and quantization-aware BPTT for the converted SNN.

Gradients are written out by hand. For a hidden LIF layer the reverse-time
sweep uses, with ``g_u[t+1]`` the gradient already flowing back into the
next step's potential::

    dL/do[t] = spatial[t] - v * g_u[t+1]                   (soft-reset path)
    dL/dz[t] = dL/do[t] * gamma * max(0, 1 - |z[t]|)      (surrogate)
    g_u[t]   = dL/dz[t] / v + leak * g_u[t+1]
    dL/dv   += -g_u[t+1] * o[t] - dL/dz[t] * u[t] / v**2
    dL/dleak += g_u[t] * u[t-1]

and ``g_u[t]`` is the gradient of the layer's weighted input at step t.
Weight gradients pass the fake quantizer through a straight-through estimator.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from qstdb.errors import ConfigurationError, InputError, InternalError, RunError
from qstdb.network import (
    NetworkSpec,
    QuantConfig,
    SnnRecord,
    ann_backward,
    ann_forward,
    ann_predict,
    kernel_backward,
    snn_forward,
    snn_predict,
)
from qstdb.neuron import MIN_THRESHOLD, LifParams
from qstdb.quantization import ste_backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LrSchedule:
    initial: float
    factor: float
    milestones: tuple = (60, 80, 90)
    epochs: int = 100

    def __post_init__(self):
        if self.initial <= 0 or self.factor <= 0:
            raise ConfigurationError("learning rate and decay factor must be positive")
        m = tuple(self.milestones)
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ConfigurationError(f"decay epochs must be strictly increasing, got {m}")
        object.__setattr__(self, "milestones", m)

    def rate(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decays apply after each milestone epoch."""
        return self.initial * self.factor ** sum(epoch > m for m in self.milestones)


@dataclass(frozen=True)
class SurrogateConfig:
    gamma: float = 0.3

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError(f"surrogate gamma must be positive, got {self.gamma}")


def loss_and_output_grad(u, label):
    """Softmax cross-entropy on final potentials.

    ``u`` is [N] with an integer label, or [B, N] with a label vector; the
    loss is averaged over the batch while the returned gradient is per sample
    (``p - y``).
    """
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u2 = u[None] if single else u
    labels = np.atleast_1d(np.asarray(label))
    n = u2.shape[1]
    if labels.shape[0] != u2.shape[0]:
        raise InputError("one label per sample is required")
    if (labels < 0).any() or (labels >= n).any():
        raise InputError(f"label out of range for {n} outputs: {labels}")
    if not np.isfinite(u2).all():
        raise InputError("potentials must be finite")
    shifted = u2 - u2.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    rows = np.arange(u2.shape[0])
    loss = float(-logp[rows, labels].mean())
    grad = p.copy()
    grad[rows, labels] -= 1.0
    return loss, (grad[0] if single else grad)


def surrogate_grad(z, gamma: float = 0.3):
    return gamma * np.maximum(0.0, 1.0 - np.abs(z))


def output_weight_grad(grad, spikes_prev) -> np.ndarray:
    """``(p - y)`` times the timestep-summed presynaptic spike counts.

    ``spikes_prev`` is [T, f] for one sample or [T, B, f] for a batch.
    """
    grad = np.asarray(grad, dtype=np.float64)
    counts = np.asarray(spikes_prev, dtype=np.float64).sum(axis=0)
    if counts.shape[-1:] == () or (grad.ndim == 1) != (counts.ndim == 1):
        raise InternalError(f"spike record {np.shape(spikes_prev)} does not match gradient {grad.shape}")
    if grad.ndim == 1:
        return np.outer(grad, counts)
    if grad.shape[0] != counts.shape[0]:
        raise InternalError("spike record batch size does not match the gradient")
    return grad.T @ counts


@dataclass
class Gradients:
    weights: dict = field(default_factory=dict)
    threshold: dict = field(default_factory=dict)
    leak: dict = field(default_factory=dict)


def qstdb_backward(spec: NetworkSpec, weights: dict, lif: dict, rec: SnnRecord, grad_u, gamma: float = 0.3) -> Gradients:
    """Gradients of the loss w.r.t. every weight tensor, threshold and leak.

    ``grad_u`` is dL/du_out at the last step, shape [B, N]. Nothing is
    averaged here; pass an already scaled ``grad_u`` to get batch means.
    """
    T, B = rec.T, rec.batch
    grad_u = np.asarray(grad_u, dtype=np.float64).reshape(B, -1)
    out = Gradients()
    gy = None  # dL/d(layer output) as [T, B, *out_shape]
    first_weighted = spec.weighted_layers[0].name
    for layer in reversed(spec.layers):
        name = layer.name
        if layer.kind in ("dropout", "avgpool2d"):
            gy = gy.reshape((T, B) + layer.out_shape)
        if layer.kind == "dropout":
            mask = rec.masks.get(name)
            gy = gy if mask is None else gy * mask[None]
            continue
        if layer.kind == "avgpool2d":
            g = gy.reshape((T * B,) + layer.out_shape)
            # pooling is linear, so only the input shape matters for the adjoint
            gx, _ = kernel_backward(layer, None, np.empty((T * B,) + layer.in_shape), g)
            gy = gx.reshape((T, B) + layer.in_shape)
            continue
        if name not in rec.inputs:
            raise InternalError(f"missing forward record for layer {name}")

        if layer.kind == "classifier":
            g_in = np.broadcast_to(grad_u, (T,) + grad_u.shape)
        else:
            if name not in rec.z:
                raise InternalError(f"missing potential record for layer {name}")
            p = lif[name]
            v, lam = float(p.threshold), float(p.leak)
            u, z, o = rec.u[name], rec.z[name], rec.spikes[name]
            gy = gy.reshape((T, B) + layer.out_shape)
            g_in = np.empty_like(u)
            g_next = np.zeros_like(u[0])
            gv = 0.0
            gl = 0.0
            for t in range(T - 1, -1, -1):
                do = gy[t] - v * g_next
                dz = do * surrogate_grad(z[t], gamma)
                gu = dz / v + lam * g_next
                gv += float(-(g_next * o[t]).sum() - (dz * u[t]).sum() / v**2)
                if t > 0:
                    gl += float((gu * u[t - 1]).sum())
                g_in[t] = gu
                g_next = gu
            out.threshold[name] = gv
            out.leak[name] = gl

        g_flat = np.reshape(g_in, (T * B,) + layer.out_shape)
        gx, gw_hat = kernel_backward(layer, rec.wq[name], rec.inputs[name], g_flat)
        qp = rec.qparams.get(name)
        out.weights[name] = gw_hat if qp is None else ste_backward(gw_hat, weights[name], qp)
        if name == first_weighted:
            break
        gy = gx.reshape((T, B) + layer.in_shape)
    return out


# ---------------------------------------------------------------------------
# Optimizers


class Sgd:
    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for k, g in grads.items():
            if self.weight_decay:
                g = g + self.weight_decay * params[k]
            if self.momentum:
                buf = self.velocity.get(k)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.velocity[k] = buf
                g = buf
            params[k] = params[k] - lr * g


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.steps = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1**self.steps
        c2 = 1.0 - self.beta2**self.steps
        for k, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = self.beta1 * self.m.get(k, np.zeros_like(g)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, np.zeros_like(g)) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Training loops


@dataclass
class AnnTrainConfig:
    epochs: int = 100
    lr: float = 0.01
    decay: float = 0.1
    milestones: tuple = (60, 80, 90)
    batch_size: int = 50
    momentum: float = 0.0
    weight_decay: float = 0.0

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.decay, tuple(self.milestones), self.epochs)


@dataclass
class SnnTrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    decay: float = 0.5
    milestones: tuple = (60, 80, 90)
    batch_size: int = 50
    bits: int | None = 6
    timesteps: int = 5
    gamma: float = 0.3
    potential_bits: int | None = 6

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.decay, tuple(self.milestones), self.epochs)


@dataclass
class History:
    records: list = field(default_factory=list)

    def add(self, **rec) -> None:
        self.records.append(rec)
        log.info("epoch %(epoch)d lr %(lr).3g loss %(loss).4f train_oa %(train_oa).4f test_oa %(test_oa)s", rec)

    def losses(self) -> list:
        return [r["loss"] for r in self.records]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _oa(pred, y) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(y))) if len(y) else float("nan")


def train_ann(spec: NetworkSpec, weights: dict, train_x, train_y, cfg: AnnTrainConfig,
              rng: np.random.Generator, test_x=None, test_y=None):
    """Mini-batch SGD with cross-entropy; returns ``(best_weights, history)``.

    The best checkpoint is the one with the highest test OA when a test split
    is given, otherwise the highest training OA.
    """
    if spec.mode != "ann":
        raise ConfigurationError("train_ann needs an ANN-mode spec")
    sched = cfg.schedule()
    params = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
    opt = Sgd(cfg.momentum, cfg.weight_decay)
    hist = History()
    best, best_oa = {k: v.copy() for k, v in params.items()}, -1.0
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = sched.rate(epoch)
        total, seen = 0.0, 0
        for idx in _batches(len(train_x), cfg.batch_size, rng):
            cache = []
            logits = ann_forward(spec, params, train_x[idx], training=True, rng=rng, cache=cache)
            loss, g = loss_and_output_grad(logits, train_y[idx])
            if not math.isfinite(loss):
                raise RunError(f"ANN training diverged (non-finite loss) at epoch {epoch}")
            grads = ann_backward(spec, params, cache, g / len(idx))
            opt.step(params, grads, lr)
            total += loss * len(idx)
            seen += len(idx)
        train_oa = _oa(ann_predict(spec, params, train_x), train_y)
        test_oa = _oa(ann_predict(spec, params, test_x), test_y) if test_x is not None else None
        hist.add(epoch=epoch, lr=lr, loss=total / seen, train_oa=train_oa, test_oa=test_oa,
                 wall_ms=round(1000 * (time.perf_counter() - t0), 3))
        score = test_oa if test_oa is not None else train_oa
        if score > best_oa:
            best_oa = score
            best = {k: v.copy() for k, v in params.items()}
    return best, hist


def clamp_lif(lif: dict) -> None:
    for p in lif.values():
        if p.threshold is not None and p.threshold < MIN_THRESHOLD:
            p.threshold = MIN_THRESHOLD


def train_snn(spec: NetworkSpec, weights: dict, lif: dict, train_x, train_y, cfg: SnnTrainConfig,
              rng: np.random.Generator, test_x=None, test_y=None):
    """Q-STDB: Adam over weights, thresholds and leaks with affine fake
    quantization refreshed every mini-batch. Returns ``(weights, lif, history)``;
    master weights stay full precision."""
    if spec.mode != "snn":
        raise ConfigurationError("train_snn needs an SNN-mode spec")
    sched = cfg.schedule()
    quant = QuantConfig.training(cfg.bits)
    eval_quant = QuantConfig.inference(cfg.bits, cfg.potential_bits)
    params = {f"w:{k}": np.array(v, dtype=np.float64) for k, v in weights.items()}
    for name, p in lif.items():
        params[f"v:{name}"] = np.array(float(p.threshold))
        params[f"l:{name}"] = np.array(float(p.leak))
    opt = Adam()
    hist = History()
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)

    def unpack():
        w = {k[2:]: v for k, v in params.items() if k.startswith("w:")}
        lp = {name: LifParams(float(params[f"l:{name}"]), float(params[f"v:{name}"])) for name in lif}
        return w, lp

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        lr = sched.rate(epoch)
        total, seen = 0.0, 0
        for idx in _batches(len(train_x), cfg.batch_size, rng):
            w, lp = unpack()
            u, rec = snn_forward(spec, w, lp, train_x[idx], cfg.timesteps, quant, training=True, rng=rng)
            loss, g = loss_and_output_grad(u, train_y[idx])
            if not math.isfinite(loss):
                raise RunError(f"SNN training diverged (non-finite loss) at epoch {epoch}")
            grads = qstdb_backward(spec, w, lp, rec, g / len(idx), cfg.gamma)
            flat = {f"w:{k}": v for k, v in grads.weights.items()}
            flat.update({f"v:{k}": np.array(v) for k, v in grads.threshold.items()})
            flat.update({f"l:{k}": np.array(v) for k, v in grads.leak.items()})
            opt.step(params, flat, lr)
            for name in lif:
                params[f"v:{name}"] = np.maximum(params[f"v:{name}"], MIN_THRESHOLD)
            total += loss * len(idx)
            seen += len(idx)
        w, lp = unpack()
        train_oa = _oa(snn_predict(spec, w, lp, train_x, cfg.timesteps, eval_quant), train_y)
        test_oa = None
        if test_x is not None:
            test_oa = _oa(snn_predict(spec, w, lp, test_x, cfg.timesteps, eval_quant), test_y)
        hist.add(epoch=epoch, lr=lr, loss=total / seen, train_oa=train_oa, test_oa=test_oa,
                 wall_ms=round(1000 * (time.perf_counter() - t0), 3))
    w, lp = unpack()
    return w, lp, hist
