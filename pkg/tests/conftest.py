"""Shared fixtures: small random spiking nets mirrored in the oracle's format,
plus the per-criterion pass/fail summary printed by the acceptance suite."""

from __future__ import annotations

import numpy as np
import pytest

from oracles import conv_taps, dense_taps
from qstdb.network import LayerSpec, NetworkSpec
from qstdb.neuron import LifParams

CRITERIA = {
    1: "dynamics match the naive simulator bit for bit",
    2: "Q-STDB gradients match finite differences and the BPTT oracle",
    3: "quantization roundtrip, integer conv and affine decomposition",
    4: "energy constants, ratios and FLOP counts",
    5: "OA / AA / kappa reference values",
    6: "desk-scale end-to-end training",
    7: "converted SNN agrees with its source ANN",
    8: "Indian Pines reproduction (optional)",
}

_outcomes: dict = {}


def dyadic(rng, shape, num, den):
    """Random multiples of 1/den in [-num/den, num/den]: sums of these are exact."""
    return rng.integers(-num, num + 1, size=shape) / den


def random_two_layer(rng, kind="linear", T=5, dyadic_values=False, batch=1):
    """Hidden LIF layer + accumulating classifier.

    Returns ``(spec, weights, lif, oracle_layers, x)`` where ``x`` is
    ``[batch, *input_shape]`` and ``oracle_layers`` carries the same numbers in
    the tap-list form used by tests/oracles.py.
    """
    classes = int(rng.integers(2, 5))
    if kind == "linear":
        n_in, n_hid = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        input_shape = (n_in,)
        hidden = LayerSpec("fc1", "linear", out_channels=n_hid, activation="lif")
    else:
        d, h = int(rng.integers(3, 6)), int(rng.integers(2, 4))
        input_shape = (1, d, h, h)
        k = (int(rng.integers(1, min(d, 3) + 1)), int(rng.integers(1, h + 1)), 1)
        pad = (int(rng.integers(0, 2)), 0, 0)
        hidden = LayerSpec("conv1", "conv3d", out_channels=int(rng.integers(2, 4)), kernel=k,
                           stride=(1, 1, 1), padding=pad, activation="lif")
    spec = NetworkSpec("tiny", input_shape, classes, [hidden, LayerSpec("classifier", "classifier", out_channels=classes)],
                       mode="snn", timesteps=T)
    w1_shape = hidden.weight_shape()
    w2_shape = spec.layers[1].weight_shape()
    if dyadic_values:
        w1, w2 = dyadic(rng, w1_shape, 64, 64), dyadic(rng, w2_shape, 64, 64)
        x = dyadic(rng, (batch,) + input_shape, 32, 16)
        leak = int(rng.integers(4, 9)) / 8
        threshold = int(rng.integers(4, 33)) / 16
    else:
        w1, w2 = rng.normal(0, 1, w1_shape), rng.normal(0, 1, w2_shape)
        x = rng.normal(0, 1, (batch,) + input_shape)
        leak = float(rng.uniform(0.5, 1.0))
        threshold = float(rng.uniform(0.3, 1.5))
    weights = {"fc1" if kind == "linear" else "conv1": w1, "classifier": w2}
    lif = {hidden.name: LifParams(leak, threshold)}
    if kind == "linear":
        taps = dense_taps(w1_shape[1], w1_shape[0])
    else:
        taps = conv_taps(input_shape, w1_shape, hidden.stride, hidden.padding)
    n_hidden = int(np.prod(hidden.out_shape))
    layers = [
        {"taps": taps, "w": w1, "leak": leak, "threshold": threshold},
        {"taps": dense_taps(n_hidden, classes), "w": w2},
    ]
    return spec, weights, lif, layers, x


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    state = _outcomes.setdefault(n, {"passed": 0, "failed": 0, "skipped": 0, "seconds": 0.0})
    if rep.when == "call":
        state["seconds"] += rep.duration
    if rep.skipped and rep.when in ("setup", "call"):
        state["skipped"] += 1
    elif rep.failed:
        state["failed"] += 1
    elif rep.passed and rep.when == "call":
        state["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        s = _outcomes.get(n)
        if s is None:
            continue
        if s["failed"]:
            verdict = "FAIL"
        elif s["passed"]:
            verdict = "PASS"
        else:
            verdict = "SKIP"
        tr.write_line(f"criterion {n}: {verdict}  {CRITERIA[n]}  "
                      f"({s['passed']} passed, {s['failed']} failed, {s['skipped']} skipped, {s['seconds']:.2f} s)")
