import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qstdb.conversion import calibrate_thresholds, init_snn_from_ann
from qstdb.errors import ConfigurationError, InputError
from qstdb.network import QuantConfig, build_mlp, init_weights, snn_forward
from qstdb.neuron import LifParams
from qstdb.quantization import calibrate_params, fake_quantize
from qstdb.training import (
    AnnTrainConfig,
    LrSchedule,
    SnnTrainConfig,
    loss_and_output_grad,
    output_weight_grad,
    qstdb_backward,
    surrogate_grad,
    train_ann,
    train_snn,
)


def test_symmetric_loss():
    loss, g = loss_and_output_grad(np.zeros(2), 0)
    assert loss == pytest.approx(math.log(2))
    assert g.tolist() == [-0.5, 0.5]


def test_confident_loss():
    loss, g = loss_and_output_grad(np.array([10.0, -10.0]), 0)
    assert loss == pytest.approx(2.0611536e-9, rel=1e-6)
    assert g[0] == pytest.approx(-2.0611536e-9, rel=1e-6)
    assert g[1] == pytest.approx(2.0611536e-9, rel=1e-6)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-50, 50)), st.data())
def test_softmax_grad_sums_to_zero(u, data):
    label = data.draw(st.integers(0, len(u) - 1))
    loss, g = loss_and_output_grad(u, label)
    assert loss >= 0
    assert abs(g.sum()) <= 1e-12


def test_loss_rejects_bad_labels():
    with pytest.raises(InputError):
        loss_and_output_grad(np.zeros(3), 3)


def test_surrogate_values():
    assert surrogate_grad(np.array([0.0]), 0.3)[0] == 0.3
    assert surrogate_grad(np.array([-0.5]), 0.3)[0] == pytest.approx(0.15)
    assert not surrogate_grad(np.array([1.0, -1.0, 2.5]), 0.3).any()


def test_output_weight_grad_examples():
    spikes = np.zeros((5, 2))
    spikes[[0, 2, 3], 0] = 1.0  # neuron 0 fires 3 of 5 steps, neuron 1 is silent
    gw = output_weight_grad(np.array([-0.5, 0.25]), spikes)
    assert gw[0, 0] == -1.5
    assert not gw[:, 1].any()


def test_lr_schedule():
    s = LrSchedule(0.01, 0.1, (60, 80, 90), 100)
    assert s.rate(60) == 0.01
    assert s.rate(61) == pytest.approx(0.001)
    assert s.rate(100) == pytest.approx(1e-5)
    with pytest.raises(ConfigurationError):
        LrSchedule(0.01, 0.1, (80, 60))


def test_zero_loss_grad_gives_zero_gradients():
    spec = build_mlp(4, [5], 3, mode="snn")
    rng = np.random.default_rng(0)
    w = init_weights(spec, rng)
    lif = {"fc1": LifParams(0.9, 0.4)}
    _, rec = snn_forward(spec, w, lif, rng.normal(size=(2, 4)), T=5)
    g = qstdb_backward(spec, w, lif, rec, np.zeros((2, 3)))
    assert all(not v.any() for v in g.weights.values())
    assert g.threshold["fc1"] == 0.0 and g.leak["fc1"] == 0.0


def test_single_neuron_two_steps_by_hand():
    x, w1, v, lam, gamma = 1.0, 1.3, 1.0, 0.9, 0.3
    w2 = np.array([[0.7], [-0.4]])
    spec = build_mlp(1, [1], 2, mode="snn")
    weights = {"fc1": np.array([[w1]]), "classifier": w2}
    lif = {"fc1": LifParams(lam, v)}
    u_out, rec = snn_forward(spec, weights, lif, np.array([x]), T=2)
    _, g = loss_and_output_grad(u_out, 1)
    grads = qstdb_backward(spec, weights, lif, rec, g, gamma)

    def sg(z):
        return gamma * max(0.0, 1 - abs(z))

    u1 = w1 * x
    o1 = 1.0 if u1 / v - 1 > 0 else 0.0
    u2 = lam * u1 + w1 * x - v * o1
    o2 = 1.0 if u2 / v - 1 > 0 else 0.0
    z1, z2 = u1 / v - 1, u2 / v - 1
    a = float(g @ w2[:, 0])  # dL/do_t from the output layer
    d2 = a * sg(z2) / v
    do1 = a - v * d2  # direct path plus the soft-reset path into u2
    d1 = do1 * sg(z1) / v + lam * d2
    assert u_out.tolist() == pytest.approx((w2[:, 0] * (o1 + o2)).tolist())
    assert grads.weights["fc1"][0, 0] == pytest.approx(x * (d1 + d2), rel=1e-14)
    assert grads.leak["fc1"] == pytest.approx(d2 * u1, rel=1e-14)
    dv = -do1 * sg(z1) * u1 / v**2 - a * sg(z2) * u2 / v**2 - d2 * o1
    assert grads.threshold["fc1"] == pytest.approx(dv, rel=1e-14)
    assert grads.weights["classifier"][:, 0] == pytest.approx(g * (o1 + o2), rel=1e-14)


def toy_set(rng, n=80, bands=8):
    """Two linearly separable classes."""
    y = rng.integers(0, 2, size=n)
    direction = np.linspace(-1, 1, bands)
    x = rng.normal(0, 0.3, size=(n, bands)) + np.where(y[:, None] == 1, 1.0, -1.0) * direction
    return x, y


def test_ann_training_separable_toy_set():
    rng = np.random.default_rng(1)
    x, y = toy_set(rng)
    spec = build_mlp(8, [16], 2)
    w0 = init_weights(spec, rng)
    cfg = AnnTrainConfig(epochs=20, lr=0.05, milestones=(15,), batch_size=10)
    w, hist = train_ann(spec, w0, x, y, cfg, np.random.default_rng(2))
    assert max(r["train_oa"] for r in hist.records) == 1.0
    losses = hist.losses()
    assert losses[9] < losses[0]
    w_again, _ = train_ann(spec, w0, x, y, cfg, np.random.default_rng(2))
    assert all(np.array_equal(w[k], w_again[k]) for k in w)


def test_snn_training_updates_thresholds_and_keeps_master_weights():
    rng = np.random.default_rng(3)
    x, y = toy_set(rng)
    spec = build_mlp(8, [16], 2)
    w_ann, _ = train_ann(spec, init_weights(spec, rng), x, y, AnnTrainConfig(epochs=10, lr=0.05, batch_size=10), rng)
    snn_spec, w, _ = init_snn_from_ann(spec, w_ann)
    lif, _ = calibrate_thresholds(snn_spec, w, x[:50])
    cfg = SnnTrainConfig(epochs=10, lr=1e-2, milestones=(8,), batch_size=10, bits=6, timesteps=5)
    w_new, lif_new, hist = train_snn(snn_spec, w, lif, x, y, cfg, np.random.default_rng(4), x, y)
    assert hist.losses()[-1] < hist.losses()[0]
    assert hist.records[-1]["test_oa"] >= 0.95
    assert lif_new["fc1"].threshold != lif["fc1"].threshold
    assert lif_new["fc1"].leak != 1.0
    # master weights are not snapped to the 6-bit grid
    for k, v in w_new.items():
        assert not np.allclose(v, fake_quantize(v, calibrate_params(v, 6, "affine")), atol=1e-12)


def test_32_bit_training_quantization_is_near_identity():
    rng = np.random.default_rng(5)
    spec = build_mlp(6, [8], 3, mode="snn")
    w = init_weights(spec, rng)
    lif = {"fc1": LifParams(1.0, 0.5)}
    x = rng.normal(size=(4, 6))
    u_fp, _ = snn_forward(spec, w, lif, x, T=5)
    u_32, _ = snn_forward(spec, w, lif, x, T=5, quant=QuantConfig(weight_bits=32))
    assert np.allclose(u_fp, u_32, atol=1e-6)
