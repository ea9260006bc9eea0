import json

import numpy as np
import pytest

from qstdb.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from qstdb.errors import InputError
from qstdb.network import build_cnn32h, init_weights
from qstdb.neuron import LifParams


def make():
    spec = build_cnn32h(20, 3, mode="snn")
    w = init_weights(spec, np.random.default_rng(0))
    lif = {layer.name: LifParams(0.9, 0.5 + i) for i, layer in enumerate(spec.spiking_layers)}
    return Checkpoint(spec, w, lif, meta={"stage": "qstdb", "weight_bits": 6}).with_inference_quant(6)


def test_roundtrip_is_bitwise(tmp_path):
    ck = make()
    save_checkpoint(ck, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.spec.to_dict() == ck.spec.to_dict()
    assert all(np.array_equal(back.weights[k], ck.weights[k]) for k in ck.weights)
    assert back.lif == ck.lif
    assert back.quant == ck.quant and back.quant["conv1"].scheme == "scale"
    assert back.meta == ck.meta


def test_truncated_tensor_is_reported(tmp_path):
    save_checkpoint(make(), tmp_path / "ck")
    blob = tmp_path / "ck" / "fc1.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(InputError, match="expected .* bytes"):
        load_checkpoint(tmp_path / "ck")


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(InputError, match="manifest"):
        load_checkpoint(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(InputError, match="format"):
        load_checkpoint(tmp_path)
