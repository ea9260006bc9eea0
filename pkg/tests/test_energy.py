import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qstdb.energy import ActivityProfile, EnergyConstants, energy_totals, flops_layer, measure_activity, op_energy
from qstdb.errors import InputError
from qstdb.network import LayerSpec, NetworkSpec, build_cnn3d, build_mlp


def test_flops_examples():
    conv = LayerSpec("c", "conv2d", out_channels=8, kernel=(3, 3), stride=(1, 1), padding=(0, 0))
    NetworkSpec("n", (2, 6, 6), 2, [conv, LayerSpec("classifier", "classifier", out_channels=2)])
    assert conv.out_shape == (8, 4, 4)
    assert flops_layer(conv) == 2304
    assert flops_layer(build_cnn3d(220, 16).layers[0]) == 1_059_480
    assert flops_layer(conv, "snn", 0.0) == 0.0
    with pytest.raises(InputError):
        flops_layer(conv, "snn")


def test_op_energy_scaling():
    assert op_energy("AC", 16) == pytest.approx(0.05)
    assert op_energy("MAC", 16) == pytest.approx(3.2 * 0.5**1.25)
    law = EnergyConstants(anchors="power_law")
    assert op_energy("MAC", 6, law) == pytest.approx(3.2 * (6 / 32) ** 1.25)
    with pytest.raises(InputError):
        op_energy("MUL", 8)


def test_activity_examples():
    full = {"fc1": np.ones((5, 2, 4))}
    silent = {"fc2": np.zeros((5, 2, 3))}
    prof = measure_activity([full, silent], 5)
    assert prof.zeta == {"fc1": 5.0, "fc2": 0.0}
    assert ActivityProfile.from_dict(json.loads(json.dumps(prof.to_dict()))) == prof
    with pytest.raises(InputError):
        measure_activity([full], 4)


def toy_spec():
    return build_mlp(10, [100], 100)  # 1000 FLOPs, then 10000 FLOPs


def test_two_layer_toy_totals():
    rep = energy_totals(toy_spec(), {"classifier": 1.0}, ann_bits=32, snn_bits=32)
    assert rep.E_snn == pytest.approx(4200.0)
    assert rep.E_ann == pytest.approx(35200.0)
    assert rep.ratios["ann32_over_snn32"] == pytest.approx(8.38, abs=0.005)
    quiet = energy_totals(toy_spec(), {"classifier": 0.0}, 32, 32)
    assert quiet.E_snn == pytest.approx(1000 * 3.2)


def test_presynaptic_activity_from_profile_and_alternative_total():
    spec = build_mlp(4, [6, 5], 3)
    prof = ActivityProfile({"fc1": 0.5, "fc2": 2.0}, {"fc1": 6, "fc2": 5}, 5)
    rep = energy_totals(spec, prof, 32, 6)
    zetas = {r.name: r.zeta for r in rep.layers}
    assert zetas == {"fc1": None, "fc2": 0.5, "classifier": 2.0}
    assert rep.E_snn == pytest.approx(24 * 0.26 + 30 * 0.5 * 0.02 + 15 * 2.0 * 0.02)
    assert rep.E_snn_last_mac == pytest.approx(24 * 0.26 + 30 * 0.5 * 0.02 + 15 * 2.0 * 0.26)
    with pytest.raises(InputError):
        energy_totals(spec, ActivityProfile({"fc1": 0.5}, {"fc1": 6}, 5))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 1))
def test_snn_energy_is_monotone_and_consistent(z1, z2, bump):
    spec = build_mlp(4, [6, 5], 3)
    a = energy_totals(spec, {"fc2": z1, "classifier": z2})
    b = energy_totals(spec, {"fc2": z1 + bump, "classifier": z2})
    assert b.E_snn >= a.E_snn
    assert a.E_snn == pytest.approx(sum(r.e_snn_pj for r in a.layers), rel=1e-15)
    assert a.E_ann == sum(r.e_ann_pj for r in a.layers)


def test_report_files(tmp_path):
    rep = energy_totals(toy_spec(), {"classifier": 0.5678})
    rep.write_json(tmp_path / "e.json")
    rep.write_csv(tmp_path / "e.csv")
    d = json.loads((tmp_path / "e.json").read_text())
    assert d["layers"][1]["zeta"] == 0.5678
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert rows[0] == ["name", "F_ann", "F_snn", "zeta", "op_kind", "e_pj"]
    assert [r[4] for r in rows[1:]] == ["MAC", "AC"]
