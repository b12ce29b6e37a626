import json

import numpy as np
import pytest

from lv_storage_opt.grid import (
    GridFormatError,
    GridValidationError,
    PerUnitBase,
    from_per_unit,
    load_network,
    per_unit,
)


def test_bundled_feeder_loads_with_expected_counts(feeder):
    net, devices = feeder
    assert net.n_bus == 19  # slack + 18 households
    assert net.n_branch == 18
    assert devices.n_pv == 18
    assert len(devices.storage) == 18


def test_radiality_dfs_reaches_all_buses(feeder):
    net, _ = feeder
    reached = {0}
    for j in net.branch_order:
        assert net.branch_from[j] in reached
        reached.add(int(net.branch_to[j]))
    assert reached == set(range(net.n_bus))
    assert len(net.branch_order) == net.n_bus - 1


def test_device_maps_conserve_counts(feeder):
    net, devices = feeder
    c_g = devices.gen_incidence()
    c_pv = devices.pv_incidence()
    assert c_g.sum() == devices.n_gen
    assert c_pv.sum() == devices.n_pv
    assert np.all(c_g.sum(axis=0) == 1.0)
    assert np.all(c_pv.sum(axis=0) == 1.0)


def _minimal_doc():
    return {
        "format_version": 1,
        "base": {"s_kva": 100.0, "v_ll_v": 400.0},
        "slack": {"bus": "slack", "v_pu": 1.0},
        "buses": [
            {"id": "slack", "v_min": 0.9, "v_max": 1.1},
            {"id": "house", "v_min": 0.9, "v_max": 1.1},
        ],
        "branches": [
            {"from": "slack", "to": "house", "r_pu": 0.01, "x_pu": 0.005, "i_max_pu": 1.0}
        ],
        "generators": [
            {
                "id": "head",
                "bus": "slack",
                "p_min_kw": -100,
                "p_max_kw": 100,
                "s_max_kva": 100,
                "is_slack": True,
            }
        ],
        "pv": [],
    }


def test_two_bus_file_is_smallest_valid_network(tmp_path):
    path = tmp_path / "two_bus.json"
    path.write_text(json.dumps(_minimal_doc()))
    net, _ = load_network(path)
    assert net.n_bus == 2
    assert net.n_branch == 1


def test_duplicated_branch_cycle_rejected(tmp_path):
    doc = _minimal_doc()
    doc["buses"].append({"id": "b2", "v_min": 0.9, "v_max": 1.1})
    doc["branches"].append(
        {"from": "house", "to": "b2", "r_pu": 0.01, "x_pu": 0.004, "i_max_pu": 1.0}
    )
    doc["branches"].append(
        {"from": "slack", "to": "b2", "r_pu": 0.01, "x_pu": 0.004, "i_max_pu": 1.0}
    )
    path = tmp_path / "cycle.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(GridValidationError, match="not radial"):
        load_network(path)


def test_nonpositive_resistance_rejected(tmp_path):
    doc = _minimal_doc()
    doc["branches"][0]["r_pu"] = 0.0
    path = tmp_path / "bad_r.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(GridValidationError, match="resistance"):
        load_network(path)


def test_disconnected_bus_rejected(tmp_path):
    doc = _minimal_doc()
    doc["buses"].append({"id": "islanded", "v_min": 0.9, "v_max": 1.1})
    doc["buses"].append({"id": "b3", "v_min": 0.9, "v_max": 1.1})
    doc["branches"].append(
        {"from": "house", "to": "b3", "r_pu": 0.01, "x_pu": 0.004, "i_max_pu": 1.0}
    )
    path = tmp_path / "island.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(GridValidationError):
        load_network(path)


def test_malformed_json_is_a_format_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(GridFormatError):
        load_network(path)


def test_low_rx_ratio_warns_but_loads(tmp_path):
    doc = _minimal_doc()
    doc["branches"][0]["x_pu"] = 0.02  # R/X = 0.5
    path = tmp_path / "low_rx.json"
    path.write_text(json.dumps(doc))
    with pytest.warns(UserWarning, match="R/X"):
        load_network(path)


def test_per_unit_examples():
    base = PerUnitBase(s_kva=100.0)
    assert per_unit(10.0, base) == pytest.approx(0.1)
    assert per_unit(0.0, base) == 0.0


def test_per_unit_round_trip_identity(rng):
    base = PerUnitBase(s_kva=137.5)
    for x in rng.uniform(-500, 500, size=50):
        assert from_per_unit(per_unit(x, base), base) == pytest.approx(x, abs=1e-12)
