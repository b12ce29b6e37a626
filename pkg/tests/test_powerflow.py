import numpy as np
import pytest

from lv_storage_opt.grid import Branch, Bus, Network, PerUnitBase
from lv_storage_opt.powerflow import (
    build_cosphi_polygon,
    build_polygon,
    fbs_solve,
    linearize,
)

# Golden value for the 2-bus fixed point (z = 0.01+0.005j pu, load 0.1 pu),
# computed to machine precision with a standalone fixed-point script.
TWO_BUS_V_MAG = 0.9989988726
TWO_BUS_V_ANG_DEG = -0.0286766000


def two_bus_net():
    return Network(
        buses=[Bus("slack", 0.9, 1.1), Bus("load", 0.9, 1.1)],
        branches=[Branch("slack", "load", 0.01, 0.005, 2.0)],
        slack_bus="slack",
        slack_v_pu=1.0,
        base=PerUnitBase(),
    )


def test_zero_load_gives_flat_profile(feeder):
    net, _ = feeder
    zero = np.zeros(net.n_bus)
    sol = fbs_solve(net, zero, zero)
    assert np.allclose(sol.v_mag, net.slack_v_pu, atol=1e-12)
    assert sol.losses_pu == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(np.abs(sol.i_branch), 0.0, atol=1e-12)


def test_two_bus_golden_fixed_point():
    net = two_bus_net()
    p = np.array([0.0, 0.1])
    q = np.array([0.0, 0.0])
    sol = fbs_solve(net, p, q, tol=1e-13)
    assert sol.v_mag[1] == pytest.approx(TWO_BUS_V_MAG, abs=1e-9)
    assert sol.v_angle_deg[1] == pytest.approx(TWO_BUS_V_ANG_DEG, abs=1e-7)


def test_fixed_point_reinjection_is_stationary():
    net = two_bus_net()
    p = np.array([0.0, 0.1])
    q = np.array([0.0, 0.05])
    sol = fbs_solve(net, p, q, tol=1e-12)
    again = fbs_solve(net, p, q, tol=1e-12, max_iter=200)
    assert np.max(np.abs(sol.v_complex - again.v_complex)) < 1e-11


def test_power_balance_at_solution(feeder, rng):
    net, _ = feeder
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    p[1:] = rng.uniform(-0.15, 0.1, net.n_bus - 1)
    q[1:] = rng.uniform(-0.03, 0.03, net.n_bus - 1)
    sol = fbs_solve(net, p, q, tol=1e-12)
    # slack injection equals total load plus losses
    head_branches = [j for j in range(net.n_branch) if net.branch_from[j] == 0]
    s_slack = sum(sol.v_complex[0] * np.conj(sol.i_branch[j]) for j in head_branches)
    assert s_slack.real == pytest.approx(p[1:].sum() + sol.losses_pu, abs=1e-9)


def test_table_loading_stays_inside_band(feeder):
    net, _ = feeder
    p = np.full(net.n_bus, 4.0 / net.base.s_kva)
    p[0] = 0.0
    q = 0.33 * p
    sol = fbs_solve(net, p, q)
    assert sol.v_mag.min() >= 0.9
    assert sol.v_mag.max() <= 1.1


def test_single_pv_at_weak_bus_violates_upper_band(feeder):
    net, _ = feeder
    p = np.zeros(net.n_bus)
    p[net.bus_index["f4b3"]] = -20.0 / net.base.s_kva
    sol = fbs_solve(net, p, np.zeros(net.n_bus))
    assert sol.v_mag.max() > 1.1


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------


def test_voltage_sensitivity_matches_central_difference(feeder, feeder_lin):
    net, _ = feeder
    lin = feeder_lin
    bus = net.bus_index["f2b3"]
    h = 2.5e-4  # different probe size than the builder's
    p = np.zeros(net.n_bus)
    q = np.zeros(net.n_bus)
    p[bus] = -h
    plus = fbs_solve(net, p, q, tol=1e-13)
    p[bus] = h
    minus = fbs_solve(net, p, q, tol=1e-13)
    fd = (plus.v_mag - minus.v_mag) / (2 * h)
    assert np.max(np.abs(lin.voltage_sens[:, bus] - fd)) < 1e-6


def test_loss_pieces_vanish_with_resistance():
    net = two_bus_net()
    lin = linearize(net)
    stiff = Network(
        buses=[Bus("slack", 0.9, 1.1), Bus("load", 0.9, 1.1)],
        branches=[Branch("slack", "load", 1e-7, 0.005, 2.0)],
        slack_bus="slack",
        slack_v_pu=1.0,
        base=PerUnitBase(),
    )
    lin_stiff = linearize(stiff)
    # pieces scale linearly with the branch resistance
    ratio = 1e-7 / 0.01
    assert np.max(np.abs(lin_stiff.loss_slope)) == pytest.approx(
        ratio * np.max(np.abs(lin.loss_slope)), rel=1e-9
    )
    assert np.max(np.abs(lin_stiff.loss_intercept)) == pytest.approx(
        ratio * np.max(np.abs(lin.loss_intercept)), rel=1e-9
    )


def test_loss_pieces_touch_curve_at_supports(feeder_lin):
    lin = feeder_lin
    r = lin.net.r_pu
    for j in range(lin.n_branch):
        for i in lin.loss_support_current[j]:
            assert lin.piece_loss(j, i) == pytest.approx(r[j] * i * i, abs=1e-9)


def test_loss_pieces_overshoot_is_bounded_by_chord_gap(feeder_lin, rng):
    lin = feeder_lin
    r = lin.net.r_pu
    for j in range(lin.n_branch):
        supports = lin.loss_support_current[j]
        h = supports[1] - supports[0]
        for i in rng.uniform(supports[0], supports[-1], size=40):
            gap = lin.piece_loss(j, i) - r[j] * i * i
            assert gap >= -1e-12  # epigraph max never dips below the curve inside range
            assert gap <= r[j] * h * h / 4 + 1e-12


def test_zero_current_has_zero_modeled_loss(feeder_lin):
    lin = feeder_lin
    for j in range(lin.n_branch):
        assert lin.piece_loss(j, 0.0) == pytest.approx(0.0, abs=1e-15)


def test_linearization_error_shrinks_quadratically(feeder, feeder_lin):
    net, _ = feeder
    lin = feeder_lin

    def worst_error(scale):
        p_load = np.full(net.n_bus, scale / net.base.s_kva)
        p_load[0] = 0.0
        q_load = 0.3 * p_load
        sol = fbs_solve(net, p_load, q_load, tol=1e-13)
        pred = lin.predict_voltage(-p_load, -q_load)
        return np.max(np.abs(pred - sol.v_mag))

    e_full = worst_error(8.0)
    e_half = worst_error(4.0)
    assert e_full / e_half > 2.5  # first-order model: error ratio approaches 4


def test_high_pv_snapshot_voltage_mae(feeder, feeder_lin):
    net, _ = feeder
    lin = feeder_lin
    # high-PV snapshot: 20 kW PV, 4 kW households, 10 kW charging
    p_inj = np.full(net.n_bus, (20.0 - 4.0 - 10.0) / net.base.s_kva)
    p_inj[0] = 0.0
    q_inj = np.full(net.n_bus, -0.33 * 4.0 / net.base.s_kva)
    q_inj[0] = 0.0
    sol = fbs_solve(net, -p_inj, -q_inj, tol=1e-13)
    pred_v = lin.predict_voltage(p_inj, q_inj)
    pred_a = lin.predict_angle_deg(p_inj, q_inj)
    v_mae = np.mean(np.abs(pred_v - sol.v_mag))
    a_mae = np.mean(np.abs(pred_a - sol.v_angle_deg))
    assert v_mae <= 5e-3
    assert a_mae <= 5e-2


# ---------------------------------------------------------------------------
# capability polygons
# ---------------------------------------------------------------------------


def test_circular_polygon_vertex_on_axis_tight():
    poly = build_polygon("circular", 1.0)
    # (1, 0) satisfies all rows, with equality on the two chord rows
    assert poly.contains(1.0, 0.0, 1.0)
    assert 1.0 + poly.sum_coef * 0.0 == pytest.approx(1.0)
    assert 1.0 - poly.sum_coef * 0.0 == pytest.approx(1.0)


def test_circular_polygon_rejects_point_outside_circle():
    poly = build_polygon("circular", 1.0)
    assert not poly.contains(0.9, 0.9, 1.0)  # |S| = 1.27


def test_circular_polygon_is_inscribed(rng):
    poly = build_polygon("circular", 1.0)
    for _ in range(500):
        p, q = rng.uniform(-1.2, 1.2, 2)
        if poly.contains(p, q, 1.0):
            assert np.hypot(p, q) <= 1.0 + 1e-9


def test_cosphi_polygon_rejects_low_power_factor_near_rated():
    pf = 0.9
    poly = build_cosphi_polygon(pf, 1.0)
    tan_phi = np.tan(np.arccos(pf))
    p = 0.9
    q_bad = p * tan_phi * 1.05  # exceeds the pf wedge near rated power
    assert not poly.contains(p, q_bad, 1.0)
    q_ok = p * tan_phi * 0.95
    assert poly.contains(p, q_ok, 1.0)


def test_cosphi_polygon_is_inscribed_in_circle(rng):
    poly = build_cosphi_polygon(0.9, 1.0)
    for _ in range(500):
        p, q = rng.uniform(-1.2, 1.2, 2)
        if poly.contains(p, q, 1.0):
            assert np.hypot(p, q) <= 1.0 + 1e-9
