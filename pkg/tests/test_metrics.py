"""Error statistics, traffic KPIs, and CSV report writers."""

import numpy as np
import pytest

from safmpc.dynamics import FlowSet, Indexer
from safmpc.metrics import (
    EmptySeriesError,
    ZeroDenominatorError,
    approximation_error,
    mad,
    mpe,
    saturation_errors,
    traffic_kpis,
    write_outflow,
    write_per_link,
    write_report,
)
from safmpc.network import Link, Network, Node


def tiny():
    """One signalised entry link feeding one exit link."""
    links = {
        1: Link(upstream=None, downstream=0, length=500.0),
        2: Link(upstream=0, downstream=None, length=250.0),
    }
    nodes = {0: Node(phases=(frozenset({1}),))}
    net = Network(links=links, nodes=nodes)
    return net, Indexer(net)


def zero_flow(idx):
    return FlowSet(f={}, p=idx.zeros(), q=idx.zeros(), b=idx.zeros(),
                   r=idx.zeros(), s=np.zeros(idx.n_links))


# -- median percent error ------------------------------------------------------


def test_mpe_identity_is_zero():
    assert mpe([1600.0], [1600.0]) == 0.0


def test_mpe_hand_value():
    # (1650-1600)/1600 = +3.125 %, (1500-1600)/1600 = -6.25 %; median -1.5625 %
    assert mpe([1650.0, 1500.0], [1600.0, 1600.0]) == -1.5625


def test_mpe_rejects_empty_and_mismatched():
    with pytest.raises(EmptySeriesError):
        mpe([], [])
    with pytest.raises(EmptySeriesError):
        mpe([1.0, 2.0], [1.0])


def test_mpe_rejects_zero_actual():
    with pytest.raises(ZeroDenominatorError):
        mpe([1.0, 2.0], [1.0, 0.0])


# -- median absolute difference ------------------------------------------------


def test_mad_identical_series_is_zero():
    assert mad([3.0, 7.0, 2.0], [3.0, 7.0, 2.0]) == 0.0


def test_mad_hand_value():
    # |1650-1600| = 50, |1500-1600| = 100; median 75 veh/h
    assert mad([1650.0, 1500.0], [1600.0, 1600.0]) == 75.0


def test_mad_translation_invariant():
    rng = np.random.default_rng(3)
    a = rng.uniform(1000, 2000, size=11)
    b = rng.uniform(1000, 2000, size=11)
    for c in (-500.0, 17.3, 1e4):
        assert mad(a + c, b + c) == pytest.approx(mad(a, b), abs=1e-9)


def test_mad_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=7)
        b = rng.normal(size=7)
        assert mad(a, b) >= 0.0


def test_mad_rejects_empty_and_mismatched():
    with pytest.raises(EmptySeriesError):
        mad([], [])
    with pytest.raises(EmptySeriesError):
        mad([1.0], [1.0, 2.0])


# -- relative objective deviation ------------------------------------------------


def test_approximation_error_identity_and_hand_values():
    assert approximation_error(835.85, 835.85) == 0.0
    assert approximation_error(836.24, 835.85) == pytest.approx(
        0.39 / 835.85 * 100.0, abs=1e-12)
    assert approximation_error(821.27, 835.85) == pytest.approx(
        14.58 / 835.85 * 100.0, abs=1e-12)


def test_approximation_error_symmetric_in_sign_of_gap():
    assert approximation_error(90.0, 100.0) == approximation_error(110.0, 100.0) == 10.0


def test_approximation_error_rejects_zero_reference():
    with pytest.raises(ZeroDenominatorError):
        approximation_error(1.0, 0.0)


# -- traffic KPIs ----------------------------------------------------------------


def test_kpis_constant_queue_means_itself():
    net, idx = tiny()
    states = [idx.state_from_pairs({(1, 0): 10.0}, step=k) for k in range(31)]
    flows = [zero_flow(idx) for _ in range(30)]
    k = traffic_kpis(states, flows, idx, C=120.0)
    assert k.cycles == 30
    assert k.time_mean_queue == 10.0
    assert k.vehicle_hours == pytest.approx(120.0 * 10.0 * 30 / 3600.0)
    assert k.vehicles_exited == 0.0
    assert k.att_minutes == float("inf")
    assert k.distance_km == 0.0
    assert k.delay_s_per_km == float("inf")  # queued vehicles, zero distance
    assert np.all(k.outflow_per_cycle == 0.0)


def test_kpis_zero_demand_log_is_all_zero():
    net, idx = tiny()
    states = [idx.state_from_pairs({}, step=k) for k in range(6)]
    flows = [zero_flow(idx) for _ in range(5)]
    k = traffic_kpis(states, flows, idx, C=90.0)
    assert k.time_mean_queue == 0.0
    assert k.vehicle_hours == 0.0
    assert k.delay_s_per_km == 0.0
    assert k.att_minutes == float("inf")
    assert np.all(k.outflow_per_cycle == 0.0)


def test_kpis_hand_computed_cycle():
    net, idx = tiny()
    C = 100.0
    fl = zero_flow(idx)
    fl.b[idx.link_pos[1], idx.comm_pos[0]] = 0.1      # 10 veh enter link 1
    fl.f[(1, 2, 0)] = 0.02                            # 2 veh move onto link 2
    fl.q[idx.link_pos[1], idx.comm_pos[0]] = 0.02
    fl.q[idx.link_pos[2], idx.comm_pos[2]] = 0.03     # 3 veh arrive at destination
    fl.r[idx.link_pos[2], idx.comm_pos[0]] = 0.01     # 1 veh exits as through HDV
    states = [idx.state_from_pairs({(1, 0): 20.0}),
              idx.state_from_pairs({(1, 0): 26.0}, step=1)]
    k = traffic_kpis(states, [fl], idx, C, requested=[np.array([[0.15, 0.0], [0.0, 0.0]])])

    assert k.time_mean_queue == 26.0
    assert k.vehicles_entered == pytest.approx(10.0)
    # outflow: C * (q total - transfers + r total) = 100 * (0.05 - 0.02 + 0.01)
    assert k.vehicles_exited == pytest.approx(4.0)
    assert k.outflow_per_cycle == pytest.approx([4.0])
    assert k.vehicles_blocked == pytest.approx(5.0)   # 15 requested, 10 admitted
    # distance: 2 veh * 250 m (transfer target) + 10 veh * 500 m (entry)
    assert k.distance_km == pytest.approx(5.5)
    assert k.vehicle_hours == pytest.approx(2600.0 / 3600.0)
    assert k.att_minutes == pytest.approx(2600.0 / 4.0 / 60.0)
    # delay: free-flow time of 5.5 km at 50 km/h is 396 s
    assert k.delay_s_per_km == pytest.approx((2600.0 - 396.0) / 5.5)


def test_kpis_cumulative_outflow_nondecreasing():
    net, idx = tiny()
    rng = np.random.default_rng(11)
    flows = []
    for _ in range(12):
        fl = zero_flow(idx)
        fl.q[idx.link_pos[2], idx.comm_pos[2]] = rng.uniform(0, 0.05)
        flows.append(fl)
    states = [idx.state_from_pairs({(1, 0): 5.0}, step=k) for k in range(13)]
    k = traffic_kpis(states, flows, idx, C=60.0)
    cum = np.cumsum(k.outflow_per_cycle)
    assert np.all(np.diff(cum) >= 0)
    assert cum[-1] == pytest.approx(k.vehicles_exited)


def test_kpis_validates_log_shape():
    net, idx = tiny()
    states = [idx.state_from_pairs({})]
    with pytest.raises(ValueError):
        traffic_kpis(states * 3, [zero_flow(idx)], idx, C=60.0)
    with pytest.raises(EmptySeriesError):
        traffic_kpis(states, [], idx, C=60.0)


# -- saturation model-vs-plant comparison ----------------------------------------


def test_saturation_errors_hand_values():
    net, idx = tiny()
    s_model = [None, {1: 1650.0 / 3600.0}, {1: 1500.0 / 3600.0}]
    s_plant = [np.array([0.5, 0.4]),
               np.array([1600.0 / 3600.0, 0.0]),
               np.array([1600.0 / 3600.0, 0.0])]
    res = saturation_errors(s_model, s_plant, idx)
    n, e_mpe, e_mad, med_m, med_a = res.per_link[1]
    assert n == 2
    assert e_mpe == pytest.approx(-1.5625, abs=1e-9)
    assert e_mad == pytest.approx(75.0, abs=1e-9)
    assert med_m == pytest.approx(1575.0, abs=1e-9)
    assert med_a == pytest.approx(1600.0, abs=1e-9)
    assert 2 not in res.per_link          # plant rate zero on active cycles
    assert res.pooled_mpe == pytest.approx(-1.5625, abs=1e-9)
    assert res.pooled_mad == pytest.approx(75.0, abs=1e-9)


def test_saturation_errors_pool_across_links():
    net, idx = tiny()
    s_model = [{1: 1700.0 / 3600.0, 2: 1500.0 / 3600.0}]
    s_plant = [np.array([1600.0 / 3600.0, 1600.0 / 3600.0])]
    res = saturation_errors(s_model, s_plant, idx)
    assert res.per_link[1][:2] == (1, pytest.approx(6.25, abs=1e-9))
    assert res.per_link[2][:2] == (1, pytest.approx(-6.25, abs=1e-9))
    assert res.pooled_mpe == pytest.approx(0.0, abs=1e-9)
    assert res.pooled_mad == pytest.approx(100.0, abs=1e-9)


def test_saturation_errors_empty_when_controller_never_ran():
    net, idx = tiny()
    res = saturation_errors([None, None], [np.ones(2), np.ones(2)], idx)
    assert res.per_link == {}
    assert res.pooled_mpe is None and res.pooled_mad is None


def test_saturation_errors_rejects_mismatched_logs():
    net, idx = tiny()
    with pytest.raises(ValueError):
        saturation_errors([None], [np.ones(2), np.ones(2)], idx)


# -- CSV writers ------------------------------------------------------------------


def test_report_writer_is_deterministic(tmp_path):
    net, idx = tiny()
    states = [idx.state_from_pairs({(1, 0): 10.0}, step=k) for k in range(4)]
    flows = [zero_flow(idx) for _ in range(3)]
    k = traffic_kpis(states, flows, idx, C=120.0)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_report(a, k, extra={"zeta": 2.0, "alpha": 1.0})
    write_report(b, k, extra={"zeta": 2.0, "alpha": 1.0})
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "metric,value"
    assert lines[1] == "cycles,3.000000"
    assert "time_mean_queue_veh,10.000000" in lines
    # extras appended in sorted key order
    assert lines[-2:] == ["alpha,1.000000", "zeta,2.000000"]


def test_per_link_writer_format(tmp_path):
    net, idx = tiny()
    s_model = [{1: 1650.0 / 3600.0}, {1: 1500.0 / 3600.0}]
    s_plant = [np.array([1600.0 / 3600.0, 0.0])] * 2
    res = saturation_errors(s_model, s_plant, idx)
    p = tmp_path / "per_link.csv"
    write_per_link(p, res)
    lines = p.read_text().splitlines()
    assert lines[0] == "link,samples,mpe_pct,mad_vph,median_model_vph,median_plant_vph"
    assert lines[1].startswith("1,2,-1.562500,75.000000,1575.000000,1600.000000")
    assert lines[2].startswith("all,2,-1.562500,75.000000,,")


def test_outflow_writer_accumulates(tmp_path):
    net, idx = tiny()
    flows = []
    for rate in (0.02, 0.0, 0.05):
        fl = zero_flow(idx)
        fl.q[idx.link_pos[2], idx.comm_pos[2]] = rate
        flows.append(fl)
    states = [idx.state_from_pairs({}, step=k) for k in range(4)]
    k = traffic_kpis(states, flows, idx, C=100.0)
    p1, p2 = tmp_path / "o1.csv", tmp_path / "o2.csv"
    write_outflow(p1, k)
    write_outflow(p2, k)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "cycle,exited_veh,cumulative_veh"
    assert lines[1] == "0,2.000000,2.000000"
    assert lines[2] == "1,0.000000,2.000000"
    assert lines[3] == "2,5.000000,7.000000"
