"""Storage sizing/placement and dispatch tests.

The sizing answer is checked against an independent oracle: a greedy
charge/discharge simulation on the exact sweep power flow, wrapped in a
1-D search over capacity. Energy dynamics are pinned by hand-computable
two-hour instances solved through the relaxation only.
"""

import math

import numpy as np
import pytest

from bessplan.conic import ConicProgram, solve_relaxation
from bessplan.netmodel import LoadProfileSet
from bessplan.oep import (AuditError, BessPlan, BessSpec, PlanError,
                          TouTariff, _storage_block, audit_plan, build_toep,
                          dispatch_day, plan, savings_report, tou_dispatch)
from helpers_power import (feeder, feeder2, profiles_from_rows,
                           sweep_power_flow)


def uv_feeder():
    """2-bus feeder whose evening peak undervolts without storage."""
    return feeder(2, [(1, 2, 0.05, 0.03)], {2: (150.0, 60.0)}, name="uv2")


def uv_rows(peak=(950.0, 380.0), base=(150.0, 60.0), peak_hours=(18, 19),
            n_hours=24):
    return [{2: peak if t in peak_hours else base} for t in range(n_hours)]


def uv_profiles(**kw):
    net = uv_feeder()
    return net, profiles_from_rows(net, "2024-06-01T00", uv_rows(**kw))


def active_only_spec(**kw):
    """No reactive capability, so the discharge oracle is exact."""
    return BessSpec(kq_inj=0.0, kq_abs=0.0, **kw)


class TestBessSpec:
    def test_big_m_from_rates(self):
        spec = BessSpec(e_max_kwh=800.0, c_rate_ch=0.3, c_rate_dis=0.5,
                        kq_inj=0.2, kq_abs=0.6)
        assert spec.big_m_active() == 0.5 * 800.0
        assert spec.big_m_reactive() == 0.6 * 800.0

    @pytest.mark.parametrize("bad", [
        dict(soc_min=0.5, soc_max=0.5),
        dict(soc_min=-0.1),
        dict(soc_max=1.2),
        dict(soc_initial=0.05),
        dict(eta_ch=0.0),
        dict(eta_dis=1.3),
        dict(e_min_kwh=-1.0),
        dict(e_min_kwh=2000.0),
        dict(c_rate_ch=-0.1),
        dict(c_cap_per_kwh=-5.0),
    ])
    def test_envelope_validation(self, bad):
        with pytest.raises(ValueError):
            BessSpec(**bad)


class TestTariff:
    def test_daily_pattern_tiles(self):
        pattern = np.linspace(0.1, 0.5, 24)
        tariff = TouTariff.from_daily_pattern(pattern, 30)
        assert len(tariff.prices) == 30
        assert np.array_equal(tariff.prices[24:], pattern[:6])
        assert tariff.covers(range(30))
        assert not tariff.covers([30])

    def test_validation(self):
        with pytest.raises(ValueError, match="24"):
            TouTariff.from_daily_pattern(np.ones(23), 24)
        with pytest.raises(ValueError, match=">= 0"):
            TouTariff(np.array([0.1, -0.2]))
        with pytest.raises(ValueError, match="1-d"):
            TouTariff(np.ones((2, 2)))


class TestBuildStructure:
    def test_single_candidate_day_counts(self):
        net = feeder2()
        profiles = LoadProfileSet.constant(net, "2024-06-01T00", 24)
        prog = build_toep(net, profiles, range(24), [2], BessSpec())
        # commitment z plus 4 mode flags per hour
        assert len(prog.binaries) == 1 + 24 * 4
        # per hour: 6 flow rows + 1 SOC dynamics row; +1 cyclic closure
        assert len(prog._eqs) == 24 * 6 + 24 + 1
        # per hour: 4 capacity couplings + 4 gates + 2 exclusions
        # + 2 SOC band rows; +2 z/Ecap gating rows per candidate
        assert len(prog._ineqs) == 24 * 12 + 2
        assert len(prog._cones) == 24

    def test_gapped_window_gets_one_chain_per_run(self):
        net = feeder2()
        profiles = LoadProfileSet.constant(net, "2024-06-01T00", 72)
        hours = list(range(24)) + list(range(48, 72))
        prog = build_toep(net, profiles, hours, [2], BessSpec())
        assert len(prog.binaries) == 1 + 48 * 4
        # two cyclic closures, one per contiguous run
        assert len(prog._eqs) == 48 * 6 + 48 + 2

    def test_input_validation(self):
        net = feeder2()
        profiles = LoadProfileSet.constant(net, "2024-06-01T00", 24)
        spec = BessSpec()
        with pytest.raises(ValueError, match="empty"):
            build_toep(net, profiles, range(24), [], spec)
        with pytest.raises(ValueError, match="unknown"):
            build_toep(net, profiles, range(24), [9], spec)
        with pytest.raises(ValueError, match="slack"):
            build_toep(net, profiles, range(24), [1], spec)
        with pytest.raises(ValueError, match="duplicate"):
            build_toep(net, profiles, range(24), [2, 2], spec)
        with pytest.raises(ValueError, match="window"):
            build_toep(net, profiles, range(36), [2], spec)

    def test_plan_rejects_foreign_program(self):
        prog = ConicProgram("adhoc")
        prog.add_var("x", lb=0.0)
        prog.minimize({"x": 1.0})
        with pytest.raises(ValueError, match="build_toep"):
            plan(prog)


def pinned_block(spec, pins, cap=400.0, hours=(0, 1)):
    """Standalone 2-hour storage chain with charge/discharge pinned."""
    prog = ConicProgram("chain")
    _storage_block(prog, spec, 2, list(hours), 1e-3, float(cap), {}, {}, 1)
    for name, val in pins.items():
        prog.add_eq({name: 1.0}, val)
    prog.minimize({name: 1.0 for name in prog.binaries})
    res = solve_relaxation(prog)
    assert res.status == "optimal"
    return res


class TestEnergyDynamics:
    # the final discharge is left free: the cyclic closure row must
    # force it to return exactly what the pinned charge stored

    def test_lossless_round_trip(self):
        spec = BessSpec(eta_ch=1.0, eta_dis=1.0)
        res = pinned_block(spec, {"Pch[2,0]": 100.0, "Pdis[2,0]": 0.0,
                                  "Pch[2,1]": 0.0})
        # start at 0.5 * 400 = 200 kWh; unit efficiency returns exactly
        assert res.x["E[2,0]"] == pytest.approx(300.0, abs=1e-6)
        assert res.x["E[2,1]"] == pytest.approx(200.0, abs=1e-6)
        assert res.x["Pdis[2,1]"] == pytest.approx(100.0, abs=1e-6)

    def test_charge_conversion(self):
        res = pinned_block(BessSpec(), {"Pch[2,0]": 100.0, "Pdis[2,0]": 0.0,
                                        "Pch[2,1]": 0.0})
        # 100 kW for an hour at eta_ch 0.95 stores 95 kWh
        assert res.x["E[2,0]"] - 200.0 == pytest.approx(95.0, abs=1e-6)
        assert res.x["E[2,1]"] == pytest.approx(200.0, abs=1e-6)
        # both conversions hit the round trip: 95 * 0.95 kW comes back
        assert res.x["Pdis[2,1]"] == pytest.approx(90.25, abs=1e-6)

    def test_sizing_mode_has_capacity_variable(self):
        net = feeder2()
        profiles = LoadProfileSet.constant(net, "2024-06-01T00", 2)
        prog = build_toep(net, profiles, [0, 1], [2], BessSpec())
        assert "Ecap[2]" in prog._names
        spec = BessSpec()
        prog2 = ConicProgram("fixed")
        _storage_block(prog2, spec, 2, [0, 1], 1e-3, 250.0, {}, {}, 1)
        assert "Ecap[2]" not in prog2._names


class TestZeroViolationPlan:
    def test_healthy_window_buys_nothing(self):
        net = feeder2()  # 600 kW load sits at v = 0.985, no violation
        profiles = LoadProfileSet.constant(net, "2024-06-01T00", 24)
        prog = build_toep(net, profiles, range(24), [2], BessSpec())
        result = plan(prog)
        assert result.total_capacity_kwh() <= 1e-6
        assert result.objective <= 1e-3
        assert not any(result.installed.values())
        for b in result.buses:
            assert result.charge_kw[b].max(initial=0.0) <= 1e-6
            assert result.discharge_kw[b].max(initial=0.0) <= 1e-6


def min_restoring_discharge(net, p_kw, q_kvar, v_lo):
    """Smallest load-bus discharge lifting every voltage to v_lo."""
    v, _, _, _ = sweep_power_flow(net, p_kw, q_kvar)
    if math.sqrt(v.min()) >= v_lo:
        return 0.0
    lo, hi = 0.0, float(p_kw[1])
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        p2 = np.array(p_kw, float)
        p2[1] -= mid
        v, _, _, _ = sweep_power_flow(net, p2, q_kvar)
        if math.sqrt(v.min()) >= v_lo:
            hi = mid
        else:
            lo = mid
    return hi


def greedy_feasible(cap, d_req, spec, net, p_kw, q_kvar, v_lo):
    """Can a cap-kWh unit clear d_req with max-charge-then-refill?

    Charging as hard as allowed before the last violating hour maximizes
    the energy available there, so feasibility of this policy equals
    feasibility of the capacity.
    """
    if max(d_req.values(), default=0.0) <= 1e-9:
        return True
    if cap <= 0.0:
        return False
    if max(d_req.values()) > spec.c_rate_dis * cap + 1e-9:
        return False
    e = spec.soc_initial * cap
    peak_end = max(t for t, d in d_req.items() if d > 0)
    for t in range(p_kw.shape[0]):
        d = d_req.get(t, 0.0)
        if d > 0.0:
            e -= d / spec.eta_dis
            if e < spec.soc_min * cap - 1e-7:
                return False
        else:
            target = spec.soc_max * cap if t < peak_end \
                else spec.soc_initial * cap
            c = min(spec.c_rate_ch * cap,
                    max(0.0, target - e) / spec.eta_ch)
            p2 = np.array(p_kw[t], float)
            p2[1] += c
            v, _, _, _ = sweep_power_flow(net, p2, q_kvar[t])
            assert math.sqrt(v.min()) >= v_lo - 1e-9, \
                "fixture must leave charging headroom"
            e += spec.eta_ch * c
    return e >= spec.soc_initial * cap - 1e-6


def oracle_min_capacity(net, profiles, spec, v_lo):
    p_kw, q_kvar = profiles.aligned(net)
    d_req = {t: min_restoring_discharge(net, p_kw[t], q_kvar[t], v_lo)
             for t in range(p_kw.shape[0])}

    def ok(cap):
        return greedy_feasible(cap, d_req, spec, net, p_kw, q_kvar, v_lo)

    coarse = next(c for c in np.arange(0.0, spec.e_max_kwh + 10.0, 10.0)
                  if ok(c))
    lo, hi = coarse - 10.0, coarse
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi, d_req


class TestMinimalCapacity:
    def test_planner_matches_greedy_search(self):
        net, profiles = uv_profiles()
        spec = active_only_spec()
        oracle, d_req = oracle_min_capacity(net, profiles, spec, 0.95)
        assert set(t for t, d in d_req.items() if d > 0) == {18, 19}
        prog = build_toep(net, profiles, range(24), [2], spec)
        result = plan(prog)
        assert result.installed[2]
        planned = result.total_capacity_kwh()
        assert abs(planned - oracle) <= 0.01 * oracle
        assert result.objective == pytest.approx(
            spec.c_cap_per_kwh * planned, rel=1e-9)

        # independent complementarity and replay audit of the dispatch
        ch, dis = result.charge_kw[2], result.discharge_kw[2]
        assert np.minimum(ch, dis).max() <= 1e-6
        e = spec.soc_initial * planned
        for k in range(24):
            e = e + ch[k] * spec.eta_ch - dis[k] / spec.eta_dis
            assert abs(e - result.e_ess_kwh[2][k]) <= 1e-6
        assert abs(e - spec.soc_initial * planned) <= 1e-6

    def test_tighter_limit_needs_no_less_storage(self):
        net, profiles = uv_profiles()
        spec = active_only_spec()
        cap = {}
        for v_lo in (0.95, 0.955):
            prog = build_toep(net, profiles, range(24), [2], spec,
                              v_limits=(v_lo, 1.05))
            cap[v_lo] = plan(prog).total_capacity_kwh()
        assert cap[0.955] >= cap[0.95] - 1e-6

    def test_unfixable_window_reports_binding_hours(self):
        net, profiles = uv_profiles()
        spec = active_only_spec(e_max_kwh=5.0)
        prog = build_toep(net, profiles, range(24), [2], spec)
        with pytest.raises(PlanError) as err:
            plan(prog)
        assert tuple(err.value.hours) == (18, 19)


def tiny_plan(**overrides):
    spec = BessSpec()
    base = dict(
        buses=(2,), hours=(0, 1), installed={2: True},
        capacity_kwh={2: 100.0},
        charge_kw={2: np.zeros(2)}, discharge_kw={2: np.zeros(2)},
        q_inj_kvar={2: np.zeros(2)}, q_abs_kvar={2: np.zeros(2)},
        e_ess_kwh={2: np.full(2, 50.0)}, e_start_kwh={2: 50.0},
        objective=0.0, gap=0.0, spec=spec)
    base.update(overrides)
    return BessPlan(**base), spec


class TestAuditPlan:
    def test_clean_plan_passes(self):
        plan_, spec = tiny_plan()
        audit_plan(plan_, spec, [[0, 1]])

    def test_simultaneous_charge_discharge(self):
        plan_, spec = tiny_plan(charge_kw={2: np.array([50.0, 0.0])},
                                discharge_kw={2: np.array([50.0, 0.0])})
        with pytest.raises(AuditError, match="simultaneous"):
            audit_plan(plan_, spec, [[0, 1]])

    def test_dispatch_without_installation(self):
        plan_, spec = tiny_plan(installed={2: False})
        with pytest.raises(AuditError, match="installation"):
            audit_plan(plan_, spec, [[0, 1]])

    def test_soc_band_escape(self):
        plan_, spec = tiny_plan(
            charge_kw={2: np.array([45.0 / 0.95, 0.0])},
            discharge_kw={2: np.array([0.0, 45.0 * 0.95])},
            e_ess_kwh={2: np.array([95.0, 50.0])})
        with pytest.raises(AuditError, match="SOC band"):
            audit_plan(plan_, spec, [[0, 1]])

    def test_energy_replay_drift(self):
        plan_, spec = tiny_plan(e_ess_kwh={2: np.array([60.0, 50.0])})
        with pytest.raises(AuditError, match="replay drift"):
            audit_plan(plan_, spec, [[0, 1]])

    def test_broken_cycle(self):
        plan_, spec = tiny_plan(charge_kw={2: np.array([10.0, 0.0])},
                                e_ess_kwh={2: np.full(2, 59.5)})
        with pytest.raises(AuditError, match="cyclic"):
            audit_plan(plan_, spec, [[0, 1]])


def flat_profiles(net, p_kw, q_kvar, n_hours=24):
    rows = [{2: (p_kw, q_kvar)} for _ in range(n_hours)]
    return profiles_from_rows(net, "2024-06-01T00", rows)


def peaked_profiles(net, n_hours=24):
    rows = [{2: (900.0, 400.0) if t % 24 in (18, 19) else (400.0, 150.0)}
            for t in range(n_hours)]
    return profiles_from_rows(net, "2024-06-01T00", rows)


def tou_pattern():
    prices = np.full(24, 0.2)
    prices[:8] = 0.08
    prices[18:20] = 0.6
    return prices


class TestDispatchDay:
    def test_zero_capacity_is_plain_network(self):
        net = feeder2()
        profiles = flat_profiles(net, 500.0, 200.0)
        spec = BessSpec()
        bare = dispatch_day(net, profiles, range(24), {}, spec, None)
        zero = dispatch_day(net, profiles, range(24), {2: 0.0}, spec, None)
        assert zero.storage == {}
        assert abs(zero.losses_kwh - bare.losses_kwh) <= 1e-12

    def test_flat_price_flat_load_no_arbitrage(self):
        net = feeder2()
        profiles = flat_profiles(net, 500.0, 200.0)
        spec = BessSpec(eta_ch=1.0, eta_dis=1.0, kq_inj=0.0, kq_abs=0.0)
        prices = np.full(24, 0.2)
        base = dispatch_day(net, profiles, range(24), {}, spec, None,
                            prices=prices)
        bess = dispatch_day(net, profiles, range(24), {2: 400.0}, spec,
                            None, prices=prices)
        assert abs(bess.cost - base.cost) <= 1e-3 * base.cost

    def test_tou_arbitrage_cuts_cost(self):
        net = feeder2()
        profiles = peaked_profiles(net)
        spec = BessSpec()
        prices = tou_pattern()
        base = dispatch_day(net, profiles, range(24), {}, spec, None,
                            prices=prices)
        bess = dispatch_day(net, profiles, range(24), {2: 400.0}, spec,
                            None, prices=prices)
        assert bess.cost < base.cost - 1.0

    def test_storage_never_raises_minimum_losses(self):
        net = feeder2()
        profiles = peaked_profiles(net)
        spec = BessSpec()
        base = dispatch_day(net, profiles, range(24), {}, spec, None)
        bess = dispatch_day(net, profiles, range(24), {2: 400.0}, spec,
                            None)
        assert bess.losses_kwh <= base.losses_kwh + 1e-6

    def test_hour_validation(self):
        net = feeder2()
        profiles = flat_profiles(net, 500.0, 200.0)
        with pytest.raises(ValueError, match="contiguous"):
            dispatch_day(net, profiles, [0, 2], {}, BessSpec(), None)
        with pytest.raises(ValueError, match="covered"):
            dispatch_day(net, profiles, range(23, 26), {}, BessSpec(),
                         None)

    def test_hopeless_day_reports_infeasible(self):
        net = uv_feeder()
        rows = [{2: (2500.0, 800.0)}]
        profiles = profiles_from_rows(net, "2024-06-01T00", rows)
        out = dispatch_day(net, profiles, [0], {2: 1.0},
                           active_only_spec(e_max_kwh=1.0), (0.95, 1.05))
        assert out.status == "infeasible"
        assert out.cost == math.inf


class TestTouDispatch:
    def test_empty_plan_matches_per_day_baseline(self):
        net = feeder2()
        profiles = flat_profiles(net, 500.0, 200.0, n_hours=48)
        spec = BessSpec()
        tariff = TouTariff.from_daily_pattern(tou_pattern(), 48)
        out = tou_dispatch(net, profiles, BessPlan.empty((2,), spec),
                           tariff)
        manual = [dispatch_day(net, profiles, range(d * 24, d * 24 + 24),
                               {}, spec, None, prices=tariff.prices)
                  for d in (0, 1)]
        assert len(out.days) == 2
        assert out.cost == pytest.approx(sum(p.cost for p in manual),
                                         abs=1e-9)
        assert out.losses_kwh == pytest.approx(
            sum(p.losses_kwh for p in manual), abs=1e-9)

    def test_storage_never_costs_more(self):
        net = feeder2()
        profiles = profiles_from_rows(net, "2024-06-01T00",
                                      uv_rows(peak=(900.0, 400.0),
                                              base=(400.0, 150.0),
                                              n_hours=48))
        spec = BessSpec()
        tariff = TouTariff.from_daily_pattern(tou_pattern(), 48)
        base = tou_dispatch(net, profiles, BessPlan.empty((2,), spec),
                            tariff)
        with_bess = tou_dispatch(net, profiles, _fixed_plan(spec, 400.0),
                                 tariff)
        assert with_bess.cost <= base.cost + 1e-9

    def test_uncovered_tariff_rejected(self):
        net = feeder2()
        profiles = flat_profiles(net, 500.0, 200.0, n_hours=48)
        tariff = TouTariff(tou_pattern())
        with pytest.raises(ValueError, match="cover"):
            tou_dispatch(net, profiles, BessPlan.empty((2,), BessSpec()),
                         tariff)

    def test_impossible_day_names_its_start(self):
        net = uv_feeder()
        rows = uv_rows(peak_hours=(), n_hours=48)  # healthy everywhere
        rows[30] = {2: (2500.0, 800.0)}
        profiles = profiles_from_rows(net, "2024-06-01T00", rows)
        spec = active_only_spec(e_max_kwh=1.0)
        tariff = TouTariff.from_daily_pattern(tou_pattern(), 48)
        with pytest.raises(PlanError, match="hour 24") as err:
            tou_dispatch(net, profiles, _fixed_plan(spec, 1.0), tariff,
                         v_limits=(0.95, 1.05))
        assert err.value.hours[0] == 24


def _fixed_plan(spec, cap):
    """Plan shell carrying just a frozen capacity for dispatch runs."""
    plan_ = BessPlan.empty((2,), spec)
    plan_.capacity_kwh[2] = cap
    plan_.installed[2] = True
    return plan_


class TestSavingsReport:
    def test_reference_rows(self):
        rows = savings_report(
            {"year": (0.97, 150.41)},
            {"year": (0.83, 132.05)})
        (row,) = rows
        assert row["cost_savings"] == pytest.approx(0.14, abs=1e-12)
        assert round(row["cost_savings_pct"], 2) == 14.43
        assert row["loss_reduction"] == pytest.approx(18.36, abs=1e-12)
        assert round(row["loss_reduction_pct"], 2) == 12.21

    def test_identical_runs_and_zero_base(self):
        rows = savings_report({"a": (5.0, 2.0), "b": (0.0, 0.0)},
                              {"a": (5.0, 2.0), "b": (0.0, 0.0)})
        for row in rows:
            assert row["cost_savings_pct"] == 0.0
            assert row["loss_reduction_pct"] == 0.0

    def test_label_mismatch(self):
        with pytest.raises(ValueError, match="label"):
            savings_report({"a": (1.0, 1.0)}, {"b": (1.0, 1.0)})
