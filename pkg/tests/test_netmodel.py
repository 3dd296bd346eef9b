import numpy as np
import pytest

from hybrid_dae.netmodel import (
    Branch,
    Bus,
    Disturbance,
    Load,
    NetworkSchemaError,
    apply_disturbance,
    build_ybus,
    load_network,
    network_residual,
)


def two_bus_doc():
    return {
        "frequency_hz": 60.0,
        "buses": [{"id": 0, "kind": "connection"}, {"id": 1, "kind": "connection"}],
        "branches": [{"from": 0, "to": 1, "r": 0.0, "x": 0.1, "b_shunt": 0.0}],
        "loads": [],
        "machines": [],
    }


class TestBuildYbus:
    def test_single_branch_closed_form(self):
        buses = [Bus(0, "connection"), Bus(1, "connection")]
        branches = [Branch(0, 1, 0.1j)]
        y = build_ybus(buses, branches, [])
        expect = np.array([[-10j, 10j], [10j, -10j]])
        assert np.allclose(y, expect, atol=1e-14)

    def test_empty_branches_load_diagonal(self):
        buses = [Bus(0, "load"), Bus(1, "load")]
        loads = [Load(0, 0.5 - 0.2j)]
        y = build_ybus(buses, [], loads)
        assert y[0, 0] == 0.5 - 0.2j
        assert y[1, 1] == 0 and y[0, 1] == 0

    def test_zero_impedance_rejected(self):
        buses = [Bus(0, "connection"), Bus(1, "connection")]
        with pytest.raises(NetworkSchemaError, match="series_impedance"):
            build_ybus(buses, [Branch(0, 1, 0j)], [])

    def test_ieee9_row_sums_match_independent_summation(self, ieee9):
        # Row sums: branch series terms cancel, leaving shunt halves plus loads.
        expected = np.zeros(ieee9.n_bus, dtype=complex)
        for br in ieee9.branches:
            expected[br.from_bus] += 0.5j * br.shunt_susceptance
            expected[br.to_bus] += 0.5j * br.shunt_susceptance
        for ld in ieee9.loads:
            expected[ld.bus] += ld.admittance
        assert np.allclose(ieee9.ybus.sum(axis=1), expected, atol=1e-12)

    def test_symmetry(self, ieee9, ieee57):
        for m in (ieee9, ieee57):
            assert np.allclose(m.ybus, m.ybus.T, atol=0.0)


class TestLoadNetwork:
    def test_ieee9_preset(self, ieee9):
        assert ieee9.n_bus == 9
        assert ieee9.n_machines == 3
        assert len(ieee9.loads) == 3
        assert ieee9.nominal_frequency == 60.0

    def test_ieee57_preset(self, ieee57):
        assert ieee57.n_bus == 57
        assert ieee57.n_machines == 7
        assert len(ieee57.loads) == 42

    def test_dangling_branch_reference(self):
        doc = two_bus_doc()
        doc["branches"][0]["to"] = 9
        with pytest.raises(NetworkSchemaError, match=r"branches\[0\]\.to"):
            load_network(doc)

    def test_zero_impedance_reports_path(self):
        doc = two_bus_doc()
        doc["branches"][0].update(r=0.0, x=0.0)
        with pytest.raises(NetworkSchemaError, match=r"branches\[0\]"):
            load_network(doc)

    def test_noncontiguous_bus_ids(self):
        doc = two_bus_doc()
        doc["buses"][1]["id"] = 5
        with pytest.raises(NetworkSchemaError, match="contiguous"):
            load_network(doc)

    def test_missing_field_path(self):
        doc = two_bus_doc()
        del doc["branches"][0]["x"]
        with pytest.raises(NetworkSchemaError, match=r"branches\[0\]\.x"):
            load_network(doc)

    def test_load_on_unknown_bus(self):
        doc = two_bus_doc()
        doc["loads"] = [{"bus": 7, "p": 1.0, "q": 0.1}]
        with pytest.raises(NetworkSchemaError, match=r"loads\[0\]\.bus"):
            load_network(doc)

    def test_unknown_preset_or_file(self):
        with pytest.raises(NetworkSchemaError, match="no such preset"):
            load_network("ieee9999")

    def test_load_admittance_conversion(self):
        doc = two_bus_doc()
        doc["loads"] = [{"bus": 1, "p": 1.25, "q": 0.5}]
        m = load_network(doc)
        assert m.loads[0].admittance == 1.25 - 0.5j


class TestNetworkResidual:
    def test_zero_everything(self, ieee9):
        g = network_residual(ieee9, [0j, 0j, 0j], np.zeros(9, dtype=complex))
        assert np.all(g == 0.0)
        assert g.shape == (18,)

    def test_linear_solve_consistency(self, ieee9, rng):
        # Independent oracle: a dense solve of Y v = i must zero the residual.
        inj = np.zeros(9, dtype=complex)
        injections = []
        for spec in ieee9.machines:
            val = rng.normal() + 1j * rng.normal()
            inj[spec.bus] = val
            injections.append(val)
        v = np.linalg.solve(np.array(ieee9.ybus), inj)
        g = network_residual(ieee9, injections, v)
        assert np.max(np.abs(g)) < 1e-12

    def test_perturbation_touches_only_adjacent_buses(self, ieee9):
        v = np.ones(9, dtype=complex)
        inj = [0j, 0j, 0j]
        g0 = network_residual(ieee9, inj, v)
        k = 4  # a load bus
        v1 = v.copy()
        v1[k] += 0.01
        g1 = network_residual(ieee9, inj, v1)
        changed = np.abs((g1 - g0).reshape(2, 9)).sum(axis=0) > 1e-15
        adjacent = {k}
        for br in ieee9.branches:
            if br.from_bus == k:
                adjacent.add(br.to_bus)
            if br.to_bus == k:
                adjacent.add(br.from_bus)
        assert set(np.nonzero(changed)[0]) == adjacent


class TestDisturbance:
    def test_pm_step_arithmetic(self, ieee9):
        d = Disturbance("mechanical-power-step", target=2, magnitude=-0.2, time=0.1)
        m2 = apply_disturbance(ieee9, d)
        assert m2.machines[1].params.P_m == pytest.approx(1.612 - 0.2, abs=1e-15)
        # original untouched
        assert ieee9.machines[1].params.P_m == 1.612

    def test_load_step_changes_diagonal_only(self, ieee57):
        d = Disturbance("load-admittance-step", target=45, magnitude=0.2 - 0.1j, time=0.5)
        m2 = apply_disturbance(ieee57, d)
        dy = np.array(m2.ybus) - np.array(ieee57.ybus)
        assert dy[45, 45] == pytest.approx(0.2 - 0.1j, abs=1e-14)
        dy[45, 45] = 0
        assert np.all(dy == 0)

    def test_unknown_machine_target(self, ieee9):
        d = Disturbance("mechanical-power-step", target=99, magnitude=-0.1, time=0.0)
        with pytest.raises(NetworkSchemaError, match="unknown machine"):
            apply_disturbance(ieee9, d)

    def test_unknown_bus_target(self, ieee9):
        d = Disturbance("load-admittance-step", target=57, magnitude=0.1, time=0.0)
        with pytest.raises(NetworkSchemaError, match="unknown bus"):
            apply_disturbance(ieee9, d)

    def test_apply_then_revert_restores_ybus(self, ieee9):
        d = Disturbance("load-admittance-step", target=4, magnitude=0.25 - 0.125j, time=0.0)
        stepped = apply_disturbance(ieee9, d)
        back = apply_disturbance(
            stepped, Disturbance("load-admittance-step", target=4, magnitude=-(0.25 - 0.125j), time=0.0)
        )
        # binary-exact deltas revert exactly here; the immutable original is
        # the general-case reference either way
        assert np.array_equal(np.array(back.ybus), np.array(ieee9.ybus))

    def test_rebuild_determinism(self, ieee9):
        rebuilt = build_ybus(ieee9.buses, ieee9.branches, ieee9.loads)
        assert np.array_equal(rebuilt, np.array(ieee9.ybus))

    def test_model_immutable(self, ieee9):
        with pytest.raises(ValueError):
            ieee9.ybus[0, 0] = 0.0
