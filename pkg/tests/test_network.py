import cmath
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_se.measurement import TrueState, exact_pmu
from hybrid_se.network import (Branch, Bus, DanglingBranchError, DisconnectedNetworkError,
                               EmptyCaseError, MalformedCaseError, build_measurement_model,
                               bundled_case, check_coloring, distance2_coloring, dump_case,
                               greedy_pmu_placement, kappa, parse_case)

from helpers import three_bus_case, two_bus_case

ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


def _doc(buses, branches, pmus=()):
    return {"buses": [{"id": i, "vm": 1.0, "va": 0.0, "shunt_b": 0.0} for i in buses],
            "branches": [{"from": f, "to": t, "g": 1.0, "b": -5.0} for f, t in branches],
            "pmu_buses": list(pmus)}


def test_parse_minimal():
    case = parse_case(_doc([1, 2], [(1, 2)]))
    assert case.n_bus == 2 and len(case.branches) == 1
    assert case.branches[0].tap == 1.0 and case.branches[0].shift == 0.0


def test_parse_accepts_json_text():
    case = parse_case(json.dumps(_doc([1, 2], [(1, 2)], [1])))
    assert case.pmu_list == (1,)


@pytest.mark.parametrize("doc,err", [
    (_doc([1, 2], [(1, 99)]), DanglingBranchError),
    (_doc([1, 2, 3], [(1, 2)]), DisconnectedNetworkError),
    (_doc([], []), EmptyCaseError),
    (_doc([1, 2], [(1, 1)]), MalformedCaseError),
    (_doc([1, 2], [(1, 2), (2, 1)]), MalformedCaseError),
    ({"buses": "nope"}, MalformedCaseError),
    (_doc([1, 2], [(1, 2)], [7]), MalformedCaseError),
])
def test_parse_errors(doc, err):
    with pytest.raises(err):
        parse_case(doc)


def test_nonpositive_tap_rejected():
    doc = _doc([1, 2], [(1, 2)])
    doc["branches"][0]["tap"] = 0.0
    with pytest.raises(MalformedCaseError):
        parse_case(doc)


def test_bundled_ieee14_counts():
    case = bundled_case("ieee14")
    assert case.n_bus == 14
    assert len(case.branches) == 20


@pytest.mark.parametrize("name", ["ieee14", "ieee118", "ieee300"])
def test_roundtrip_and_coloring(name):
    case = bundled_case(name)
    again = parse_case(dump_case(case))
    assert again == case
    col = distance2_coloring(case)
    assert check_coloring(case, col)
    # every bus observed by a PMU (own or neighbouring)
    seen = set()
    for i in case.pmu_buses:
        seen.update(case.neighborhood(i))
    assert seen == set(case.bus_ids)


def test_kappa_unit_ratio():
    k = kappa(Branch(1, 2, 1.0, -2.0), Bus(1, shunt_b=0.5))
    assert (k.k1, k.k2, k.k3, k.k4) == pytest.approx((1.0, -1.5, 1.0, -2.0))


def test_kappa_zero():
    k = kappa(Branch(1, 2, 0.0, 0.0), Bus(1))
    assert (k.k1, k.k2, k.k3, k.k4) == (0.0, 0.0, 0.0, 0.0)


def test_kappa_transformer():
    # complex-arithmetic reference: rho_ij^2 (g + j(b + B)) and |rho_ij rho_ji| e^{j phi} y
    k = kappa(Branch(1, 2, 1.2, -3.4, tap=1.05, shift=0.02), Bus(1, shunt_b=0.1))
    frozen = (1.323, -3.6382499999999998, 1.3311432484950871, -3.544087703766083)
    assert (k.k1, k.k2, k.k3, k.k4) == pytest.approx(frozen, abs=1e-14)
    a = 1.05**2 * complex(1.2, -3.3)
    c = 1.05 * cmath.exp(0.02j) * complex(1.2, -3.4)
    assert (k.k1, k.k2, k.k3, k.k4) == pytest.approx((a.real, a.imag, c.real, c.imag), abs=1e-14)


def test_kappa_other_side_and_errors():
    br = Branch(1, 2, 1.2, -3.4, tap=1.05, shift=0.02)
    k = kappa(br, Bus(2, shunt_b=0.0))
    c = 1.05 * cmath.exp(-0.02j) * complex(1.2, -3.4)
    assert (k.k1, k.k3, k.k4) == pytest.approx((1.2, c.real, c.imag))
    with pytest.raises(ValueError):
        kappa(br, Bus(3))


def test_measurement_blocks_structure():
    case = bundled_case("ieee14")
    for i in case.pmu_list:
        bm = build_measurement_model(case, i)
        m = len(bm.neighbors)
        assert bm.neighbors == tuple(sorted(bm.neighbors)) and i in bm.neighbors
        np.testing.assert_array_equal(bm.H[i][:2], np.eye(2))
        np.testing.assert_array_equal(bm.G[i][:2], ROT)
        for j in bm.neighbors:
            assert bm.H[j].shape == (2 * m, 2)
            if j != i:
                assert not bm.H[j][:2].any() and not bm.G[j][:2].any()
        others = [j for j in bm.neighbors if j != i]
        for k, j in enumerate(others, start=1):
            kc = kappa(case.branch_between[(i, j)], case.bus[i])
            r = slice(2 * k, 2 * k + 2)
            np.testing.assert_allclose(bm.H[j][r], [[-kc.k3, kc.k4], [-kc.k4, -kc.k3]])
            np.testing.assert_allclose(bm.G[j][r], [[kc.k4, kc.k3], [-kc.k3, kc.k4]])


def test_leaf_pmu_bus():
    case = two_bus_case(pmus=(2,))
    bm = build_measurement_model(case, 2)
    assert bm.H[2].shape == (4, 2)
    np.testing.assert_array_equal(bm.H[2][:2], np.eye(2))


def test_non_pmu_bus():
    case = two_bus_case(pmus=(1,))
    with pytest.raises(ValueError):
        build_measurement_model(case, 2)
    stub = build_measurement_model(case, 2, allow_stub=True)
    assert not stub.has_pmu and stub.n_rows == 0


def _linear(case, i, state, th):
    bm = build_measurement_model(case, i)
    rect = dict(zip(case.bus_ids, state.rect))
    return sum((bm.H[j] + th * bm.G[j]) @ rect[j] for j in bm.neighbors)


def test_linearisation_small_theta():
    case = two_bus_case()
    st_ = TrueState.from_case(case)
    z = exact_pmu(case, st_, {1: 1e-3}, {1: 0.0})[1]
    assert np.max(np.abs(z - _linear(case, 1, st_, 1e-3))) <= 1e-5


@pytest.mark.parametrize("case_fn", [two_bus_case, three_bus_case])
def test_G_is_theta_derivative(case_fn):
    case = case_fn()
    st_ = TrueState.from_case(case)
    h = 1e-6
    for i in case.pmu_list:
        zp = exact_pmu(case, st_, {i: h}, {i: 0.0})[i]
        zm = exact_pmu(case, st_, {i: -h}, {i: 0.0})[i]
        fd = (zp - zm) / (2 * h)
        bm = build_measurement_model(case, i)
        rect = dict(zip(case.bus_ids, st_.rect))
        Gs = sum(bm.G[j] @ rect[j] for j in bm.neighbors)
        assert np.linalg.norm(fd - Gs) <= 1e-6 * np.linalg.norm(Gs)


def test_linearisation_is_second_order():
    case = bundled_case("ieee14")
    st_ = TrueState.from_case(case)
    for i in case.pmu_list:
        res = []
        for th in (1e-2, 2e-2):
            z = exact_pmu(case, st_, {j: th for j in case.pmu_list},
                          {j: 0.0 for j in case.pmu_list})[i]
            res.append(np.linalg.norm(z - _linear(case, i, st_, th)))
        assert 3.5 <= res[1] / res[0] <= 4.5


def test_coloring_small_graphs():
    path = parse_case(_doc([1, 2, 3], [(1, 2), (2, 3)]))
    assert distance2_coloring(path).num_colors == 3
    star = parse_case(_doc([1, 2, 3, 4, 5], [(1, 2), (1, 3), (1, 4), (1, 5)]))
    assert distance2_coloring(star).num_colors == 5


def test_coloring_ieee300_bound():
    case = bundled_case("ieee300")
    col = distance2_coloring(case)
    assert col.num_colors <= 16
    assert check_coloring(case, col)
    assert sum(len(g) for g in col.groups()) == case.n_bus


def test_check_coloring_detects_conflict():
    path = parse_case(_doc([1, 2, 3], [(1, 2), (2, 3)]))
    col = distance2_coloring(path)
    bad = type(col)({1: 0, 2: 1, 3: 0}, 2)
    assert check_coloring(path, col)
    assert not check_coloring(path, bad)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 25), st.integers(0, 10_000))
def test_coloring_random_trees(n, seed):
    rng = np.random.default_rng(seed)
    edges = [(int(rng.integers(1, k)), k) for k in range(2, n + 1)]
    extra = [(a, b) for a, b in rng.integers(1, n + 1, (n // 3, 2)) if a < b]
    edges = list(dict.fromkeys(edges + [(int(a), int(b)) for a, b in extra
                                        if (int(a), int(b)) not in edges]))
    case = parse_case(_doc(range(1, n + 1), edges))
    col = distance2_coloring(case)
    assert check_coloring(case, col)
    degree = max(len(v) for v in case.adjacency.values())
    assert col.num_colors <= degree**2 + 1


def test_greedy_placement_dominates():
    case = bundled_case("ieee118")
    pm = greedy_pmu_placement(case)
    covered = set().union(*(case.neighborhood(i) for i in pm))
    assert covered == set(case.bus_ids)
