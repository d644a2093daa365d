import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratpad import game as G


def test_attacker_payoff_closed_forms():
    assert G.attacker_payoff(G.PayoffParams([0.0]), 0) == 1.0
    assert G.attacker_payoff(G.PayoffParams([1.0]), 0) == -1.0
    p = G.PayoffParams([0.4], r=2, c_f=3, costs=[0.5])
    assert G.attacker_payoff(p, 0) == pytest.approx(-0.5)


def test_mpa_cases():
    assert G.select_mpa(G.PayoffParams([0.9, 0.3, 0.7]))[0] == 1
    assert G.select_mpa(G.PayoffParams([0.5, 0.5]))[0] == 0
    with pytest.raises(ValueError):
        G.select_mpa(G.PayoffParams([]))


def _brute_mpa(p):
    u = [G.attacker_payoff(p, i) for i in range(len(p.detection))]
    best = max(u)
    return min(i for i, v in enumerate(u) if v == best)


menus = st.lists(st.tuples(st.floats(0, 1), st.floats(0, 2)), min_size=1, max_size=6)


@settings(max_examples=200)
@given(menus, st.floats(0.1, 5), st.floats(0.1, 5))
def test_mpa_matches_brute_force(menu, r, c_f):
    p = G.PayoffParams([m[0] for m in menu], r=r, c_f=c_f, costs=[m[1] for m in menu])
    assert G.select_mpa(p)[0] == _brute_mpa(p)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 100).map(lambda v: v / 100), min_size=1, max_size=6),
       st.floats(0.1, 5), st.floats(0.1, 5))
def test_zero_cost_mpa_is_least_detected(det, r, c_f):
    p = G.PayoffParams(det, r=r, c_f=c_f)
    assert G.select_mpa(p)[0] == int(np.argmin(det))
    # dropping the constant reward ranks identically
    approx = [G.approx_attacker_payoff(p, i) for i in range(len(det))]
    assert G.select_mpa(p)[0] == int(np.argmax(approx))


def test_decision_boundaries():
    assert not G.attack_or_abstain(G.PayoffParams([0.9, 0.8])).attack
    d = G.attack_or_abstain(G.PayoffParams([0.9, 0.2]))
    assert d.attack and d.species == 1
    zero = G.attack_or_abstain(G.PayoffParams([0.5]))  # u = 0 exactly
    assert not zero.attack and zero.payoff == 0.0


def test_defender_payoff():
    p = G.PayoffParams([0.5], c_d=0.2, c_m=3)
    assert G.defender_payoff(p, 1.0) == -0.2
    assert G.defender_payoff(p, 0.0) == pytest.approx(-3.2)
    assert G.defender_payoff(G.PayoffParams([0.5], c_d=0.1, c_m=10), 0.9) == pytest.approx(-1.1)


def test_expected_performance():
    C = G.AttackerCategory
    assert G.expected_performance([C(1.0, [], 0.42)]) == 0.42
    assert G.expected_performance([C(0.5, [], 0.8), C(0.5, [], 0.6)]) == pytest.approx(0.7)
    det = [0.9, 0.3, 0.6]
    cats = [C(0.25, [0, 2]), C(0.75, [0, 1, 2])]
    assert G.expected_performance(cats, det) == pytest.approx(0.25 * 0.6 + 0.75 * 0.3)
    with pytest.raises(ValueError):
        G.expected_performance([C(0.4, [], 0.5)])


def test_expected_performance_random(rng):
    for _ in range(20):
        k = int(rng.integers(1, 5))
        probs = rng.dirichlet(np.ones(k))
        perf = rng.random(k)
        cats = [G.AttackerCategory(float(p), [], float(v)) for p, v in zip(probs, perf)]
        naive = 0.0
        for p, v in zip(probs, perf):
            naive += p * v
        assert G.expected_performance(cats) == pytest.approx(naive, abs=1e-12)


def test_param_validation():
    for kw in ({"r": 0}, {"c_f": -1}, {"costs": [1.0, 2.0]}, {"costs": [-1.0]}):
        with pytest.raises(ValueError):
            G.PayoffParams([0.5], **kw)
    with pytest.raises(ValueError):
        G.PayoffParams([1.5])


def test_analyse():
    out = G.analyse({"detection": [0.9, 0.2], "names": ["a", "b"],
                     "categories": [{"probability": 1.0, "menu": [0, 1]}]})
    assert out["mpa"]["name"] == "b"
    assert out["decision"]["attack"]
    assert out["expected_performance"] == pytest.approx(0.2)
