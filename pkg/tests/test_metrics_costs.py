import math

import numpy as np
import pytest

from awdro.adapted_metrics import adapted_wasserstein, adapted_wasserstein_inf, all_distances, wasserstein
from awdro.costs import CostError, builtin, from_expression, parse_expression, quadratic_tracking
from awdro.measures import AdaptedMeasure, random_tree
from awdro.oracle import brute_aw_inf
from awdro.reference import blowup_pair, escaping_sequence, swap_triple, two_point_pair


# -- distances -------------------------------------------------------------------------------

@pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
@pytest.mark.parametrize("eps", [0.5, 0.1, 0.01])
def test_two_point_pair(p, eps):
    mu, nu = two_point_pair(eps, p)
    assert abs(adapted_wasserstein(mu, nu).value - (eps ** p + 2 ** (p - 1)) ** (1 / p)) < 1e-9
    assert abs(wasserstein(mu, nu).value - eps) < 1e-9


@pytest.mark.parametrize("eps", [0.04, 0.01, 0.0025])
def test_blowup_pair(eps):
    mu, nu = blowup_pair(eps)
    assert abs(adapted_wasserstein(mu, nu).value - (2 * eps ** 2 * (1 - eps) + 2 * math.sqrt(eps))) < 1e-9
    assert abs(adapted_wasserstein_inf(mu, nu).value - 1 / math.sqrt(eps)) < 1e-9


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_swap_triple(p):
    mu, nu, mix = swap_triple(p)
    assert abs(adapted_wasserstein_inf(mu, nu).value - 1.0) < 1e-9
    assert adapted_wasserstein_inf(mu, mix).value >= 99 * 0.5 ** (1 / p) - 1e-9


@pytest.mark.parametrize("n", [2, 10, 100])
def test_escaping_sequence_does_not_converge(n):
    mu_n, d = escaping_sequence(n)
    assert abs(adapted_wasserstein_inf(mu_n, d).value - 1.0) < 1e-12
    # the averaged metric does go to zero
    assert adapted_wasserstein(mu_n, d).value <= (2 / n) ** 0.5 + 1e-12


def test_coupling_recomputes_value():
    for seed in range(20):
        mu, nu = random_tree(seed, 3, (1, 3)), random_tree(seed + 500, 3, (1, 3))
        for res in all_distances(mu, nu).values():
            assert abs(res.recompute() - res.value) < 1e-9 * (1 + res.value)


def test_awinf_equals_exhaustive_search():
    for seed in range(15):
        mu, nu = random_tree(seed, 2, (1, 3)), random_tree(seed + 77, 2, (1, 3))
        assert abs(adapted_wasserstein_inf(mu, nu).value - brute_aw_inf(mu, nu)) < 1e-12


def test_metric_ordering_and_identity():
    for seed in range(20):
        mu, nu = random_tree(seed, 3, (1, 3), p=2.0), random_tree(seed + 1, 3, (1, 3), p=2.0)
        d = all_distances(mu, nu)
        assert d["w_p"].value <= d["aw_p"].value + 1e-9
        assert d["aw_p"].value <= 3 ** 0.5 * d["aw_p_inf"].value + 1e-8
        assert adapted_wasserstein(mu, mu).value == 0.0
        assert adapted_wasserstein_inf(nu, nu).value == 0.0


def test_pairs_must_match():
    a = AdaptedMeasure.dirac((0.0, 0.0), 2.0)
    with pytest.raises(ValueError):
        adapted_wasserstein(a, AdaptedMeasure.dirac((0.0,), 2.0))
    with pytest.raises(ValueError):
        adapted_wasserstein(a, AdaptedMeasure.dirac((0.0, 0.0), 1.0))


def test_to_dict_lists_the_coupling():
    mu, nu = two_point_pair(0.1, 1.0)
    doc = adapted_wasserstein(mu, nu).to_dict(with_coupling=True)
    # mu has a single first-period atom, so the forest is the root plan plus two child plans
    assert doc["metric"] == "AW_p" and len(doc["coupling"]) == 3


# -- costs -----------------------------------------------------------------------------------

def test_parser_precedence_and_functions():
    f = from_expression("-y1^2 + 2*y2/4 - max(y1, y2, 0) + min(a1, 1) + abs(y1 - 3)", 2)
    y = np.array([[1.5, -2.0]])
    a = np.array([[0.2, 0.0]])
    expected = -(1.5 ** 2) + 2 * -2.0 / 4 - 1.5 + 0.2 + 1.5
    assert abs(f.evaluate(y, a)[0] - expected) < 1e-15
    assert f.controlled
    assert parse_expression("2^-1") is not None
    assert parse_expression("y1 ** 2") == parse_expression("y1^2")
    assert abs(from_expression("2^-1 + 0*y1", 1).evaluate([[0.0]])[0] - 0.5) < 1e-15


@pytest.mark.parametrize("text, fragment", [
    ("y1 +", "unexpected"),
    ("y1 * * 2", "unexpected"),
    ("sin(y1)", "unknown"),
    ("y0", ">= 1"),
    ("y3", "exceeds horizon"),
    ("abs(y1, y2)", "one argument"),
    ("(y1", "expected"),
])
def test_parser_rejects(text, fragment):
    with pytest.raises(CostError, match=fragment):
        from_expression(text, 2)


def test_symbolic_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    exprs = ["y1*y2^3 - y1/(1 + y2^2)", "(y1 - a1)^2 + 0.5*(y2 - a2)^2 + y1*a2", "max(y1, 0)*y2 + abs(y2)"]
    for text in exprs:
        f = from_expression(text, 2)
        y = rng.uniform(-2, 2, (30, 2))
        a = rng.uniform(-1, 1, (30, 2))
        g = f.gradient(y, a)
        h = 1e-6
        for t in range(2):
            e = np.zeros(2)
            e[t] = h
            fd = (f.evaluate(y + e, a) - f.evaluate(y - e, a)) / (2 * h)
            np.testing.assert_allclose(g[:, t], fd, atol=1e-5)


def test_semi_separable_split():
    f = from_expression("(y1 - a1)^2 + 0.5*(y2 - a2)^2 + y1*a2", 2)
    assert f.semi_separable and f.decomposition_error() < 1e-12
    g = from_expression("y2*a1", 2)
    assert not g.semi_separable
    h = from_expression("y1*y2", 2)
    assert h.semi_separable and h.decomposition_error() < 1e-12
    with pytest.raises(CostError):
        g.decomposition_error()


def test_builtins():
    q = quadratic_tracking(2, [1.0, 3.0])
    assert q.evaluate([[1.0, 2.0]], [[0.0, 1.0]])[0] == 4.0
    assert q.strongly_convex and q.decomposition_error() < 1e-12
    call = builtin("call:1.5", 2)
    np.testing.assert_allclose(call.evaluate([[0.0, 2.0], [0.0, 1.0]]), [0.5, 0.0])
    lin = builtin("linear:1,-2", 2)
    assert lin.evaluate([[3.0, 1.0]])[0] == 1.0
    dig = builtin("digital", 1)
    assert dig.evaluate([[2.0]])[0] == 1.0
    with pytest.raises(CostError, match="no derivatives"):
        dig.gradient([[0.0]])
    with pytest.raises(CostError, match="unknown builtin"):
        builtin("nope", 1)


def test_controlled_cost_needs_controls():
    with pytest.raises(CostError):
        quadratic_tracking(1).evaluate([[0.0]])
