import json

import numpy as np
import pytest

from awdro.measures import (AdaptedMeasure, Kernel, TreeError, binomial_tree, dump_tree, flatten, is_martingale,
                            kernel_at, load_tree, path_matrix, random_martingale_tree, random_tree, tree_from_dict,
                            tree_to_dict)


def doc(nodes, horizon=2, p=2):
    return {"horizon": horizon, "p": p, "nodes": nodes}


TWO_PERIOD = doc([
    {"id": "a", "depth": 1, "value": 0.0, "prob": 1.0, "parent": None},
    {"id": "b", "depth": 2, "value": 1.0, "prob": 0.5, "parent": "a"},
    {"id": "c", "depth": 2, "value": -1.0, "prob": 0.5, "parent": "a"},
])


def test_load_sorts_siblings_by_value():
    m = tree_from_dict(TWO_PERIOD)
    assert m.layers[1] == ("c", "b")
    k = kernel_at(m, "a")
    assert k.support.tolist() == [-1.0, 1.0]
    assert k.child_ids == ("c", "b")


def test_equal_siblings_merge_with_their_subtrees():
    d = doc([
        {"id": "r1", "depth": 1, "value": 0.0, "prob": 0.5, "parent": None},
        {"id": "r2", "depth": 1, "value": 0.0, "prob": 0.5, "parent": None},
        {"id": "x", "depth": 2, "value": 1.0, "prob": 1.0, "parent": "r1"},
        {"id": "y", "depth": 2, "value": 2.0, "prob": 1.0, "parent": "r2"},
    ])
    m = tree_from_dict(d)
    assert m.roots == ("r1",)
    k = kernel_at(m, "r1")
    assert k.support.tolist() == [1.0, 2.0]
    np.testing.assert_allclose(k.probs, [0.5, 0.5])


def test_renormalizes_within_input_tolerance():
    d = json.loads(json.dumps(TWO_PERIOD))
    d["nodes"][1]["prob"] = 0.5 + 4e-10
    m = tree_from_dict(d)
    assert abs(kernel_at(m, "a").probs.sum() - 1.0) < 1e-15


@pytest.mark.parametrize("mutate, fragment", [
    (lambda d: d["nodes"][1].update(prob=0.6), "probability sum"),
    (lambda d: d["nodes"][1].update(parent="zzz"), "orphan"),
    (lambda d: d["nodes"][1].update(depth=3), "depth gap"),
    (lambda d: d["nodes"][1].update(prob=0.0), "non-positive"),
    (lambda d: d["nodes"][1].pop("value"), "schema"),
])
def test_rejects_invalid_documents(mutate, fragment):
    d = json.loads(json.dumps(TWO_PERIOD))
    mutate(d)
    with pytest.raises(TreeError, match=fragment):
        tree_from_dict(d)


def test_error_message_is_line_anchored(tmp_path):
    d = json.loads(json.dumps(TWO_PERIOD))
    d["nodes"][2]["parent"] = "missing"
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d, indent=2))
    with pytest.raises(TreeError) as info:
        load_tree(path)
    assert info.value.line is not None
    text = path.read_text().splitlines()
    assert '"c"' in text[info.value.line - 1]
    assert str(info.value).startswith(f"line {info.value.line}:")


def test_invalid_json_reports_line():
    with pytest.raises(TreeError, match="line 2"):
        load_tree('{"horizon": 1,\n "p": }')


def test_round_trip_is_bit_exact(tmp_path):
    for seed in range(10):
        m = random_tree(seed, 3, (1, 3))
        text = dump_tree(m)
        m2 = load_tree(text)
        assert tree_to_dict(m2) == tree_to_dict(m)
        path = tmp_path / f"t{seed}.json"
        dump_tree(m, path)
        assert tree_to_dict(load_tree(path)) == tree_to_dict(m)


def test_from_paths_and_flatten():
    m = AdaptedMeasure.from_paths([(0, 1), (0, -1), (1, 5)], [0.25, 0.25, 0.5], p=1)
    assert m.horizon == 2 and m.p == 1
    flat = dict(flatten(m))
    assert flat == {(0.0, -1.0): 0.25, (0.0, 1.0): 0.25, (1.0, 5.0): 0.5}
    X, w = path_matrix(m)
    assert X.shape == (3, 2) and abs(w.sum() - 1) < 1e-15


def test_from_paths_rejects_bad_input():
    with pytest.raises(TreeError):
        AdaptedMeasure.from_paths([(0, 1), (1,)], [0.5, 0.5])
    with pytest.raises(TreeError):
        AdaptedMeasure.from_paths([(0,), (1,)], [0.5, 0.6])


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        Kernel(np.array([0.0, 1.0]), np.array([0.5, 0.6]))
    k = Kernel.from_atoms([(1.0, 0.25), (0.0, 0.5), (1.0, 0.25)])
    assert k.support.tolist() == [0.0, 1.0]
    assert k.mean() == 0.5


def test_generators_are_seeded_and_valid():
    a, b = random_tree(7, 3, (1, 3)), random_tree(7, 3, (1, 3))
    assert tree_to_dict(a) == tree_to_dict(b)
    for seed in range(20):
        m = random_martingale_tree(seed, 3, (1, 3))
        assert is_martingale(m)
        for u in m.internal_nodes():
            k = kernel_at(m, u)
            assert np.all(np.diff(k.support) > 0)
    assert is_martingale(binomial_tree(3))
    assert not is_martingale(AdaptedMeasure.from_paths([(0, 1), (0, 2)], [0.5, 0.5]))


def test_horizon_and_p_checks():
    with pytest.raises(TreeError):
        AdaptedMeasure(0, 2.0, [])
    with pytest.raises(TreeError):
        tree_from_dict(doc(TWO_PERIOD["nodes"], p=0.5))
