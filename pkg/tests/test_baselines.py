"""
Tests for the CART decision tree and the random forest baselines.
"""
import os
import sys
import tempfile

# Add parent directory to path to access m3gp
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from m3gp.baselines import (ForestModel, TreeNode, dt_fit, dt_predict, gini_from_counts, load_baseline, rf_fit,
                            rf_predict, save_baseline)
from m3gp.dataset import Dataset
from m3gp.exceptions import DataError
from m3gp.synthetic import make_blobs


def _dataset(X, labels, provenance="t"):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return Dataset(X=X, labels=labels, provenance=np.full(X.shape[0], provenance),
                   feature_names=tuple(f"X{i}" for i in range(X.shape[1])))


def _walk(node):
    yield node
    if not node.is_leaf:
        yield from _walk(node.left)
        yield from _walk(node.right)


def test_gini():
    """Test Gini impurity from class counts."""
    print("=== Testing Gini Impurity ===")

    assert gini_from_counts([5, 0]) == 0.0
    assert gini_from_counts([5, 5]) == pytest.approx(0.5)
    assert gini_from_counts([1, 1, 1]) == pytest.approx(2 / 3)
    assert np.allclose(gini_from_counts(np.array([[2, 2], [4, 0], [1, 3]])), [0.5, 0.0, 0.375])

    print("Impurity values are exact")
    return True


def test_simple_split():
    """Test the midpoint threshold on a separable 1-D example."""
    print("\n=== Testing Simple Split ===")

    data = _dataset([0.0, 1.0, 10.0, 11.0], ["A", "A", "B", "B"])
    model = dt_fit(data)
    assert model.root.feature == 0
    assert model.root.threshold == 5.5
    assert model.root.left.is_leaf and model.root.right.is_leaf
    assert model.score(data) == 1.0
    assert dt_predict(model, [4.0]) == "A" and dt_predict(model, [7.0]) == "B"
    assert dt_predict(model, [5.5]) == "A"

    pure = dt_fit(_dataset([1.0, 2.0, 3.0], ["A", "A", "A"]))
    assert pure.root.is_leaf and pure.root.depth() == 0

    with pytest.raises(DataError):
        dt_fit(_dataset(np.zeros((0, 2)), []))
    with pytest.raises(DataError):
        model.predict(np.zeros((2, 3)))

    print("Split lands between the classes")
    return True


def test_unbounded_tree_fits_training_data():
    """Test 100% training accuracy and strictly decreasing impurity."""
    print("\n=== Testing Unbounded Tree ===")

    rng = np.random.default_rng(17)
    X = rng.uniform(size=(200, 3))
    labels = rng.choice(["a", "b", "c"], size=200)
    data = _dataset(X, labels)
    model = dt_fit(data)
    assert model.score(data) == 1.0

    for node in _walk(model.root):
        if node.is_leaf:
            continue
        n_left, n_right = sum(node.left.counts), sum(node.right.counts)
        weighted = (n_left * gini_from_counts(node.left.counts)
                    + n_right * gini_from_counts(node.right.counts)) / (n_left + n_right)
        assert weighted < gini_from_counts(node.counts)

    capped = dt_fit(data, max_depth=2)
    assert capped.root.depth() <= 2

    print(f"Tree depth {model.root.depth()} fits every training row")
    return True


def test_forest_reduces_to_tree():
    """Test that one un-bagged tree using all features equals the CART tree."""
    print("\n=== Testing Forest Degenerate Case ===")

    data = make_blobs(60, arity=4, separation=1.5, seed=3)
    forest = rf_fit(data, n_trees=1, max_depth=6, rng=np.random.default_rng(0), max_features=4, bootstrap=False)
    tree = dt_fit(data, max_depth=6)
    assert forest.trees[0].to_dict() == tree.root.to_dict()
    assert np.array_equal(forest.predict_dataset(data), tree.predict_dataset(data))

    print("Degenerate forest matches the tree")
    return True


def test_forest_accuracy():
    """Test forest accuracy on separated blobs."""
    print("\n=== Testing Forest Accuracy ===")

    train = make_blobs(500, arity=7, separation=6.0, seed=30)
    test = make_blobs(1000, arity=7, separation=6.0, seed=31)
    forest = rf_fit(train, rng=np.random.default_rng(4))
    assert len(forest.trees) == 100
    assert forest.max_features == 2
    assert all(t.depth() <= 6 for t in forest.trees)
    accuracy = forest.score(test)
    assert accuracy >= 0.99

    print(f"Forest test accuracy {accuracy:.4f}")
    return True


def test_forest_determinism_and_votes():
    """Test seeded reproducibility, threaded growth and tie-breaking."""
    print("\n=== Testing Forest Determinism ===")

    data = make_blobs(80, arity=5, separation=2.0, seed=12)
    first = rf_fit(data, n_trees=15, rng=np.random.default_rng(9))
    second = rf_fit(data, n_trees=15, rng=np.random.default_rng(9), workers=3)
    assert first.to_dict() == second.to_dict()

    votes = first.votes(data.X)
    assert votes.shape == (data.n_rows, 2)
    assert np.all(votes.sum(axis=1) == 15)

    leaf_a = TreeNode(counts=(1, 0), prediction=0)
    leaf_b = TreeNode(counts=(0, 1), prediction=1)
    tied = ForestModel(trees=[leaf_a, leaf_b], classes=("A", "B"), arity=1, seeds=[0, 1], max_features=1)
    assert rf_predict(tied, [0.3]) == "A"

    with pytest.raises(DataError):
        rf_fit(data, n_trees=0)

    print("Forests are reproducible")
    return True


def test_baseline_persistence():
    """Test that saved trees and forests predict identically after reloading."""
    print("\n=== Testing Baseline Persistence ===")

    data = make_blobs(50, arity=3, separation=1.0, seed=6)
    tree = dt_fit(data)
    forest = rf_fit(data, n_trees=5, rng=np.random.default_rng(2))
    with tempfile.TemporaryDirectory() as tmp:
        for name, model in (("tree.json", tree), ("forest.json", forest)):
            path = os.path.join(tmp, name)
            save_baseline(model, path)
            loaded = load_baseline(path)
            assert type(loaded) is type(model)
            assert np.array_equal(loaded.predict_dataset(data), model.predict_dataset(data))
        with pytest.raises(DataError):
            load_baseline(os.path.join(tmp, "missing.json"))

    print("Baselines round-trip through JSON")
    return True


def main():
    """Run all tests."""
    print("Starting Baseline Tests...\n")

    tests = [
        ("Gini Impurity", test_gini),
        ("Simple Split", test_simple_split),
        ("Unbounded Tree", test_unbounded_tree_fits_training_data),
        ("Forest Degenerate Case", test_forest_reduces_to_tree),
        ("Forest Accuracy", test_forest_accuracy),
        ("Forest Determinism", test_forest_determinism_and_votes),
        ("Baseline Persistence", test_baseline_persistence),
    ]

    results = []
    for test_name, test_func in tests:
        try:
            result = test_func()
            results.append((test_name, result, None))
            print(f"✓ {test_name}: {'PASSED' if result else 'FAILED'}")
        except Exception as e:
            results.append((test_name, False, str(e)))
            print(f"✗ {test_name}: FAILED - {e}")

    print("\n=== Test Summary ===")
    passed = sum(1 for _, result, _ in results if result)
    total = len(results)
    print(f"Passed: {passed}/{total}")

    if passed == total:
        print("🎉 All baseline tests passed!")
        return 0
    print("⚠️  Some tests failed.")
    for test_name, result, error in results:
        if not result:
            print(f"  - {test_name}: {error or 'Failed'}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
