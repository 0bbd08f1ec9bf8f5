"""
Tests for the statistics helpers: confusion matrices, Kruskal-Wallis,
Tukey filtering and medians.
"""
import os
import sys

# Add parent directory to path to access m3gp
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from m3gp.exceptions import DataError
from m3gp.stats import (ConfusionMatrix, accuracy, compare_samples, kruskal_wallis, kruskal_wallis_exact, median,
                        quartiles, tukey_filter, tukey_mask)


def test_confusion_matrix():
    """Test accuracy and recall on published-size confusion matrices."""
    print("=== Testing Confusion Matrix ===")

    c_scene = ConfusionMatrix(("0", "1"), [[1858, 114], [433, 444]])
    assert c_scene.total == 2849
    assert accuracy(c_scene) == pytest.approx(0.808, abs=5e-4)
    assert c_scene.recall("1") == pytest.approx(444 / 877)

    m_scene = ConfusionMatrix(("0", "1"), [[1964, 345], [1302, 271]])
    assert accuracy(m_scene) == pytest.approx(0.576, abs=5e-4)

    built = ConfusionMatrix.from_predictions(["a", "a", "b", "c"], ["a", "b", "b", "a"])
    assert built.classes == ("a", "b", "c")
    assert built.counts.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]
    assert built.accuracy() == 0.5
    assert built.recalls() == {"a": 0.5, "b": 1.0, "c": 0.0}

    with pytest.raises(DataError):
        ConfusionMatrix(("a", "b"), [[1, 2, 3]])
    with pytest.raises(DataError):
        ConfusionMatrix(("a",), [[0]]).accuracy()
    with pytest.raises(DataError):
        ConfusionMatrix.from_predictions(["a"], ["a", "b"])

    print("Accuracies match the reference matrices")
    return True


def test_kruskal_wallis_values():
    """Test H and p against hand-computed values."""
    print("\n=== Testing Kruskal-Wallis Values ===")

    verdict = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
    assert verdict.statistic == pytest.approx(27 / 7, abs=1e-9)
    assert verdict.p_value == pytest.approx(0.0495, abs=5e-4)
    assert not verdict.significant
    assert verdict.medians == [2.0, 5.0]

    three = kruskal_wallis([[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]])
    assert three.statistic == pytest.approx(128 / 13, abs=1e-9)
    assert three.p_value == pytest.approx(np.exp(-64 / 13), rel=1e-6)
    assert three.significant

    same = kruskal_wallis([[1, 2, 3], [1, 2, 3]])
    assert same.statistic == 0.0 and same.p_value == pytest.approx(1.0)
    flat = kruskal_wallis([[5, 5], [5, 5]])
    assert flat.statistic == 0.0 and flat.p_value == 1.0

    tied = kruskal_wallis([[1, 1, 2], [2, 3, 3]], alpha=0.5)
    assert tied.alpha == 0.5 and tied.statistic > 0

    with pytest.raises(DataError):
        kruskal_wallis([[1, 2, 3]])
    with pytest.raises(DataError):
        kruskal_wallis([[1, 2], []])

    print("H statistics are exact")
    return True


def test_kruskal_wallis_properties():
    """Test non-negativity, p range and invariance under monotone transforms."""
    print("\n=== Testing Kruskal-Wallis Properties ===")

    rng = np.random.default_rng(4)
    for _ in range(50):
        groups = [rng.normal(size=int(rng.integers(2, 8))) for _ in range(int(rng.integers(2, 4)))]
        verdict = kruskal_wallis(groups)
        assert verdict.statistic >= 0.0
        assert 0.0 <= verdict.p_value <= 1.0
        shifted = kruskal_wallis([np.exp(g) * 3.0 + 1.0 for g in groups])
        assert shifted.statistic == pytest.approx(verdict.statistic, abs=1e-9)

    print("Rank statistics behave")
    return True


def test_exact_p_values():
    """Test the enumerated p-value and its agreement with the chi-square tail."""
    print("\n=== Testing Exact p-values ===")

    small = kruskal_wallis_exact([[1, 2, 3], [4, 5, 6]])
    assert small.p_value == pytest.approx(0.1)

    cases = [
        ([[1, 2, 3, 4, 5], [6, 7, 8, 9, 10]], 2 / 252),
        ([[1, 2, 3, 4, 6], [5, 7, 8, 9, 10]], 4 / 252),
        ([[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]], None),
    ]
    for groups, expected in cases:
        exact = kruskal_wallis_exact(groups)
        asymptotic = kruskal_wallis(groups)
        if expected is not None:
            assert exact.p_value == pytest.approx(expected)
        assert exact.statistic == pytest.approx(asymptotic.statistic)
        assert abs(exact.p_value - asymptotic.p_value) < 0.01

    with pytest.raises(DataError):
        kruskal_wallis_exact([list(range(20)), list(range(20, 40))])

    print("Exact and asymptotic p-values agree in the tail")
    return True


def test_compare_samples():
    """Test the direction of two-sample comparisons."""
    print("\n=== Testing Sample Comparison ===")

    higher = compare_samples([4, 5, 6], [1, 2, 3])
    assert higher.direction == "higher"
    assert higher.p_value == pytest.approx(kruskal_wallis([[4, 5, 6], [1, 2, 3]]).p_value)
    assert compare_samples([1, 2, 3], [4, 5, 6]).direction == "lower"
    assert compare_samples([1, 2, 3], [3, 2, 1]).direction == "same"

    clear = compare_samples(list(range(30, 60)), list(range(0, 30)))
    assert clear.significant and clear.direction == "higher"

    print("Directions follow mean ranks")
    return True


def test_tukey_filter():
    """Test outlier removal with Tukey fences."""
    print("\n=== Testing Tukey Filter ===")

    assert tukey_filter([1, 2, 3, 4, 100]) == [1.0, 2.0, 3.0, 4.0]
    assert tukey_filter([7, 7, 7, 7, 7]) == [7.0] * 5
    filtered = tukey_filter([5, 1, 3, 2, 4, 60, -40])
    assert filtered == tukey_filter(filtered)
    assert tukey_mask([1, 2, 3, 4, 100]).tolist() == [True, True, True, True, False]
    with pytest.raises(DataError):
        tukey_filter([1, 2, 3])

    # Fences collapse on the tied middle; dropping both ends would leave 3 values
    assert tukey_filter([0, 10, 10, 10, 20]) == [0.0, 10.0, 10.0, 10.0, 20.0]
    assert tukey_filter(tukey_filter([0, 10, 10, 10, 20])) == tukey_filter([0, 10, 10, 10, 20])
    assert tukey_filter([10, 10, 10, 10, 0]) == [10.0, 10.0, 10.0, 10.0]

    rng = np.random.default_rng(8)
    for _ in range(20):
        values = rng.standard_cauchy(size=40)
        once = tukey_filter(values)
        assert tukey_filter(once) == once
    for size in range(4, 12):
        for _ in range(30):
            once = tukey_filter(rng.standard_cauchy(size=size))
            assert len(once) >= 4
            assert tukey_filter(once) == once

    print("Filtering reaches a fixed point")
    return True


def test_median_and_quartiles():
    """Test medians and linear quartiles."""
    print("\n=== Testing Median and Quartiles ===")

    assert median([1, 3, 2]) == 2.0
    assert median([1, 2, 3, 4]) == 2.5
    assert quartiles([1, 2, 3, 4, 5]) == (2.0, 3.0, 4.0)
    with pytest.raises(DataError):
        median([])
    with pytest.raises(DataError):
        quartiles([])

    print("Location statistics are correct")
    return True


def main():
    """Run all tests."""
    print("Starting Statistics Tests...\n")

    tests = [
        ("Confusion Matrix", test_confusion_matrix),
        ("Kruskal-Wallis Values", test_kruskal_wallis_values),
        ("Kruskal-Wallis Properties", test_kruskal_wallis_properties),
        ("Exact p-values", test_exact_p_values),
        ("Sample Comparison", test_compare_samples),
        ("Tukey Filter", test_tukey_filter),
        ("Median and Quartiles", test_median_and_quartiles),
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
        print("🎉 All statistics tests passed!")
        return 0
    print("⚠️  Some tests failed.")
    for test_name, result, error in results:
        if not result:
            print(f"  - {test_name}: {error or 'Failed'}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
