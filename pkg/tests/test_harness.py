"""
Tests for the experiment harness: specs, cross-image matrices, significance
annotations, harvesting, dispersion analysis, visualization export,
transfer recalibration and report writing.
"""
import json
import os
import sys
import tempfile
from pathlib import Path

# Add parent directory to path to access m3gp
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from m3gp import harness
from m3gp.dataset import Dataset, project
from m3gp.exceptions import DataError, UsageError
from m3gp.expr import load_hyperfeatures, parse
from m3gp.harness import (HYPER_VS_ORIGINAL, IN_IMAGE, OUTSIDE, ExperimentSpec, analyze_dispersion, derive_seed,
                          export_visualization, harvest_hyperfeatures, load_spec, overlap_ratio, run_experiment,
                          significance_tally, source_target_summary, training_set, transfer_eval)
from m3gp.mdclass import fit_dataset
from m3gp.report import render_markdown, render_text, write_report
from m3gp.stats import kruskal_wallis, median
from m3gp.synthetic import SCENE_CENTERS, UNBURNT_CENTER, make_blobs, make_scene, make_scenes, shift_classes

ALL_COMBINATIONS = ["B", "C", "M", "BC", "BM", "CM", "BCM"]
TINY_EVOLUTION = {"generations": 2, "population_size": 8, "tournament_size": 3, "init_max_depth": 3}


def _small_scenes(seed=0):
    """Three 300-row scenes with the burnt/unburnt geometry of the full-size fixtures."""
    return {tag: make_scene(tag, 300, 120, SCENE_CENTERS[tag], UNBURNT_CENTER, seed=seed * 10 + i)
            for i, tag in enumerate("BCM")}


def _spec(**fields):
    payload = {
        "datasets": {"B": "B.csv", "C": "C.csv", "M": "M.csv"},
        "combinations": ALL_COMBINATIONS,
        "runs": 3,
        "methods": ["md"],
        "training_size": 100,
        "seed": 7,
        "run_config": TINY_EVOLUTION,
    }
    payload.update(fields)
    return ExperimentSpec.from_dict(payload)


def _one_feature(groups):
    """Dataset with a single feature where each provenance group holds the given values."""
    values, tags = [], []
    for tag, group in groups.items():
        values.extend(group)
        tags.extend([tag] * len(group))
    return Dataset(X=np.array(values, dtype=float).reshape(-1, 1), labels=["x"] * len(values),
                   provenance=tags, feature_names=("X0",))


def test_spec_parsing():
    """Test spec loading, combination parsing and validation errors."""
    print("=== Testing Spec Parsing ===")

    spec = ExperimentSpec.from_dict({"datasets": {"B": "b.csv", "C": "c.csv"},
                                     "combinations": ["B", "BC", ["C", "B"]], "runs": 4},
                                    base_dir="/data")
    assert spec.combinations == [("B",), ("B", "C"), ("C", "B")]
    assert spec.datasets["B"] == str(Path("/data") / "b.csv")
    assert spec.runs == 4 and spec.target_tags == ["B", "C"]
    assert spec.harvest_from == ("B", "C")
    assert spec.feature_spaces == ["original"]
    assert _spec(feature_mode="both").feature_spaces == ["original", "hyper"]
    assert spec.to_dict()["combinations"] == ["B", "BC", "CB"]

    bad_payloads = [
        {"combinations": ["BX"]},
        {"runs": 0},
        {"methods": ["svm"]},
        {"feature_mode": "mixed"},
        {"alpha": 1.5},
        {"colour": "blue"},
        {"run_config": {"mutation_rate": 0.1}},
        {"run_config": {"generations": 0}},
        {"targets": ["Z"]},
        {"combinations": ["BB"]},
    ]
    for bad in bad_payloads:
        with pytest.raises(UsageError):
            _spec(**bad)

    with tempfile.TemporaryDirectory() as tmp:
        with pytest.raises(UsageError):
            load_spec(os.path.join(tmp, "absent.json"))
        broken = os.path.join(tmp, "broken.json")
        Path(broken).write_text("{not json", encoding="utf-8")
        with pytest.raises(UsageError):
            load_spec(broken)
        good = os.path.join(tmp, "good.json")
        Path(good).write_text(json.dumps({"datasets": {"B": "scenes/B.csv"}, "combinations": ["B"]}),
                              encoding="utf-8")
        assert load_spec(good).datasets["B"] == str(Path(tmp) / "scenes" / "B.csv")

    print("Specs are parsed and validated")
    return True


def test_seed_derivation():
    """Test that per-unit seeds are stable and distinct."""
    print("\n=== Testing Seed Derivation ===")

    assert derive_seed(7, 0, 1) == derive_seed(7, 0, 1)
    seeds = {derive_seed(7, c, r) for c in range(7) for r in range(30)}
    assert len(seeds) == 210
    assert derive_seed(7, 0, 1) != derive_seed(8, 0, 1)
    assert derive_seed(7, 0, 1, 0, 0) != derive_seed(7, 0, 1)
    assert 0 <= derive_seed(123, 4) < 2 ** 32

    print("Seeds are reproducible")
    return True


def test_training_and_test_sets():
    """Test that in-image test rows never overlap training rows."""
    print("\n=== Testing Training and Test Sets ===")

    scenes = _small_scenes()
    hyper_scenes = {tag: project(d, [parse("X0 - X6"), parse("X4 * X5")]) for tag, d in scenes.items()}
    for index, name in enumerate(ALL_COMBINATIONS):
        combination = tuple(name)
        seed = derive_seed(3, index, 0)
        train = training_set(scenes, combination, 100, seed)
        assert train.n_rows == 100
        assert set(train.provenance.tolist()) == set(combination)
        for target in "BCM":
            test = harness.test_set(scenes, combination, target, train)
            if target in combination:
                assert not set(test.identities()) & set(train.identities())
                assert test.n_rows == 300 - int(np.sum(train.provenance == target))
            else:
                assert test.n_rows == 300
        hyper_train = training_set(hyper_scenes, combination, 100, seed)
        assert hyper_train.identities() == train.identities()

    print("Test sets exclude training rows")
    return True


def test_cross_image_matrix():
    """Test cell cardinality, medians and annotation counts."""
    print("\n=== Testing Cross-Image Matrix ===")

    spec = _spec(methods=["md", "dt"])
    report = run_experiment(spec, _small_scenes())
    assert len(report.records) == 7 * 3 * 2
    assert len(report.cells) == 7 * 3 * 2
    for cell in report.cells:
        assert len(cell.accuracies) == 3
        assert cell.median == median(cell.accuracies)
        assert cell.in_training == (cell.target in cell.combination)

    kinds = [c.kind for c in report.comparisons]
    assert kinds.count(IN_IMAGE) == 2 * 3 * 3
    assert kinds.count(OUTSIDE) == 2 * 3 * 3
    assert kinds.count(HYPER_VS_ORIGINAL) == 0
    for comparison in report.comparisons:
        first = report.cell(comparison.method, comparison.features, comparison.first, comparison.target)
        second = report.cell(comparison.method, comparison.features, comparison.second, comparison.target)
        verdict = kruskal_wallis([first.accuracies, second.accuracies], spec.alpha)
        assert verdict.p_value == pytest.approx(comparison.p_value)
        assert verdict.significant == comparison.significant

    for cell in report.cells:
        if cell.in_training and len(cell.combination) > 1:
            assert cell.in_image in ("lower", "higher", "same")
        if cell.in_training:
            assert cell.wins == 0

    tally = significance_tally(report)
    assert len(tally) == 2
    assert tally["in_image_comparisons"].tolist() == [9, 9]
    summary = source_target_summary(report)
    assert set(summary["role"]) == {"source", "target"}
    assert len(report.cells_frame()) == 42 and len(report.runs_frame()) == 7 * 3 * 2 * 3

    print(f"{len(report.cells)} cells, {len(report.comparisons)} comparisons")
    return True


def test_unseen_image_generalization():
    """Test that training on C alone transfers poorly to M while mixing all three does not."""
    print("\n=== Testing Unseen-Image Generalization ===")

    spec = _spec(combinations=["C", "BCM"], targets=["M"], training_size=2000)
    report = run_experiment(spec, make_scenes(0))
    pure = report.cell("md", "original", "C", "M")
    mixed = report.cell("md", "original", "BCM", "M")
    assert not pure.in_training and mixed.in_training
    assert pure.median < mixed.median
    assert mixed.median > 0.9

    print(f"C -> M {pure.median:.3f}, BCM -> M {mixed.median:.3f}")
    return True


def test_hyper_feature_space():
    """Test runs in the bundled hyper-feature space and the report artifacts."""
    print("\n=== Testing Hyper-feature Space ===")

    spec = _spec(combinations=["B", "C"], feature_mode="both")
    report = run_experiment(spec, _small_scenes(1))
    assert len(report.hyperfeatures) == 10
    assert {c.features for c in report.cells} == {"original", "hyper"}
    assert len(report.cells) == 2 * 2 * 3
    assert [c.kind for c in report.comparisons].count(HYPER_VS_ORIGINAL) == 2 * 3
    for record in report.records:
        assert record.dimensions == (10 if record.features == "hyper" else 7)

    with tempfile.TemporaryDirectory() as tmp:
        paths = write_report(report, tmp)
        for key in ("cells", "runs", "comparisons", "tally", "sources", "text", "markdown", "html", "spec",
                    "hyperfeatures"):
            assert paths[key].is_file(), key
        assert "<table>" in paths["html"].read_text(encoding="utf-8")
        assert len(load_hyperfeatures(paths["hyperfeatures"])) == 10
        champions = list((Path(tmp) / "champions").glob("*.json"))
        assert len(champions) == len(report.records)

    assert "md / hyper features" in render_text(report)
    assert "## md / original features" in render_markdown(report)

    print("Hyper-feature runs are reported")
    return True


def test_report_determinism():
    """Test that the same spec and seed give byte-identical reports."""
    print("\n=== Testing Report Determinism ===")

    scenes = _small_scenes(2)
    spec = _spec(combinations=["B", "BC"], runs=2, methods=["m3gp", "md"])
    threaded = _spec(combinations=["B", "BC"], runs=2, methods=["m3gp", "md"], workers=2)
    with tempfile.TemporaryDirectory() as tmp:
        outputs = []
        for index, current in enumerate((spec, spec, threaded)):
            out = Path(tmp) / f"out{index}"
            write_report(run_experiment(current, scenes), out)
            outputs.append(out)
        files = sorted(p.relative_to(outputs[0]) for p in outputs[0].rglob("*") if p.is_file())
        assert any(str(f).startswith("logs") for f in files)
        for other in outputs[1:2]:
            assert sorted(p.relative_to(other) for p in other.rglob("*") if p.is_file()) == files
            for relative in files:
                assert (outputs[0] / relative).read_bytes() == (other / relative).read_bytes(), relative
        for name in ("cells.csv", "runs.csv", "comparisons.csv"):
            assert (outputs[0] / name).read_bytes() == (outputs[2] / name).read_bytes()

    print("Reports are reproducible")
    return True


def test_harvest():
    """Test harvesting hyper-features and reusing completed runs."""
    print("\n=== Testing Harvest ===")

    scenes = _small_scenes(3)
    spec = _spec(combinations=["BCM"], methods=["m3gp"], runs=3, top_k=3)
    with tempfile.TemporaryDirectory() as tmp:
        asset = Path(tmp) / "assets" / "harvested.txt"
        harvested = harvest_hyperfeatures(spec, scenes, asset)
        assert 1 <= len(harvested) <= 3
        assert load_hyperfeatures(asset) == harvested
        assert len({str(h) for h in harvested}) == len(harvested)

    combined = _spec(combinations=["BCM", "B"], methods=["m3gp"], runs=2, top_k=2,
                     feature_mode="both", hyper_source="harvest")
    report = run_experiment(combined, scenes)
    assert 1 <= len(report.hyperfeatures) <= 2
    assert report.impacts
    hyper_records = [r for r in report.records if r.features == "hyper"]
    assert len(hyper_records) == 2 * 2
    assert all(r.champion.dimensions[0].max_feature_index < len(report.hyperfeatures) for r in hyper_records)

    print(f"Harvested {len(harvested)} formulas")
    return True


def test_dispersion():
    """Test Tukey-filtered summaries and range overlaps."""
    print("\n=== Testing Dispersion Analysis ===")

    assert overlap_ratio((0.0, 2.0), (1.0, 3.0)) == pytest.approx(1 / 3)
    assert overlap_ratio((0.0, 1.0), (2.0, 3.0)) == 0.0
    assert overlap_ratio((1.0, 1.0), (1.0, 1.0)) == 1.0

    data = _one_feature({
        "a": list(range(1, 11)),
        "b": list(range(1, 11)),
        "c": list(range(100, 111)),
        "d": [1, 2, 3, 4, 100],
        "e": [5, 6, 7],
    })
    result = analyze_dispersion([data], group_by=("provenance",))
    summary = result.summary.set_index("group")
    assert summary.loc["d", "max"] == 4.0 and summary.loc["d", "kept"] == 4
    assert bool(summary.loc["e", "unfiltered"]) and not bool(summary.loc["a", "unfiltered"])

    overlaps = {(r.first, r.second): r.overlap for r in result.overlaps.itertuples()}
    assert overlaps[("a", "b")] == 1.0
    assert overlaps[("a", "c")] == 0.0
    assert len(result.overlaps) == 10

    scenes = _small_scenes()
    by_class = analyze_dispersion(list(scenes.values()))
    assert len(by_class.summary) == 7 * 6
    with pytest.raises(UsageError):
        analyze_dispersion([data], group_by=("season",))
    with pytest.raises(DataError):
        analyze_dispersion([])

    print("Dispersion summaries are filtered")
    return True


def test_visualization_export():
    """Test projected coordinates and centroid rows."""
    print("\n=== Testing Visualization Export ===")

    scenes = _small_scenes()
    hyperfeatures = [parse("X0"), parse("X6"), parse("X0 - X6")]
    model = fit_dataset(scenes["B"], hyperfeatures)
    frame = export_visualization(model, [scenes["B"], scenes["C"]])
    assert list(frame.columns) == ["HF0", "HF1", "HF2", "label", "provenance", "kind"]
    assert len(frame) == 300 + 300 + 2

    samples = frame[(frame["kind"] == "sample") & (frame["provenance"] == "B")]
    assert np.array_equal(samples[["HF0", "HF1", "HF2"]].to_numpy(), project(scenes["B"], hyperfeatures).X)
    centroids = frame[frame["kind"] == "centroid"]
    assert centroids["label"].tolist() == list(model.classes)
    assert np.array_equal(centroids[["HF0", "HF1", "HF2"]].to_numpy(), model.centroids)

    with pytest.raises(DataError):
        export_visualization(model, [make_blobs(5, arity=3)])

    print("Export matches the projection")
    return True


def test_transfer_recalibration():
    """Test scoring before and after recalibrating on a shifted target."""
    print("\n=== Testing Transfer Recalibration ===")

    source = make_blobs(200, arity=3, separation=4.0, seed=1)
    model = fit_dataset(source, [parse("X0"), parse("X1"), parse("X2")])

    improved = 0
    for seed in range(10):
        target = shift_classes(make_blobs(200, arity=3, separation=4.0, seed=50 + seed),
                               {"0": [4.0, 0.0, 0.0], "1": [8.0, 0.0, 0.0]})
        result = transfer_eval(model, target, 0.1, seed=seed)
        assert result.calibration_rows == 40 and result.holdout_rows == 360
        improved += result.after > result.before
    assert improved >= 9

    unchanged = transfer_eval(model, make_blobs(200, arity=3, separation=4.0, seed=99), 0.2)
    assert abs(unchanged.after - unchanged.before_holdout) < 0.05

    target = make_blobs(200, arity=3, seed=3)
    for fraction in (0.0, 1.0, -0.5, 0.004):
        with pytest.raises(DataError):
            transfer_eval(model, target, fraction)

    print(f"Recalibration helped in {improved}/10 seeds")
    return True


def main():
    """Run all tests."""
    print("Starting Harness Tests...\n")

    tests = [
        ("Spec Parsing", test_spec_parsing),
        ("Seed Derivation", test_seed_derivation),
        ("Training and Test Sets", test_training_and_test_sets),
        ("Cross-Image Matrix", test_cross_image_matrix),
        ("Unseen-Image Generalization", test_unseen_image_generalization),
        ("Hyper-feature Space", test_hyper_feature_space),
        ("Report Determinism", test_report_determinism),
        ("Harvest", test_harvest),
        ("Dispersion Analysis", test_dispersion),
        ("Visualization Export", test_visualization_export),
        ("Transfer Recalibration", test_transfer_recalibration),
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
        print("🎉 All harness tests passed!")
        return 0
    print("⚠️  Some tests failed.")
    for test_name, result, error in results:
        if not result:
            print(f"  - {test_name}: {error or 'Failed'}")
    return 1


if __name__ == "__main__":
    sys.exit(main())
