"""
Experiment orchestration: multi-run training on pure and mixed images,
cross-image evaluation matrices, significance annotations, hyper-feature
harvesting, dispersion analysis, visualization export and transfer
recalibration.
"""
import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .baselines import dt_fit, rf_fit
from .config import get_config
from .dataset import (Dataset, SplitSpec, check_compatible, concat, largest_remainder, load_csv, mix, project,
                      remaining, split)
from .engine import (DimensionImpact, EvolutionResult, Evolver, Individual, RunConfig, champion_model,
                     rank_dimension_impact, score_dimension_impacts)
from .exceptions import DataError, UsageError
from .expr import Expression, bundled_hyperfeatures, format_expression, load_hyperfeatures, save_hyperfeatures
from .mdclass import MDModel, fit_dataset, recalibrate
from .stats import Comparison, compare_samples, median, quartiles, tukey_mask

logger = logging.getLogger(__name__)

METHODS = ("m3gp", "md", "dt", "rf")
FEATURE_MODES = ("original", "hyper", "both")
HYPER_SOURCES = ("file", "harvest")
ORIGINAL = "original"
HYPER = "hyper"

IN_IMAGE = "in-image"
OUTSIDE = "outside"
HYPER_VS_ORIGINAL = "hyper-vs-original"


def derive_seed(master: int, *keys: int) -> int:
    """
    Seed for one unit of work: the first 32-bit word of
    SeedSequence([master, *keys]). Runs use keys (combination, run) and
    methods append (method index, feature-space index).
    """
    return int(np.random.SeedSequence([int(master), *[int(k) for k in keys]]).generate_state(1)[0])


def combination_name(combination: Sequence[str]) -> str:
    return "".join(combination)


# ---------------------------------------------------------------------------
# Experiment specs
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    """Everything one experiment needs; loaded from a JSON spec file."""

    datasets: Dict[str, str]
    combinations: List[Tuple[str, ...]]
    runs: int = 30
    run_config: RunConfig = field(default_factory=RunConfig)
    targets: Optional[List[str]] = None
    methods: List[str] = field(default_factory=lambda: ["m3gp"])
    feature_mode: str = ORIGINAL
    hyper_source: str = "file"
    hyper_path: Optional[str] = None
    harvest_combination: Optional[Tuple[str, ...]] = None
    top_k: int = 10
    training_size: int = 2000
    output_dir: str = "results"
    seed: int = 0
    label_column: str = "class"
    rf_trees: int = 100
    rf_max_depth: int = 6
    alpha: float = 0.01
    workers: int = 1

    @property
    def target_tags(self) -> List[str]:
        return list(self.targets) if self.targets else list(self.datasets)

    @property
    def feature_spaces(self) -> List[str]:
        return [ORIGINAL, HYPER] if self.feature_mode == "both" else [self.feature_mode]

    @property
    def harvest_from(self) -> Tuple[str, ...]:
        return tuple(self.harvest_combination) if self.harvest_combination else tuple(self.datasets)

    def validate(self) -> "ExperimentSpec":
        if not self.datasets:
            raise UsageError("the experiment declares no datasets")
        if not self.combinations:
            raise UsageError("the experiment declares no training combinations")
        declared = set(self.datasets)
        for combination in list(self.combinations) + [self.harvest_from]:
            missing = [tag for tag in combination if tag not in declared]
            if missing or not combination:
                raise UsageError(f"combination {combination_name(combination)!r} references undeclared datasets {missing}")
            if len(set(combination)) != len(combination):
                raise UsageError(f"combination {combination_name(combination)!r} repeats a dataset")
        unknown_targets = [t for t in self.target_tags if t not in declared]
        if unknown_targets:
            raise UsageError(f"unknown evaluation targets {unknown_targets}")
        if self.runs < 1:
            raise UsageError(f"runs must be at least 1, got {self.runs}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise UsageError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.feature_mode not in FEATURE_MODES:
            raise UsageError(f"feature mode must be one of {list(FEATURE_MODES)}, got {self.feature_mode!r}")
        if self.hyper_source not in HYPER_SOURCES:
            raise UsageError(f"hyper-feature source must be one of {list(HYPER_SOURCES)}, got {self.hyper_source!r}")
        if self.seed < 0:
            raise UsageError(f"master seed must be non-negative, got {self.seed}")
        if self.top_k < 1 or self.training_size < 1 or self.workers < 1 or self.rf_trees < 1:
            raise UsageError("top_k, training_size, workers and rf_trees must be positive")
        if not 0 < self.alpha < 1:
            raise UsageError(f"alpha must lie in (0, 1), got {self.alpha}")
        self.run_config.validate()
        return self

    @staticmethod
    def _parse_combination(entry: Union[str, Sequence[str]], declared: Sequence[str]) -> Tuple[str, ...]:
        if isinstance(entry, str):
            if entry in declared:
                return (entry,)
            return tuple(entry)
        return tuple(str(tag) for tag in entry)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any], base_dir: Union[str, Path, None] = None) -> "ExperimentSpec":
        """Build a spec; missing keys fall back to the environment configuration."""
        config = get_config()
        base = Path(base_dir) if base_dir is not None else Path(".")
        raw = payload.get("datasets")
        if isinstance(raw, dict):
            datasets = {str(tag): str(base / path) for tag, path in raw.items()}
        elif isinstance(raw, list):
            datasets = {str(item["tag"]): str(base / item["path"]) for item in raw}
        else:
            raise UsageError("spec field 'datasets' must map tags to CSV paths")
        declared = list(datasets)

        run_config = config.get_run_config()
        overrides = dict(payload.get("run_config", {}))
        try:
            run_config = replace(run_config, **overrides)
        except TypeError as e:
            raise UsageError(f"bad run_config field: {e}")

        combinations = [cls._parse_combination(c, declared) for c in payload.get("combinations", declared)]
        harvest = payload.get("harvest_combination")
        hyper_path = payload.get("hyper_path")
        output_dir = payload.get("output_dir", "results")
        known = {"datasets", "combinations", "run_config", "harvest_combination", "hyper_path", "output_dir",
                 "runs", "targets", "methods", "feature_mode", "hyper_source", "top_k", "training_size", "seed",
                 "label_column", "rf_trees", "rf_max_depth", "alpha", "workers"}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise UsageError(f"unknown spec fields {unknown}")
        spec = cls(
            datasets=datasets,
            combinations=combinations,
            runs=int(payload.get("runs", config.get("RUNS"))),
            run_config=run_config,
            targets=payload.get("targets"),
            methods=list(payload.get("methods", ["m3gp"])),
            feature_mode=payload.get("feature_mode", ORIGINAL),
            hyper_source=payload.get("hyper_source", "file"),
            hyper_path=str(base / hyper_path) if hyper_path else None,
            harvest_combination=cls._parse_combination(harvest, declared) if harvest else None,
            top_k=int(payload.get("top_k", config.get("TOP_K"))),
            training_size=int(payload.get("training_size", config.get("TRAINING_SIZE"))),
            output_dir=str(base / output_dir),
            seed=int(payload.get("seed", config.get("SEED"))),
            label_column=payload.get("label_column", config.get("LABEL_COLUMN")),
            rf_trees=int(payload.get("rf_trees", config.get("RF_TREES"))),
            rf_max_depth=int(payload.get("rf_max_depth", config.get("RF_MAX_DEPTH"))),
            alpha=float(payload.get("alpha", config.get("SIGNIFICANCE_LEVEL"))),
            workers=int(payload.get("workers", config.get("WORKERS"))),
        )
        return spec.validate()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "datasets": dict(self.datasets),
            "combinations": [combination_name(c) for c in self.combinations],
            "runs": self.runs,
            "run_config": {
                "generations": self.run_config.generations,
                "population_size": self.run_config.population_size,
                "tournament_size": self.run_config.tournament_size,
                "init_max_depth": self.run_config.init_max_depth,
                "max_depth": self.run_config.max_depth,
                "elitism": self.run_config.elitism,
                "operator_probabilities": dict(self.run_config.operator_probabilities),
            },
            "targets": self.target_tags,
            "methods": list(self.methods),
            "feature_mode": self.feature_mode,
            "hyper_source": self.hyper_source,
            "hyper_path": self.hyper_path,
            "harvest_combination": combination_name(self.harvest_from),
            "top_k": self.top_k,
            "training_size": self.training_size,
            "seed": self.seed,
            "rf_trees": self.rf_trees,
            "rf_max_depth": self.rf_max_depth,
            "alpha": self.alpha,
        }


def load_spec(path: Union[str, Path]) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"spec file not found: {path}")
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise UsageError(f"spec file {path} is not valid JSON: {e}")
    return ExperimentSpec.from_dict(payload, base_dir=path.parent)


def load_datasets(spec: ExperimentSpec) -> Dict[str, Dataset]:
    datasets = {tag: load_csv(path, spec.label_column, provenance=tag) for tag, path in spec.datasets.items()}
    check_compatible(list(datasets.values()))
    return datasets


# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """One trained model: one method, feature space, combination and run."""

    method: str
    features: str
    combination: str
    run: int
    seed: int
    train_accuracy: float
    test_accuracy: Dict[str, float]
    model: Optional[Dict[str, Any]] = None
    trace: Optional[List[Any]] = None
    dimensions: Optional[int] = None
    champion: Optional[Individual] = field(default=None, repr=False)


@dataclass
class Cell:
    """Test accuracies of one (method, feature space, training combination, target)."""

    method: str
    features: str
    combination: str
    target: str
    in_training: bool
    accuracies: List[float]
    train_accuracies: List[float]
    wins: int = 0
    in_image: Optional[str] = None

    @property
    def median(self) -> float:
        return median(self.accuracies)

    @property
    def train_median(self) -> float:
        return median(self.train_accuracies)


@dataclass
class CellComparison:
    kind: str
    method: str
    features: str
    target: str
    first: str
    second: str
    statistic: float
    p_value: float
    significant: bool
    direction: str

    @classmethod
    def build(cls, kind: str, method: str, features: str, target: str, first: str, second: str,
              comparison: Comparison) -> "CellComparison":
        return cls(kind, method, features, target, first, second, comparison.verdict.statistic,
                   comparison.p_value, comparison.significant, comparison.direction)


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    records: List[RunRecord]
    cells: List[Cell]
    comparisons: List[CellComparison]
    hyperfeatures: List[str] = field(default_factory=list)
    impacts: List[DimensionImpact] = field(default_factory=list)

    def cell(self, method: str, features: str, combination: str, target: str) -> Cell:
        for cell in self.cells:
            if (cell.method, cell.features, cell.combination, cell.target) == (method, features, combination, target):
                return cell
        raise KeyError((method, features, combination, target))

    def cells_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "method": c.method,
            "features": c.features,
            "train": c.combination,
            "target": c.target,
            "in_training": c.in_training,
            "runs": len(c.accuracies),
            "median": c.median,
            "train_median": c.train_median,
            "wins": c.wins,
            "in_image": c.in_image or "",
        } for c in self.cells])

    def runs_frame(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            for target, accuracy in record.test_accuracy.items():
                rows.append({
                    "method": record.method,
                    "features": record.features,
                    "train": record.combination,
                    "run": record.run,
                    "seed": record.seed,
                    "target": target,
                    "test_accuracy": accuracy,
                    "train_accuracy": record.train_accuracy,
                    "dimensions": record.dimensions if record.dimensions is not None else "",
                })
        return pd.DataFrame(rows)

    def comparisons_frame(self) -> pd.DataFrame:
        columns = ["kind", "method", "features", "target", "first", "second", "statistic", "p_value",
                   "significant", "direction"]
        return pd.DataFrame([vars(c) for c in self.comparisons], columns=columns)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def training_set(datasets: Dict[str, Dataset], combination: Sequence[str], size: int, seed: int) -> Dataset:
    """Stratified split for a pure combination, proportional mix otherwise."""
    if len(combination) == 1:
        train, _ = split(datasets[combination[0]], SplitSpec(training_size=size, seed=seed))
        return train
    return mix([datasets[tag] for tag in combination], size, np.random.default_rng(seed))


def test_set(datasets: Dict[str, Dataset], combination: Sequence[str], target: str, train: Dataset) -> Dataset:
    """Unused rows of an image that took part in training, the whole image otherwise."""
    if target in combination:
        return remaining(datasets[target], train)
    return datasets[target]


def _fit_method(method: str, train: Dataset, spec: ExperimentSpec, seed: int, evolution_workers: int):
    rng = np.random.default_rng(seed)
    if method == "m3gp":
        run_config = replace(spec.run_config, seed=seed, workers=evolution_workers)
        result = Evolver(run_config).run(train, rng)
        return champion_model(result, train), result
    if method == "md":
        return fit_dataset(train), None
    if method == "dt":
        return dt_fit(train), None
    return rf_fit(train, spec.rf_trees, spec.rf_max_depth, rng), None


class ExperimentRunner:
    """Executes the (combination, run, method, feature space) units of a spec."""

    def __init__(self, spec: ExperimentSpec, datasets: Optional[Dict[str, Dataset]] = None):
        self.spec = spec.validate()
        self.logger = logging.getLogger(f"{__name__}.ExperimentRunner")
        self.datasets = datasets if datasets is not None else load_datasets(spec)
        missing = [tag for tag in spec.datasets if tag not in self.datasets]
        if missing:
            raise DataError(f"datasets {missing} were not provided")
        self.spaces: Dict[str, Dict[str, Dataset]] = {ORIGINAL: self.datasets}
        self.hyperfeatures: List[Expression] = []
        self.impacts: List[DimensionImpact] = []

    @property
    def _evolution_workers(self) -> int:
        return 1 if self.spec.workers > 1 else self.spec.run_config.workers

    def _run_unit(self, features: str, combination_index: int, run: int, method: str) -> RunRecord:
        spec = self.spec
        combination = spec.combinations[combination_index]
        data = self.spaces[features]
        split_seed = derive_seed(spec.seed, combination_index, run)
        train = training_set(data, combination, spec.training_size, split_seed)
        method_seed = derive_seed(spec.seed, combination_index, run, METHODS.index(method),
                                  [ORIGINAL, HYPER].index(features))
        model, result = _fit_method(method, train, spec, method_seed, self._evolution_workers)

        tests = {t: model.score(test_set(data, combination, t, train)) for t in spec.target_tags}
        record = RunRecord(
            method=method,
            features=features,
            combination=combination_name(combination),
            run=run,
            seed=method_seed,
            train_accuracy=model.score(train),
            test_accuracy=tests,
        )
        if isinstance(model, MDModel):
            record.model = model.to_dict()
            record.dimensions = model.dimensions
        if isinstance(result, EvolutionResult):
            record.trace = result.trace
            record.champion = result.champion
        rendered = ", ".join(f"{t} {a:.4f}" for t, a in tests.items())
        self.logger.info(
            f"{method}/{features} {record.combination} run {run}: train {record.train_accuracy:.4f}; test {rendered}"
        )
        return record

    def _execute(self, units: List[Tuple[str, int, int, str]]) -> List[RunRecord]:
        if self.spec.workers == 1 or len(units) < 2:
            return [self._run_unit(*unit) for unit in units]
        with ThreadPoolExecutor(max_workers=self.spec.workers) as pool:
            return list(pool.map(lambda unit: self._run_unit(*unit), units))

    def _units(self, features: str) -> List[Tuple[str, int, int, str]]:
        return [(features, ci, run, method)
                for ci in range(len(self.spec.combinations))
                for run in range(self.spec.runs)
                for method in self.spec.methods]

    def harvest(self, records: Sequence[RunRecord] = ()) -> List[Expression]:
        """Rank champion dimensions of the m3gp runs on the harvest combination."""
        spec = self.spec
        combination = spec.harvest_from
        name = combination_name(combination)
        reused = [r for r in records
                  if r.method == "m3gp" and r.features == ORIGINAL and r.combination == name and r.champion]
        if len(reused) < spec.runs:
            self.logger.info(f"Running {spec.runs} m3gp runs on {name} to harvest hyper-features")
            harvest_spec = replace(spec, combinations=[combination], methods=["m3gp"])
            runner = ExperimentRunner(harvest_spec, self.datasets)
            reused = runner._execute(runner._units(ORIGINAL))
            index = 0
        else:
            index = spec.combinations.index(combination)
        if not reused:
            raise DataError("no completed runs to harvest from")
        trains = [training_set(self.datasets, combination, spec.training_size, derive_seed(spec.seed, index, r.run))
                  for r in reused]
        champions = [r.champion for r in reused]
        self.impacts = score_dimension_impacts(champions, trains)
        self.hyperfeatures = rank_dimension_impact(champions, trains, spec.top_k)
        self.logger.info(f"Harvested {len(self.hyperfeatures)} hyper-features from {len(champions)} runs on {name}")
        return self.hyperfeatures

    def _load_hyperfeatures(self, records: Sequence[RunRecord]) -> List[Expression]:
        if self.spec.hyper_source == "harvest":
            return self.harvest(records)
        if self.spec.hyper_path:
            return load_hyperfeatures(self.spec.hyper_path)
        return bundled_hyperfeatures()

    def run(self) -> ExperimentReport:
        spec = self.spec
        self.logger.info(
            f"Experiment: {len(spec.combinations)} combinations x {spec.runs} runs x {spec.methods} "
            f"({spec.feature_mode} features), master seed {spec.seed}"
        )
        records: List[RunRecord] = []
        if ORIGINAL in spec.feature_spaces:
            records.extend(self._execute(self._units(ORIGINAL)))
        if HYPER in spec.feature_spaces or spec.hyper_source == "harvest":
            self.hyperfeatures = self._load_hyperfeatures(records)
        if HYPER in spec.feature_spaces:
            self.spaces[HYPER] = {tag: project(d, self.hyperfeatures) for tag, d in self.datasets.items()}
            records.extend(self._execute(self._units(HYPER)))

        cells = build_cells(spec, records)
        comparisons = annotate_cells(spec, cells)
        report = ExperimentReport(
            spec=spec,
            records=records,
            cells=cells,
            comparisons=comparisons,
            hyperfeatures=[format_expression(e) for e in self.hyperfeatures],
            impacts=self.impacts,
        )
        self.logger.info(f"Experiment finished: {len(records)} models, {len(cells)} cells")
        return report


def run_experiment(spec: ExperimentSpec, datasets: Optional[Dict[str, Dataset]] = None) -> ExperimentReport:
    return ExperimentRunner(spec, datasets).run()


def harvest_hyperfeatures(spec: ExperimentSpec, datasets: Optional[Dict[str, Dataset]] = None,
                          asset_path: Union[str, Path, None] = None) -> List[Expression]:
    """Run the harvest combination, rank dimensions and write the asset file."""
    runner = ExperimentRunner(spec, datasets)
    hyperfeatures = runner.harvest()
    if asset_path is not None:
        Path(asset_path).parent.mkdir(parents=True, exist_ok=True)
        save_hyperfeatures(hyperfeatures, asset_path)
        logger.info(f"Wrote {len(hyperfeatures)} hyper-features to {asset_path}")
    return hyperfeatures


# ---------------------------------------------------------------------------
# Cells and significance annotations
# ---------------------------------------------------------------------------

def build_cells(spec: ExperimentSpec, records: Sequence[RunRecord]) -> List[Cell]:
    cells = []
    for features in spec.feature_spaces:
        for method in spec.methods:
            for combination in spec.combinations:
                name = combination_name(combination)
                runs = sorted((r for r in records
                               if (r.method, r.features, r.combination) == (method, features, name)),
                              key=lambda r: r.run)
                if not runs:
                    continue
                for target in spec.target_tags:
                    cells.append(Cell(
                        method=method,
                        features=features,
                        combination=name,
                        target=target,
                        in_training=target in combination,
                        accuracies=[r.test_accuracy[target] for r in runs],
                        train_accuracies=[r.train_accuracy for r in runs],
                    ))
    return cells


def annotate_cells(spec: ExperimentSpec, cells: Sequence[Cell]) -> List[CellComparison]:
    """
    Significance annotations at spec.alpha:

    - in-image: a mixed-trained cell tested on one of its images against the
      pure-trained cell of that image (significantly lower or higher);
    - outside: every pair of cells trained without the target image, each
      significant win adding one marker to the winner;
    - hyper-vs-original: the same cell in both feature spaces.
    """
    lookup = {(c.method, c.features, c.combination, c.target): c for c in cells}
    comparisons: List[CellComparison] = []
    names = [combination_name(c) for c in spec.combinations]

    for features in spec.feature_spaces:
        for method in spec.methods:
            for target in spec.target_tags:
                pure = lookup.get((method, features, target, target))
                if pure is not None:
                    for combination, name in zip(spec.combinations, names):
                        if len(combination) < 2 or target not in combination:
                            continue
                        cell = lookup.get((method, features, name, target))
                        if cell is None:
                            continue
                        result = compare_samples(cell.accuracies, pure.accuracies, spec.alpha)
                        cell.in_image = result.direction if result.significant else "same"
                        comparisons.append(CellComparison.build(IN_IMAGE, method, features, target, name,
                                                                pure.combination, result))

                outside = [lookup[(method, features, name, target)]
                           for combination, name in zip(spec.combinations, names)
                           if target not in combination and (method, features, name, target) in lookup]
                for first, second in itertools.combinations(outside, 2):
                    result = compare_samples(first.accuracies, second.accuracies, spec.alpha)
                    if result.significant:
                        if result.direction == "higher":
                            first.wins += 1
                        elif result.direction == "lower":
                            second.wins += 1
                    comparisons.append(CellComparison.build(OUTSIDE, method, features, target,
                                                            first.combination, second.combination, result))

    if len(spec.feature_spaces) == 2:
        for method in spec.methods:
            for name in names:
                for target in spec.target_tags:
                    hyper = lookup.get((method, HYPER, name, target))
                    original = lookup.get((method, ORIGINAL, name, target))
                    if hyper is None or original is None:
                        continue
                    result = compare_samples(hyper.accuracies, original.accuracies, spec.alpha)
                    comparisons.append(CellComparison.build(HYPER_VS_ORIGINAL, method, HYPER, target, name,
                                                            name, result))
    return comparisons


def significance_tally(report: ExperimentReport) -> pd.DataFrame:
    """Per method and feature space: in-image decreases/increases and outside-image wins."""
    rows = []
    for features in report.spec.feature_spaces:
        for method in report.spec.methods:
            selected = [c for c in report.comparisons
                        if c.method == method and c.features == features and c.kind in (IN_IMAGE, OUTSIDE)]
            in_image = [c for c in selected if c.kind == IN_IMAGE]
            outside = [c for c in selected if c.kind == OUTSIDE]
            rows.append({
                "method": method,
                "features": features,
                "in_image_comparisons": len(in_image),
                "in_image_lower": sum(c.significant and c.direction == "lower" for c in in_image),
                "in_image_higher": sum(c.significant and c.direction == "higher" for c in in_image),
                "outside_pairs": len(outside),
                "outside_significant": sum(c.significant for c in outside),
            })
    return pd.DataFrame(rows)


def source_target_summary(report: ExperimentReport) -> pd.DataFrame:
    """Mean unseen-image median accuracy per source and per target, pure-trained cells only."""
    pure = [c for c in report.cells if c.combination in report.spec.datasets and not c.in_training]
    if not pure:
        return pd.DataFrame(columns=["method", "features", "role", "dataset", "mean_median", "cells"])
    frame = pd.DataFrame([{"method": c.method, "features": c.features, "source": c.combination,
                           "target": c.target, "median": c.median} for c in pure])
    parts = []
    for role in ("source", "target"):
        grouped = (frame.groupby(["method", "features", role], sort=False)["median"]
                   .agg(["mean", "count"]).reset_index()
                   .rename(columns={role: "dataset", "mean": "mean_median", "count": "cells"}))
        grouped.insert(2, "role", role)
        parts.append(grouped)
    return pd.concat(parts, ignore_index=True)


# ---------------------------------------------------------------------------
# Dispersion analysis
# ---------------------------------------------------------------------------

@dataclass
class DispersionResult:
    summary: pd.DataFrame
    overlaps: pd.DataFrame


def overlap_ratio(a: Tuple[float, float], b: Tuple[float, float]) -> float:
    """Length of the intersection of two closed ranges over the length of their union."""
    low, high = max(a[0], b[0]), min(a[1], b[1])
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union == 0:
        return 1.0 if a == b else 0.0
    return max(high - low, 0.0) / union


def _group_keys(dataset: Dataset, group_by: Sequence[str]) -> np.ndarray:
    parts = []
    for key in group_by:
        if key == "class":
            parts.append(dataset.labels)
        elif key == "provenance":
            parts.append(dataset.provenance)
        else:
            raise UsageError(f"cannot group by {key!r}; use class and/or provenance")
    keys = parts[0]
    for extra in parts[1:]:
        keys = np.char.add(np.char.add(keys, "/"), extra)
    return keys


def analyze_dispersion(datasets: Sequence[Dataset], group_by: Sequence[str] = ("provenance", "class"),
                       k: float = 1.5) -> DispersionResult:
    """
    Per feature and group, the five-number summary after Tukey filtering, plus
    the pairwise range-overlap ratio between groups of each feature.

    Groups with fewer than 4 values are summarized unfiltered and flagged.
    """
    if not datasets:
        raise DataError("nothing to analyze")
    data = concat(list(datasets))
    keys = _group_keys(data, group_by)
    groups = list(dict.fromkeys(keys.tolist()))

    rows = []
    ranges: Dict[Tuple[str, str], Tuple[float, float]] = {}
    for j, feature in enumerate(data.feature_names):
        for group in groups:
            values = data.X[keys == group, j]
            if values.size >= 4:
                kept = values[tukey_mask(values, k)]
                unfiltered = False
            else:
                kept = values
                unfiltered = True
                logger.warning(f"Group {group!r} has {values.size} values for {feature}; reported unfiltered")
            q1, q2, q3 = quartiles(kept)
            ranges[(feature, group)] = (float(kept.min()), float(kept.max()))
            rows.append({
                "feature": feature,
                "group": group,
                "n": int(values.size),
                "kept": int(kept.size),
                "unfiltered": unfiltered,
                "min": float(kept.min()),
                "q1": q1,
                "median": q2,
                "q3": q3,
                "max": float(kept.max()),
            })

    overlaps = []
    for feature in data.feature_names:
        for first, second in itertools.combinations(groups, 2):
            overlaps.append({
                "feature": feature,
                "first": first,
                "second": second,
                "overlap": overlap_ratio(ranges[(feature, first)], ranges[(feature, second)]),
            })
    columns = ["feature", "first", "second", "overlap"]
    return DispersionResult(summary=pd.DataFrame(rows), overlaps=pd.DataFrame(overlaps, columns=columns))


# ---------------------------------------------------------------------------
# Visualization export and transfer
# ---------------------------------------------------------------------------

def export_visualization(model: MDModel, datasets: Sequence[Dataset]) -> pd.DataFrame:
    """Projected coordinates of every row plus one row per class centroid."""
    columns = [f"HF{j}" for j in range(model.dimensions)]
    frames = []
    for dataset in datasets:
        need = max((e.max_feature_index for e in model.hyperfeatures), default=-1)
        if need >= dataset.arity:
            raise DataError(f"model references X{need} but the dataset has {dataset.arity} features")
        frame = pd.DataFrame(model.transform(dataset), columns=columns)
        frame["label"] = dataset.labels
        frame["provenance"] = dataset.provenance
        frame["kind"] = "sample"
        frames.append(frame)
    centroids = pd.DataFrame(model.centroids, columns=columns)
    centroids["label"] = list(model.classes)
    centroids["provenance"] = ""
    centroids["kind"] = "centroid"
    frames.append(centroids)
    return pd.concat(frames, ignore_index=True)


@dataclass
class TransferResult:
    before: float
    before_holdout: float
    after: float
    calibration_rows: int
    holdout_rows: int
    model: MDModel


def transfer_eval(model: MDModel, target: Dataset, fraction: float, seed: int = 0) -> TransferResult:
    """
    Score a model on a new image as-is, then recalibrate its centroids and
    covariances on a stratified fraction of that image and score the rest.
    """
    if not 0 < fraction < 1:
        raise DataError(f"recalibration fraction must lie in (0, 1), got {fraction}")
    size = int(round(fraction * target.n_rows))
    counts = target.class_counts()
    quotas = largest_remainder(list(counts.values()), size)
    short = [cls for cls, quota in zip(counts, quotas) if quota < 2]
    if short:
        raise DataError(f"fraction {fraction} leaves fewer than 2 calibration samples for classes {short}")
    calibration, holdout = split(target, SplitSpec(training_size=size, seed=seed))
    recalibrated = recalibrate(model.hyperfeatures, calibration)
    result = TransferResult(
        before=model.score(target),
        before_holdout=model.score(holdout),
        after=recalibrated.score(holdout),
        calibration_rows=calibration.n_rows,
        holdout_rows=holdout.n_rows,
        model=recalibrated,
    )
    logger.info(
        f"Transfer: {result.before:.4f} before ({result.before_holdout:.4f} on holdout), "
        f"{result.after:.4f} after recalibrating on {result.calibration_rows} rows"
    )
    return result
