"""
Labeled tabular datasets with per-row provenance.

Covers CSV ingestion, proportional mixing of several source images,
stratified train/test splitting and projection into hyper-feature space.
"""
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .exceptions import DataError
from .expr import Expression, evaluate_all, format_expression

logger = logging.getLogger(__name__)

DEFAULT_LABEL_COLUMN = "class"
PROVENANCE_COLUMN = "provenance"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix with labels, provenance tags and source row ids."""

    X: np.ndarray
    labels: np.ndarray
    provenance: np.ndarray
    feature_names: Tuple[str, ...]
    row_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {X.shape}")
        n, k = X.shape
        labels = np.asarray(self.labels).astype(str)
        provenance = np.asarray(self.provenance).astype(str)
        if labels.shape != (n,) or provenance.shape != (n,):
            raise DataError(f"labels and provenance must have {n} entries")
        if len(self.feature_names) != k:
            raise DataError(f"expected {k} feature names, got {len(self.feature_names)}")
        if not np.all(np.isfinite(X)):
            row, col = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite value at row {row}, column {self.feature_names[col]!r}")
        row_ids = np.arange(n) if self.row_ids is None else np.array(self.row_ids, dtype=int)
        if row_ids.shape != (n,):
            raise DataError(f"row_ids must have {n} entries")

        X.setflags(write=False)
        labels.setflags(write=False)
        provenance.setflags(write=False)
        row_ids.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", provenance)
        object.__setattr__(self, "feature_names", tuple(str(name) for name in self.feature_names))
        object.__setattr__(self, "row_ids", row_ids)

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def arity(self) -> int:
        return self.X.shape[1]

    @property
    def classes(self) -> Tuple[str, ...]:
        """Class labels in declaration (sorted) order."""
        return tuple(np.unique(self.labels).tolist())

    def class_counts(self) -> Dict[str, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {str(v): int(c) for v, c in zip(values, counts)}

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(
            X=self.X[indices],
            labels=self.labels[indices],
            provenance=self.provenance[indices],
            feature_names=self.feature_names,
            row_ids=self.row_ids[indices],
        )

    def identities(self) -> List[Tuple[str, int]]:
        """(provenance, row id) pairs identifying each row in its source."""
        return list(zip(self.provenance.tolist(), self.row_ids.tolist()))

    def __len__(self) -> int:
        return self.n_rows


@dataclass(frozen=True)
class SplitSpec:
    """Training-set size and seed for a stratified split."""

    training_size: int = 2000
    seed: int = 0
    stratified: bool = True

    def validate(self, dataset: Dataset):
        if self.training_size >= dataset.n_rows:
            raise DataError(
                f"training size {self.training_size} must be smaller than the {dataset.n_rows} available rows"
            )
        n_classes = len(dataset.classes)
        if self.training_size < 2 * n_classes:
            raise DataError(f"training size {self.training_size} is below twice the class count ({n_classes})")


def concat(datasets: Sequence[Dataset]) -> Dataset:
    """Stack datasets with identical feature names."""
    if not datasets:
        raise DataError("nothing to concatenate")
    check_compatible(datasets, require_labels=False)
    return Dataset(
        X=np.vstack([d.X for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        provenance=np.concatenate([d.provenance for d in datasets]),
        feature_names=datasets[0].feature_names,
        row_ids=np.concatenate([d.row_ids for d in datasets]),
    )


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def load_csv(path: Union[str, Path], label_column: str = DEFAULT_LABEL_COLUMN,
             provenance: Optional[str] = None) -> Dataset:
    """
    Load a comma-separated file with a header row.

    Args:
        path: CSV file
        label_column: Name of the class column
        provenance: Tag for every row; when omitted a `provenance` column is
            used if present, otherwise the file stem

    Returns:
        Dataset whose features are all other columns
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataError(f"empty dataset: {path} has no header")
    except pd.errors.ParserError as e:
        raise DataError(f"malformed CSV {path}: {e}")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not UTF-8 text: {e}")
    if label_column not in frame.columns:
        raise DataError(f"label column {label_column!r} not found in {path}")
    if len(frame) == 0:
        raise DataError(f"empty dataset: {path}")

    if provenance is None and PROVENANCE_COLUMN in frame.columns:
        tags = frame[PROVENANCE_COLUMN].to_numpy()
    else:
        tags = np.full(len(frame), provenance if provenance is not None else path.stem)

    feature_columns = [c for c in frame.columns if c not in (label_column, PROVENANCE_COLUMN)]
    if not feature_columns:
        raise DataError(f"{path} has no feature columns")

    names = []
    columns = []
    for position, column in enumerate(feature_columns):
        raw = frame[column].str.strip()
        values = pd.to_numeric(raw, errors="coerce")
        bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(
                f"non-numeric value {frame[column].iloc[row]!r} at row {row + 1}, column {column!r} in {path}"
            )
        columns.append(values.to_numpy(dtype=float))
        names.append(f"X{position}" if str(column).startswith("Unnamed:") else str(column))

    dataset = Dataset(
        X=np.column_stack(columns),
        labels=frame[label_column].str.strip().to_numpy(),
        provenance=tags,
        feature_names=tuple(names),
    )
    logger.info(f"Loaded {path.name}: {dataset.n_rows} rows, {dataset.arity} features, classes {dataset.class_counts()}")
    return dataset


def read_json(path: Union[str, Path]) -> Any:
    """Parse a JSON file, reporting missing or malformed files as DataError."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}")
    except UnicodeDecodeError as e:
        raise DataError(f"{path} is not UTF-8 text: {e}")


def to_frame(dataset: Dataset, label_column: str = DEFAULT_LABEL_COLUMN) -> pd.DataFrame:
    frame = pd.DataFrame(dataset.X, columns=list(dataset.feature_names))
    frame[label_column] = dataset.labels
    frame[PROVENANCE_COLUMN] = dataset.provenance
    return frame


def save_csv(dataset: Dataset, path: Union[str, Path], label_column: str = DEFAULT_LABEL_COLUMN):
    """Write features, then the label column, then provenance."""
    to_frame(dataset, label_column).to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def largest_remainder(weights: Sequence[int], total: int) -> List[int]:
    """
    Split `total` proportionally to integer weights.

    Every share is floor(total * w / sum) and the leftover units go to the
    largest fractional parts, ties to the earlier entry.
    """
    weight_sum = sum(weights)
    if weight_sum <= 0:
        raise DataError("cannot apportion over zero total weight")
    exact = [Fraction(total * w, weight_sum) for w in weights]
    shares = [int(e) for e in exact]
    leftover = total - sum(shares)
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - shares[i]), i))
    for i in order[:leftover]:
        shares[i] += 1
    return shares


def _stratified_indices(dataset: Dataset, count: int, rng: np.random.Generator) -> np.ndarray:
    classes = dataset.classes
    members = [np.flatnonzero(dataset.labels == c) for c in classes]
    quotas = largest_remainder([len(m) for m in members], count)
    picked = []
    for cls, rows, quota in zip(classes, members, quotas):
        if quota > len(rows):
            raise DataError(f"class {cls!r} needs {quota} rows but only {len(rows)} exist")
        picked.append(rng.choice(rows, size=quota, replace=False))
    return np.concatenate(picked) if picked else np.empty(0, dtype=int)


def check_compatible(datasets: Sequence[Dataset], require_labels: bool = True):
    first = datasets[0]
    for other in datasets[1:]:
        if other.arity != first.arity:
            raise DataError(f"arity mismatch: {first.arity} vs {other.arity} features")
        if require_labels and other.classes != first.classes:
            raise DataError(f"label alphabets differ: {first.classes} vs {other.classes}")


def mix(datasets: Sequence[Dataset], total: int, rng: np.random.Generator) -> Dataset:
    """
    Sample `total` rows from several datasets, each contributing in proportion
    to its size and, within it, each class in proportion to its frequency.
    """
    if len(datasets) < 2:
        raise DataError("mixing needs at least two datasets")
    check_compatible(datasets)
    available = sum(d.n_rows for d in datasets)
    if total > available:
        raise DataError(f"requested {total} rows but only {available} are available")

    quotas = largest_remainder([d.n_rows for d in datasets], total)
    parts = []
    for dataset, quota in zip(datasets, quotas):
        parts.append(dataset.subset(_stratified_indices(dataset, quota, rng)))
        logger.debug(f"Mix: {dataset.provenance[0] if dataset.n_rows else '?'} contributes {quota} rows")
    return concat(parts)


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    """Stratified train/test partition; the test set is every remaining row."""
    spec.validate(dataset)
    rng = np.random.default_rng(spec.seed)
    train_idx = _stratified_indices(dataset, spec.training_size, rng)
    mask = np.ones(dataset.n_rows, dtype=bool)
    mask[train_idx] = False
    return dataset.subset(train_idx), dataset.subset(np.flatnonzero(mask))


def remaining(source: Dataset, train: Dataset) -> Dataset:
    """Rows of `source` whose (provenance, row id) does not occur in `train`."""
    used = set(train.identities())
    keep = [i for i, ident in enumerate(source.identities()) if ident not in used]
    return source.subset(keep)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def project(dataset: Dataset, hyperfeatures: Sequence[Expression]) -> Dataset:
    """Build the hyper-dataset: one HFj column per expression, same rows."""
    for j, expr in enumerate(hyperfeatures):
        if expr.max_feature_index >= dataset.arity:
            raise DataError(
                f"hyper-feature HF{j} ({format_expression(expr)}) references "
                f"X{expr.max_feature_index} but the dataset has {dataset.arity} features"
            )
    return Dataset(
        X=evaluate_all(hyperfeatures, dataset.X),
        labels=dataset.labels,
        provenance=dataset.provenance,
        feature_names=tuple(f"HF{j}" for j in range(len(hyperfeatures))),
        row_ids=dataset.row_ids,
    )
