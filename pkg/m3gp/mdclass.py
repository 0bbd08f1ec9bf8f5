"""
Mahalanobis-distance nearest-centroid (MD) classifier.

One centroid and one covariance matrix per class; a point is assigned to the
class whose centroid is nearest under that class's Mahalanobis distance.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dataset import Dataset, project, read_json
from .exceptions import DataError, FitError
from .expr import Expression, evaluate_all, format_expression, identity_features, parse

logger = logging.getLogger(__name__)

RIDGE_SCALE = 1e-8
MAX_RIDGE_DOUBLINGS = 200
# Correlation-scaled condition number above which a covariance gets a ridge
CONDITION_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class MDModel:
    """Per-class centroids and inverse covariances in hyper-feature space."""

    classes: Tuple[str, ...]
    centroids: np.ndarray
    inv_covariances: np.ndarray
    hyperfeatures: Tuple[Expression, ...] = ()
    regularization: Tuple[float, ...] = ()
    class_counts: Tuple[int, ...] = ()
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def dimensions(self) -> int:
        return self.centroids.shape[1]

    def distances(self, points: np.ndarray) -> np.ndarray:
        """(rows, classes) matrix of Mahalanobis distances."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dimensions:
            raise DataError(f"points have {points.shape[1]} dimensions, model expects {self.dimensions}")
        with np.errstate(all="ignore"):
            diff = points[:, None, :] - self.centroids[None, :, :]
            squared = np.einsum("ncd,cde,nce->nc", diff, self.inv_covariances, diff)
            result = np.sqrt(np.maximum(squared, 0.0))
        return np.where(np.isnan(result), np.inf, result)

    def predict_points(self, points: np.ndarray) -> np.ndarray:
        """Nearest-centroid labels; ties go to the first-declared class."""
        nearest = np.argmin(self.distances(points), axis=1)
        return np.asarray(self.classes)[nearest]

    def transform(self, dataset: Union[Dataset, np.ndarray]) -> np.ndarray:
        """Project raw features through the model's hyper-features."""
        return evaluate_all(self.hyperfeatures, dataset)

    def predict_dataset(self, dataset: Dataset) -> np.ndarray:
        if dataset.arity <= max((e.max_feature_index for e in self.hyperfeatures), default=-1):
            raise DataError(f"model needs more than the {dataset.arity} features the dataset has")
        return self.predict_points(self.transform(dataset))

    def score(self, dataset: Dataset) -> float:
        """Accuracy on a labeled dataset."""
        return float(np.mean(self.predict_dataset(dataset) == dataset.labels))

    def with_metadata(self, **metadata) -> "MDModel":
        merged = dict(self.metadata)
        merged.update(metadata)
        return MDModel(self.classes, self.centroids, self.inv_covariances, self.hyperfeatures,
                       self.regularization, self.class_counts, merged)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "type": "md",
            "hyperfeatures": [format_expression(e) for e in self.hyperfeatures],
            "classes": list(self.classes),
            "centroids": self.centroids.tolist(),
            "inverse_covariances": self.inv_covariances.tolist(),
            "regularization": list(self.regularization),
            "class_counts": list(self.class_counts),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "MDModel":
        try:
            return cls(
                classes=tuple(payload["classes"]),
                centroids=np.asarray(payload["centroids"], dtype=float),
                inv_covariances=np.asarray(payload["inverse_covariances"], dtype=float),
                hyperfeatures=tuple(parse(text) for text in payload["hyperfeatures"]),
                regularization=tuple(payload.get("regularization", ())),
                class_counts=tuple(payload.get("class_counts", ())),
                metadata=dict(payload.get("metadata", {})),
            )
        except KeyError as e:
            raise DataError(f"model file is missing field {e}")


def _covariance(points: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.cov(points, rowvar=False, ddof=1))


def _scaled_condition(matrix: np.ndarray) -> float:
    """Condition number of the matrix rescaled to unit diagonal (inf if a diagonal entry is not positive)."""
    diagonal = np.diag(matrix)
    if np.any(diagonal <= 0.0):
        return np.inf
    scale = 1.0 / np.sqrt(diagonal)
    return float(np.linalg.cond(matrix * scale[:, None] * scale[None, :]))


def _is_positive_definite(matrix: np.ndarray) -> bool:
    try:
        cho_factor(matrix, lower=True)
    except np.linalg.LinAlgError:
        return False
    return True


def _regularized_inverse(cov: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Invert via Cholesky, adding a doubling ridge until the inverse is usable.

    Ridge 0 is used only when the covariance, rescaled to unit diagonal, has
    a condition number below CONDITION_LIMIT. The returned inverse is
    symmetric positive definite.
    """
    d = cov.shape[0]
    identity = np.eye(d)
    if not np.all(np.isfinite(cov)):
        raise FitError("covariance matrix has non-finite entries")
    start = RIDGE_SCALE * max(np.trace(cov) / d, 1.0)
    ridge = 0.0 if _scaled_condition(cov) < CONDITION_LIMIT else start
    for _ in range(MAX_RIDGE_DOUBLINGS):
        regularized = cov + ridge * identity
        if _scaled_condition(regularized) < CONDITION_LIMIT:
            try:
                inverse = cho_solve(cho_factor(regularized, lower=True), identity)
            except np.linalg.LinAlgError:
                inverse = None
            if inverse is not None and np.all(np.isfinite(inverse)):
                inverse = (inverse + inverse.T) / 2.0
                if _is_positive_definite(inverse):
                    return inverse, ridge
        ridge = start if ridge == 0.0 else ridge * 2.0
    raise FitError(f"covariance could not be regularized (last ridge {ridge:g})")


def fit(points: np.ndarray, labels: Sequence, hyperfeatures: Sequence[Expression] = ()) -> MDModel:
    """
    Fit one centroid and one inverse covariance per class.

    Args:
        points: (rows, d) matrix in hyper-feature space
        labels: Class label per row
        hyperfeatures: Expressions that produced the points (kept on the model)

    Returns:
        Fitted MDModel
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    labels = np.asarray(labels).astype(str)
    if points.shape[0] != labels.shape[0]:
        raise FitError(f"{points.shape[0]} points but {labels.shape[0]} labels")
    if points.shape[1] == 0:
        raise FitError("cannot fit a classifier in a 0-dimensional space")
    if points.shape[0] < 2:
        raise FitError("need at least two points")
    classes = tuple(np.unique(labels).tolist())
    if len(classes) < 2:
        raise FitError(f"need at least two classes, got {classes}")

    d = points.shape[1]
    centroids = []
    inverses = []
    ridges = []
    counts = []
    for cls in classes:
        members = points[labels == cls]
        counts.append(int(members.shape[0]))
        with np.errstate(all="ignore"):
            centroid = members.mean(axis=0)
            if members.shape[0] < 2:
                inverse, ridge = np.eye(d), 0.0
            else:
                inverse, ridge = _regularized_inverse(_covariance(members))
        if not np.all(np.isfinite(centroid)):
            raise FitError(f"centroid of class {cls!r} is not finite")
        if ridge > 0.0:
            logger.debug(f"Class {cls!r} covariance regularized with ridge {ridge:g}")
        centroids.append(centroid)
        inverses.append(inverse)
        ridges.append(float(ridge))

    return MDModel(
        classes=classes,
        centroids=np.vstack(centroids),
        inv_covariances=np.stack(inverses),
        hyperfeatures=tuple(hyperfeatures),
        regularization=tuple(ridges),
        class_counts=tuple(counts),
    )


def fit_dataset(dataset: Dataset, hyperfeatures: Optional[Sequence[Expression]] = None) -> MDModel:
    """Fit on a dataset projected through hyper-features (identity when None)."""
    if hyperfeatures is None:
        hyperfeatures = identity_features(dataset.arity)
    projected = project(dataset, hyperfeatures)
    return fit(projected.X, projected.labels, hyperfeatures)


def mahalanobis(x: Sequence[float], centroid: Sequence[float], inv_cov: np.ndarray) -> float:
    """sqrt((x - c)^T inv_cov (x - c))."""
    x = np.asarray(x, dtype=float)
    centroid = np.asarray(centroid, dtype=float)
    inv_cov = np.atleast_2d(np.asarray(inv_cov, dtype=float))
    if x.shape != centroid.shape or inv_cov.shape != (x.size, x.size):
        raise DataError(
            f"dimension mismatch: x {x.shape}, centroid {centroid.shape}, inverse covariance {inv_cov.shape}"
        )
    diff = x - centroid
    return float(np.sqrt(max(float(diff @ inv_cov @ diff), 0.0)))


def predict(model: MDModel, x: Sequence[float]):
    """Class of the nearest centroid for a single point."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size != model.dimensions:
        raise DataError(f"point has {x.size} dimensions, model expects {model.dimensions}")
    return model.predict_points(x.reshape(1, -1))[0]


def recalibrate(hyperfeatures: Sequence[Expression], target_train: Dataset) -> MDModel:
    """Keep the hyper-features, refit centroids and covariances on target data."""
    return fit_dataset(target_train, hyperfeatures)


def save_model(model: MDModel, path: Union[str, Path]):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(model.to_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_model(path: Union[str, Path]) -> MDModel:
    payload = read_json(path)
    if not isinstance(payload, dict):
        raise DataError(f"{path} does not hold a model")
    if payload.get("type", "md") != "md":
        raise DataError(f"{path} holds a {payload.get('type')!r} model, not an MD model")
    return MDModel.from_dict(payload)
