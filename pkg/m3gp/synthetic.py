"""
Deterministic synthetic fixtures.

The three burnt-area scenes mimic the published image sizes and class
balance with 7 reflectance-like features drawn uniformly around per-class
centers, so class supports are bounded and can be made disjoint.
"""
import logging
from pathlib import Path
from typing import Dict, Mapping, Sequence, Union

import numpy as np

from .dataset import Dataset, save_csv

logger = logging.getLogger(__name__)

SCENE_ARITY = 7
BURNT = "burnt"
UNBURNT = "unburnt"

UNBURNT_CENTER = np.array([0.30, 0.28, 0.32, 0.35, 0.45, 0.40, 0.25])
M_BURNT_CENTER = np.array([0.14, 0.16, 0.17, 0.18, 0.20, 0.16, 0.48])
B_BURNT_CENTER = np.array([0.12, 0.15, 0.16, 0.20, 0.22, 0.18, 0.44])
# Mirror of M's burnt center through the unburnt center
C_BURNT_CENTER = 2 * UNBURNT_CENTER - M_BURNT_CENTER

# (rows, burnt rows) per scene
SCENE_SIZES = {"B": (4872, 2046), "C": (2849, 877), "M": (3882, 1573)}
SCENE_CENTERS = {"B": B_BURNT_CENTER, "C": C_BURNT_CENTER, "M": M_BURNT_CENTER}
BURNT_HALF_WIDTH = 0.05
UNBURNT_HALF_WIDTH = 0.08


def _names(arity: int):
    return tuple(f"X{i}" for i in range(arity))


def make_blobs(n_per_class: int, arity: int = 7, separation: float = 6.0, seed: int = 0,
               classes: Sequence[str] = ("0", "1"), provenance: str = "blobs") -> Dataset:
    """
    Two unit-variance isotropic Gaussian classes.

    The second centroid sits `separation` standard deviations from the first
    along X0; every other feature is pure noise.
    """
    rng = np.random.default_rng(seed)
    offset = np.zeros(arity)
    offset[0] = separation
    first = rng.standard_normal((n_per_class, arity))
    second = rng.standard_normal((n_per_class, arity)) + offset
    return Dataset(
        X=np.vstack([first, second]),
        labels=np.repeat(np.asarray(classes[:2], dtype=str), n_per_class),
        provenance=np.full(2 * n_per_class, provenance),
        feature_names=_names(arity),
    )


def make_scene(tag: str, n_rows: int, n_burnt: int, burnt_center: Sequence[float],
               unburnt_center: Sequence[float], spread: Union[float, Sequence[float]] = BURNT_HALF_WIDTH,
               seed: int = 0, unburnt_spread: float = UNBURNT_HALF_WIDTH) -> Dataset:
    """A binary burnt/unburnt scene with exactly n_burnt burnt rows, burnt rows first."""
    if not 0 < n_burnt < n_rows:
        raise ValueError(f"need 0 < n_burnt < n_rows, got {n_burnt} of {n_rows}")
    rng = np.random.default_rng(seed)
    burnt_center = np.asarray(burnt_center, dtype=float)
    unburnt_center = np.asarray(unburnt_center, dtype=float)
    arity = burnt_center.size
    spread = np.broadcast_to(np.asarray(spread, dtype=float), (arity,))
    burnt = rng.uniform(burnt_center - spread, burnt_center + spread, size=(n_burnt, arity))
    unburnt = rng.uniform(unburnt_center - unburnt_spread, unburnt_center + unburnt_spread,
                          size=(n_rows - n_burnt, arity))
    labels = np.array([BURNT] * n_burnt + [UNBURNT] * (n_rows - n_burnt))
    return Dataset(
        X=np.vstack([burnt, unburnt]),
        labels=labels,
        provenance=np.full(n_rows, tag),
        feature_names=_names(arity),
    )


def make_scenes(seed: int = 0) -> Dict[str, Dataset]:
    """B, C and M lookalikes; C's burnt support is disjoint from M's."""
    scenes = {}
    for offset, (tag, (n_rows, n_burnt)) in enumerate(SCENE_SIZES.items()):
        scenes[tag] = make_scene(tag, n_rows, n_burnt, SCENE_CENTERS[tag], UNBURNT_CENTER,
                                 seed=seed * 10 + offset)
    return scenes


def shift_classes(dataset: Dataset, offsets: Mapping[str, Union[float, Sequence[float]]],
                  noise: float = 0.0, seed: int = 0) -> Dataset:
    """Add a constant per-class offset to every feature, plus optional Gaussian jitter."""
    X = dataset.X.copy()
    for cls, offset in offsets.items():
        rows = dataset.labels == str(cls)
        X[rows] += np.asarray(offset, dtype=float)
    if noise > 0:
        X += np.random.default_rng(seed).normal(0.0, noise, size=X.shape)
    return Dataset(X=X, labels=dataset.labels, provenance=dataset.provenance,
                   feature_names=dataset.feature_names, row_ids=dataset.row_ids)


def write_scenes(out_dir: Union[str, Path], seed: int = 0) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for tag, scene in make_scenes(seed).items():
        path = out_dir / f"{tag}.csv"
        save_csv(scene, path)
        paths[tag] = path
        logger.info(f"Wrote {path} ({scene.n_rows} rows, {scene.class_counts()})")
    return paths
