"""RBF kernels, empirical MMD and trajectory-to-demonstration distances.

Point sets are 2-D float arrays of shape ``(n_points, dim)``. All functions are
pure; the same inputs always give bit-identical outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, MalformedInputError

BANDWIDTH_MODES = ("fixed", "median_heuristic")


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian RBF kernel ``exp(-|x - y|^2 / (2 sigma^2))``.

    With ``bandwidth_mode="median_heuristic"`` sigma is recomputed on every
    distance call from the pooled pairwise distances of the two inputs and
    ``bandwidth`` is ignored.
    """

    bandwidth: float = 1.0
    bandwidth_mode: str = "median_heuristic"
    family: str = "rbf"

    def __post_init__(self):
        if self.family.lower() != "rbf":
            raise ConfigError(f"unsupported kernel family {self.family!r}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ConfigError(f"bandwidth_mode must be one of {BANDWIDTH_MODES}")
        if self.bandwidth_mode == "fixed" and not self.bandwidth > 0:
            raise ConfigError("fixed bandwidth must be > 0")

    def resolve(self, a: np.ndarray, b: np.ndarray) -> float:
        if self.bandwidth_mode == "fixed":
            return float(self.bandwidth)
        return median_bandwidth(a, b)


@dataclass(frozen=True)
class FeatureMap:
    """Maps one observation to the features the distance should look at."""

    mode: str = "identity"
    projection_indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in ("identity", "coordinate_projection"):
            raise ConfigError(f"unknown feature map mode {self.mode!r}")
        object.__setattr__(self, "projection_indices", tuple(int(i) for i in self.projection_indices))
        if self.mode == "coordinate_projection" and not self.projection_indices:
            raise ConfigError("coordinate_projection needs at least one index")

    @classmethod
    def project(cls, *indices: int) -> "FeatureMap":
        return cls("coordinate_projection", tuple(indices))

    def __call__(self, observations: np.ndarray) -> np.ndarray:
        obs = np.asarray(observations, dtype=np.float64)
        if self.mode == "identity":
            return obs
        dim = obs.shape[-1]
        for i in self.projection_indices:
            if not -dim <= i < dim:
                raise MalformedInputError(f"projection index {i} out of range for {dim}-dim observations")
        return obs[..., list(self.projection_indices)]


def as_point_set(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise MalformedInputError(f"point set must be a non-empty (n, dim) array, got shape {arr.shape}")
    return arr


def _check_dims(a: np.ndarray, b: np.ndarray):
    if a.shape[-1] != b.shape[-1]:
        raise MalformedInputError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # explicit differences rather than the |a|^2 + |b|^2 - 2ab expansion: no cancellation error
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median of the strictly positive pairwise distances in ``a ∪ b`` (1.0 if none)."""
    pooled = np.concatenate([as_point_set(a), as_point_set(b)])
    iu = np.triu_indices(len(pooled), k=1)
    d = np.sqrt(sq_distances(pooled, pooled)[iu])
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(np.median(d))


def kernel_matrix(a: np.ndarray, b: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-sq_distances(a, b) / (2.0 * sigma * sigma))


def kernel_eval(x, y, spec: KernelSpec, sigma: float | None = None) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MalformedInputError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    if sigma is None:
        sigma = spec.resolve(x[None, :], y[None, :])
    d = x - y
    return math.exp(-float(d @ d) / (2.0 * sigma * sigma))


def mmd_sq(a, b, spec: KernelSpec) -> float:
    """Biased (V-statistic) estimate of MMD^2 between two point sets.

    Self-pairs are included, so the estimate is never negative.
    """
    a = as_point_set(a)
    b = as_point_set(b)
    _check_dims(a, b)
    sigma = spec.resolve(a, b)
    kaa = kernel_matrix(a, a, sigma).mean()
    kab = kernel_matrix(a, b, sigma).mean()
    kbb = kernel_matrix(b, b, sigma).mean()
    return max(float(kaa - 2.0 * kab + kbb), 0.0)


def traj_features(observations, g: FeatureMap) -> np.ndarray:
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise MalformedInputError("observation sequence must be a non-empty (T, obs_dim) array")
    return g(obs)


def subsample(points: np.ndarray, max_points: int) -> np.ndarray:
    """Evenly strided, order-preserving subsample to at most ``max_points`` rows."""
    if max_points < 1:
        raise ConfigError("max_points must be positive")
    n = len(points)
    if n <= max_points:
        return points
    stride = math.ceil(n / max_points)
    return points[::stride]


def _observations(t) -> np.ndarray:
    return t.observations if hasattr(t, "observations") else np.asarray(t, dtype=np.float64)


def feature_mmd_sq(f1: np.ndarray, f2: np.ndarray, spec: KernelSpec, max_points: int = 256) -> float:
    return mmd_sq(subsample(f1, max_points), subsample(f2, max_points), spec)


def traj_mmd_sq(t1, t2, g: FeatureMap, spec: KernelSpec, max_points: int = 256) -> float:
    """MMD^2 between the feature visitation sets of two trajectories.

    ``t1``/``t2`` are trajectory objects with an ``observations`` attribute or
    raw ``(T, obs_dim)`` arrays.
    """
    f1 = traj_features(_observations(t1), g)
    f2 = traj_features(_observations(t2), g)
    return feature_mmd_sq(f1, f2, spec, max_points)


def nearest_feature_set(features: np.ndarray, demo_features: Sequence[np.ndarray],
                        spec: KernelSpec, max_points: int = 256) -> tuple[float, int]:
    if len(demo_features) == 0:
        raise ConfigError("demonstration set is empty")
    best, best_idx = math.inf, -1
    for i, fd in enumerate(demo_features):
        d = feature_mmd_sq(features, fd, spec, max_points)
        if d < best:  # strict: ties keep the lowest index
            best, best_idx = d, i
    return best, best_idx


def dist_to_demoset(traj, demos: Iterable, g: FeatureMap, spec: KernelSpec,
                    max_points: int = 256) -> tuple[float, int]:
    """Minimum MMD^2 from ``traj`` to any demonstration, and the argmin index."""
    demo_feats = [traj_features(_observations(d), g) for d in demos]
    return nearest_feature_set(traj_features(_observations(traj), g), demo_feats, spec, max_points)
