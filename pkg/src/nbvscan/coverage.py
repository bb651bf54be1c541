"""Surface coverage: share of ground-truth samples matched by the reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud


class NnIndex:
    """Nearest-neighbour index over a point cloud (k-d tree)."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        self.points = pts.reshape(-1, 3)
        self._tree = cKDTree(self.points, balanced_tree=False, compact_nodes=False) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries: np.ndarray, max_distance: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Distance and index of the nearest point; (inf, -1) when nothing within ``max_distance``."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if self._tree is None or not len(q):
            return np.full(len(q), np.inf), np.full(len(q), -1, dtype=np.int64)
        # pad the bound so points sitting exactly on it are returned and the caller decides
        bound = max_distance * (1 + 1e-9) if np.isfinite(max_distance) else np.inf
        d, i = self._tree.query(q, k=1, distance_upper_bound=bound)
        i = np.where(np.isfinite(d), i, -1).astype(np.int64)
        return d, i


@dataclass(frozen=True)
class CoverageResult:
    coverage_percent: float
    n_obs: int
    n_gt: int
    tau: float

    def to_dict(self) -> dict:
        return {"coverage_percent": self.coverage_percent, "n_obs": self.n_obs,
                "n_gt": self.n_gt, "tau": self.tau}


def covered_mask(gt: PointCloud | np.ndarray, recon: PointCloud | NnIndex | np.ndarray, tau: float) -> np.ndarray:
    """Boolean per ground-truth point: some reconstruction point lies strictly closer than ``tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    g = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    index = recon if isinstance(recon, NnIndex) else NnIndex(recon)
    d, _ = index.nearest(g, tau)
    return d < tau


def surface_coverage(gt: PointCloud, recon: PointCloud | NnIndex, tau: float) -> CoverageResult:
    if len(gt) == 0:
        raise ValueError("ground-truth cloud is empty")
    n_obs = int(covered_mask(gt, recon, tau).sum())
    return CoverageResult(100.0 * n_obs / len(gt), n_obs, len(gt), float(tau))


def default_tau(gt_diagonal: float, fraction: float = 0.01) -> float:
    return fraction * gt_diagonal
