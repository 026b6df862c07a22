"""Exact nearest-neighbor queries over 3D point sets.

Backed by a kd-tree; exactness matters because loss gradients flow through
the matched pairs. Ties in distance are broken toward the smallest point
index, which keeps query results fully deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class NeighborIndex:
    """Immutable spatial index answering exact nearest-neighbor queries."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("cannot build an index over an empty point set")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, query):
        """Return (index, squared distance) of the exact nearest point."""
        idx, sq = self.query(np.asarray(query, dtype=float)[None, :])
        return int(idx[0]), float(sq[0])

    def query(self, queries):
        """Batched exact nearest neighbors: (indices (M,), squared distances (M,)).

        The kd-tree result is kept when the nearest distance is unique; rows
        with tied distances are re-resolved by enumerating every point inside
        the minimal ball and taking the smallest index.
        """
        qs = np.asarray(queries, dtype=float)
        if qs.ndim != 2 or qs.shape[1] != self.points.shape[1]:
            raise ValueError("query array dimension does not match the indexed points")
        k = min(2, len(self.points))
        dist, idx = self._tree.query(qs, k=k)
        if k == 1:
            best = idx.astype(np.int64)
        else:
            best = idx[:, 0].astype(np.int64)
            tied = dist[:, 1] <= dist[:, 0] * (1.0 + 1e-12)
            for row in np.nonzero(tied)[0]:
                best[row] = self._resolve_tie(qs[row], dist[row, 0])
        diff = qs - self.points[best]
        return best, np.einsum("ij,ij->i", diff, diff)

    def _resolve_tie(self, q, d) -> int:
        radius = d * (1.0 + 1e-9) + 1e-300
        candidates = np.asarray(self._tree.query_ball_point(q, radius), dtype=np.int64)
        diff = self.points[candidates] - q
        sq = np.einsum("ij,ij->i", diff, diff)
        return int(candidates[sq == sq.min()].min())
