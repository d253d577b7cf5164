"""Greedy G-experimental design for the actor coreset."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["Coreset", "coverage_score", "greedy_g_design", "kw_reference"]

SINGULAR_REG = 1e-10


@dataclass
class Coreset:
    """Multiset of candidate indices chosen by the greedy design.

    ``weights`` are multiplicity-proportional; ``gram`` is the weighted design
    matrix sum rho phi phi^T and ``anchored_gram`` is the algorithm's own
    I + sum phi phi^T.  ``score`` is the final full-scan max of
    ||phi||_{anchored_gram^{-1}}.
    """

    points: np.ndarray  # candidate indices, one entry per insertion
    weights: np.ndarray  # rho over ``points``
    gram: np.ndarray
    anchored_gram: np.ndarray
    score: float
    stopped_by: str  # "threshold" | "cap"
    epsilon: float

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def cap_hit(self) -> bool:
        return self.stopped_by == "cap"

    def unique(self):
        """Distinct points with their aggregated weights (sorted by index)."""
        idx, inverse = np.unique(self.points, return_inverse=True)
        w = np.zeros(len(idx))
        np.add.at(w, inverse, self.weights)
        return idx, w

    def to_dict(self) -> dict:
        return {
            "points": [int(p) for p in self.points],
            "weights": [float(w) for w in self.weights],
            "score": float(self.score),
            "stopped_by": self.stopped_by,
            "epsilon": float(self.epsilon),
            "size": self.size,
        }


def _norms(features: np.ndarray, inv: np.ndarray) -> np.ndarray:
    q = np.einsum("nd,de,ne->n", features, inv, features)
    return np.sqrt(np.maximum(q, 0.0))


def greedy_g_design(features, epsilon: float, cap_fraction: float | None = 0.8) -> Coreset:
    """Add the candidate with the largest ||phi||_{G^{-1}} once per full scan.

    G starts at the identity and receives a rank-one update per insertion.
    Stops when the scanned maximum is at most ``epsilon`` or when the coreset
    reaches ``cap_fraction`` times the number of candidates (``None`` = no cap).
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        features = features.reshape(-1, features.shape[-1])
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if cap_fraction is not None and not 0 < cap_fraction <= 1:
        raise ValueError("cap_fraction must lie in (0, 1]")
    n, d = features.shape
    cap = math.inf if cap_fraction is None else cap_fraction * n
    inv = np.eye(d)
    anchored = np.eye(d)
    points: list[int] = []
    while True:
        g = _norms(features, inv)
        best = int(np.argmax(g))  # first maximiser = smallest index
        if g[best] <= epsilon:
            stopped = "threshold"
            break
        if len(points) >= cap:
            stopped = "cap"
            break
        phi = features[best]
        points.append(best)
        anchored += np.outer(phi, phi)
        v = inv @ phi
        inv -= np.outer(v, v) / (1.0 + phi @ v)
    pts = np.asarray(points, dtype=int)
    weights = np.full(len(pts), 1.0 / len(pts)) if len(pts) else np.zeros(0)
    gram = features[pts].T @ (weights[:, None] * features[pts]) if len(pts) else np.zeros((d, d))
    return Coreset(pts, weights, gram, anchored, float(g[best]), stopped, float(epsilon))


def coverage_score(coreset: Coreset, features, form: str = "design") -> float:
    """max over all candidates of ||phi||_{G^{-1}}.

    ``form="design"`` uses G = sum rho phi phi^T (regularised by 1e-10 I when
    singular); ``form="anchored"`` uses the greedy loop's I + sum phi phi^T.
    """
    features = np.asarray(features, dtype=float)
    features = features.reshape(-1, features.shape[-1])
    if form == "design":
        G = coreset.gram
        if np.linalg.matrix_rank(G) < G.shape[0]:
            G = G + SINGULAR_REG * np.eye(G.shape[0])
    elif form == "anchored":
        G = coreset.anchored_gram
    else:
        raise ValueError("form must be 'design' or 'anchored'")
    return float(np.max(_norms(features, np.linalg.inv(G))))


def kw_reference(d: int) -> tuple[float, float]:
    """Reference design-norm and support-size bounds: (2d, 4d log log(d + 4) + 28)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return 2.0 * d, 4.0 * d * math.log(math.log(d + 4)) + 28.0
