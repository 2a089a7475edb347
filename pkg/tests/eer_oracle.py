"""Brute-force EER used as the test oracle for the sorted sweep."""

import numpy as np


def brute_force_eer(scores, targets) -> float:
    """Evaluate FAR/FRR at every candidate threshold with direct counting.

    Candidates are every distinct score plus one point above the maximum.
    The EER is interpolated linearly between the last operating point with
    FRR < FAR and the first with FRR >= FAR.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=bool)
    candidates = sorted(set(scores.tolist()))
    points = []
    for u in candidates:
        far = sum(1 for s, y in zip(scores, targets) if not y and s >= u) / (~targets).sum()
        frr = sum(1 for s, y in zip(scores, targets) if y and s < u) / targets.sum()
        points.append((far, frr))
    points.append((0.0, 1.0))
    for i, (far, frr) in enumerate(points):
        if frr - far >= 0:
            if frr == far or i == 0:
                return far
            far0, frr0 = points[i - 1]
            d0, d1 = frr0 - far0, frr - far
            return far0 + (-d0 / (d1 - d0)) * (far - far0)
    raise AssertionError("sweep never crossed")
