# SDI energy curves: e(t) = sum over training examples of |SDI_t|, with timing summaries.

import math
import warnings
from typing import Dict, List, Optional, Sequence

import numpy as np

from sdikit._sdi_engine import SDIResult


def sdi_energy(result: SDIResult) -> np.ndarray:
    """Per-query energy curves, shape (n_test, tau)."""
    return np.abs(result.test_steps).sum(axis=0)


def late_mass(curve: Sequence[float]) -> float:
    """Fraction of the energy at steps t >= ceil(tau / 2) + 1 (steps counted from 1); 0 for a zero curve."""
    curve = np.asarray(curve, dtype=np.float64)
    total = float(curve.sum())
    if total == 0.0:
        return 0.0
    start = math.ceil(curve.shape[0] / 2)
    return float(curve[start:].sum()) / total


def center_of_mass(curve: Sequence[float]) -> Optional[float]:
    """sum_t t * e(t) / sum_t e(t) with steps counted from 1; None for a zero curve."""
    curve = np.asarray(curve, dtype=np.float64)
    total = float(curve.sum())
    if total == 0.0:
        return None
    return float(np.arange(1, curve.shape[0] + 1) @ curve) / total


def query_summaries(result: SDIResult) -> List[dict]:
    curves = sdi_energy(result)
    residuals = np.abs(result.tracin - result.test_steps.sum(axis=-1)).max(axis=0)
    return [
        {
            "test_id": test_id,
            "energy_total": float(curves[j].sum()),
            "late_mass": late_mass(curves[j]),
            "center_of_mass": center_of_mass(curves[j]),
            "conservation_residual": float(residuals[j]),
        }
        for j, test_id in enumerate(result.test_ids)
    ]


def binned_energy(curves: np.ndarray, difficulty: Optional[Sequence[float]] = None, bins: int = 1) -> List[dict]:
    """
    Median and interquartile range of the energy at every step, per histogram bin of a
    per-query difficulty value (a single bin when no difficulty is given). Empty bins are skipped.
    """
    curves = np.asarray(curves, dtype=np.float64)
    n_queries, tau = curves.shape
    if bins < 1:
        raise ValueError(f"'bins' must be positive, got {bins}")

    if difficulty is None:
        assignment = np.zeros(n_queries, dtype=np.int64)
        bins = 1
    else:
        difficulty = np.asarray(difficulty, dtype=np.float64)
        if difficulty.shape != (n_queries,):
            raise ValueError(f"need one difficulty value per query ({n_queries}), got shape {difficulty.shape}")
        edges = np.histogram_bin_edges(difficulty, bins=bins)
        assignment = np.clip(np.searchsorted(edges, difficulty, side="right") - 1, 0, bins - 1)

    rows = []
    for b in range(bins):
        members = curves[assignment == b]
        if members.shape[0] == 0:
            warnings.warn(f"energy bin {b} has no queries")
            continue
        q25, median, q75 = np.percentile(members, [25, 50, 75], axis=0)
        for t in range(tau):
            rows.append({
                "bin": b,
                "step": t + 1,
                "median": float(median[t]),
                "q25": float(q25[t]),
                "q75": float(q75[t]),
                "n_queries": int(members.shape[0]),
            })
    return rows
