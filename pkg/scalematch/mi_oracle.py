"""Exact entropy, mutual information and normalized MI on discrete distributions (natural log)."""

from typing import Sequence

import numpy as np
from scipy.special import xlogy

from scalematch.errors import OracleInputError

NORMALIZATION_TOL = 1e-12


def _as_distribution(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise OracleInputError(f"{name} is empty")
    if (arr < 0).any():
        raise OracleInputError(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > NORMALIZATION_TOL:
        raise OracleInputError(f"{name} sums to {arr.sum():.17g}, expected 1")
    return arr


def entropy(marginal: Sequence[float]) -> float:
    """H(p) = -sum p log p, with 0 log 0 = 0."""
    p = _as_distribution(marginal, "marginal")
    return float(-xlogy(p, p).sum())


def mutual_information(joint) -> float:
    """I(X;Y) = KL(p(x, y) || p(x) p(y)); zero cells are skipped."""
    table = _as_distribution(joint, "joint")
    if table.ndim != 2:
        raise OracleInputError(f"joint must be a 2-D table, got shape {table.shape}")
    px = table.sum(axis=1, keepdims=True)
    py = table.sum(axis=0, keepdims=True)
    nz = table > 0
    ratio = table[nz] / (px @ py)[nz]
    return float(max((table[nz] * np.log(ratio)).sum(), 0.0))


def normalized_mi(joint) -> float:
    """2 I(X;Y) / (H(X) + H(Y)); defined as 0 when both marginals are degenerate."""
    table = _as_distribution(joint, "joint")
    h_x = entropy(table.sum(axis=1))
    h_y = entropy(table.sum(axis=0))
    denom = h_x + h_y
    if denom <= 0.0:
        return 0.0
    return float(np.clip(2.0 * mutual_information(table) / denom, 0.0, 1.0))


def max_relevance(per_feature_mi: Sequence[float]) -> float:
    """Set-level dependency approximated by the mean of per-feature MI values."""
    values = np.asarray(per_feature_mi, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise OracleInputError("max_relevance needs at least one MI value")
    return float(values.mean())


def least_relevant(per_feature_mi: Sequence[float]) -> int:
    """Index of the feature whose removal raises ``max_relevance`` the most (lowest MI, first on ties)."""
    values = np.asarray(per_feature_mi, dtype=np.float64).reshape(-1)
    if values.size < 2:
        raise OracleInputError("least_relevant needs at least two MI values")
    return int(np.argmin(values))
