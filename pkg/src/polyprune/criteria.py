"""Per-weight importance scores for one-shot pruning.

Five criteria over a weight matrix W [C_out x C_in] and the calibration
statistics of its input site:

  magnitude  |W_ij|
  wanda      |W_ij| * l2_j                       (l2_j = pooled column norm)
  m-wanda    |W_ij| * (l2_j + lambda*VARn_j) * P_j
  ria        (|W_ij|/colsum_j + |W_ij|/rowsum_i) * l2_j^alpha
  m-ria      RI_ij * (l2_j^alpha + lambda*VARn_j) * P_j

VARn is the cross-language variance ratio (inter-language variance of the
per-language token means over the mean intra-language variance), min-max
normalized to [0, 1] per site. P is the per-feature activation probability
(all ones when the threshold is disabled). All score math runs in f64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import CalibStats

CRITERIA = ("magnitude", "wanda", "m-wanda", "ria", "m-ria")
GROUPINGS = ("per-output-row", "per-layer")

VAR_GUARD = 1e-12  # intra-variance division guard


@dataclass
class CriterionConfig:
    kind: str = "m-wanda"
    lam: float = 0.2  # scale of the cross-language variance term
    eps: float = 5e-5  # activation-probability threshold, 0 disables
    alpha: float = 0.5  # exponent on the input norm (ria / m-ria only)

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"unknown criterion {self.kind!r}")
        if self.lam < 0 or self.eps < 0:
            raise ValueError("lambda and eps must be nonnegative")

    @property
    def needs_stats(self) -> bool:
        return self.kind != "magnitude"

    @property
    def multilingual(self) -> bool:
        return self.kind in ("m-wanda", "m-ria")


@dataclass
class ImportanceTensor:
    """Scores S_ij for one weight matrix; higher = more important to keep."""

    name: str
    scores: np.ndarray
    grouping: str = "per-output-row"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("scores must be a 2-D matrix")
        if self.grouping not in GROUPINGS:
            raise ValueError(f"unknown grouping {self.grouping!r}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"non-finite scores for {self.name!r}")
        if np.any(self.scores < 0):
            raise ValueError(f"negative scores for {self.name!r}")


def _check_weight(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError("weight matrix must be 2-D")
    if not np.all(np.isfinite(W)):
        raise ValueError("weight matrix contains non-finite entries")
    return W


def _check_vector(v: np.ndarray, c_in: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != c_in:
        raise ValueError(f"{what} has length {v.shape[0]}, expected {c_in}")
    return v


def score_magnitude(W: np.ndarray, name: str = "") -> ImportanceTensor:
    W = _check_weight(W)
    return ImportanceTensor(name=name, scores=np.abs(W))


def score_wanda(W: np.ndarray, l2: np.ndarray, name: str = "") -> ImportanceTensor:
    W = _check_weight(W)
    l2 = _check_vector(l2, W.shape[1], "l2 vector")
    if np.any(l2 < 0):
        raise ValueError("l2 norms must be nonnegative")
    return ImportanceTensor(name=name, scores=np.abs(W) * l2)


def normalized_variance_ratio(var_inter: np.ndarray, var_intra_mean: np.ndarray) -> np.ndarray:
    """Min-max normalized ratio of inter- to mean intra-language variance.

    A degenerate all-equal ratio normalizes to all zeros, so the enhanced
    activation collapses back to the plain input norm.
    """
    var_inter = np.asarray(var_inter, dtype=np.float64)
    var_intra_mean = np.asarray(var_intra_mean, dtype=np.float64)
    if np.any(var_intra_mean < 0):
        raise ValueError("intra-language variances must be nonnegative")
    ratio = var_inter / (var_intra_mean + VAR_GUARD)
    lo, hi = ratio.min(), ratio.max()
    if hi == lo:
        return np.zeros_like(ratio)
    return (ratio - lo) / (hi - lo)


def enhanced_activation(
    l2: np.ndarray,
    var_inter: np.ndarray,
    var_intra_mean: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Input norm plus the scaled, normalized cross-language variance ratio."""
    l2 = np.asarray(l2, dtype=np.float64)
    return l2 + lam * normalized_variance_ratio(var_inter, var_intra_mean)


def score_mwanda(W: np.ndarray, A: np.ndarray, P: np.ndarray, name: str = "") -> ImportanceTensor:
    W = _check_weight(W)
    A = _check_vector(A, W.shape[1], "enhanced activation")
    P = _check_vector(P, W.shape[1], "activation probability")
    if np.any(P < 0) or np.any(P > 1):
        raise ValueError("activation probabilities must lie in [0, 1]")
    return ImportanceTensor(name=name, scores=np.abs(W) * A * P)


def relative_importance(W: np.ndarray) -> np.ndarray:
    """|W_ij|/colsum_j + |W_ij|/rowsum_i with 0/0 mapped to 0."""
    W = _check_weight(W)
    a = np.abs(W)
    colsum = a.sum(axis=0, keepdims=True)
    rowsum = a.sum(axis=1, keepdims=True)
    col_term = np.divide(a, colsum, out=np.zeros_like(a), where=colsum > 0)
    row_term = np.divide(a, rowsum, out=np.zeros_like(a), where=rowsum > 0)
    return col_term + row_term


def score_ria(W: np.ndarray, l2: np.ndarray, alpha: float, name: str = "") -> ImportanceTensor:
    W = _check_weight(W)
    l2 = _check_vector(l2, W.shape[1], "l2 vector")
    return ImportanceTensor(name=name, scores=relative_importance(W) * np.power(l2, alpha))


def score_mria(
    W: np.ndarray, A: np.ndarray, P: np.ndarray, name: str = ""
) -> ImportanceTensor:
    """RI_ij * A_j * P_j; A must already carry l2^alpha in place of l2."""
    W = _check_weight(W)
    A = _check_vector(A, W.shape[1], "enhanced activation")
    P = _check_vector(P, W.shape[1], "activation probability")
    if np.any(P < 0) or np.any(P > 1):
        raise ValueError("activation probabilities must lie in [0, 1]")
    return ImportanceTensor(name=name, scores=relative_importance(W) * A * P)


def score_matrix(
    W: np.ndarray,
    config: CriterionConfig,
    stats: CalibStats | None = None,
    site: str | None = None,
    name: str = "",
    grouping: str = "per-output-row",
) -> ImportanceTensor:
    """Score one weight matrix under ``config`` using its site's statistics."""
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}")
    if config.kind == "magnitude":
        tensor = score_magnitude(W, name=name)
    else:
        if stats is None or site is None:
            raise ValueError(f"criterion {config.kind!r} needs calibration statistics")
        l2 = stats.pooled_l2(site)
        if config.kind == "wanda":
            tensor = score_wanda(W, l2, name=name)
        elif config.kind == "ria":
            tensor = score_ria(W, l2, config.alpha, name=name)
        else:
            var_inter = stats.inter_variance(site)
            var_intra = stats.mean_intra_variance(site)
            if config.eps > 0 and stats.eps != config.eps:
                raise ValueError(
                    f"criterion eps {config.eps!r} does not match statistics eps {stats.eps!r}"
                )
            P = stats.activation_probability(site) if config.eps > 0 else np.ones_like(l2)
            if config.kind == "m-wanda":
                A = enhanced_activation(l2, var_inter, var_intra, config.lam)
                tensor = score_mwanda(W, A, P, name=name)
            else:  # m-ria
                A = enhanced_activation(
                    np.power(l2, config.alpha), var_inter, var_intra, config.lam
                )
                tensor = score_mria(W, A, P, name=name)
    tensor.grouping = grouping
    return tensor
