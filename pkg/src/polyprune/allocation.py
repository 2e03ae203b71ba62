"""Per-layer sparsity ratio allocation: uniform, OWL, and CWL.

Given per-layer importance scores c_n and a global target ratio R, the
rescale maps mean-centered deviations into [-gamma, +gamma] and sets
r_n = R - scaled deviation, so the mean ratio equals R exactly, every
ratio stays in [R - gamma, R + gamma], and more important layers are
pruned less.

OWL importance counts activation-mean outliers per layer; CWL combines
inter-language and intra-language Pearson correlation of mean activation
profiles.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .calib import CalibStats
from .graph import SITE_KINDS

ALLOCATIONS = ("uniform", "owl", "cwl")
CWL_BLOCKS = ("attn", "mlp")

_CWL_SITES = {"attn": ("attn_in", "o_in"), "mlp": ("mlp_in", "down_in")}

_SITE_RE = re.compile(r"^blocks\.(\d+)\.(" + "|".join(SITE_KINDS) + r")$")


@dataclass
class AllocConfig:
    kind: str = "cwl"
    ratio: float = 0.5  # global target sparsity R
    gamma: float = 0.04  # half-width of the per-layer interval around R
    owl_m: float = 5.0  # outlier multiplier (owl only)
    cwl_block: str = "attn"  # which sublayer family feeds cwl

    def __post_init__(self):
        if self.kind not in ALLOCATIONS:
            raise ValueError(f"unknown allocation {self.kind!r}")
        if self.cwl_block not in CWL_BLOCKS:
            raise ValueError(f"unknown cwl block {self.cwl_block!r}")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError("global ratio must lie in [0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.kind != "uniform":
            # the gamma interval only exists for rescaled plans; uniform also
            # admits the R = 0 prune-nothing baseline
            if not (0.0 < self.ratio - self.gamma and self.ratio + self.gamma < 1.0):
                raise ValueError("[R - gamma, R + gamma] must stay within (0, 1)")


@dataclass
class SparsityPlan:
    """Per-layer target ratios plus the raw importance they came from."""

    ratios: np.ndarray
    importance: np.ndarray | None = None

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64).reshape(-1)
        if self.importance is not None:
            self.importance = np.asarray(self.importance, dtype=np.float64).reshape(-1)
            if self.importance.shape != self.ratios.shape:
                raise ValueError("importance and ratios lengths differ")
        if np.any(self.ratios < 0) or np.any(self.ratios >= 1):
            raise ValueError("layer ratios must lie in [0, 1)")

    def __len__(self) -> int:
        return len(self.ratios)

    def table(self) -> str:
        lines = ["layer  importance      ratio"]
        for n, r in enumerate(self.ratios):
            imp = "" if self.importance is None else f"{self.importance[n]: .6f}"
            lines.append(f"{n:5d}  {imp:>10s}  {r: .6f}")
        return "\n".join(lines)


def _layer_sites(stats: CalibStats) -> dict[int, dict[str, str]]:
    """block index -> site kind -> site id, parsed from the stats site set."""
    layers: dict[int, dict[str, str]] = {}
    for site in stats.sites:
        m = _SITE_RE.match(site)
        if m is None:
            raise ValueError(f"site {site!r} does not follow the block naming scheme")
        layers.setdefault(int(m.group(1)), {})[m.group(2)] = site
    if not layers:
        raise ValueError("statistics contain no sites")
    n_layers = max(layers) + 1
    for i in range(n_layers):
        if set(layers.get(i, {})) != set(SITE_KINDS):
            raise ValueError(f"block {i} is missing capture sites")
    return layers


def owl_importance(stats: CalibStats, owl_m: float) -> np.ndarray:
    """Per-layer fraction of activation-mean magnitudes above owl_m x their mean.

    Magnitudes are pooled over the layer's four sites and all languages.
    """
    layers = _layer_sites(stats)
    scores = np.zeros(len(layers), dtype=np.float64)
    for i, sites in sorted(layers.items()):
        values = np.concatenate(
            [
                np.abs(stats.get(site, lang).mean)
                for site in sites.values()
                for lang in stats.languages
            ]
        )
        threshold = owl_m * values.mean()
        scores[i] = np.count_nonzero(values > threshold) / values.size
    return scores


def pearson(u: np.ndarray, v: np.ndarray) -> float:
    """Pearson correlation across features; zero-variance inputs give 0."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError("vectors must have equal length")
    du = u - u.mean()
    dv = v - v.mean()
    denom = np.sqrt((du @ du) * (dv @ dv))
    if denom == 0.0:
        return 0.0
    return float((du @ dv) / denom)


def _mean_pairwise_pearson(rows: np.ndarray) -> float:
    n = rows.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += pearson(rows[i], rows[j])
    return total / (n * (n - 1) / 2)


def cwl_importance(stats: CalibStats, cwl_block: str) -> np.ndarray:
    """Correlation-weighted layer importance over the selected sublayer family.

    Per site: inter = mean pairwise Pearson of the per-language mean
    activation profiles; intra_l = mean pairwise Pearson of language l's
    per-sample mean rows; the site score is inter * sum_l intra_l. Layer
    importance is the mean over the layer's selected sites.
    """
    if cwl_block not in CWL_BLOCKS:
        raise ValueError(f"unknown cwl block {cwl_block!r}")
    if len(stats.languages) < 2:
        raise ValueError("cwl requires >= 2 languages")
    layers = _layer_sites(stats)
    scores = np.zeros(len(layers), dtype=np.float64)
    for i, sites in sorted(layers.items()):
        site_scores = []
        for kind in _CWL_SITES[cwl_block]:
            site = sites[kind]
            lang_means = np.stack([stats.get(site, lang).mean for lang in stats.languages])
            inter = _mean_pairwise_pearson(lang_means)
            intra_sum = 0.0
            for lang in stats.languages:
                rows = stats.get(site, lang).sample_mean_matrix()
                if rows.shape[0] < 2:
                    raise ValueError(f"cwl requires >= 2 samples per language ({lang!r})")
                intra_sum += _mean_pairwise_pearson(rows)
            site_scores.append(inter * intra_sum)
        scores[i] = np.mean(site_scores)
    return scores


def rescale_to_plan(importance: np.ndarray, ratio: float, gamma: float) -> SparsityPlan:
    """Affine map from importance to per-layer ratios around the global R."""
    importance = np.asarray(importance, dtype=np.float64).reshape(-1)
    if importance.size == 0:
        raise ValueError("empty importance vector")
    if not np.all(np.isfinite(importance)):
        raise ValueError("importance scores must be finite")
    deviations = importance - importance.mean()
    deviations -= deviations.mean()  # kill the last ulps so mean(r) == R exactly
    span = np.max(np.abs(deviations))
    if gamma == 0.0 or span == 0.0:
        ratios = np.full_like(importance, ratio)
    else:
        # clip guards the one-ulp overshoot of span * (gamma / span)
        ratios = np.clip(ratio - deviations * (gamma / span), ratio - gamma, ratio + gamma)
    return SparsityPlan(ratios=ratios, importance=importance)


def uniform_plan(n_layers: int, ratio: float) -> SparsityPlan:
    if not 0.0 <= ratio < 1.0:
        raise ValueError("global ratio must lie in [0, 1)")
    return SparsityPlan(ratios=np.full(n_layers, ratio, dtype=np.float64))


def build_plan(config: AllocConfig, stats: CalibStats | None, n_layers: int) -> SparsityPlan:
    """Dispatch on the allocation kind; uniform needs no statistics."""
    if config.kind == "uniform":
        return uniform_plan(n_layers, config.ratio)
    if stats is None:
        raise ValueError(f"allocation {config.kind!r} needs calibration statistics")
    if config.kind == "owl":
        importance = owl_importance(stats, config.owl_m)
    else:
        importance = cwl_importance(stats, config.cwl_block)
    if len(importance) != n_layers:
        raise ValueError(
            f"statistics cover {len(importance)} layers, model has {n_layers}"
        )
    return rescale_to_plan(importance, config.ratio, config.gamma)
