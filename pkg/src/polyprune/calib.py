"""Streaming per-site, per-language activation statistics.

One forward pass per calibration sample feeds every capture site; this
module accumulates, per (site, language):

  * pooled sum of squares per feature (for the column l2 norm),
  * running sum per feature (for the per-language token mean),
  * one mean-activation row per calibration sample,
  * per-feature counts of |x| above a fixed threshold eps.

All accumulation is f64 regardless of the f32 activations feeding it.
Statistics persist in the tensor container format and are immutable after
``finalize``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import Container, ContainerError

_STAT_TENSORS = ("sum_sq", "mean", "sample_means", "count_above_eps", "sample_token_counts")


@dataclass
class SiteLangStats:
    """Accumulated statistics for one (site, language) pair."""

    n_features: int
    eps_used: float
    token_count: int = 0
    sum_sq: np.ndarray = None
    sum: np.ndarray = None
    count_above_eps: np.ndarray = None
    sample_means: list = field(default_factory=list)
    sample_token_counts: list = field(default_factory=list)
    _pending_sum: np.ndarray = None
    _pending_count: int = 0

    def __post_init__(self):
        zeros = lambda: np.zeros(self.n_features, dtype=np.float64)
        if self.sum_sq is None:
            self.sum_sq = zeros()
        if self.sum is None:
            self.sum = zeros()
        if self.count_above_eps is None:
            self.count_above_eps = np.zeros(self.n_features, dtype=np.int64)
        self._pending_sum = zeros()

    @property
    def mean(self) -> np.ndarray:
        if self.token_count == 0:
            raise ValueError("no tokens accumulated")
        return self.sum / self.token_count

    def add(self, x: np.ndarray, end_sample: bool = True) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValueError(f"activations have shape {x.shape}, expected (tokens, {self.n_features})")
        self.token_count += x.shape[0]
        self.sum_sq += np.square(x).sum(axis=0)
        self.sum += x.sum(axis=0)
        self.count_above_eps += (np.abs(x) > self.eps_used).sum(axis=0)
        self._pending_sum += x.sum(axis=0)
        self._pending_count += x.shape[0]
        if end_sample:
            if self._pending_count == 0:
                raise ValueError("cannot close an empty calibration sample")
            self.sample_means.append(self._pending_sum / self._pending_count)
            self.sample_token_counts.append(self._pending_count)
            self._pending_sum = np.zeros(self.n_features, dtype=np.float64)
            self._pending_count = 0

    def sample_mean_matrix(self) -> np.ndarray:
        if not self.sample_means:
            return np.zeros((0, self.n_features), dtype=np.float64)
        return np.stack(self.sample_means)


class CalibStats:
    """Per-site, per-language statistics for a fixed language set."""

    def __init__(self, sites: dict[str, int], languages, eps: float):
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        self.languages = list(languages)
        if len(set(self.languages)) != len(self.languages):
            raise ValueError("duplicate language codes")
        if not self.languages:
            raise ValueError("no languages")
        self.sites = dict(sites)
        self.eps = float(eps)
        self._finalized = False
        self._stats: dict[str, dict[str, SiteLangStats]] = {
            site: {lang: SiteLangStats(n_features=dim, eps_used=self.eps) for lang in self.languages}
            for site, dim in self.sites.items()
        }

    def get(self, site: str, language: str) -> SiteLangStats:
        if site not in self._stats:
            raise KeyError(f"unknown site {site!r}")
        if language not in self._stats[site]:
            raise KeyError(f"unknown language {language!r}")
        return self._stats[site][language]

    def accumulate(self, site: str, language: str, activations, end_sample: bool = True) -> None:
        if self._finalized:
            raise RuntimeError("stats are finalized")
        x = activations.matrix if hasattr(activations, "matrix") else activations
        self.get(site, language).add(x, end_sample=end_sample)

    def finalize(self) -> "CalibStats":
        for site, by_lang in self._stats.items():
            for lang, s in by_lang.items():
                if s._pending_count:
                    raise RuntimeError(f"open calibration sample for ({site!r}, {lang!r})")
        self._finalized = True
        return self

    # -- derived quantities ---------------------------------------------

    def pooled_l2(self, site: str) -> np.ndarray:
        """Column l2 norm of the inputs at ``site`` pooled over all languages."""
        by_lang = self._stats[site]
        total = sum(s.token_count for s in by_lang.values())
        if total == 0:
            raise ValueError(f"no tokens accumulated at site {site!r}")
        pooled = np.zeros(self.sites[site], dtype=np.float64)
        for lang in self.languages:
            pooled += by_lang[lang].sum_sq
        return np.sqrt(pooled)

    def inter_variance(self, site: str) -> np.ndarray:
        """Population variance of the per-language token means, per feature."""
        if len(self.languages) < 2:
            raise ValueError("inter-language variance requires >= 2 languages")
        means = np.stack([self._stats[site][lang].mean for lang in self.languages])
        return np.mean(np.square(means - means.mean(axis=0)), axis=0)

    def intra_variance(self, site: str, language: str) -> np.ndarray:
        """Population variance across that language's per-sample mean rows."""
        rows = self.get(site, language).sample_mean_matrix()
        if rows.shape[0] < 2:
            raise ValueError(f"intra-language variance requires >= 2 samples ({language!r})")
        return np.mean(np.square(rows - rows.mean(axis=0)), axis=0)

    def mean_intra_variance(self, site: str) -> np.ndarray:
        """Unweighted mean over languages of the intra-language variances."""
        acc = np.zeros(self.sites[site], dtype=np.float64)
        for lang in self.languages:
            acc += self.intra_variance(site, lang)
        return acc / len(self.languages)

    def activation_probability(self, site: str) -> np.ndarray:
        """Macro-averaged fraction of tokens with |x| above eps, per feature.

        eps = 0 is the disable sentinel and yields the all-ones vector.
        """
        if self.eps == 0.0:
            return np.ones(self.sites[site], dtype=np.float64)
        probs = np.zeros(self.sites[site], dtype=np.float64)
        for lang in self.languages:
            s = self._stats[site][lang]
            if s.token_count == 0:
                raise ValueError(f"no tokens for language {lang!r} at site {site!r}")
            probs += s.count_above_eps / s.token_count
        return probs / len(self.languages)

    # -- persistence -----------------------------------------------------

    def to_container(self, extra_metadata: dict[str, str] | None = None) -> Container:
        token_counts = None
        for site in self.sites:
            counts = [self._stats[site][lang].token_count for lang in self.languages]
            if token_counts is None:
                token_counts = counts
            elif counts != token_counts:
                raise ValueError("token counts differ across sites; cannot serialize")
        meta = {
            "kind": "stats",
            "languages": ",".join(self.languages),
            "eps": repr(self.eps),
            "token_counts": ",".join(str(c) for c in token_counts),
        }
        if extra_metadata:
            meta.update(extra_metadata)
        container = Container(metadata=meta)
        for site in self.sites:
            for lang in self.languages:
                s = self._stats[site][lang]
                prefix = f"{site}/{lang}"
                container.add(f"{prefix}/sum_sq", s.sum_sq)
                container.add(f"{prefix}/mean", s.mean if s.token_count else s.sum)
                container.add(f"{prefix}/sample_means", s.sample_mean_matrix())
                container.add(f"{prefix}/count_above_eps", s.count_above_eps.astype(np.float64))
                container.add(
                    f"{prefix}/sample_token_counts",
                    np.asarray(s.sample_token_counts, dtype=np.float64),
                )
        return container

    @classmethod
    def from_container(cls, container: Container) -> "CalibStats":
        meta = container.metadata
        if meta.get("kind") != "stats":
            raise ContainerError("not a statistics container (metadata kind != 'stats')")
        languages = [l for l in meta.get("languages", "").split(",") if l]
        if not languages:
            raise ContainerError("stats container lists no languages")
        eps = float(meta["eps"])
        counts = [int(c) for c in meta["token_counts"].split(",")]
        if len(counts) != len(languages):
            raise ContainerError("token_counts does not align with languages")

        sites: dict[str, int] = {}
        for name in container.tensors:
            parts = name.rsplit("/", 2)
            if len(parts) != 3 or parts[2] not in _STAT_TENSORS:
                raise ContainerError(f"unexpected tensor {name!r} in stats container")
            site, lang, _ = parts
            if lang not in languages:
                raise ContainerError(f"tensor {name!r} names unknown language {lang!r}")
            dim = container[f"{site}/{lang}/sum_sq"].shape[0]
            sites.setdefault(site, dim)

        stats = cls(sites=sites, languages=languages, eps=eps)
        count_by_lang = dict(zip(languages, counts))
        for site, dim in sites.items():
            for lang in languages:
                prefix = f"{site}/{lang}"
                for field_name in _STAT_TENSORS:
                    if f"{prefix}/{field_name}" not in container:
                        raise ContainerError(f"stats container missing {prefix}/{field_name}")
                s = stats.get(site, lang)
                s.sum_sq = container[f"{prefix}/sum_sq"].astype(np.float64)
                mean = container[f"{prefix}/mean"].astype(np.float64)
                s.token_count = count_by_lang[lang]
                s.sum = mean * s.token_count
                s.count_above_eps = np.rint(
                    container[f"{prefix}/count_above_eps"].astype(np.float64)
                ).astype(np.int64)
                rows = container[f"{prefix}/sample_means"].astype(np.float64)
                if rows.ndim != 2 or rows.shape[1] != dim:
                    raise ContainerError(f"malformed sample_means for {prefix}")
                s.sample_means = [rows[i] for i in range(rows.shape[0])]
                s.sample_token_counts = [
                    int(c) for c in container[f"{prefix}/sample_token_counts"]
                ]
                if len(s.sample_token_counts) != rows.shape[0]:
                    raise ContainerError(f"sample bookkeeping mismatch for {prefix}")
        return stats.finalize()


def language_diversity(vectors: dict[str, np.ndarray]) -> float:
    """Mean pairwise cosine similarity between per-language feature vectors."""
    if len(vectors) < 2:
        raise ValueError("need >= 2 languages")
    keys = sorted(vectors)
    normed = []
    for key in keys:
        v = np.asarray(vectors[key], dtype=np.float64).reshape(-1)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise ValueError(f"zero-norm vector for {key!r}")
        normed.append(v / norm)
    total = 0.0
    pairs = 0
    for i in range(len(normed)):
        for j in range(i + 1, len(normed)):
            total += float(normed[i] @ normed[j])
            pairs += 1
    return total / pairs
