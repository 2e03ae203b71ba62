"""Converts importance scores and a sparsity plan into binary keep masks.

Per comparison group (one output row, or the whole matrix), the
floor(ratio * group size) lowest-scoring weights are pruned. Ties keep the
lower row-major index and prune the higher one, so masks are bit-identical
across runs and platforms. Masks are held as packed bitsets and exported
as f32 0/1 tensors for interchange.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .container import Container, ContainerError
from .criteria import GROUPINGS, ImportanceTensor
from .allocation import SparsityPlan

_BLOCK_RE = re.compile(r"^blocks\.(\d+)\.")


def _prune_lowest(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean keep vector pruning the k lowest scores, higher index first on ties."""
    n = scores.shape[0]
    keep = np.ones(n, dtype=bool)
    if k <= 0:
        return keep
    # ascending score, descending index among equals
    order = np.lexsort((-np.arange(n), scores))
    keep[order[:k]] = False
    return keep


def build_mask(scores: ImportanceTensor, ratio: float, grouping: str | None = None) -> np.ndarray:
    """0/1 keep mask (uint8) for one weight matrix at the given prune ratio."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    grouping = grouping or scores.grouping
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}")
    s = scores.scores
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")

    if grouping == "per-output-row":
        k = int(np.floor(ratio * s.shape[1]))
        mask = np.ones(s.shape, dtype=np.uint8)
        for i in range(s.shape[0]):
            mask[i] = _prune_lowest(s[i], k)
        return mask

    k = int(np.floor(ratio * s.size))
    return _prune_lowest(s.reshape(-1), k).reshape(s.shape).astype(np.uint8)


@dataclass
class MaskSet:
    """Packed binary masks per weight matrix (1 = keep) plus the plan used."""

    plan: SparsityPlan | None = None
    _packed: dict[str, tuple[np.ndarray, tuple[int, ...]]] = field(default_factory=dict)

    def add(self, name: str, mask: np.ndarray) -> None:
        mask = np.asarray(mask)
        if not np.isin(mask, (0, 1)).all():
            raise ValueError(f"mask for {name!r} is not binary")
        self._packed[name] = (np.packbits(mask.astype(bool).reshape(-1)), tuple(mask.shape))

    def names(self) -> list[str]:
        return list(self._packed)

    def get(self, name: str) -> np.ndarray:
        packed, shape = self._packed[name]
        n = int(np.prod(shape))
        return np.unpackbits(packed, count=n).reshape(shape).astype(np.uint8)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self.get(name) for name in self._packed}

    def kept(self, name: str) -> int:
        packed, _ = self._packed[name]
        return int(np.unpackbits(packed, count=int(np.prod(self._packed[name][1]))).sum())

    def sparsity(self, name: str) -> float:
        _, shape = self._packed[name]
        total = int(np.prod(shape))
        return 1.0 - self.kept(name) / total

    def per_layer_sparsity(self) -> dict[int, float]:
        """Achieved sparsity per block, aggregated over its matrices."""
        pruned: dict[int, int] = {}
        total: dict[int, int] = {}
        for name in self._packed:
            m = _BLOCK_RE.match(name)
            if m is None:
                raise ValueError(f"mask name {name!r} does not follow the block naming scheme")
            block = int(m.group(1))
            _, shape = self._packed[name]
            size = int(np.prod(shape))
            total[block] = total.get(block, 0) + size
            pruned[block] = pruned.get(block, 0) + size - self.kept(name)
        return {b: pruned[b] / total[b] for b in sorted(total)}

    def to_container(self, extra_metadata: dict[str, str] | None = None) -> Container:
        meta = {"kind": "masks"}
        if self.plan is not None:
            meta["plan_ratios"] = ",".join(repr(float(r)) for r in self.plan.ratios)
            if self.plan.importance is not None:
                meta["plan_importance"] = ",".join(repr(float(c)) for c in self.plan.importance)
        if extra_metadata:
            meta.update(extra_metadata)
        container = Container(metadata=meta)
        for name in sorted(self._packed):
            container.add(name, self.get(name).astype(np.float32))
        return container

    @classmethod
    def from_container(cls, container: Container) -> "MaskSet":
        if container.metadata.get("kind") != "masks":
            raise ContainerError("not a mask container (metadata kind != 'masks')")
        plan = None
        if "plan_ratios" in container.metadata:
            ratios = np.array(
                [float(r) for r in container.metadata["plan_ratios"].split(",")]
            )
            importance = None
            if "plan_importance" in container.metadata:
                importance = np.array(
                    [float(c) for c in container.metadata["plan_importance"].split(",")]
                )
            plan = SparsityPlan(ratios=ratios, importance=importance)
        masks = cls(plan=plan)
        for name, arr in container.tensors.items():
            masks.add(name, arr)
        return masks


def build_mask_set(
    scored: dict[str, ImportanceTensor],
    plan: SparsityPlan,
    layer_of: dict[str, int],
    grouping: str | None = None,
) -> MaskSet:
    """Mask every scored matrix at its layer's planned ratio."""
    masks = MaskSet(plan=plan)
    for name, tensor in scored.items():
        block = layer_of[name]
        if block >= len(plan):
            raise ValueError(f"plan has {len(plan)} layers but {name!r} is in block {block}")
        masks.add(name, build_mask(tensor, plan.ratios[block], grouping=grouping))
    return masks


def apply(weights, masks: MaskSet):
    """Weight store copy with pruned entries set to exact zero."""
    return weights.masked(masks.arrays())


def verify(masks: MaskSet, plan: SparsityPlan) -> str:
    """Line-oriented report of achieved vs target sparsity per layer.

    Deviations up to one weight per output row are floor effects and are
    noted as such; anything larger is flagged.
    """
    per_layer = masks.per_layer_sparsity()
    if not per_layer:
        raise ValueError("mask set is empty")
    if max(per_layer) + 1 != len(plan):
        raise ValueError(
            f"plan covers {len(plan)} layers but masks cover blocks up to {max(per_layer)}"
        )

    rows_by_block: dict[int, int] = {}
    totals_by_block: dict[int, int] = {}
    pruned_by_block: dict[int, int] = {}
    for name in masks.names():
        block = int(_BLOCK_RE.match(name).group(1))
        _, shape = masks._packed[name]
        size = int(np.prod(shape))
        rows_by_block[block] = rows_by_block.get(block, 0) + shape[0]
        totals_by_block[block] = totals_by_block.get(block, 0) + size
        pruned_by_block[block] = pruned_by_block.get(block, 0) + size - masks.kept(name)

    lines = ["layer    target  achieved  status"]
    for block in sorted(totals_by_block):
        target = plan.ratios[block]
        deviation = abs(pruned_by_block[block] - target * totals_by_block[block])
        if deviation == 0:
            status = "ok"
        elif deviation <= rows_by_block[block]:
            status = "floor-effect"
        else:
            status = "DEVIATION"
        lines.append(f"{block:5d}  {target:8.4f}  {per_layer[block]:8.4f}  {status}")
    return "\n".join(lines)
