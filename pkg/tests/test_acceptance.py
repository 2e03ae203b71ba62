"""Acceptance suite: one test per exit criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines alongside the pytest verdicts.
"""

import csv
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from polyprune import (
    CalibStats,
    CriterionConfig,
    ImportanceTensor,
    TokenBatch,
    build_mask,
    forward,
    rescale_to_plan,
    pearson,
    score_ria,
    score_wanda,
    score_matrix,
)
from polyprune.cli import main
from oracles import (
    reference_all_scores,
    reference_batch_stats,
    specialization_instance,
)

SITE = "blocks.0.attn_in"


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


def stats_from_samples(samples, eps):
    dim = next(iter(samples.values()))[0].shape[1]
    stats = CalibStats(sites={SITE: dim}, languages=list(samples), eps=eps)
    for lang, sample_list in samples.items():
        for sample in sample_list:
            stats.accumulate(SITE, lang, sample, end_sample=True)
    return stats.finalize()


def test_criterion_1_oracle_equivalence():
    """200 random 8x8 instances: five criteria at 1e-12, masks exact, < 10 s."""
    started = time.monotonic()
    lam, eps, alpha = 0.2, 5e-5, 0.5
    for seed in range(200):
        rng = np.random.default_rng(seed)
        samples = {
            lang: [rng.standard_normal((8, 8)) * rng.uniform(0.5, 2.0) for _ in range(4)]
            for lang in ("aa", "bb", "cc")
        }
        stats = stats_from_samples(samples, eps=eps)
        W = rng.standard_normal((8, 8))
        expected = reference_all_scores(W, samples, lam=lam, eps=eps, alpha=alpha)
        for kind in ("magnitude", "wanda", "m-wanda", "ria", "m-ria"):
            config = CriterionConfig(kind=kind, lam=lam, eps=eps, alpha=alpha)
            got = score_matrix(W, config, stats=stats, site=SITE, name="w")
            np.testing.assert_allclose(got.scores, expected[kind], rtol=1e-12, atol=0)
            oracle_tensor = ImportanceTensor(name="w", scores=expected[kind])
            for grouping in ("per-output-row", "per-layer"):
                assert np.array_equal(
                    build_mask(got, 0.5, grouping=grouping),
                    build_mask(oracle_tensor, 0.5, grouping=grouping),
                )
    elapsed = time.monotonic() - started
    assert elapsed < 10.0, f"oracle equivalence took {elapsed:.1f}s"
    print(f"\nACCEPTANCE 1 PASS: oracle equivalence, 200 instances in {elapsed:.1f}s")


def test_criterion_2_reduction_identities(tmp_path, toy_model_path, calib_manifest):
    """m-wanda/m-ria at lambda=0, eps=0 reproduce wanda/ria byte for byte."""
    stats = tmp_path / "stats.safetensors"
    assert run_cli("calibrate", "--model", toy_model_path, "--manifest", calib_manifest,
                   "--out", stats, "--window", 64, "--seed", 0) == 0

    def prune(criterion, lam, eps, out):
        assert run_cli("prune", "--model", toy_model_path, "--stats", stats,
                       "--out", tmp_path / out, "--criterion", criterion,
                       "--alloc", "uniform", "--ratio", 0.5,
                       "--lambda", lam, "--eps", eps) == 0
        return (tmp_path / out / "model.safetensors").read_bytes()

    assert prune("m-wanda", 0.0, 0.0, "mw") == prune("wanda", 0.0, 0.0, "w")
    assert prune("m-ria", 0.0, 0.0, "mr") == prune("ria", 0.0, 0.0, "r")
    print("\nACCEPTANCE 2 PASS: reduction identities byte-identical")


def test_criterion_3_allocation_constraints():
    """1000 random importance vectors: mean, bounds, ordering, affine invariance."""
    rng = np.random.default_rng(2024)
    cases = 0
    while cases < 1000:
        for ratio in (0.3, 0.5, 0.7):
            for gamma in (0.01, 0.04):
                n = int(rng.integers(2, 65))
                importance = rng.standard_normal(n) * rng.uniform(0.05, 20.0)
                plan = rescale_to_plan(importance, ratio, gamma)
                assert abs(plan.ratios.mean() - ratio) < 1e-12
                assert np.all(plan.ratios >= ratio - gamma)
                assert np.all(plan.ratios <= ratio + gamma)
                for i in range(n):
                    for j in range(i + 1, n):
                        if importance[i] < importance[j]:
                            assert plan.ratios[i] > plan.ratios[j]
                        elif importance[i] == importance[j]:
                            assert plan.ratios[i] == plan.ratios[j]
                a = float(rng.uniform(0.1, 10.0))
                b = float(rng.standard_normal() * 5.0)
                shifted = rescale_to_plan(a * importance + b, ratio, gamma)
                np.testing.assert_allclose(plan.ratios, shifted.ratios, rtol=0, atol=1e-12)
                cases += 1
    print(f"\nACCEPTANCE 3 PASS: allocation constraints over {cases} plans")


def test_criterion_4_topk_optimality():
    """Pruned score-sum minimal vs exhaustive enumeration for rows <= 12."""
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 13))
        row = rng.random(n)
        ratio = float(rng.uniform(0.0, 1.0))
        k = int(np.floor(ratio * n))
        mask = build_mask(ImportanceTensor(name="w", scores=row[None, :]), ratio)[0]
        pruned_indices = sorted(np.flatnonzero(mask == 0))
        assert len(pruned_indices) == k
        pruned_sum = sum(row[i] for i in pruned_indices)
        best = min(
            (sum(row[i] for i in combo) for combo in itertools.combinations(range(n), k)),
            default=0.0,
        )
        assert pruned_sum == best
    print("\nACCEPTANCE 4 PASS: top-k optimality vs exhaustive enumeration")


def test_criterion_5_streaming_statistics():
    """Streaming sum_sq/mean/counts equal batch recomputation at 1e-9."""
    rng = np.random.default_rng(11)
    for _ in range(50):
        dim = int(rng.integers(1, 10))
        eps = float(rng.choice([0.0, 1e-5, 0.3]))
        stats = CalibStats(sites={SITE: dim}, languages=["x"], eps=eps)
        samples = [
            rng.standard_normal((int(rng.integers(1, 80)), dim)) * rng.uniform(0.1, 3.0)
            for _ in range(int(rng.integers(1, 10)))
        ]
        for sample in samples:
            cut = int(rng.integers(0, sample.shape[0]))
            if cut:
                stats.accumulate(SITE, "x", sample[:cut], end_sample=False)
            stats.accumulate(SITE, "x", sample[cut:], end_sample=True)
        s = stats.get(SITE, "x")
        ref = reference_batch_stats(samples, eps=eps)
        assert s.token_count == ref["token_count"]
        np.testing.assert_allclose(s.sum_sq, ref["sum_sq"], rtol=1e-9)
        np.testing.assert_allclose(s.mean, ref["mean"], rtol=1e-9)
        assert np.array_equal(s.count_above_eps, ref["count_above_eps"])
        np.testing.assert_allclose(s.sample_mean_matrix(), ref["sample_means"], rtol=1e-9)
    print("\nACCEPTANCE 5 PASS: streaming equals batch over 50 corpora")


def test_criterion_6_specialization_retention():
    """Wanda prunes the language-specific column; m-wanda keeps it, 20/20."""
    for seed in range(20):
        instance = specialization_instance(seed)
        stats = stats_from_samples(instance.samples, eps=instance.eps)
        wanda = score_wanda(instance.weight, stats.pooled_l2(SITE))
        wanda_mask = build_mask(wanda, 0.5)
        assert wanda_mask[0, instance.target_column] == 0, f"seed {seed}"

        config = CriterionConfig(kind="m-wanda", lam=instance.lam, eps=instance.eps)
        mwanda = score_matrix(instance.weight, config, stats=stats, site=SITE)
        mwanda_mask = build_mask(mwanda, 0.5)
        assert mwanda_mask[0, instance.target_column] == 1, f"seed {seed}"

        # the reduction limit recovers the pooled-norm mask
        reduced = score_matrix(
            instance.weight, CriterionConfig(kind="m-wanda", lam=0.0, eps=0.0),
            stats=stats, site=SITE,
        )
        assert np.array_equal(build_mask(reduced, 0.5), wanda_mask)
    print("\nACCEPTANCE 6 PASS: specialization retention in 20/20 seeds")


def test_criterion_7_hand_value_fixtures():
    """Frozen hand-computed fixtures at 1e-12."""
    wanda = score_wanda(np.array([[1.0, -2.0], [3.0, 0.5]]), np.array([2.0, 1.0]))
    np.testing.assert_allclose(wanda.scores, [[2.0, 2.0], [6.0, 0.5]], rtol=1e-12)

    ria = score_ria(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones(2), alpha=0.5)
    np.testing.assert_allclose(ria.scores, [[7 / 12, 1.0], [33 / 28, 26 / 21]], rtol=1e-12)

    plan = rescale_to_plan(np.array([0.2, 0.5, 0.8]), ratio=0.5, gamma=0.04)
    np.testing.assert_allclose(plan.ratios, [0.54, 0.50, 0.46], rtol=1e-12)

    assert pearson(np.array([1.0, 2.0, 3.0]), np.array([1.0, 3.0, 2.0])) == pytest.approx(
        0.5, rel=1e-12
    )
    print("\nACCEPTANCE 7 PASS: hand-value fixtures")


def test_criterion_8_end_to_end_determinism(tmp_path, toy_model_path, toy_store,
                                             calib_manifest, eval_manifest):
    """calibrate -> prune -> eval-ppl: < 60 s, R=0 no-op, repeat-identical."""
    started = time.monotonic()

    def pipeline(tag: str) -> dict[str, bytes]:
        stats = tmp_path / f"stats_{tag}.safetensors"
        pruned = tmp_path / f"pruned_{tag}"
        ppl_csv = tmp_path / f"ppl_{tag}.csv"
        assert run_cli("calibrate", "--model", toy_model_path, "--manifest", calib_manifest,
                       "--out", stats, "--window", 64, "--seed", 5) == 0
        assert run_cli("prune", "--model", toy_model_path, "--stats", stats,
                       "--out", pruned, "--criterion", "m-wanda", "--alloc", "cwl",
                       "--ratio", 0.5, "--eps", "5e-5") == 0
        assert run_cli("eval-ppl", "--model", pruned / "model.safetensors",
                       "--manifest", eval_manifest, "--window", 64, "--out", ppl_csv) == 0
        return {
            "stats": stats.read_bytes(),
            "model": (pruned / "model.safetensors").read_bytes(),
            "masks": (pruned / "masks.safetensors").read_bytes(),
            "csv": ppl_csv.read_bytes(),
        }

    first = pipeline("a")
    second = pipeline("b")
    assert first == second  # repeated runs byte-identical

    # R = 0 prune is a no-op: byte-identical model, identical perplexities
    zero_out = tmp_path / "zero"
    stats = tmp_path / "stats_a.safetensors"
    assert run_cli("prune", "--model", toy_model_path, "--stats", stats,
                   "--out", zero_out, "--criterion", "wanda", "--alloc", "uniform",
                   "--ratio", 0.0) == 0
    assert (zero_out / "model.safetensors").read_bytes() == Path(toy_model_path).read_bytes()

    dense_csv = tmp_path / "dense.csv"
    zero_csv = tmp_path / "zero.csv"
    assert run_cli("eval-ppl", "--model", toy_model_path, "--manifest", eval_manifest,
                   "--window", 64, "--out", dense_csv) == 0
    assert run_cli("eval-ppl", "--model", zero_out / "model.safetensors",
                   "--manifest", eval_manifest, "--window", 64, "--out", zero_csv) == 0
    assert dense_csv.read_bytes() == zero_csv.read_bytes()

    # all-ones mask forward equals dense forward
    rng = np.random.default_rng(0)
    batch_ids = rng.integers(0, 256, size=48)
    masks = {
        name: np.ones_like(arr, dtype=np.uint8)
        for name, arr in toy_store.tensors.items()
        if name.startswith("blocks.") and arr.ndim == 2
    }
    dense_logits, _ = forward(toy_store.graph, toy_store, TokenBatch(ids=batch_ids))
    masked_logits, _ = forward(toy_store.graph, toy_store, TokenBatch(ids=batch_ids), masks=masks)
    assert np.max(np.abs(dense_logits - masked_logits)) <= 1e-6

    elapsed = time.monotonic() - started
    assert elapsed < 60.0, f"end-to-end pipeline took {elapsed:.1f}s"
    print(f"\nACCEPTANCE 8 PASS: end-to-end determinism in {elapsed:.1f}s")


def test_criterion_9_sparsity_sweep(tmp_path, toy_model_path, calib_manifest, eval_manifest):
    """Default ratio sweep 0.30..0.70 emits a well-formed per-language csv."""
    stats = tmp_path / "stats.safetensors"
    assert run_cli("calibrate", "--model", toy_model_path, "--manifest", calib_manifest,
                   "--out", stats, "--window", 64, "--seed", 1) == 0
    out = tmp_path / "sweep.csv"
    assert run_cli("sweep", "--model", toy_model_path, "--stats", stats,
                   "--manifest", eval_manifest, "--out", out,
                   "--criterion", "m-wanda", "--alloc", "cwl", "--eps", "5e-5",
                   "--window", 64) == 0

    with open(out, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["ratio", "language", "perplexity"]
    body = rows[1:]
    assert len(body) == 9 * 4  # 9 ratios x (3 languages + average)
    seen_ratios = sorted({float(r[0]) for r in body})
    np.testing.assert_allclose(seen_ratios, [0.30 + 0.05 * i for i in range(9)], atol=1e-9)
    for _, lang, ppl in body:
        assert lang in ("aa", "bb", "cc", "average")
        assert float(ppl) > 0
    print("\nACCEPTANCE 9 PASS: sparsity sweep csv well-formed")
