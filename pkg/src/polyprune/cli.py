"""Command-line pipeline: calibrate, prune, eval-ppl, inspect, sweep.

Calibration draws per-language token windows from a manifest (one
``<lang-code> <path> <n-samples>`` line per language), accumulates site
statistics through capture forwards, and records the seed so runs are
reproducible byte for byte. Window sampling is part of the file contract:
``numpy.random.default_rng(seed)`` drawing
``rng.choice(n_starts, size=n_samples, replace=False)`` once per manifest
line, in file order.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .allocation import ALLOCATIONS, CWL_BLOCKS, AllocConfig, build_plan
from .calib import CalibStats
from .container import Container, ContainerError, load, save
from .criteria import CRITERIA, GROUPINGS, CriterionConfig, score_matrix
from .graph import ModelGraph, TokenBatch, WeightStore, forward, perplexity
from .masker import MaskSet, build_mask_set, verify

DEFAULT_WINDOW = 2048
DEFAULT_SWEEP_RATIOS = [round(0.30 + 0.05 * i, 2) for i in range(9)]
GRID_LAMBDAS = (0.02, 0.2)
GRID_EPS = (5e-5, 1e-7, 0.0)
GRID_GAMMAS = (0.01, 0.04)


class CliError(RuntimeError):
    pass


# ---------------------------- manifest & corpora ---------------------------- #


def parse_manifest(path) -> list[tuple[str, Path, int]]:
    """Lines of ``<lang-code> <path> <n-samples>``; '#' starts a comment."""
    entries = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read manifest: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CliError(f"manifest line {lineno}: expected '<lang> <path> <n-samples>'")
        lang, corpus, n = parts
        try:
            count = int(n)
        except ValueError as exc:
            raise CliError(f"manifest line {lineno}: bad sample count {n!r}") from exc
        if count < 0:
            raise CliError(f"manifest line {lineno}: sample count must be >= 0")
        entries.append((lang, Path(corpus), count))
    if not entries:
        raise CliError("no languages in manifest")
    langs = [e[0] for e in entries]
    if len(set(langs)) != len(langs):
        raise CliError("duplicate language codes in manifest")
    return entries


def corpus_tokens(path: Path) -> np.ndarray:
    """Byte-level token ids for a corpus file (one token per byte)."""
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CliError(f"cannot read corpus: {exc}") from exc
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def sample_windows(
    ids: np.ndarray, window: int, n_samples: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """n_samples contiguous windows at offsets drawn without replacement."""
    n_starts = len(ids) - window + 1
    if n_starts < 1:
        raise CliError(f"corpus has {len(ids)} tokens, shorter than one {window}-token window")
    if n_samples > n_starts:
        raise CliError(f"cannot draw {n_samples} distinct windows from {n_starts} offsets")
    offsets = rng.choice(n_starts, size=n_samples, replace=False)
    return [ids[o : o + window] for o in offsets]


def consecutive_windows(ids: np.ndarray, window: int, limit: int) -> list[np.ndarray]:
    """Non-overlapping evaluation windows in corpus order (>= 2 tokens each)."""
    chunks = [ids[i : i + window] for i in range(0, len(ids), window)]
    chunks = [c for c in chunks if len(c) >= 2]
    if not chunks:
        raise CliError(f"corpus has {len(ids)} tokens, too short to evaluate")
    if limit > 0:
        chunks = chunks[:limit]
    return chunks


def load_model(path) -> tuple[Container, WeightStore]:
    container = load(path)
    return container, WeightStore.from_container(container)


def load_masks(path) -> MaskSet:
    return MaskSet.from_container(load(path))


# ------------------------------- calibrate --------------------------------- #


def run_calibration(
    store: WeightStore,
    entries: list[tuple[str, Path, int]],
    window: int,
    eps: float,
    seed: int,
) -> CalibStats:
    graph = store.graph
    stats = CalibStats(sites=graph.sites(), languages=[e[0] for e in entries], eps=eps)
    rng = np.random.default_rng(seed)
    for lang, path, n_samples in entries:
        ids = corpus_tokens(path)
        for ids_window in sample_windows(ids, window, n_samples, rng):
            _, captures = forward(graph, store, TokenBatch(ids=ids_window, language=lang), capture=True)
            for site_act in captures:
                stats.accumulate(site_act.site, lang, site_act, end_sample=True)
    return stats.finalize()


def cmd_calibrate(args) -> int:
    _, store = load_model(args.model)
    entries = parse_manifest(args.manifest)
    stats = run_calibration(store, entries, args.window, args.eps, args.seed)
    manifest_record = "\n".join(f"{lang} {path} {n}" for lang, path, n in entries)
    container = stats.to_container(
        extra_metadata={
            "seed": str(args.seed),
            "window": str(args.window),
            "manifest": manifest_record,
        }
    )
    save(container, args.out)
    total = sum(n for _, _, n in entries)
    print(f"calibrated {len(entries)} languages, {total} samples of {args.window} tokens")
    print(f"stats written to {args.out}")
    return 0


# --------------------------------- prune ----------------------------------- #


def run_prune(
    store: WeightStore,
    stats: CalibStats | None,
    crit: CriterionConfig,
    alloc: AllocConfig,
    grouping: str,
):
    """Plan, score, and mask; returns (plan, mask set, pruned weight store)."""
    graph = store.graph
    plan = build_plan(alloc, stats, graph.n_layers)
    scored = {}
    layer_of = {}
    for block, name, site in graph.prunable_matrices():
        scored[name] = score_matrix(
            store.tensors[name], crit, stats=stats, site=site, name=name, grouping=grouping
        )
        layer_of[name] = block
    masks = build_mask_set(scored, plan, layer_of, grouping=grouping)
    pruned = store.masked(masks.arrays())
    return plan, masks, pruned


def _plan_csv_rows(plan) -> list[list[str]]:
    rows = [["layer", "importance", "ratio"]]
    for n, r in enumerate(plan.ratios):
        imp = "" if plan.importance is None else repr(float(plan.importance[n]))
        rows.append([str(n), imp, repr(float(r))])
    return rows


def cmd_prune(args) -> int:
    container, store = load_model(args.model)
    crit = CriterionConfig(kind=args.criterion, lam=args.lam, eps=args.eps, alpha=args.alpha)
    alloc = AllocConfig(
        kind=args.alloc,
        ratio=args.ratio,
        gamma=args.gamma,
        owl_m=args.owl_m,
        cwl_block=args.cwl_block,
    )
    stats = None
    if crit.needs_stats or alloc.kind != "uniform":
        if not args.stats:
            raise CliError(f"criterion {crit.kind!r} / allocation {alloc.kind!r} need --stats")
        stats = CalibStats.from_container(load(args.stats))

    plan, masks, pruned = run_prune(store, stats, crit, alloc, args.grouping)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pruned_container = Container(metadata=dict(container.metadata))
    for name, arr in pruned.tensors.items():
        pruned_container.add(name, arr)
    save(pruned_container, out / "model.safetensors")
    provenance = {
        "criterion": crit.kind,
        "alloc": alloc.kind,
        "ratio": repr(alloc.ratio),
        "lambda": repr(crit.lam),
        "eps": repr(crit.eps),
        "gamma": repr(alloc.gamma),
        "alpha": repr(crit.alpha),
        "owl_m": repr(alloc.owl_m),
        "cwl_block": alloc.cwl_block,
        "grouping": args.grouping,
    }
    save(masks.to_container(extra_metadata=provenance), out / "masks.safetensors")

    report = verify(masks, plan)
    (out / "plan.txt").write_text(plan.table() + "\n", encoding="utf-8")
    with open(out / "plan.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(_plan_csv_rows(plan))
    (out / "report.txt").write_text(report + "\n", encoding="utf-8")

    print(plan.table())
    print()
    print(report)
    print(f"\npruned model written to {out / 'model.safetensors'}")
    return 0


# -------------------------------- eval-ppl --------------------------------- #


def run_eval(
    store: WeightStore,
    entries: list[tuple[str, Path, int]],
    window: int,
    masks: MaskSet | None = None,
) -> list[tuple[str, float]]:
    mask_arrays = masks.arrays() if masks is not None else None
    results = []
    for lang, path, limit in entries:
        batches = [
            TokenBatch(ids=ids, language=lang)
            for ids in consecutive_windows(corpus_tokens(path), window, limit)
        ]
        results.append((lang, perplexity(store.graph, store, batches, masks=mask_arrays)))
    return results


def _ppl_table(results: list[tuple[str, float]]) -> str:
    width = max(len("average"), max(len(lang) for lang, _ in results))
    lines = [f"{'language':<{width}}  perplexity"]
    for lang, ppl in results:
        lines.append(f"{lang:<{width}}  {ppl:12.6f}")
    average = sum(p for _, p in results) / len(results)
    lines.append(f"{'average':<{width}}  {average:12.6f}")
    return "\n".join(lines)


def _write_ppl_csv(path, results: list[tuple[str, float]]) -> None:
    average = sum(p for _, p in results) / len(results)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["language", "perplexity"])
        for lang, ppl in results:
            writer.writerow([lang, repr(ppl)])
        writer.writerow(["average", repr(average)])


def cmd_eval_ppl(args) -> int:
    _, store = load_model(args.model)
    entries = parse_manifest(args.manifest)
    masks = load_masks(args.masks) if args.masks else None
    results = run_eval(store, entries, args.window, masks=masks)
    print(_ppl_table(results))
    if args.out:
        _write_ppl_csv(args.out, results)
        print(f"csv written to {args.out}")
    return 0


# --------------------------------- inspect --------------------------------- #


def _inspect_one(path) -> None:
    container = load(path)
    kind = container.metadata.get("kind", "unknown")
    print(f"== {path} ({kind}, {len(container.tensors)} tensors)")
    for key in sorted(container.metadata):
        value = container.metadata[key]
        if "\n" in value:
            value = value.replace("\n", " | ")
        print(f"  {key} = {value}")

    if kind == "model":
        graph = ModelGraph.from_metadata(container.metadata)
        total = sum(int(np.prod(a.shape)) for a in container.tensors.values())
        print(f"  {graph.n_layers} blocks, d_model={graph.d_model}, {total} parameters")
    elif kind == "stats":
        stats = CalibStats.from_container(container)
        print(f"  sites: {len(stats.sites)}")
        for lang, count in zip(stats.languages, container.metadata["token_counts"].split(",")):
            print(f"  language {lang}: {count} tokens")
    elif kind == "masks":
        masks = MaskSet.from_container(container)
        if masks.plan is not None:
            print(masks.plan.table())
        print("  per-layer achieved sparsity:")
        for block, sparsity in masks.per_layer_sparsity().items():
            print(f"    layer {block}: {sparsity:.6f}")
    else:
        for name in sorted(container.tensors):
            print(f"  {name}: {list(container.tensors[name].shape)}")


def cmd_inspect(args) -> int:
    for path in args.paths:
        _inspect_one(path)
    return 0


# ---------------------------------- sweep ---------------------------------- #


def _parse_ratio_list(text: str) -> list[float]:
    try:
        ratios = [float(r) for r in text.split(",") if r.strip()]
    except ValueError as exc:
        raise CliError(f"bad --ratios list: {exc}") from exc
    if not ratios:
        raise CliError("empty --ratios list")
    return ratios


def cmd_sweep(args) -> int:
    container, store = load_model(args.model)
    entries = parse_manifest(args.manifest)
    rows: list[list[str]] = []

    if args.grid:
        calib_entries = parse_manifest(args.calib_manifest or args.manifest)
        header = ["lambda", "eps", "gamma", "cwl_block", "ratio", "language", "perplexity"]
        for eps in GRID_EPS:
            stats = run_calibration(store, calib_entries, args.window, eps, args.seed)
            for lam in GRID_LAMBDAS:
                for gamma in GRID_GAMMAS:
                    for block in CWL_BLOCKS:
                        crit = CriterionConfig(kind="m-wanda", lam=lam, eps=eps, alpha=args.alpha)
                        alloc = AllocConfig(
                            kind="cwl", ratio=args.ratio, gamma=gamma, cwl_block=block
                        )
                        _, _, pruned = run_prune(store, stats, crit, alloc, args.grouping)
                        for lang, ppl in run_eval(pruned, entries, args.window):
                            rows.append(
                                [repr(lam), repr(eps), repr(gamma), block,
                                 repr(args.ratio), lang, repr(ppl)]
                            )
                        print(f"grid point lambda={lam} eps={eps} gamma={gamma} block={block} done")
    else:
        stats = None
        crit = CriterionConfig(kind=args.criterion, lam=args.lam, eps=args.eps, alpha=args.alpha)
        if crit.needs_stats or args.alloc != "uniform":
            if not args.stats:
                raise CliError("sweep needs --stats for this criterion/allocation")
            stats = CalibStats.from_container(load(args.stats))
        header = ["ratio", "language", "perplexity"]
        for ratio in _parse_ratio_list(args.ratios):
            alloc = AllocConfig(
                kind=args.alloc,
                ratio=ratio,
                gamma=args.gamma,
                owl_m=args.owl_m,
                cwl_block=args.cwl_block,
            )
            _, _, pruned = run_prune(store, stats, crit, alloc, args.grouping)
            results = run_eval(pruned, entries, args.window)
            for lang, ppl in results:
                rows.append([repr(ratio), lang, repr(ppl)])
            average = sum(p for _, p in results) / len(results)
            rows.append([repr(ratio), "average", repr(average)])
            print(f"ratio {ratio}: average perplexity {average:.6f}")

    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"sweep csv written to {args.out}")
    return 0


# ----------------------------- parser plumbing ----------------------------- #


def _add_criterion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--criterion", choices=CRITERIA, default="m-wanda")
    p.add_argument("--lambda", dest="lam", type=float, default=0.2,
                   help="scale of the cross-language variance term")
    p.add_argument("--eps", type=float, default=5e-5,
                   help="activation-probability threshold (0 disables)")
    p.add_argument("--alpha", type=float, default=0.5,
                   help="input-norm exponent for ria/m-ria")
    p.add_argument("--grouping", choices=GROUPINGS, default="per-output-row")


def _add_alloc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alloc", choices=ALLOCATIONS, default="cwl")
    p.add_argument("--ratio", type=float, default=0.5, help="global sparsity ratio R")
    p.add_argument("--gamma", type=float, default=0.04,
                   help="half-width of the per-layer ratio interval")
    p.add_argument("--owl-m", dest="owl_m", type=float, default=5.0,
                   help="outlier multiplier for owl")
    p.add_argument("--cwl-block", dest="cwl_block", choices=CWL_BLOCKS, default="attn")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="polyprune",
        description="one-shot multilingual-aware pruning for transformer LMs",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def new(name: str, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="flat key=value file; flags override it")
        registry[name] = p
        return p

    p = new("calibrate", help="collect per-language activation statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=5e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.set_defaults(func=cmd_calibrate)

    p = new("prune", help="score, mask, and write the pruned model")
    p.add_argument("--model", required=True)
    p.add_argument("--stats")
    p.add_argument("--out", required=True)
    _add_criterion_flags(p)
    _add_alloc_flags(p)
    p.set_defaults(func=cmd_prune)

    p = new("eval-ppl", help="per-language perplexity table")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True,
                   help="eval corpora; the count field caps windows (0 = all)")
    p.add_argument("--masks", help="optional mask container applied on the fly")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--out", help="optional csv output path")
    p.set_defaults(func=cmd_eval_ppl)

    p = new("inspect", help="dump container metadata and summaries")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_inspect)

    p = new("sweep", help="sparsity-ratio sweep or hyperparameter grid")
    p.add_argument("--model", required=True)
    p.add_argument("--stats")
    p.add_argument("--manifest", required=True, help="evaluation corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default=",".join(str(r) for r in DEFAULT_SWEEP_RATIOS))
    p.add_argument("--grid", action="store_true",
                   help="enumerate the m-wanda hyperparameter grid instead of ratios")
    p.add_argument("--calib-manifest", dest="calib_manifest",
                   help="calibration manifest for --grid (defaults to --manifest)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    _add_criterion_flags(p)
    _add_alloc_flags(p)
    p.set_defaults(func=cmd_sweep)

    return parser, registry


def _read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    by_flag = {}
    for action in sub._actions:
        for option in action.option_strings:
            if option.startswith("--"):
                by_flag[option[2:]] = action
    defaults = {}
    for key, raw in values.items():
        action = by_flag.get(key)
        if action is None:
            raise CliError(f"config key {key!r} is not a flag of this command")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = raw.lower() in ("1", "true", "yes")
        elif action.type is not None:
            defaults[action.dest] = action.type(raw)
        else:
            defaults[action.dest] = raw
        if action.choices and defaults[action.dest] not in action.choices:
            raise CliError(f"config key {key!r}: invalid value {raw!r}")
        action.required = False
    sub.set_defaults(**defaults)


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser, registry = build_parser()
    try:
        if argv and argv[0] in registry and "--config" in argv:
            config_path = argv[argv.index("--config") + 1]
            _apply_config(registry[argv[0]], _read_config_file(config_path))
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, ContainerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
