"""Export Llama-family checkpoints into the polyprune container format and
capture real activation statistics through forward hooks.

The bridge never scores or masks anything; it only emits the two container
layouts the pruning toolkit consumes:

  * a model container: f32 weights under the ``blocks.{i}.*`` naming scheme
    plus decimal-string graph metadata,
  * a stats container: ``<site>/<lang>/{sum_sq,mean,sample_means,
    count_above_eps,sample_token_counts}`` tensors.

Calibration windows replicate the toolkit's documented sampling contract:
``numpy.random.default_rng(seed)`` drawing
``rng.choice(n_starts, size=n_samples, replace=False)`` once per manifest
language, in order, over byte-level token ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import save_file
from transformers import AutoModelForCausalLM

SITE_KINDS = ("attn_in", "o_in", "mlp_in", "down_in")

# hooked module per site kind, relative to model.model.layers[i]
_SITE_MODULES = {
    "attn_in": "self_attn.q_proj",  # q/k/v share this input
    "o_in": "self_attn.o_proj",
    "mlp_in": "mlp.gate_proj",  # gate/up share this input
    "down_in": "mlp.down_proj",
}

_BLOCK_TENSOR_MAP = {
    "attn_norm.weight": "input_layernorm.weight",
    "attn.q.weight": "self_attn.q_proj.weight",
    "attn.k.weight": "self_attn.k_proj.weight",
    "attn.v.weight": "self_attn.v_proj.weight",
    "attn.o.weight": "self_attn.o_proj.weight",
    "mlp_norm.weight": "post_attention_layernorm.weight",
    "mlp.gate.weight": "mlp.gate_proj.weight",
    "mlp.up.weight": "mlp.up_proj.weight",
    "mlp.down.weight": "mlp.down_proj.weight",
}


class BridgeError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    checkpoint: str
    weights_out: str | None = None
    stats_out: str | None = None
    languages: list[tuple[str, str, int]] = None
    window: int = 2048
    eps: float = 5e-5
    seed: int = 0

    @classmethod
    def from_file(cls, path) -> "ExportManifest":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BridgeError(f"cannot read manifest: {exc}") from exc
        if "checkpoint" not in raw:
            raise BridgeError("manifest is missing 'checkpoint'")
        languages = []
        for entry in raw.get("languages", []):
            try:
                languages.append((entry["lang"], entry["path"], int(entry["n_samples"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise BridgeError(f"bad language entry {entry!r}") from exc
        return cls(
            checkpoint=raw["checkpoint"],
            weights_out=raw.get("weights_out"),
            stats_out=raw.get("stats_out"),
            languages=languages,
            window=int(raw.get("window", 2048)),
            eps=float(raw.get("eps", 5e-5)),
            seed=int(raw.get("seed", 0)),
        )


def _rope_base(config) -> float:
    rope = getattr(config, "rope_scaling", None) or {}
    if isinstance(rope, dict):
        if rope.get("rope_type", "default") != "default":
            raise BridgeError(f"unsupported rope scaling {rope.get('rope_type')!r}")
        if "rope_theta" in rope:
            return float(rope["rope_theta"])
    return float(getattr(config, "rope_theta", 10000.0))


def validate_architecture(config) -> None:
    if getattr(config, "model_type", None) != "llama":
        raise BridgeError(f"unsupported architecture {getattr(config, 'model_type', None)!r}")
    heads = config.num_attention_heads
    kv_heads = getattr(config, "num_key_value_heads", heads)
    if kv_heads != heads:
        raise BridgeError(
            f"grouped-query attention ({kv_heads} kv heads vs {heads} heads) is not supported"
        )
    if config.hidden_size % heads != 0:
        raise BridgeError("hidden size is not a multiple of the head count")
    head_dim = getattr(config, "head_dim", None)
    if head_dim not in (None, config.hidden_size // heads):
        raise BridgeError(f"non-standard head_dim {head_dim}")
    if getattr(config, "attention_bias", False) or getattr(config, "mlp_bias", False):
        raise BridgeError("biased projections are not supported")
    _rope_base(config)


def graph_metadata(config) -> dict[str, str]:
    return {
        "vocab_size": str(config.vocab_size),
        "d_model": str(config.hidden_size),
        "n_layers": str(config.num_hidden_layers),
        "n_heads": str(config.num_attention_heads),
        "d_head": str(config.hidden_size // config.num_attention_heads),
        "d_ff": str(config.intermediate_size),
        "tie_embeddings": "true" if config.tie_word_embeddings else "false",
        "rms_eps": repr(float(config.rms_norm_eps)),
        "rope_base": repr(_rope_base(config)),
    }


def build_tensor_map(state_dict: dict, config) -> dict[str, np.ndarray]:
    """HF state dict -> container names; errors list every absent source key."""
    wanted: dict[str, str] = {"embed.weight": "model.embed_tokens.weight",
                              "final_norm.weight": "model.norm.weight"}
    for i in range(config.num_hidden_layers):
        for ours, theirs in _BLOCK_TENSOR_MAP.items():
            wanted[f"blocks.{i}.{ours}"] = f"model.layers.{i}.{theirs}"
    if not config.tie_word_embeddings:
        wanted["lm_head.weight"] = "lm_head.weight"

    missing = sorted(src for src in wanted.values() if src not in state_dict)
    if missing:
        raise BridgeError(f"checkpoint is missing sublayer tensors: {', '.join(missing)}")

    tensors = {}
    for ours, theirs in wanted.items():
        tensors[ours] = state_dict[theirs].detach().float().numpy().astype(np.float32)
    return tensors


def _load_model(checkpoint: str):
    try:
        model = AutoModelForCausalLM.from_pretrained(checkpoint)
    except Exception as exc:  # transformers raises a zoo of types here
        raise BridgeError(f"cannot load checkpoint {checkpoint!r}: {exc}") from exc
    validate_architecture(model.config)
    return model.float().eval()


def export_weights(manifest: ExportManifest) -> str:
    """Write the checkpoint as an f32 model container; returns the path."""
    if not manifest.weights_out:
        raise BridgeError("manifest is missing 'weights_out'")
    model = _load_model(manifest.checkpoint)
    tensors = build_tensor_map(model.state_dict(), model.config)
    metadata = graph_metadata(model.config)
    metadata["kind"] = "model"
    metadata["format_version"] = "1"
    metadata["source_checkpoint"] = str(manifest.checkpoint)
    save_file(tensors, manifest.weights_out, metadata=metadata)
    return manifest.weights_out


class _SiteAccumulator:
    def __init__(self, n_features: int, eps: float):
        self.eps = eps
        self.token_count = 0
        self.sum_sq = np.zeros(n_features, dtype=np.float64)
        self.sum = np.zeros(n_features, dtype=np.float64)
        self.above = np.zeros(n_features, dtype=np.int64)
        self.sample_means: list[np.ndarray] = []
        self.sample_counts: list[int] = []
        self._window_sum = np.zeros(n_features, dtype=np.float64)
        self._window_count = 0

    def add(self, x: np.ndarray) -> None:
        self.token_count += x.shape[0]
        self.sum_sq += np.square(x).sum(axis=0)
        self.sum += x.sum(axis=0)
        self.above += (np.abs(x) > self.eps).sum(axis=0)
        self._window_sum += x.sum(axis=0)
        self._window_count += x.shape[0]

    def end_sample(self) -> None:
        if self._window_count == 0:
            raise BridgeError("forward pass captured no tokens at a hooked site")
        self.sample_means.append(self._window_sum / self._window_count)
        self.sample_counts.append(self._window_count)
        self._window_sum = np.zeros_like(self._window_sum)
        self._window_count = 0


def _byte_tokens(path: str) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise BridgeError(f"cannot read corpus: {exc}") from exc
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def _sample_windows(ids: np.ndarray, window: int, n: int, rng: np.random.Generator):
    n_starts = len(ids) - window + 1
    if n_starts < 1:
        raise BridgeError(f"corpus has {len(ids)} tokens, shorter than one {window}-token window")
    if n > n_starts:
        raise BridgeError(f"cannot draw {n} distinct windows from {n_starts} offsets")
    offsets = rng.choice(n_starts, size=n, replace=False)
    return [ids[o : o + window] for o in offsets]


def capture_stats(manifest: ExportManifest) -> str:
    """Run hooked calibration forwards and write the stats container."""
    if not manifest.stats_out:
        raise BridgeError("manifest is missing 'stats_out'")
    if not manifest.languages:
        raise BridgeError("manifest lists no languages")
    langs = [lang for lang, _, _ in manifest.languages]
    if len(set(langs)) != len(langs):
        raise BridgeError("duplicate language codes in manifest")
    if manifest.eps < 0:
        raise BridgeError("eps must be nonnegative")

    model = _load_model(manifest.checkpoint)
    config = model.config
    if config.vocab_size < 256:
        raise BridgeError("byte-level calibration needs vocab_size >= 256")

    dims = {"attn_in": config.hidden_size, "o_in": config.hidden_size,
            "mlp_in": config.hidden_size, "down_in": config.intermediate_size}
    accumulators: dict[str, dict[str, _SiteAccumulator]] = {
        f"blocks.{i}.{kind}": {
            lang: _SiteAccumulator(dims[kind], manifest.eps) for lang in langs
        }
        for i in range(config.num_hidden_layers)
        for kind in SITE_KINDS
    }

    current_lang = [""]
    hooks = []

    def make_hook(site: str):
        def hook(_module, args):
            x = args[0].detach().to(torch.float64).reshape(-1, args[0].shape[-1]).numpy()
            accumulators[site][current_lang[0]].add(x)
        return hook

    for i, layer in enumerate(model.model.layers):
        for kind, attr in _SITE_MODULES.items():
            module = layer
            for part in attr.split("."):
                module = getattr(module, part)
            hooks.append(module.register_forward_pre_hook(make_hook(f"blocks.{i}.{kind}")))

    rng = np.random.default_rng(manifest.seed)
    try:
        with torch.no_grad():
            for lang, path, n_samples in manifest.languages:
                current_lang[0] = lang
                ids = _byte_tokens(path)
                for window_ids in _sample_windows(ids, manifest.window, n_samples, rng):
                    model(input_ids=torch.from_numpy(window_ids)[None], use_cache=False)
                    for by_lang in accumulators.values():
                        by_lang[lang].end_sample()
    finally:
        for hook in hooks:
            hook.remove()

    token_counts = None
    tensors: dict[str, np.ndarray] = {}
    for site, by_lang in accumulators.items():
        counts = [by_lang[lang].token_count for lang in langs]
        if token_counts is None:
            token_counts = counts
        elif counts != token_counts:
            raise BridgeError("token counts differ across sites")
        for lang in langs:
            acc = by_lang[lang]
            if acc.token_count == 0:
                raise BridgeError(f"no tokens captured for language {lang!r}")
            prefix = f"{site}/{lang}"
            tensors[f"{prefix}/sum_sq"] = acc.sum_sq.astype(np.float32)
            tensors[f"{prefix}/mean"] = (acc.sum / acc.token_count).astype(np.float32)
            tensors[f"{prefix}/sample_means"] = np.stack(acc.sample_means).astype(np.float32)
            tensors[f"{prefix}/count_above_eps"] = acc.above.astype(np.float32)
            tensors[f"{prefix}/sample_token_counts"] = np.asarray(
                acc.sample_counts, dtype=np.float32
            )

    metadata = {
        "kind": "stats",
        "format_version": "1",
        "languages": ",".join(langs),
        "eps": repr(float(manifest.eps)),
        "token_counts": ",".join(str(c) for c in token_counts),
        "seed": str(manifest.seed),
        "window": str(manifest.window),
        "manifest": "\n".join(f"{lang} {path} {n}" for lang, path, n in manifest.languages),
        "source_checkpoint": str(manifest.checkpoint),
    }
    save_file(tensors, manifest.stats_out, metadata=metadata)
    return manifest.stats_out
