"""Minimal decoder-only transformer (Llama-style) used for calibration and eval.

The model is defined purely by a weight container plus metadata: rotary
attention (base 10000 unless overridden), RMS pre-normalization, and a
SiLU-gated MLP. Forward passes run in numpy with f64 activations over the
stored f32 weights, and can capture the input activations of the four
linear-sublayer sites of every block:

    attn_in  -> shared input of q/k/v projections
    o_in     -> input of the output projection
    mlp_in   -> shared input of gate/up projections
    down_in  -> input of the down projection
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import Container, ContainerError

SITE_KINDS = ("attn_in", "o_in", "mlp_in", "down_in")

# which site feeds each prunable matrix of a block
_MATRIX_SITES = {
    "attn.q": "attn_in",
    "attn.k": "attn_in",
    "attn.v": "attn_in",
    "attn.o": "o_in",
    "mlp.gate": "mlp_in",
    "mlp.up": "mlp_in",
    "mlp.down": "down_in",
}

_META_INT_KEYS = ("vocab_size", "d_model", "n_layers", "n_heads", "d_head", "d_ff")


@dataclass(frozen=True)
class ModelGraph:
    """Topology of the decoder: dimensions plus the weight naming scheme."""

    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_head: int
    d_ff: int
    tie_embeddings: bool = True
    rms_eps: float = 1e-5
    rope_base: float = 10000.0
    max_seq_len: int = 2048

    def __post_init__(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}"
            )
        for name in _META_INT_KEYS:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_metadata(cls, metadata: dict[str, str]) -> "ModelGraph":
        try:
            kwargs = {k: int(metadata[k]) for k in _META_INT_KEYS}
        except KeyError as exc:
            raise ContainerError(f"model metadata missing key {exc.args[0]!r}") from exc
        kwargs["tie_embeddings"] = metadata.get("tie_embeddings", "true") == "true"
        kwargs["rms_eps"] = float(metadata.get("rms_eps", "1e-5"))
        kwargs["rope_base"] = float(metadata.get("rope_base", "10000"))
        return cls(**kwargs)

    def to_metadata(self) -> dict[str, str]:
        meta = {k: str(getattr(self, k)) for k in _META_INT_KEYS}
        meta["tie_embeddings"] = "true" if self.tie_embeddings else "false"
        meta["rms_eps"] = repr(self.rms_eps)
        meta["rope_base"] = repr(self.rope_base)
        return meta

    # -- naming scheme -------------------------------------------------

    def block_weight(self, block: int, matrix: str) -> str:
        return f"blocks.{block}.{matrix}.weight"

    def site_id(self, block: int, kind: str) -> str:
        if kind not in SITE_KINDS:
            raise ValueError(f"unknown site kind {kind!r}")
        return f"blocks.{block}.{kind}"

    def sites(self) -> dict[str, int]:
        """All capture sites with their input feature counts."""
        dims = {"attn_in": self.d_model, "o_in": self.d_model,
                "mlp_in": self.d_model, "down_in": self.d_ff}
        return {
            self.site_id(i, kind): dims[kind]
            for i in range(self.n_layers)
            for kind in SITE_KINDS
        }

    def prunable_matrices(self) -> list[tuple[int, str, str]]:
        """(block index, weight name, site id) for every prunable 2-D matrix."""
        out = []
        for i in range(self.n_layers):
            for matrix, kind in _MATRIX_SITES.items():
                out.append((i, self.block_weight(i, matrix), self.site_id(i, kind)))
        return out

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {"embed.weight": (self.vocab_size, self.d_model)}
        for i in range(self.n_layers):
            shapes[f"blocks.{i}.attn_norm.weight"] = (self.d_model,)
            shapes[f"blocks.{i}.mlp_norm.weight"] = (self.d_model,)
            for matrix in ("attn.q", "attn.k", "attn.v", "attn.o"):
                shapes[self.block_weight(i, matrix)] = (self.d_model, self.d_model)
            shapes[self.block_weight(i, "mlp.gate")] = (self.d_ff, self.d_model)
            shapes[self.block_weight(i, "mlp.up")] = (self.d_ff, self.d_model)
            shapes[self.block_weight(i, "mlp.down")] = (self.d_model, self.d_ff)
        shapes["final_norm.weight"] = (self.d_model,)
        if not self.tie_embeddings:
            shapes["lm_head.weight"] = (self.vocab_size, self.d_model)
        return shapes


@dataclass
class WeightStore:
    """A model graph bound to its named f32 weight matrices."""

    graph: ModelGraph
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        for name, shape in self.graph.expected_shapes().items():
            if name not in self.tensors:
                raise ValueError(f"missing weight tensor {name!r}")
            got = self.tensors[name].shape
            if tuple(got) != shape:
                raise ValueError(f"tensor {name!r} has shape {got}, expected {shape}")

    @classmethod
    def from_container(cls, container: Container) -> "WeightStore":
        graph = ModelGraph.from_metadata(container.metadata)
        return cls(graph=graph, tensors=dict(container.tensors))

    def to_container(self) -> Container:
        meta = self.graph.to_metadata()
        meta["kind"] = "model"
        container = Container(metadata=meta)
        for name, arr in self.tensors.items():
            container.add(name, arr)
        return container

    def masked(self, masks) -> "WeightStore":
        """Copy of the store with masked entries set to exact zero."""
        tensors = dict(self.tensors)
        for name, mask in masks.items():
            if name not in tensors:
                raise ValueError(f"mask for unknown tensor {name!r}")
            w = tensors[name]
            if mask.shape != w.shape:
                raise ValueError(f"mask shape {mask.shape} != weight shape {w.shape} for {name!r}")
            tensors[name] = w * mask.astype(w.dtype)
        return WeightStore(graph=self.graph, tensors=tensors)


@dataclass
class TokenBatch:
    """One token sequence with its language tag."""

    ids: np.ndarray
    language: str = ""

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class SiteActivations:
    """Raw (tokens x features) f64 input activations captured at one site."""

    site: str
    matrix: np.ndarray = field(repr=False)


def byte_tokenize(text: str, language: str = "") -> TokenBatch:
    """One token per UTF-8 byte; vocab size 256, deterministic."""
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    return TokenBatch(ids=ids, language=language)


def _rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    variance = np.mean(np.square(x), axis=-1, keepdims=True)
    return x / np.sqrt(variance + eps) * gain.astype(np.float64)


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _rope_tables(seq_len: int, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    # half-split convention: freqs repeated across both halves of the head dim
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def forward(
    graph: ModelGraph,
    weights: WeightStore,
    batch: TokenBatch,
    masks=None,
    capture: bool = False,
) -> tuple[np.ndarray, list[SiteActivations]]:
    """Causal forward pass; returns (logits [T x vocab], site captures).

    ``masks`` maps weight names to 0/1 arrays; masked weights act as exact
    zeros. Captures are returned for all 4 * n_layers sites when ``capture``
    is set, in block order.
    """
    ids = batch.ids
    if len(ids) == 0:
        raise ValueError("empty token sequence")
    if len(ids) > graph.max_seq_len:
        raise ValueError(f"sequence length {len(ids)} exceeds maximum {graph.max_seq_len}")
    if ids.min() < 0 or ids.max() >= graph.vocab_size:
        raise ValueError("token id out of range")

    def mat(name: str) -> np.ndarray:
        w = weights.tensors[name]
        if masks is not None and name in masks:
            m = masks[name]
            if m.shape != w.shape:
                raise ValueError(f"mask shape {m.shape} != weight shape {w.shape} for {name!r}")
            w = w * m.astype(w.dtype)
        return w

    captures: list[SiteActivations] = []

    def grab(block: int, kind: str, x: np.ndarray) -> None:
        if capture:
            captures.append(SiteActivations(site=graph.site_id(block, kind), matrix=x.copy()))

    T = len(ids)
    H, D = graph.n_heads, graph.d_head
    cos, sin = _rope_tables(T, D, graph.rope_base)
    causal = np.triu(np.full((T, T), -np.inf), k=1)

    x = weights.tensors["embed.weight"][ids].astype(np.float64)

    for i in range(graph.n_layers):
        normed = _rms_norm(x, weights.tensors[f"blocks.{i}.attn_norm.weight"], graph.rms_eps)
        grab(i, "attn_in", normed)

        q = normed @ mat(graph.block_weight(i, "attn.q")).T
        k = normed @ mat(graph.block_weight(i, "attn.k")).T
        v = normed @ mat(graph.block_weight(i, "attn.v")).T

        q = q.reshape(T, H, D).transpose(1, 0, 2)
        k = k.reshape(T, H, D).transpose(1, 0, 2)
        v = v.reshape(T, H, D).transpose(1, 0, 2)
        q = q * cos + _rotate_half(q) * sin
        k = k * cos + _rotate_half(k) * sin

        scores = q @ k.transpose(0, 2, 1) / np.sqrt(D) + causal
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        mixed = (probs @ v).transpose(1, 0, 2).reshape(T, H * D)

        grab(i, "o_in", mixed)
        x = x + mixed @ mat(graph.block_weight(i, "attn.o")).T

        normed = _rms_norm(x, weights.tensors[f"blocks.{i}.mlp_norm.weight"], graph.rms_eps)
        grab(i, "mlp_in", normed)
        gate = _silu(normed @ mat(graph.block_weight(i, "mlp.gate")).T)
        up = normed @ mat(graph.block_weight(i, "mlp.up")).T
        hidden = gate * up
        grab(i, "down_in", hidden)
        x = x + hidden @ mat(graph.block_weight(i, "mlp.down")).T

    x = _rms_norm(x, weights.tensors["final_norm.weight"], graph.rms_eps)
    head = "embed.weight" if graph.tie_embeddings else "lm_head.weight"
    logits = x @ weights.tensors[head].astype(np.float64).T
    return logits, captures


def sequence_nll(logits: np.ndarray, ids: np.ndarray) -> tuple[float, int]:
    """Summed next-token negative log-likelihood and predicted-position count."""
    if len(ids) < 2:
        raise ValueError("sequence too short for next-token prediction (length < 2)")
    pred = logits[:-1]
    targets = np.asarray(ids[1:], dtype=np.int64)
    m = pred.max(axis=-1, keepdims=True)
    logsumexp = (m + np.log(np.sum(np.exp(pred - m), axis=-1, keepdims=True))).reshape(-1)
    nll = logsumexp - pred[np.arange(len(targets)), targets]
    return float(nll.sum()), len(targets)


def perplexity(graph: ModelGraph, weights: WeightStore, corpus, masks=None) -> float:
    """exp of the mean next-token NLL pooled over every predicted position."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    total_nll = 0.0
    total_tokens = 0
    for batch in corpus:
        if len(batch) < 2:
            raise ValueError("every sequence must have length >= 2")
        logits, _ = forward(graph, weights, batch, masks=masks)
        nll, count = sequence_nll(logits, batch.ids)
        total_nll += nll
        total_tokens += count
    return float(np.exp(total_nll / total_tokens))
