import numpy as np
import pytest

from polyprune import CalibStats, ModelGraph, WeightStore, save

TOY_LANGS = ("aa", "bb", "cc")
# disjoint byte alphabets so the three corpora behave like distinct languages
_ALPHABETS = {
    "aa": "abcdefgh ",
    "bb": "ijklmnop ",
    "cc": "qrstuvwx ",
}


def make_toy_graph(n_layers: int = 2) -> ModelGraph:
    return ModelGraph(
        vocab_size=256, d_model=16, n_layers=n_layers, n_heads=2, d_head=8, d_ff=32
    )


def make_toy_store(seed: int = 0, n_layers: int = 2) -> WeightStore:
    graph = make_toy_graph(n_layers)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in graph.expected_shapes().items():
        scale = 1.0 if name.endswith("norm.weight") else 0.6 / np.sqrt(shape[-1])
        if name.endswith("norm.weight"):
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return WeightStore(graph=graph, tensors=tensors)


def write_toy_corpora(root, seed: int = 7, size: int = 4096, prefix: str = "corpus") -> dict[str, str]:
    rng = np.random.default_rng(seed)
    paths = {}
    for lang in TOY_LANGS:
        alphabet = np.frombuffer(_ALPHABETS[lang].encode(), dtype=np.uint8)
        data = alphabet[rng.integers(0, len(alphabet), size=size)]
        path = root / f"{prefix}_{lang}.txt"
        path.write_bytes(data.tobytes())
        paths[lang] = str(path)
    return paths


def write_manifest(root, paths: dict[str, str], n_samples: int, name: str = "manifest.txt") -> str:
    path = root / name
    path.write_text(
        "".join(f"{lang} {paths[lang]} {n_samples}\n" for lang in paths), encoding="utf-8"
    )
    return str(path)


def synthetic_stats(
    graph: ModelGraph,
    seed: int = 0,
    languages=TOY_LANGS,
    n_samples: int = 4,
    tokens: int = 8,
    eps: float = 5e-5,
) -> tuple[CalibStats, dict[str, dict[str, list[np.ndarray]]]]:
    """Random activation streams accumulated into stats; raw samples returned
    per site for batch-recompute oracles."""
    rng = np.random.default_rng(seed)
    stats = CalibStats(sites=graph.sites(), languages=list(languages), eps=eps)
    raw: dict[str, dict[str, list[np.ndarray]]] = {}
    for site, dim in graph.sites().items():
        raw[site] = {}
        for lang in languages:
            samples = [rng.standard_normal((tokens, dim)) * rng.uniform(0.5, 2.0)
                       for _ in range(n_samples)]
            raw[site][lang] = samples
            for sample in samples:
                stats.accumulate(site, lang, sample, end_sample=True)
    return stats.finalize(), raw


@pytest.fixture
def toy_store():
    return make_toy_store()


@pytest.fixture
def toy_model_path(tmp_path, toy_store):
    path = tmp_path / "toy.safetensors"
    save(toy_store.to_container(), path)
    return str(path)


@pytest.fixture
def toy_corpora(tmp_path):
    return write_toy_corpora(tmp_path)


@pytest.fixture
def calib_manifest(tmp_path, toy_corpora):
    return write_manifest(tmp_path, toy_corpora, n_samples=4, name="calib_manifest.txt")


@pytest.fixture
def eval_manifest(tmp_path):
    # held-out corpora on separate paths, disjoint from calibration data
    paths = write_toy_corpora(tmp_path, seed=23, size=2048, prefix="eval")
    return write_manifest(tmp_path, paths, n_samples=0, name="eval_manifest.txt")
