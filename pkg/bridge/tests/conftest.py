import json

import numpy as np
import pytest
import torch
from transformers import LlamaConfig, LlamaForCausalLM

LANGS = ("aa", "bb", "cc")
_ALPHABETS = {"aa": "abcdefgh ", "bb": "ijklmnop ", "cc": "qrstuvwx "}


def tiny_config(**overrides) -> LlamaConfig:
    kwargs = dict(
        vocab_size=256,
        hidden_size=64,
        intermediate_size=128,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=4,
        max_position_embeddings=2048,
        rms_norm_eps=1e-5,
        rope_theta=10000.0,
        tie_word_embeddings=False,
    )
    kwargs.update(overrides)
    return LlamaConfig(**kwargs)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    torch.manual_seed(7)
    model = LlamaForCausalLM(tiny_config())
    path = tmp_path_factory.mktemp("ckpt") / "tiny-llama"
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    rng = np.random.default_rng(13)
    paths = {}
    for lang in LANGS:
        alphabet = np.frombuffer(_ALPHABETS[lang].encode(), dtype=np.uint8)
        data = alphabet[rng.integers(0, len(alphabet), size=2048)]
        path = root / f"{lang}.txt"
        path.write_bytes(data.tobytes())
        paths[lang] = str(path)
    return paths


def write_bridge_manifest(path, **fields) -> str:
    path.write_text(json.dumps(fields), encoding="utf-8")
    return str(path)
