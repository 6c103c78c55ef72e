import numpy as np
import pytest
import torch

from vlws.ingest import catalog_from_records, merge_catalogs
from vlws.synthetic import synthetic_records


def _write_tiny_clip(d):
    """A randomly initialised CLIP small enough to build in a second, saved in HF layout."""
    from transformers import CLIPConfig, CLIPModel, CLIPTokenizer
    from transformers.convert_slow_tokenizer import bytes_to_unicode

    chars = list(bytes_to_unicode().values())
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for ch in chars + [c + "</w>" for c in chars]:
        vocab.setdefault(ch, len(vocab))
    CLIPTokenizer(vocab=vocab, merges=[]).save_pretrained(d)
    cfg = CLIPConfig(
        text_config=dict(
            vocab_size=len(vocab), hidden_size=32, intermediate_size=64, num_hidden_layers=4,
            num_attention_heads=2, max_position_embeddings=77, eos_token_id=1, bos_token_id=0, pad_token_id=1,
        ),
        vision_config=dict(
            hidden_size=32, intermediate_size=64, num_hidden_layers=2, num_attention_heads=2, image_size=224, patch_size=32
        ),
        projection_dim=512,
    )
    torch.manual_seed(0)
    CLIPModel(cfg).save_pretrained(d)
    return d


@pytest.fixture(scope="session")
def tiny_clip_dir(tmp_path_factory):
    pytest.importorskip("transformers")
    return _write_tiny_clip(tmp_path_factory.mktemp("tiny_clip"))


@pytest.fixture(scope="session")
def tiny_catalog():
    """Two synthetic datasets with train and val splits, 32x32 tiles."""
    parts = []
    for k, ds in enumerate(("UAV Soybean", "ROSE")):
        parts.append(catalog_from_records(synthetic_records(6, 32, ds, seed=k, style=k), "train"))
        parts.append(catalog_from_records(synthetic_records(3, 32, ds, seed=100 + k, style=k), "val"))
    return merge_catalogs(*parts)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
