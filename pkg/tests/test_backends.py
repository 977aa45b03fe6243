import numpy as np
import pytest

from promptrel.backends import (
    FileBackend,
    InferenceBackend,
    MlmBackend,
    StubBackend,
    make_backend,
)
from promptrel.encoder import EmbeddingMatrix, save_cache
from promptrel.errors import BackendError
from promptrel.prompt import RenderedPrompt, TemplateId


def prompt_of(text, iid="a#0"):
    return RenderedPrompt(
        text=text,
        mask_hint=text.index("[MASK]"),
        source_instance_id=iid,
        template_id=TemplateId.P,
    )


# ---------------------------------------------------------------------------
# stub backend, hash mode
# ---------------------------------------------------------------------------

def test_hash_mode_identical_text_identical_rows():
    be = StubBackend()
    a = be.encode_prompt(prompt_of("[CLS] x [MASK] y. [SEP]", "a#0"))
    b = be.encode_prompt(prompt_of("[CLS] x [MASK] y. [SEP]", "b#7"))
    assert np.array_equal(a, b)


def test_hash_mode_text_change_moves_row():
    be = StubBackend()
    a = be.encode_prompt(prompt_of("[CLS] x [MASK] y. [SEP]"))
    b = be.encode_prompt(prompt_of("[CLS] x [MASK] z. [SEP]"))
    assert not np.array_equal(a, b)


def test_hash_mode_rows_are_unit_float32():
    be = StubBackend(dim=32)
    v = be.encode_prompt(prompt_of("[CLS] a [MASK] b. [SEP]"))
    assert v.shape == (32,)
    assert v.dtype == np.float32
    assert abs(float(np.linalg.norm(v)) - 1.0) < 1e-6
    assert be.hidden_dim == 32


def test_stub_tokenize_mask_position():
    be = StubBackend()
    ids, pos = be.tokenize("[CLS] a b [MASK] c. [SEP]")
    assert len(ids) == 6
    assert pos == 3
    with pytest.raises(BackendError, match="mask placeholder"):
        be.tokenize("[CLS] a b c. [SEP]")


def test_stub_flags_and_validation():
    be = StubBackend()
    assert isinstance(be, MlmBackend)
    assert be.supports_mlm_head
    assert be.concurrent_safe
    with pytest.raises(BackendError, match="unknown stub mode"):
        StubBackend(mode="other")
    with pytest.raises(BackendError, match="positive"):
        StubBackend(dim=0)


def test_stub_top_tokens_contract():
    be = StubBackend()
    p = prompt_of("[CLS] a [MASK] b. [SEP]")
    pairs = be.top_tokens_for_prompt(p, 5)
    assert len(pairs) == 5
    scores = [s for _, s in pairs]
    assert scores == sorted(scores, reverse=True)
    assert pairs == be.top_tokens_for_prompt(p, 5)
    with pytest.raises(BackendError, match="exceeds vocabulary"):
        be.top_tokens_for_prompt(p, 99)


# ---------------------------------------------------------------------------
# stub backend, gold mode
# ---------------------------------------------------------------------------

def test_gold_mode_clusters_by_id_prefix():
    be = StubBackend(mode="gold", noise_scale=0.05)
    same1 = be.encode_prompt(prompt_of("[CLS] p [MASK] q. [SEP]", "rel_a#0"))
    same2 = be.encode_prompt(prompt_of("[CLS] r [MASK] s. [SEP]", "rel_a#1"))
    other = be.encode_prompt(prompt_of("[CLS] p [MASK] q. [SEP]", "rel_b#0"))
    assert np.linalg.norm(same1 - same2) <= 0.05 * 2 + 1e-6
    assert np.linalg.norm(same1 - other) > 1.0  # distinct unit directions
    # text is irrelevant in gold mode; provenance decides everything
    assert not np.array_equal(same1, same2)  # per-instance noise differs


def test_gold_mode_zero_noise_collapses_prefix():
    be = StubBackend(mode="gold", noise_scale=0.0)
    a = be.encode_prompt(prompt_of("[CLS] x [MASK] y. [SEP]", "rel#0"))
    b = be.encode_prompt(prompt_of("[CLS] x [MASK] y. [SEP]", "rel#1"))
    assert np.array_equal(a, b)


def test_gold_mode_deterministic():
    v1 = StubBackend(mode="gold").encode_prompt(prompt_of("[CLS] a [MASK] b. [SEP]"))
    v2 = StubBackend(mode="gold").encode_prompt(prompt_of("[CLS] a [MASK] b. [SEP]"))
    assert np.array_equal(v1, v2)


def test_gold_mode_top_token_is_prefix():
    be = StubBackend(mode="gold")
    pairs = be.top_tokens_for_prompt(
        prompt_of("[CLS] a [MASK] b. [SEP]", "married#3"), 3
    )
    assert pairs[0][0] == "married"
    scores = [s for _, s in pairs]
    assert scores == sorted(scores, reverse=True)
    with pytest.raises(BackendError, match="exceeds vocabulary"):
        be.top_tokens_for_prompt(prompt_of("[CLS] a [MASK] b. [SEP]", "x#0"), 50)


def test_encode_many_matches_per_prompt_order():
    be = StubBackend(mode="gold")
    prompts = [
        prompt_of("[CLS] a [MASK] b. [SEP]", f"r{i}#0") for i in range(4)
    ]
    rows = be.encode_many(prompts)
    assert len(rows) == 4
    for row, p in zip(rows, prompts):
        assert np.array_equal(row, be.encode_prompt(p))


# ---------------------------------------------------------------------------
# file backend
# ---------------------------------------------------------------------------

def fixture_cache(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(3, 4)
    m = EmbeddingMatrix(
        data, ("i#0", "i#1", "i#2"), TemplateId.P.value, "stub-hash-d4"
    )
    path = tmp_path / "emb.pore"
    save_cache(m, path)
    return path, data


def test_file_backend_serves_rows(tmp_path):
    path, data = fixture_cache(tmp_path)
    be = FileBackend(path)
    assert be.hidden_dim == 4
    assert "stub-hash-d4" in be.name
    row = be.encode_prompt(prompt_of("[CLS] any [MASK] text. [SEP]", "i#1"))
    assert np.array_equal(row, data[1])


def test_file_backend_unknown_id(tmp_path):
    path, _ = fixture_cache(tmp_path)
    with pytest.raises(BackendError, match="no precomputed embedding"):
        FileBackend(path).encode_prompt(
            prompt_of("[CLS] a [MASK] b. [SEP]", "missing#0")
        )


def test_file_backend_has_no_model(tmp_path):
    path, _ = fixture_cache(tmp_path)
    be = FileBackend(path)
    with pytest.raises(BackendError):
        be.tokenize("[CLS] a [MASK] b. [SEP]")
    with pytest.raises(BackendError):
        be.mask_embedding([1, 2], 1)
    with pytest.raises(BackendError):
        be.top_tokens([1, 2], 1, 3)
    assert not be.supports_mlm_head


# ---------------------------------------------------------------------------
# inference backend + factory
# ---------------------------------------------------------------------------

transformers = pytest.importorskip("transformers")


@pytest.fixture(scope="module")
def tiny_model_dir(tmp_path_factory):
    """A minimal randomly-initialized masked LM saved to disk."""
    import torch
    from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors
    from transformers import BertConfig, BertForMaskedLM, PreTrainedTokenizerFast

    words = ["the", "a", "queen", "prince", "married", "to", "was", "x", "y",
             "of", "is", "in", "this", "sentence", ".", ","]
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + words
    core = Tokenizer(
        models.WordPiece({v: i for i, v in enumerate(vocab)}, unk_token="[UNK]")
    )
    core.normalizer = normalizers.BertNormalizer(lowercase=True)
    core.pre_tokenizer = pre_tokenizers.BertPreTokenizer()
    core.post_processor = processors.TemplateProcessing(
        single="[CLS] $A [SEP]",
        special_tokens=[("[CLS]", vocab.index("[CLS]")),
                        ("[SEP]", vocab.index("[SEP]"))],
    )
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=core, unk_token="[UNK]", pad_token="[PAD]",
        cls_token="[CLS]", sep_token="[SEP]", mask_token="[MASK]",
    )
    config = BertConfig(
        vocab_size=len(vocab),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    torch.manual_seed(0)
    model = BertForMaskedLM(config)
    model_dir = tmp_path_factory.mktemp("tiny-mlm") / "model"
    model.save_pretrained(model_dir)
    tokenizer.save_pretrained(model_dir)
    return model_dir


def test_inference_backend_round_trip(tiny_model_dir):
    be = InferenceBackend(tiny_model_dir, max_length=32, batch_size=2)
    assert be.hidden_dim == 32
    assert be.supports_mlm_head
    p = prompt_of(
        "[CLS] the queen was married to the prince. queen [MASK] prince. [SEP]"
    )
    v1 = be.encode_prompt(p)
    v2 = be.encode_prompt(p)
    assert v1.shape == (32,)
    assert v1.dtype == np.float32
    assert np.array_equal(v1, v2)


def test_inference_backend_single_mask_enforced(tiny_model_dir):
    be = InferenceBackend(tiny_model_dir, max_length=32)
    with pytest.raises(BackendError, match="exactly one mask"):
        be.tokenize("[CLS] the [MASK] was [MASK] here. [SEP]")


def test_inference_backend_rejects_overlong(tiny_model_dir):
    from promptrel.errors import PromptTooLongError

    be = InferenceBackend(tiny_model_dir, max_length=8)
    long_text = "[CLS] " + "queen " * 30 + "[MASK] prince. [SEP]"
    with pytest.raises(PromptTooLongError) as exc:
        be.encode_prompt(prompt_of(long_text, "long#0"))
    assert "long#0" in str(exc.value)


def test_inference_backend_batching_matches_single(tiny_model_dir):
    be = InferenceBackend(tiny_model_dir, max_length=32, batch_size=2)
    prompts = [
        prompt_of("[CLS] the queen [MASK] the prince. [SEP]", "p#0"),
        prompt_of("[CLS] x [MASK] y. [SEP]", "p#1"),
        prompt_of("[CLS] the prince was [MASK] to x. [SEP]", "p#2"),
    ]
    batched = be.encode_many(prompts)
    assert len(batched) == 3
    for row, p in zip(batched, prompts):
        single = be.encode_prompt(p)
        assert np.allclose(row, single, atol=1e-5)


def test_inference_backend_top_tokens(tiny_model_dir):
    be = InferenceBackend(tiny_model_dir, max_length=32)
    pairs = be.top_tokens_for_prompt(
        prompt_of("[CLS] the queen [MASK] the prince. [SEP]"), 4
    )
    assert len(pairs) == 4
    scores = [s for _, s in pairs]
    assert scores == sorted(scores, reverse=True)
    assert all(isinstance(t, str) for t, _ in pairs)


def test_make_backend_factory(tmp_path):
    stub = make_backend("stub", dim=16, stub_mode="gold", noise_scale=0.1)
    assert isinstance(stub, StubBackend)
    assert stub.hidden_dim == 16
    assert stub.mode == "gold"
    assert stub.noise_scale == 0.1

    path, _ = fixture_cache(tmp_path)
    assert isinstance(make_backend("file", embeddings_path=path), FileBackend)
    with pytest.raises(BackendError, match="embeddings path"):
        make_backend("file")
    with pytest.raises(BackendError, match="model path"):
        make_backend("inference")
    with pytest.raises(BackendError, match="unknown backend"):
        make_backend("quantum")
