"""Masked-language-model backends.

A backend supplies, for a prompt containing one mask placeholder, the
hidden-state embedding at the mask position and (optionally) the top
vocabulary predictions there.  Three implementations ship:

* ``InferenceBackend`` wraps a pretrained masked LM through ``transformers``
  (installed via the ``inference`` extra).
* ``FileBackend`` serves precomputed embeddings from a cache file, keyed by
  instance id.
* ``StubBackend`` is deterministic and dependency-free, for tests and
  synthetic pipelines.

The per-prompt entry points are ``encode_prompt`` / ``top_tokens_for_prompt``,
which default to ``tokenize`` + ``mask_embedding`` / ``top_tokens``.
Backends that key on provenance rather than text (the file backend, the
stub's gold mode) override the per-prompt hooks.
"""

import hashlib
from abc import ABC, abstractmethod

import numpy as np

from .errors import BackendError, PromptTooLongError
from .prompt import CLS_PLACEHOLDER, MASK_PLACEHOLDER, SEP_PLACEHOLDER


def _seeded_rng(*parts):
    digest = hashlib.sha256("\x1f".join(parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _unit_vector(dim, *parts):
    v = _seeded_rng(*parts).standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


class MlmBackend(ABC):
    """Contract every embedding backend fulfils.

    ``mask_embedding`` must be deterministic for fixed weights and inputs,
    and its output length must equal ``hidden_dim``.  ``concurrent_safe``
    declares whether calls may run in parallel; the pipeline serializes
    calls to backends that say no.
    """

    name: str
    hidden_dim: int
    supports_mlm_head: bool = False
    concurrent_safe: bool = False

    @abstractmethod
    def tokenize(self, text):
        """Return (token id list, mask position) for placeholder text."""

    @abstractmethod
    def mask_embedding(self, token_ids, mask_position):
        """Return the hidden-state vector at the mask position."""

    @abstractmethod
    def top_tokens(self, token_ids, mask_position, m):
        """Return m (token, score) pairs, scores non-increasing."""

    def encode_prompt(self, prompt):
        token_ids, mask_position = self.tokenize(prompt.text)
        return self.mask_embedding(token_ids, mask_position)

    def top_tokens_for_prompt(self, prompt, m):
        token_ids, mask_position = self.tokenize(prompt.text)
        return self.top_tokens(token_ids, mask_position, m)

    def encode_many(self, prompts):
        """Encode prompts in order.  Subclasses may batch."""
        return [self.encode_prompt(p) for p in prompts]


# Filler vocabulary for the stub's mask predictions.
_STUB_VOCAB = (
    "married", "borders", "capital", "member", "director", "author",
    "father", "located", "part", "founder", "owner", "neighbor",
    "successor", "employer", "composer", "winner",
)


class StubBackend(MlmBackend):
    """Deterministic backend with no model behind it.

    mode "hash": the embedding is a pseudo-random unit vector seeded from
    the token id sequence, so identical prompts get identical rows and any
    text change moves the row.

    mode "gold": the embedding is a fixed unit direction per instance-id
    prefix (the part before "#") plus small id-seeded noise.  Instances
    sharing a prefix therefore form a tight cluster, which lets pipeline
    tests check label recovery end to end without a real model.  The
    prefix is read from the prompt's provenance, never from any label
    field, so the unsupervised layering holds.
    """

    supports_mlm_head = True
    concurrent_safe = True

    def __init__(self, dim=768, mode="hash", noise_scale=0.05):
        if mode not in ("hash", "gold"):
            raise BackendError(f"unknown stub mode '{mode}'")
        if dim < 1:
            raise BackendError("stub dimension must be positive")
        self.hidden_dim = int(dim)
        self.mode = mode
        self.noise_scale = float(noise_scale)
        self.name = f"stub-{mode}-d{dim}"

    def tokenize(self, text):
        tokens = text.split()
        if MASK_PLACEHOLDER not in tokens:
            raise BackendError("prompt has no free-standing mask placeholder")
        ids = [
            int.from_bytes(hashlib.sha256(t.encode()).digest()[:4], "little")
            for t in tokens
        ]
        return ids, tokens.index(MASK_PLACEHOLDER)

    def mask_embedding(self, token_ids, mask_position):
        return _unit_vector(self.hidden_dim, "emb", repr(list(token_ids)))

    def encode_prompt(self, prompt):
        if self.mode == "hash":
            return super().encode_prompt(prompt)
        key = prompt.source_instance_id.split("#", 1)[0]
        direction = _unit_vector(self.hidden_dim, "dir", key)
        noise = _unit_vector(self.hidden_dim, "noise", prompt.source_instance_id)
        return (direction + self.noise_scale * noise).astype(np.float32)

    def _ranked_vocab(self, seed_parts, vocab):
        rng = _seeded_rng(*seed_parts)
        scores = rng.random(len(vocab))
        order = np.argsort(-scores)
        return [(vocab[i], float(scores[i])) for i in order]

    def top_tokens(self, token_ids, mask_position, m):
        ranked = self._ranked_vocab(("top", repr(list(token_ids))), _STUB_VOCAB)
        if m > len(ranked):
            raise BackendError(
                f"m={m} exceeds vocabulary of {len(ranked)} tokens"
            )
        return ranked[:m]

    def top_tokens_for_prompt(self, prompt, m):
        if self.mode == "hash":
            return super().top_tokens_for_prompt(prompt, m)
        # Gold mode names the mask with the instance-id prefix itself, so a
        # pure cluster is named by its relation's token.
        key = prompt.source_instance_id.split("#", 1)[0]
        filler = [t for t in _STUB_VOCAB if t != key]
        vocab_size = 1 + len(filler)
        if m > vocab_size:
            raise BackendError(f"m={m} exceeds vocabulary of {vocab_size} tokens")
        out = [(key, 1.0)]
        out += [(t, 0.5 / (i + 1)) for i, t in enumerate(filler)]
        return out[:m]


class FileBackend(MlmBackend):
    """Serves precomputed embeddings from a cache file, keyed by instance id.

    Useful when embeddings were computed elsewhere (a GPU box, a one-off
    dump) and only clustering and analysis run here.  Tokenization and the
    MLM head are unavailable.
    """

    supports_mlm_head = False
    concurrent_safe = True

    def __init__(self, cache_path):
        from .encoder import load_cache

        matrix = load_cache(cache_path)
        self._rows = {
            iid: matrix.data[i] for i, iid in enumerate(matrix.instance_ids)
        }
        self.hidden_dim = matrix.dim
        self.name = f"file({matrix.backend_name})"

    def tokenize(self, text):
        raise BackendError("file backend serves precomputed embeddings; "
                           "it cannot tokenize")

    def mask_embedding(self, token_ids, mask_position):
        raise BackendError("file backend has no model; use encode_prompt")

    def top_tokens(self, token_ids, mask_position, m):
        raise BackendError("file backend has no MLM head")

    def encode_prompt(self, prompt):
        row = self._rows.get(prompt.source_instance_id)
        if row is None:
            raise BackendError(
                f"no precomputed embedding for instance "
                f"'{prompt.source_instance_id}'"
            )
        return row


class InferenceBackend(MlmBackend):
    """Wraps a pretrained masked LM via ``transformers``.

    The model is frozen; only forward passes run.  Prompts longer than
    ``max_length`` fail rather than truncate, because truncation could
    silently delete an entity mention.
    """

    supports_mlm_head = True
    concurrent_safe = False

    def __init__(self, model_path, max_length=512, batch_size=32, device=None):
        try:
            import torch
            from transformers import AutoModelForMaskedLM, AutoTokenizer
        except ImportError as e:
            raise BackendError(
                "inference backend requires the 'inference' extra "
                "(pip install promptrel[inference])"
            ) from e
        self._torch = torch
        self._tokenizer = AutoTokenizer.from_pretrained(model_path)
        self._model = AutoModelForMaskedLM.from_pretrained(model_path)
        self._model.eval()
        self._device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        self._model.to(self._device)
        self.max_length = int(max_length)
        self.batch_size = int(batch_size)
        self.hidden_dim = int(self._model.config.hidden_size)
        self.name = f"inference({model_path})"

    def _strip_placeholders(self, text):
        body = text
        if body.startswith(CLS_PLACEHOLDER):
            body = body[len(CLS_PLACEHOLDER):].lstrip()
        if body.endswith(SEP_PLACEHOLDER):
            body = body[: -len(SEP_PLACEHOLDER)].rstrip()
        return body.replace(MASK_PLACEHOLDER, self._tokenizer.mask_token)

    def tokenize(self, text):
        ids = self._tokenizer.encode(
            self._strip_placeholders(text), add_special_tokens=True
        )
        if len(ids) > self.max_length:
            raise PromptTooLongError(["<unknown>"], self.max_length)
        mask_id = self._tokenizer.mask_token_id
        positions = [i for i, t in enumerate(ids) if t == mask_id]
        if len(positions) != 1:
            raise BackendError(
                f"expected exactly one mask token after tokenization, "
                f"found {len(positions)}"
            )
        return ids, positions[0]

    def encode_prompt(self, prompt):
        try:
            token_ids, mask_position = self.tokenize(prompt.text)
        except PromptTooLongError:
            raise PromptTooLongError(
                [prompt.source_instance_id], self.max_length
            ) from None
        return self.mask_embedding(token_ids, mask_position)

    def mask_embedding(self, token_ids, mask_position):
        torch = self._torch
        with torch.no_grad():
            ids = torch.tensor([token_ids], device=self._device)
            out = self._model(ids, output_hidden_states=True)
            hidden = out.hidden_states[-1][0, mask_position]
        return hidden.cpu().numpy().astype(np.float32)

    def top_tokens(self, token_ids, mask_position, m):
        torch = self._torch
        vocab_size = self._model.config.vocab_size
        if m > vocab_size:
            raise BackendError(f"m={m} exceeds vocabulary of {vocab_size} tokens")
        with torch.no_grad():
            ids = torch.tensor([token_ids], device=self._device)
            logits = self._model(ids).logits[0, mask_position]
            scores, indices = torch.topk(logits, m)
        tokens = self._tokenizer.convert_ids_to_tokens(indices.cpu().tolist())
        return list(zip(tokens, [float(s) for s in scores.cpu()]))

    def encode_many(self, prompts):
        torch = self._torch
        rows = []
        for start in range(0, len(prompts), self.batch_size):
            batch = prompts[start : start + self.batch_size]
            encoded = [self.tokenize(p.text) for p in batch]
            width = max(len(ids) for ids, _ in encoded)
            pad = self._tokenizer.pad_token_id or 0
            id_matrix = [ids + [pad] * (width - len(ids)) for ids, _ in encoded]
            attention = [
                [1] * len(ids) + [0] * (width - len(ids)) for ids, _ in encoded
            ]
            with torch.no_grad():
                out = self._model(
                    torch.tensor(id_matrix, device=self._device),
                    attention_mask=torch.tensor(attention, device=self._device),
                    output_hidden_states=True,
                )
                hidden = out.hidden_states[-1]
            for row, (_, pos) in enumerate(encoded):
                rows.append(hidden[row, pos].cpu().numpy().astype(np.float32))
        return rows


def make_backend(kind, **kwargs):
    """Construct a backend from its CLI spelling."""
    if kind == "stub":
        return StubBackend(
            dim=kwargs.get("dim", 768),
            mode=kwargs.get("stub_mode", "hash"),
            noise_scale=kwargs.get("noise_scale", 0.05),
        )
    if kind == "file":
        path = kwargs.get("embeddings_path")
        if not path:
            raise BackendError("file backend needs an embeddings path")
        return FileBackend(path)
    if kind == "inference":
        path = kwargs.get("model_path")
        if not path:
            raise BackendError("inference backend needs a model path")
        return InferenceBackend(
            path,
            max_length=kwargs.get("max_length", 512),
            batch_size=kwargs.get("batch_size", 32),
            device=kwargs.get("device"),
        )
    raise BackendError(f"unknown backend kind '{kind}'")
