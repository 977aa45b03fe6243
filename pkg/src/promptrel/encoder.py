"""Turning rendered prompts into an embedding matrix, plus a disk cache.

The cache layout is: magic bytes ``PORE``, a 4-byte little-endian header
length, a UTF-8 JSON header, then n*dim little-endian float32 values in
row-major order, then the first 8 bytes of the SHA-256 of the payload.
Round trips are bit-exact.
"""

import json
import struct
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np

from .fsio import atomic_write_bytes
from .errors import (
    BackendError,
    CorruptionError,
    FormatError,
    InputError,
    PromptTooLongError,
    ValidationError,
)

MAGIC = b"PORE"
CACHE_VERSION = 1
_HEADER_KEYS = {
    "version", "n", "dim", "dtype", "backend_name", "template_id",
    "instance_ids", "normalized",
}


@dataclass
class EmbeddingMatrix:
    """n x d relation embeddings with provenance.

    Row i belongs to ``instance_ids[i]``; row order matches the dataset
    order used at encode time.  ``extra`` carries auxiliary header fields
    (e.g. a config hash) through cache round trips.
    """

    data: np.ndarray
    instance_ids: tuple[str, ...]
    template_id: str
    backend_name: str
    normalized: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.instance_ids = tuple(self.instance_ids)
        if self.data.ndim != 2:
            raise ValidationError("embedding data must be a 2-D matrix")
        if self.data.shape[0] != len(self.instance_ids):
            raise ValidationError(
                f"{self.data.shape[0]} rows but {len(self.instance_ids)} ids"
            )
        if self.data.size and not np.isfinite(self.data).all():
            raise ValidationError("embedding matrix contains non-finite entries")

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


def _normalize_rows(data, instance_ids):
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise ValidationError(
            f"cannot normalize zero-norm embedding for instance "
            f"'{instance_ids[zero[0]]}'"
        )
    return (data / norms[:, None]).astype(np.float32)


def _single_template_id(prompts):
    ids = {p.template_id for p in prompts}
    if len(ids) > 1:
        raise ValidationError("prompts mix different templates")
    return next(iter(ids)).value if ids else ""


def encode_partial(backend, prompts, *, normalize=False):
    """Encode prompts, excluding those the backend rejects as too long.

    Returns (matrix, failed instance ids).  Other backend failures are
    propagated with the offending prompt's index.
    """
    prompts = list(prompts)
    failed = []
    kept = prompts
    try:
        rows = backend.encode_many(prompts)
    except PromptTooLongError:
        # Re-scan per prompt so every failing instance is named, then
        # batch-encode the survivors.
        kept = []
        for p in prompts:
            try:
                backend.tokenize(p.text)
                kept.append(p)
            except PromptTooLongError as e:
                failed.extend(
                    i if i != "<unknown>" else p.source_instance_id
                    for i in e.instance_ids
                )
        rows = backend.encode_many(kept)
    except BackendError as e:
        raise _located(e, prompts, backend) from e

    if rows:
        data = np.vstack([np.asarray(r, dtype=np.float32) for r in rows])
    else:
        data = np.zeros((0, backend.hidden_dim), dtype=np.float32)
    if data.size and data.shape[1] != backend.hidden_dim:
        raise BackendError(
            f"backend '{backend.name}' declared hidden_dim "
            f"{backend.hidden_dim} but produced {data.shape[1]}"
        )
    ids = tuple(p.source_instance_id for p in kept)
    if normalize and data.size:
        data = _normalize_rows(data, ids)
    matrix = EmbeddingMatrix(
        data=data,
        instance_ids=ids,
        template_id=_single_template_id(kept),
        backend_name=backend.name,
        normalized=bool(normalize),
    )
    return matrix, failed


def _located(error, prompts, backend):
    """Attach a prompt index to a backend failure by finding the culprit."""
    for i, p in enumerate(prompts):
        try:
            backend.encode_prompt(p)
        except BackendError:
            return BackendError(
                f"backend failed on prompt {i} "
                f"('{p.source_instance_id}'): {error}"
            )
    return error


def encode(backend, prompts, *, normalize=False):
    """Encode prompts into an EmbeddingMatrix.

    Raises a single error listing every over-length instance; callers
    wanting to exclude and continue use ``encode_partial``.
    """
    matrix, failed = encode_partial(backend, prompts, normalize=normalize)
    if failed:
        raise PromptTooLongError(failed, getattr(backend, "max_length", None))
    return matrix


def top_tokens_for(backend, prompt, m):
    """Top m vocabulary predictions at the prompt's mask position."""
    if m < 1:
        raise ValidationError("m must be at least 1")
    pairs = backend.top_tokens_for_prompt(prompt, m)
    scores = [s for _, s in pairs]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise BackendError(
            f"backend '{backend.name}' returned increasing scores"
        )
    return pairs


def save_cache(matrix, path, extra=None):
    """Write an embedding cache file (atomic temp + rename)."""
    header = {
        "version": CACHE_VERSION,
        "n": matrix.rows,
        "dim": matrix.dim,
        "dtype": "f32",
        "backend_name": matrix.backend_name,
        "template_id": matrix.template_id,
        "instance_ids": list(matrix.instance_ids),
        "normalized": matrix.normalized,
    }
    for key, value in {**matrix.extra, **(extra or {})}.items():
        if key not in _HEADER_KEYS:
            header[key] = value
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = matrix.data.astype("<f4").tobytes(order="C")
    blob = (
        MAGIC
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + payload
        + sha256(payload).digest()[:8]
    )
    atomic_write_bytes(path, blob)


def load_cache(path):
    """Read an embedding cache file, verifying structure and checksum."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise InputError(f"cannot read cache file {path}: {e}") from e
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not an embedding cache file")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: malformed cache header: {e}") from e
    for key in ("version", "n", "dim", "dtype", "instance_ids"):
        if key not in header:
            raise FormatError(f"{path}: cache header missing '{key}'")
    if header["version"] != CACHE_VERSION:
        raise FormatError(
            f"{path}: unsupported cache version {header['version']}"
        )
    if header["dtype"] != "f32":
        raise FormatError(f"{path}: unsupported dtype '{header['dtype']}'")
    n, dim = header["n"], header["dim"]
    if len(header["instance_ids"]) != n:
        raise FormatError(f"{path}: header id count does not match n")
    expected = n * dim * 4
    body = blob[8 + header_len :]
    if len(body) != expected + 8:
        raise CorruptionError(
            f"{path}: expected {expected + 8} payload bytes, found {len(body)}"
        )
    payload, checksum = body[:expected], body[expected:]
    if sha256(payload).digest()[:8] != checksum:
        raise CorruptionError(f"{path}: checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(n, dim).copy()
    extra = {k: v for k, v in header.items() if k not in _HEADER_KEYS}
    return EmbeddingMatrix(
        data=data,
        instance_ids=tuple(header["instance_ids"]),
        template_id=header.get("template_id", ""),
        backend_name=header.get("backend_name", ""),
        normalized=bool(header.get("normalized", False)),
        extra=extra,
    )
