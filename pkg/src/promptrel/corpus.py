"""Loading and validation of entity-annotated relation-instance datasets.

Two on-disk layouts are supported: the FewRel JSON layout (an object mapping
relation label to an array of instances) and a label-free JSON array for
genuinely unlabeled corpora.  Both are normalized into the same immutable
in-memory representation.

An instance object has the fields ``tokens`` (array of surface tokens),
``h`` and ``t`` (each ``[mention_text, kb_id, [[token indices], ...]]``).
Token index arrays are converted to inclusive ``(start, end)`` spans via
their min and max.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError, InputError, ValidationError
from .fsio import atomic_write_text

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EntitySpan:
    """One entity mention: surface text, optional KB id, token spans.

    ``token_spans`` holds one or more inclusive ``(start, end)`` pairs,
    0-based over the owning instance's token list.  The first span is
    canonical for prompt construction; the rest are kept for reporting.
    """

    mention_text: str
    kb_id: str | None
    token_spans: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class RelationInstance:
    """A sentence with two marked entity spans and an optional gold label.

    ``gold_relation`` exists for evaluation only.  Encoding and clustering
    code receives instances with the field erased (see ``strip_labels``).
    """

    tokens: tuple[str, ...]
    head: EntitySpan
    tail: EntitySpan
    gold_relation: str | None
    instance_id: str


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of relation instances.

    ``relation_inventory`` lists the distinct gold labels present, sorted;
    it is empty for unlabeled data.
    """

    instances: tuple[RelationInstance, ...]
    name: str
    relation_inventory: tuple[str, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.instances)


def _parse_span(raw, token_count, what, where):
    """Convert a raw ``[mention, kb_id, [[indices], ...]]`` triple."""
    if not isinstance(raw, (list, tuple)) or len(raw) != 3:
        raise ValidationError(f"{where}: {what} must be a 3-element array")
    mention, kb_id, index_arrays = raw
    if not isinstance(mention, str) or not mention:
        raise ValidationError(f"{where}: {what} mention text must be a non-empty string")
    if kb_id is not None and not isinstance(kb_id, str):
        raise ValidationError(f"{where}: {what} kb id must be a string or null")
    if not isinstance(index_arrays, (list, tuple)) or not index_arrays:
        raise ValidationError(f"{where}: {what} needs at least one token index array")
    spans = []
    for arr in index_arrays:
        if not isinstance(arr, (list, tuple)) or not arr:
            raise ValidationError(f"{where}: {what} has an empty token index array")
        if not all(isinstance(i, int) and not isinstance(i, bool) for i in arr):
            raise ValidationError(f"{where}: {what} token indices must be integers")
        start, end = min(arr), max(arr)
        if start < 0 or end >= token_count:
            raise ValidationError(
                f"{where}: {what} span ({start}, {end}) out of range for "
                f"{token_count} tokens"
            )
        spans.append((start, end))
    return EntitySpan(mention, kb_id, tuple(spans))


def _parse_instance(obj, instance_id, gold, where):
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: instance must be a JSON object")
    for key in ("tokens", "h", "t"):
        if key not in obj:
            raise ValidationError(f"{where}: missing required key '{key}'")
    tokens = obj["tokens"]
    if not isinstance(tokens, (list, tuple)) or not tokens:
        raise ValidationError(f"{where}: token list must be non-empty")
    if not all(isinstance(t, str) for t in tokens):
        raise ValidationError(f"{where}: tokens must be strings")
    head = _parse_span(obj["h"], len(tokens), "head entity", where)
    tail = _parse_span(obj["t"], len(tokens), "tail entity", where)
    return RelationInstance(tuple(tokens), head, tail, gold, instance_id)


def _mention_matches_tokens(inst, span):
    start, end = span.token_spans[0]
    surface = " ".join(inst.tokens[start : end + 1])
    return " ".join(span.mention_text.lower().split()) == surface.lower()


def _warn_mention_drift(instances):
    # Source data may carry casing or tokenization drift; not fatal.
    bad = [
        inst.instance_id
        for inst in instances
        if not _mention_matches_tokens(inst, inst.head)
        or not _mention_matches_tokens(inst, inst.tail)
    ]
    if bad:
        shown = ", ".join(bad[:3])
        log.warning(
            "%d instance(s) where mention text does not match the first "
            "token span (e.g. %s)", len(bad), shown,
        )


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read dataset file {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise FormatError(
            f"{path}: malformed JSON at byte offset {offset}: {e.msg}"
        ) from e


def load_fewrel(path):
    """Load a FewRel-layout JSON file into a labeled Dataset.

    The file maps relation label to an array of instance objects.  Labels
    are traversed in sorted order so the result is independent of JSON key
    order; every instance gets ``instance_id = "<label>#<array index>"``.
    """
    data = _read_json(path)
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object mapping label to instances")
    instances = []
    for label in sorted(data):
        block = data[label]
        if not isinstance(block, list):
            raise FormatError(f"{path}: value for label '{label}' must be an array")
        for i, obj in enumerate(block):
            where = f"{label}[{i}]"
            instances.append(_parse_instance(obj, f"{label}#{i}", label, where))
    _check_unique_ids(instances)
    _warn_mention_drift(instances)
    inventory = tuple(sorted({i.gold_relation for i in instances if i.gold_relation}))
    return Dataset(tuple(instances), Path(path).stem, inventory)


def load_unlabeled(path):
    """Load a JSON array of instance objects with no relation labels.

    Objects may carry an optional ``id`` key (written by ``export_unlabeled``
    so stripped datasets round-trip); otherwise ids are positional.
    """
    data = _read_json(path)
    if not isinstance(data, list):
        raise FormatError(f"{path}: expected a JSON array of instances")
    instances = []
    for i, obj in enumerate(data):
        where = f"instance {i}"
        given = obj.get("id") if isinstance(obj, dict) else None
        if given is not None and not isinstance(given, str):
            raise ValidationError(f"{where}: 'id' must be a string")
        instances.append(_parse_instance(obj, given or f"u#{i}", None, where))
    _check_unique_ids(instances)
    _warn_mention_drift(instances)
    return Dataset(tuple(instances), Path(path).stem, ())


def _check_unique_ids(instances):
    seen = set()
    for inst in instances:
        if inst.instance_id in seen:
            raise ValidationError(f"duplicate instance id '{inst.instance_id}'")
        seen.add(inst.instance_id)


def strip_labels(dataset):
    """Return the same dataset with every gold label erased.

    The input is unmodified.  Stripping is idempotent and never changes
    instance count, ids, tokens, or spans.
    """
    stripped = tuple(
        RelationInstance(i.tokens, i.head, i.tail, None, i.instance_id)
        for i in dataset.instances
    )
    return Dataset(stripped, dataset.name, ())


def _span_to_raw(span):
    return [
        span.mention_text,
        span.kb_id,
        [list(range(start, end + 1)) for start, end in span.token_spans],
    ]


def _instance_to_raw(inst, with_id):
    obj = {
        "tokens": list(inst.tokens),
        "h": _span_to_raw(inst.head),
        "t": _span_to_raw(inst.tail),
    }
    if with_id:
        obj["id"] = inst.instance_id
    return obj


def export_fewrel(dataset, path):
    """Write a labeled dataset back out in the FewRel layout.

    Keys are sorted and instance arrays keep dataset order, so output is
    deterministic and reloading reproduces the dataset value exactly.
    """
    grouped = {}
    for inst in dataset.instances:
        if inst.gold_relation is None:
            raise ValidationError(
                f"instance '{inst.instance_id}' has no label; use export_unlabeled"
            )
        grouped.setdefault(inst.gold_relation, []).append(_instance_to_raw(inst, False))
    atomic_write_text(path, json.dumps(grouped, sort_keys=True, indent=1) + "\n")


def export_unlabeled(dataset, path):
    """Write instances as a JSON array, ids included, labels dropped."""
    raw = [_instance_to_raw(inst, True) for inst in dataset.instances]
    atomic_write_text(path, json.dumps(raw, sort_keys=True, indent=1) + "\n")
