"""Prompt templates that turn a relation instance into a masked token sequence.

Every template produces a surface string with backend-agnostic placeholders
``[CLS]``, ``[MASK]`` and ``[SEP]``; the encoder maps these to whatever
special tokens its backbone expects.  Each rendered prompt contains exactly
one mask placeholder.

Shipped templates:

==========  ============================================================
P           ``[CLS] S e1 [MASK] e2. [SEP]``
P_EMPTY     ``[CLS] e1 [MASK] e2. [SEP]`` (sentence removed)
P1          ``[CLS] S e1 is the [MASK] of e2. [SEP]``
P2          ``[CLS] S In this sentence, e1 is the [MASK] of e2. [SEP]``
P3          ``[CLS] S We deduce that e1 is the [MASK] of e2. [SEP]``
==========  ============================================================
"""

import json
from dataclasses import dataclass
from enum import Enum

from .errors import UsageError, ValidationError
from .fsio import atomic_write_text

CLS_PLACEHOLDER = "[CLS]"
MASK_PLACEHOLDER = "[MASK]"
SEP_PLACEHOLDER = "[SEP]"


class TemplateId(str, Enum):
    P = "P"
    P_EMPTY = "P_EMPTY"
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"


class SegmentKind(Enum):
    CLS_MARK = "cls"
    SENTENCE = "sentence"
    HEAD_MENTION = "head"
    TAIL_MENTION = "tail"
    MASK_MARK = "mask"
    SEP_MARK = "sep"
    LITERAL = "literal"


@dataclass(frozen=True)
class Segment:
    """One template building block.  ``glue`` joins it to the previous
    segment without a separating space (used for punctuation)."""

    kind: SegmentKind
    text: str | None = None
    glue: bool = False


def _lit(text, glue=False):
    return Segment(SegmentKind.LITERAL, text, glue)


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    segments: tuple[Segment, ...]

    def __post_init__(self):
        kinds = [s.kind for s in self.segments]
        if kinds.count(SegmentKind.MASK_MARK) != 1:
            raise ValidationError("template must contain exactly one mask segment")
        if kinds[0] != SegmentKind.CLS_MARK or kinds[-1] != SegmentKind.SEP_MARK:
            raise ValidationError("template must start with CLS and end with SEP")


@dataclass(frozen=True)
class RenderedPrompt:
    """A finished prompt string plus provenance.

    ``mask_hint`` is the character offset of the mask placeholder in
    ``text``.
    """

    text: str
    mask_hint: int
    source_instance_id: str
    template_id: TemplateId


def _body(with_sentence, middle):
    segs = [Segment(SegmentKind.CLS_MARK)]
    if with_sentence:
        segs.append(Segment(SegmentKind.SENTENCE))
    segs += middle
    segs += [_lit(".", glue=True), Segment(SegmentKind.SEP_MARK)]
    return tuple(segs)


_BARE = [
    Segment(SegmentKind.HEAD_MENTION),
    Segment(SegmentKind.MASK_MARK),
    Segment(SegmentKind.TAIL_MENTION),
]
_NOUN = [
    Segment(SegmentKind.HEAD_MENTION),
    _lit("is the"),
    Segment(SegmentKind.MASK_MARK),
    _lit("of"),
    Segment(SegmentKind.TAIL_MENTION),
]

TEMPLATES = {
    TemplateId.P: PromptTemplate(TemplateId.P, _body(True, _BARE)),
    TemplateId.P_EMPTY: PromptTemplate(TemplateId.P_EMPTY, _body(False, _BARE)),
    TemplateId.P1: PromptTemplate(TemplateId.P1, _body(True, _NOUN)),
    TemplateId.P2: PromptTemplate(
        TemplateId.P2, _body(True, [_lit("In this sentence,")] + _NOUN)
    ),
    TemplateId.P3: PromptTemplate(
        TemplateId.P3, _body(True, [_lit("We deduce that")] + _NOUN)
    ),
}

# Command-line spellings.
TEMPLATE_NAMES = {
    "p": TemplateId.P,
    "p-empty": TemplateId.P_EMPTY,
    "p1": TemplateId.P1,
    "p2": TemplateId.P2,
    "p3": TemplateId.P3,
}


def get_template(name):
    """Resolve a TemplateId, enum value, or CLI spelling to a template."""
    if isinstance(name, TemplateId):
        return TEMPLATES[name]
    key = str(name).lower()
    if key in TEMPLATE_NAMES:
        return TEMPLATES[TEMPLATE_NAMES[key]]
    try:
        return TEMPLATES[TemplateId(str(name).upper())]
    except ValueError:
        raise UsageError(
            f"unknown template '{name}' (expected one of: "
            + ", ".join(sorted(TEMPLATE_NAMES)) + ")"
        ) from None


def _segment_text(segment, instance):
    kind = segment.kind
    if kind == SegmentKind.CLS_MARK:
        return CLS_PLACEHOLDER
    if kind == SegmentKind.SENTENCE:
        return " ".join(instance.tokens)
    if kind == SegmentKind.HEAD_MENTION:
        return instance.head.mention_text
    if kind == SegmentKind.TAIL_MENTION:
        return instance.tail.mention_text
    if kind == SegmentKind.MASK_MARK:
        return MASK_PLACEHOLDER
    if kind == SegmentKind.SEP_MARK:
        return SEP_PLACEHOLDER
    return segment.text


def render(template, instance):
    """Render one instance through a template.

    Pure function of (template, instance); raises if the result would not
    contain exactly one mask placeholder (possible only when the sentence
    or a mention contains the placeholder string itself).
    """
    parts = []
    for segment in template.segments:
        piece = _segment_text(segment, instance)
        if parts and not segment.glue:
            parts.append(" ")
        parts.append(piece)
    text = "".join(parts)
    if text.count(MASK_PLACEHOLDER) != 1:
        raise ValidationError(
            f"instance '{instance.instance_id}' renders to a prompt with "
            f"{text.count(MASK_PLACEHOLDER)} mask placeholders"
        )
    return RenderedPrompt(
        text=text,
        mask_hint=text.index(MASK_PLACEHOLDER),
        source_instance_id=instance.instance_id,
        template_id=template.template_id,
    )


def render_all(template, dataset):
    """Render every instance, preserving dataset order."""
    return [render(template, inst) for inst in dataset.instances]


def dump_jsonl(prompts, path):
    """Audit export: one JSON object per line, keys sorted."""
    lines = [
        json.dumps({
            "instance_id": p.source_instance_id,
            "template_id": p.template_id.value,
            "text": p.text,
        }, sort_keys=True)
        for p in prompts
    ]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))
