"""Prompt parsing and context-token construction.

A prompt is plain text over a closed vocabulary. Speech spans are delimited by
literal ``<S>`` / ``<E>`` markers and a ``speaker:N`` directive binds the next
span to toy speaker ``N``::

    a blob traces pattern three speaker:2 says <S>pattern three<E>

Each span becomes ``[<S>, timbre, span words..., <E>]`` in the context
sequence, where the timbre token is the reference embedding for that span or
the shared null-timbre token.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SPAN_OPEN = "<S>"
SPAN_CLOSE = "<E>"
MAX_SPANS = 4

_TOKEN_RE = re.compile(r"<S>|<E>|speaker:\d+|[^\s<]+")
_DIRECTIVE_RE = re.compile(r"<S>|<E>|speaker:(\d+)")

VOCAB: tuple[str, ...] = tuple((
    "zero one two three four five six seven eight nine ten eleven twelve thirteen "
    "fourteen fifteen "
    "a the blob traces pattern moves rises falls steady jumps speaker says speaks "
    "then again and with no speech silent sound video audio shows person talks "
    "while first second part scene quiet loud low high mid bright dark fast slow "
    "voice tone hum beat image starts from frame"
).split())
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)

# Rows of the combined context table: vocabulary, markers, null tokens, timbres.
ROW_SPAN_START = VOCAB_SIZE
ROW_SPAN_END = VOCAB_SIZE + 1
ROW_NULL_TEXT = VOCAB_SIZE + 2
ROW_NULL_TIMBRE = VOCAB_SIZE + 3
ROW_TIMBRE0 = VOCAB_SIZE + 4


class PromptError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class Role(str, enum.Enum):
    TEXT = "TEXT"
    SPAN_START = "SPAN_START"
    TIMBRE = "TIMBRE"
    SPAN_END = "SPAN_END"
    NULL_TEXT = "NULL_TEXT"
    NULL_TIMBRE = "NULL_TIMBRE"


@dataclass(frozen=True)
class SpeechSpan:
    start: int
    end: int
    text: str
    speaker_id: Optional[int] = None


@dataclass(frozen=True)
class PromptRecord:
    text: str
    spans: tuple[SpeechSpan, ...] = ()


@dataclass
class TimbreEmbedding:
    vector: Tensor


@dataclass
class ContextSequence:
    tokens: Tensor                 # [L x d_c]
    roles: list[Role]

    def __len__(self) -> int:
        return len(self.roles)

    @property
    def slots(self) -> np.ndarray:
        return span_slots(self.roles)


@dataclass
class ContextPlan:
    """Role and table-row layout of a context sequence before embedding.

    Timbre rows are stored as ``ROW_TIMBRE0 + span_index``; they are remapped
    onto the actual timbre vectors when the plan is materialised.
    """
    roles: list[Role]
    rows: list[int]
    timbre_spans: list[int] = field(default_factory=list)


def parse_prompt(text: str) -> PromptRecord:
    spans: list[SpeechSpan] = []
    open_at: Optional[int] = None
    pending: Optional[int] = None
    for m in _DIRECTIVE_RE.finditer(text):
        tok = m.group()
        if tok == SPAN_OPEN:
            if open_at is not None:
                raise PromptError(f"nested speech span at offset {m.start()}")
            open_at = m.end()
        elif tok == SPAN_CLOSE:
            if open_at is None:
                raise PromptError(f"unbalanced {SPAN_CLOSE} at offset {m.start()}")
            spans.append(SpeechSpan(open_at, m.start(), text[open_at:m.start()], pending))
            open_at, pending = None, None
        else:
            if open_at is not None:
                raise PromptError(f"speaker directive inside a span at offset {m.start()}")
            if pending is not None:
                raise PromptError(f"two speaker directives before one span at offset {m.start()}")
            pending = int(m.group(1))
    if open_at is not None:
        raise PromptError(f"unbalanced {SPAN_OPEN}: span opened at offset {open_at} never closed")
    if pending is not None:
        raise PromptError("speaker directive is not followed by a span")
    return PromptRecord(text, tuple(spans))


def _words(text: str) -> list[str]:
    return [w for w in _TOKEN_RE.findall(text) if not w.startswith("speaker:")]


def encode_text(record: Union[PromptRecord, str]) -> list[int]:
    """Word-level ids; span markers map to their reserved rows."""
    text = record.text if isinstance(record, PromptRecord) else record
    words = _words(text)
    unknown = sorted({w for w in words if w not in WORD_ID and w not in (SPAN_OPEN, SPAN_CLOSE)})
    if unknown:
        raise VocabularyError(f"out-of-vocabulary words: {', '.join(unknown)}")
    special = {SPAN_OPEN: ROW_SPAN_START, SPAN_CLOSE: ROW_SPAN_END}
    return [special.get(w, WORD_ID.get(w)) for w in words]


def decode_text(ids: Sequence[int]) -> str:
    special = {ROW_SPAN_START: SPAN_OPEN, ROW_SPAN_END: SPAN_CLOSE}
    return " ".join(special.get(i) or VOCAB[i] for i in ids)


def plan_context(record: PromptRecord, timbre_spans: Sequence[int] = ()) -> ContextPlan:
    """Lay out the augmented context; spans listed in ``timbre_spans`` get a timbre slot."""
    with_timbre = set(timbre_spans)
    bad = with_timbre - set(range(len(record.spans)))
    if bad:
        raise PromptError(f"timbre given for unknown span(s) {sorted(bad)}")
    roles: list[Role] = []
    rows: list[int] = []
    span = -1
    for row in encode_text(record):
        if row == ROW_SPAN_START:
            span += 1
            roles += [Role.SPAN_START]
            rows += [ROW_SPAN_START]
            if span in with_timbre:
                roles.append(Role.TIMBRE)
                rows.append(ROW_TIMBRE0 + span)
            else:
                roles.append(Role.NULL_TIMBRE)
                rows.append(ROW_NULL_TIMBRE)
        elif row == ROW_SPAN_END:
            roles.append(Role.SPAN_END)
            rows.append(ROW_SPAN_END)
        else:
            roles.append(Role.TEXT)
            rows.append(row)
    return ContextPlan(roles, rows, sorted(with_timbre))


def null_text_plan() -> ContextPlan:
    return ContextPlan([Role.NULL_TEXT], [ROW_NULL_TEXT], [])


def _timbre_drop_mask(roles: Sequence[Role], prob: float, rng: np.random.Generator) -> list[bool]:
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"drop probability {prob} outside [0, 1]")
    return [bool(rng.random() < prob) if r is Role.TIMBRE else False for r in roles]


def drop_plan(plan: ContextPlan, drop_timbre_prob: float, drop_text: bool,
              rng: np.random.Generator) -> ContextPlan:
    """Plan-level condition dropout; consumes ``rng`` exactly like :func:`drop_conditions`."""
    drops = _timbre_drop_mask(plan.roles, drop_timbre_prob, rng)
    if drop_text:
        return null_text_plan()
    roles = [Role.NULL_TIMBRE if d else r for r, d in zip(plan.roles, drops)]
    rows = [ROW_NULL_TIMBRE if d else w for w, d in zip(plan.rows, drops)]
    kept = [w - ROW_TIMBRE0 for w in rows if w >= ROW_TIMBRE0]
    return ContextPlan(roles, rows, kept)


def strip_timbre(plan: ContextPlan) -> ContextPlan:
    """Every timbre token replaced by the null-timbre token."""
    roles = [Role.NULL_TIMBRE if r is Role.TIMBRE else r for r in plan.roles]
    rows = [ROW_NULL_TIMBRE if w >= ROW_TIMBRE0 else w for w in plan.rows]
    return ContextPlan(roles, rows, [])


def span_slots(roles: Sequence[Role]) -> np.ndarray:
    """Per-token span ordinal: 0 outside spans, i+1 inside the i-th span."""
    out = np.zeros(len(roles), dtype=np.int64)
    span, inside = 0, False
    for i, r in enumerate(roles):
        if r is Role.SPAN_START:
            span += 1
            inside = True
        if inside:
            out[i] = min(span, MAX_SPANS)
        if r is Role.SPAN_END:
            inside = False
    return out


# -- embedding ----------------------------------------------------------------

def encode_timbre(reference: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Mean-pool a reference utterance over time, then a 2-layer projection.

    ``reference`` is ``[T_r, D_a]`` (returns ``[d_c]``) or ``[N, T_r, D_a]``
    (returns ``[N, d_c]``).
    """
    if reference.ndim < 2 or reference.shape[-2] < 1:
        raise ValueError("reference utterance must contain at least one token")
    single = reference.ndim == 2
    if single:
        reference = ad.reshape(reference, (1,) + reference.shape)
    pooled = ad.mean(reference, axis=-2)
    h = ad.gelu(pooled @ params["timbre.w1"] + params["timbre.b1"])
    out = h @ params["timbre.w2"] + params["timbre.b2"]
    return ad.reshape(out, out.shape[1:]) if single else out


def _context_table(params: Mapping[str, Tensor], timbres: Optional[Tensor]) -> Tensor:
    parts = [params["ctx.vocab"], params["ctx.markers"], params["ctx.null_text"],
             params["ctx.null_timbre"]]
    if timbres is not None and timbres.shape[0]:
        parts.append(timbres)
    return ad.concat(parts, axis=0)


def materialize_batch(plans: Sequence[ContextPlan], timbres: Sequence[Optional[Tensor]],
                      params: Mapping[str, Tensor]):
    """Embed a batch of plans, right-padding with masked null-text rows.

    ``timbres[b]`` holds one row per entry of ``plans[b].timbre_spans`` (in that
    order). Returns ``(tokens [B, L, d_c], slots [B, L], mask [B, L])``.
    """
    length = max(len(p.roles) for p in plans)
    rows = np.full((len(plans), length), ROW_NULL_TEXT, dtype=np.int64)
    slots = np.zeros((len(plans), length), dtype=np.int64)
    mask = np.zeros((len(plans), length), dtype=bool)
    vecs: list[Tensor] = []
    offset = 0
    for b, (plan, tim) in enumerate(zip(plans, timbres)):
        n = len(plan.timbre_spans)
        if n and (tim is None or tim.shape[0] != n):
            raise ValueError(f"plan {b} needs {n} timbre vectors")
        where = {s: ROW_TIMBRE0 + offset + k for k, s in enumerate(plan.timbre_spans)}
        for i, w in enumerate(plan.rows):
            rows[b, i] = where[w - ROW_TIMBRE0] if w >= ROW_TIMBRE0 else w
        slots[b, :len(plan.roles)] = span_slots(plan.roles)
        mask[b, :len(plan.roles)] = True
        if n:
            vecs.append(tim)
            offset += n
    stacked = ad.concat(vecs, axis=0) if vecs else None
    tokens = ad.take_rows(_context_table(params, stacked), rows)
    return tokens, slots, mask


def _as_vector(t: Union[TimbreEmbedding, Tensor]) -> Tensor:
    v = t.vector if isinstance(t, TimbreEmbedding) else t
    return v if v.ndim == 2 else ad.reshape(v, (1, v.shape[-1]))


def augment_context(record: PromptRecord, timbre_map: Mapping[int, Union[TimbreEmbedding, Tensor]],
                    params: Mapping[str, Tensor]) -> ContextSequence:
    """Context sequence with each speech span wrapped as ``<S>, timbre, words, <E>``.

    ``timbre_map`` maps span index to its timbre embedding; spans without an
    entry receive the null-timbre token.
    """
    plan = plan_context(record, sorted(timbre_map))
    tim = None
    if plan.timbre_spans:
        tim = ad.concat([_as_vector(timbre_map[s]) for s in plan.timbre_spans], axis=0)
    if not plan.rows:
        return ContextSequence(Tensor(np.zeros((0, params["ctx.vocab"].shape[1]))), [])
    tokens, _, _ = materialize_batch([plan], [tim], params)
    return ContextSequence(ad.reshape(tokens, tokens.shape[1:]), list(plan.roles))


def drop_conditions(seq: ContextSequence, drop_timbre_prob: float, drop_text: bool,
                    rng: np.random.Generator, params: Mapping[str, Tensor]) -> ContextSequence:
    """Replace timbre tokens by the null-timbre token with ``drop_timbre_prob``
    each; ``drop_text`` collapses the whole context to the null-context token."""
    drops = _timbre_drop_mask(seq.roles, drop_timbre_prob, rng)
    if drop_text:
        return ContextSequence(params["ctx.null_text"], [Role.NULL_TEXT])
    if not any(drops):
        return seq
    n = len(seq.roles)
    table = ad.concat([seq.tokens, params["ctx.null_timbre"]], axis=0)
    idx = [n if d else i for i, d in enumerate(drops)]
    roles = [Role.NULL_TIMBRE if d else r for r, d in zip(seq.roles, drops)]
    return ContextSequence(ad.take_rows(table, idx), roles)
