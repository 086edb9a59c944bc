"""Domain types shared by every module, vector math, and component-text rendering.

A conversation is an ordered list of speaker-tagged utterances. Each utterance
can be distilled into one or more subject-verb-object(-adjunct) quadruplets
whose subject is fixed to the speaker role. Five kinds of component text are
derived from a conversation and embedded for retrieval: the full conversation,
each message, and each quadruplet's SV / SVO / SVOA renderings.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

Vector = np.ndarray

_WS_RE = re.compile(r"\s+")
_TOKEN_RE = re.compile(r"[a-z0-9]+")


class ContractViolation(ValueError):
    """An input violated a documented precondition or type invariant."""


def normalize_ws(text: str) -> str:
    return _WS_RE.sub(" ", text).strip()


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


class ComponentKind(str, Enum):
    CONVERSATION = "conversation"
    MESSAGE = "message"
    SV = "sv"
    SVO = "svo"
    SVOA = "svoa"


QUADRUPLET_KINDS = (ComponentKind.SV, ComponentKind.SVO, ComponentKind.SVOA)

_NO_INFORMATION = "no information"


@dataclass(frozen=True)
class Message:
    index: int
    role: str
    text: str

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ContractViolation(f"message index must be >= 0, got {self.index}")
        if not self.role.strip():
            raise ContractViolation("message role must be non-empty")
        if not self.text.strip():
            raise ContractViolation(f"message text must be non-empty (index {self.index})")


@dataclass(frozen=True)
class ConversationRecord:
    conv_id: str
    messages: tuple[Message, ...]

    def __post_init__(self) -> None:
        if not self.conv_id:
            raise ContractViolation("conv_id must be non-empty")
        if not self.messages:
            raise ContractViolation(f"conversation {self.conv_id!r} has no messages")
        for pos, msg in enumerate(self.messages):
            if msg.index != pos:
                raise ContractViolation(
                    f"conversation {self.conv_id!r}: message indices must be 0..n-1, "
                    f"found index {msg.index} at position {pos}"
                )

    @staticmethod
    def from_texts(conv_id: str, turns: Sequence[tuple[str, str]]) -> "ConversationRecord":
        msgs = tuple(Message(i, role, text) for i, (role, text) in enumerate(turns))
        return ConversationRecord(conv_id, msgs)


@dataclass(frozen=True)
class SvoaQuadruplet:
    """One semantic index: speaker-role subject, verb phrase, object, optional adjunct."""

    subject: str
    verb: str
    object: str
    adjunct: Optional[str]
    source_message_index: int

    def __post_init__(self) -> None:
        if not self.subject.strip():
            raise ContractViolation("quadruplet subject must be non-empty")
        if not self.verb.strip():
            raise ContractViolation("quadruplet verb must be non-empty")
        if not self.object.strip():
            raise ContractViolation("quadruplet object must be non-empty")
        if self.adjunct is not None:
            if not self.adjunct.strip():
                raise ContractViolation("quadruplet adjunct, when present, must be non-empty")
            if self.adjunct.strip().lower() == _NO_INFORMATION:
                raise ContractViolation("adjunct 'no information' must be represented as absent")

    def normalized_tuple(self) -> tuple[str, str, str, str]:
        """Case-insensitive, whitespace-normalized identity used for dedup."""
        return (
            normalize_ws(self.subject).lower(),
            normalize_ws(self.verb).lower(),
            normalize_ws(self.object).lower(),
            normalize_ws(self.adjunct).lower() if self.adjunct else "",
        )


@dataclass(frozen=True)
class ComponentInstance:
    """An embedded rendering of one component kind, the atom of the semantic index."""

    kind: ComponentKind
    text: str
    embedding: Vector = field(repr=False)
    source_message_index: Optional[int] = None
    quadruplet_ref: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind is ComponentKind.CONVERSATION:
            if self.source_message_index is not None:
                raise ContractViolation("conversation instances carry no source message index")
        elif self.source_message_index is None:
            raise ContractViolation(f"{self.kind.value} instance requires a source message index")
        if self.kind in QUADRUPLET_KINDS:
            if self.quadruplet_ref is None:
                raise ContractViolation(f"{self.kind.value} instance requires a quadruplet ref")
        elif self.quadruplet_ref is not None:
            raise ContractViolation(f"{self.kind.value} instance must not carry a quadruplet ref")


def as_vector(values: Sequence[float]) -> Vector:
    """Copy into an immutable float64 vector."""
    arr = np.asarray(values, dtype=np.float64).copy()
    if arr.ndim != 1:
        raise ContractViolation(f"expected a 1-d vector, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def cosine_similarity(a: Vector, b: Vector) -> float:
    """Cosine of the angle between two equal-dimension vectors.

    Zero-norm inputs yield 0.0 (neutral relevance) rather than an error so
    that empty-text embeddings cannot poison a ranking.
    """
    if a.shape[0] != b.shape[0]:
        raise ContractViolation(
            f"cosine_similarity dimension mismatch: {a.shape[0]} vs {b.shape[0]}"
        )
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def l2_normalize(v: Vector) -> Vector:
    """Unit-norm copy of v; the zero vector maps to itself."""
    norm = math.sqrt(float(np.dot(v, v)))
    if norm == 0.0:
        return as_vector(v)
    return as_vector(np.asarray(v, dtype=np.float64) / norm)


def render_component_text(quad: SvoaQuadruplet, kind: ComponentKind) -> str:
    """Single-space-joined rendering of a quadruplet at the requested granularity.

    SVOA with an absent adjunct renders identically to SVO: embedding a
    meaningless placeholder token would only add index noise.
    """
    if kind not in QUADRUPLET_KINDS:
        raise ContractViolation(f"render_component_text expects sv/svo/svoa, got {kind.value}")
    parts = [quad.subject, quad.verb]
    if kind in (ComponentKind.SVO, ComponentKind.SVOA):
        parts.append(quad.object)
    if kind is ComponentKind.SVOA and quad.adjunct is not None:
        parts.append(quad.adjunct)
    return " ".join(normalize_ws(p) for p in parts)


def render_message_text(msg: Message) -> str:
    return f"{msg.role}: {msg.text}"


def render_conversation_text(conv: ConversationRecord) -> str:
    """Newline-joined "role: text" lines in message order.

    Role prefixes are kept deliberately: subjects are fixed to speakers, so
    the speaker label carries retrieval signal.
    """
    return "\n".join(render_message_text(m) for m in conv.messages)
