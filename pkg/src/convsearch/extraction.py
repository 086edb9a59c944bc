"""Two-step semantic-index extraction driven by a pluggable chat backend.

Step one distills each utterance into subject-verb-object triplets whose
subject is fixed to the speaker role; step two enriches every triplet with a
prepositional adjunct (or marks it absent). A merged single-step variant
exists for ablation runs. Backends are anything implementing ``ChatBackend``;
a deterministic rule-based mock and a scripted replay backend are provided
for offline use.
"""

from __future__ import annotations

import json
import os
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Optional, Protocol, Sequence

import httpx

from .core import (
    ContractViolation,
    ConversationRecord,
    SvoaQuadruplet,
    normalize_ws,
    render_message_text,
    tokenize,
)

FewShotTurns = Sequence[tuple[str, str]]

_NO_INFORMATION = "no information"


class ChatBackend(Protocol):
    """Chat-completion contract: deterministic backends must be pure functions
    of their inputs, and temperature is passed through unmodified."""

    def complete(
        self,
        system_prompt: str,
        few_shot_turns: FewShotTurns,
        user_message: str,
        temperature: float,
        max_tokens: int,
    ) -> str: ...


class ExtractionMode(str, Enum):
    TWO_STEP = "two-step"
    SINGLE_STEP = "single-step"


@dataclass(frozen=True)
class ExtractionConfig:
    context_window_k: int = 2
    temperature: float = 0.0
    max_tokens: int = 1024
    max_parse_retries: int = 2
    mode: ExtractionMode = ExtractionMode.TWO_STEP

    def __post_init__(self) -> None:
        if self.context_window_k < 0:
            raise ContractViolation("context_window_k must be >= 0")
        if self.max_tokens <= 0:
            raise ContractViolation("max_tokens must be positive")
        if self.max_parse_retries < 0:
            raise ContractViolation("max_parse_retries must be >= 0")


@dataclass(frozen=True)
class ExtractionWarning:
    conv_id: str
    msg_index: int
    stage: str
    attempts: int
    raw_text: str


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def prompt_template(name: str) -> str:
    return (resources.files(__package__) / "prompts" / name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def few_shot_examples(name: str) -> tuple[tuple[str, str], ...]:
    payload = json.loads(prompt_template(name))
    return tuple((ex["user"], ex["assistant"]) for ex in payload["examples"])


def fill_template(template: str, **values: str) -> str:
    for key, value in values.items():
        template = template.replace("{{$" + key + "}}", value)
    return template


def build_context_window(conv: ConversationRecord, msg_index: int, k: int) -> str:
    """Rendered "role: text" lines for the k messages preceding msg_index."""
    if not 0 <= msg_index < len(conv.messages):
        raise ContractViolation(
            f"msg_index {msg_index} out of range for conversation {conv.conv_id!r} "
            f"with {len(conv.messages)} messages"
        )
    start = max(0, msg_index - k)
    return "\n".join(render_message_text(m) for m in conv.messages[start:msg_index])


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"^```[a-zA-Z0-9]*\s*$", re.MULTILINE)


def parse_json_payload(raw: str, key: str) -> Optional[list]:
    """Best-effort extraction of the list stored under ``key`` in a JSON reply.

    Tolerates markdown code fences and leading/trailing prose by parsing the
    outermost brace-delimited span. Returns None when no usable payload exists.
    """
    text = _FENCE_RE.sub("", raw).strip()
    start = text.find("{")
    end = text.rfind("}")
    if start < 0 or end <= start:
        return None
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    payload = obj.get(key)
    if not isinstance(payload, list):
        return None
    return payload


def _single_key_item(element: object) -> Optional[tuple[str, object]]:
    if isinstance(element, dict) and len(element) == 1:
        key, value = next(iter(element.items()))
        if isinstance(key, str):
            return key, value
    return None


def _coerce_text(value: object) -> Optional[str]:
    if isinstance(value, str):
        text = normalize_ws(value)
        return text or None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    return None


def _verb_after_role(key: str, role: str) -> Optional[str]:
    key = normalize_ws(key)
    prefix = role.lower() + " "
    if not key.lower().startswith(prefix):
        return None
    verb = key[len(role) + 1 :].strip()
    return verb or None


def _complete_payload(
    backend: ChatBackend,
    system_prompt: str,
    few_shot: FewShotTurns,
    user_message: str,
    cfg: ExtractionConfig,
    key: str,
) -> tuple[Optional[list], str, int]:
    """Call the backend, re-asking with the identical prompt on parse failure."""
    raw = ""
    attempts = 0
    for _ in range(cfg.max_parse_retries + 1):
        attempts += 1
        raw = backend.complete(system_prompt, few_shot, user_message, cfg.temperature, cfg.max_tokens)
        payload = parse_json_payload(raw, key)
        if payload is not None:
            return payload, raw, attempts
    return None, raw, attempts


def _record_warning(
    sink: Optional[list[ExtractionWarning]],
    conv_id: str,
    msg_index: int,
    stage: str,
    attempts: int,
    raw: str,
) -> None:
    if sink is not None:
        sink.append(ExtractionWarning(conv_id, msg_index, stage, attempts, raw))


# ---------------------------------------------------------------------------
# Extraction operations
# ---------------------------------------------------------------------------

def extract_triplets(
    conv: ConversationRecord,
    msg_index: int,
    cfg: ExtractionConfig,
    backend: ChatBackend,
    warnings: Optional[list[ExtractionWarning]] = None,
) -> list[tuple[str, str, str]]:
    """Step one: subject-verb-object triplets for one message.

    Keys that do not start with the speaker role are dropped, as are triplets
    with an empty verb or object. Duplicates (case-insensitive, whitespace
    normalized) are removed, preserving first occurrence. An unparseable
    response after retries skips the message and records a warning.
    """
    msg = conv.messages[msg_index]
    context = build_context_window(conv, msg_index, cfg.context_window_k)
    system = fill_template(prompt_template("triplet_system.txt"), role=msg.role)
    user = fill_template(
        prompt_template("triplet_user.txt"), role=msg.role, context=context, message=msg.text
    )
    payload, raw, attempts = _complete_payload(
        backend, system, few_shot_examples("triplet_fewshot.json"), user, cfg, "information_triplet"
    )
    if payload is None:
        _record_warning(warnings, conv.conv_id, msg_index, "triplets", attempts, raw)
        return []

    triplets: list[tuple[str, str, str]] = []
    seen: set[tuple[str, str, str]] = set()
    for element in payload:
        item = _single_key_item(element)
        if item is None:
            continue
        key, value = item
        verb = _verb_after_role(key, msg.role)
        obj = _coerce_text(value)
        if verb is None or obj is None:
            continue
        fingerprint = (verb.lower(), obj.lower())
        if (msg.role.lower(), *fingerprint) in seen:
            continue
        seen.add((msg.role.lower(), *fingerprint))
        triplets.append((msg.role, verb, obj))
    return triplets


def _clean_detail(detail: Optional[str]) -> Optional[str]:
    if detail is None:
        return None
    if detail.lower() == _NO_INFORMATION:
        return None
    return detail


def augment_adjuncts(
    conv: ConversationRecord,
    msg_index: int,
    triplets: Sequence[tuple[str, str, str]],
    cfg: ExtractionConfig,
    backend: ChatBackend,
    warnings: Optional[list[ExtractionWarning]] = None,
) -> list[SvoaQuadruplet]:
    """Step two: enrich each triplet with a prepositional detail.

    Degrades rather than loses: a parse failure, or a triplet missing from
    the response, yields the quadruplet with an absent adjunct. Never returns
    fewer quadruplets than the triplets given.
    """
    if not triplets:
        return []
    msg = conv.messages[msg_index]
    rendered = [f"{s} {v} {o}" for s, v, o in triplets]
    context = build_context_window(conv, msg_index, cfg.context_window_k)
    system = fill_template(prompt_template("adjunct_system.txt"), role=msg.role)
    user = fill_template(
        prompt_template("adjunct_user.txt"),
        role=msg.role,
        context=context,
        message=msg.text,
        info_list="\n".join(rendered),
    )
    payload, raw, attempts = _complete_payload(
        backend, system, few_shot_examples("adjunct_fewshot.json"), user, cfg, "detailed_information"
    )

    details: dict[str, str] = {}
    if payload is None:
        _record_warning(warnings, conv.conv_id, msg_index, "adjuncts", attempts, raw)
    else:
        for element in payload:
            item = _single_key_item(element)
            if item is None:
                continue
            key, value = item
            detail = _coerce_text(value)
            if detail is not None:
                details.setdefault(normalize_ws(key), detail)
    folded = {key.lower(): value for key, value in details.items()}

    quadruplets = []
    for (subject, verb, obj), key in zip(triplets, rendered):
        detail = details.get(key)
        if detail is None:
            detail = folded.get(key.lower())
        quadruplets.append(
            SvoaQuadruplet(subject, verb, obj, _clean_detail(detail), msg_index)
        )
    return quadruplets


def extract_single_step(
    conv: ConversationRecord,
    msg_index: int,
    cfg: ExtractionConfig,
    backend: ChatBackend,
    warnings: Optional[list[ExtractionWarning]] = None,
) -> list[SvoaQuadruplet]:
    """Ablation path: one merged call producing quadruplets directly."""
    if cfg.mode is not ExtractionMode.SINGLE_STEP:
        raise ContractViolation("extract_single_step requires mode=single-step")
    msg = conv.messages[msg_index]
    context = build_context_window(conv, msg_index, cfg.context_window_k)
    system = fill_template(prompt_template("single_step_system.txt"), role=msg.role)
    user = fill_template(
        prompt_template("single_step_user.txt"), role=msg.role, context=context, message=msg.text
    )
    payload, raw, attempts = _complete_payload(
        backend,
        system,
        few_shot_examples("single_step_fewshot.json"),
        user,
        cfg,
        "information_quadruplet",
    )
    if payload is None:
        _record_warning(warnings, conv.conv_id, msg_index, "single_step", attempts, raw)
        return []

    quadruplets: list[SvoaQuadruplet] = []
    seen: set[tuple[str, str, str, str]] = set()
    for element in payload:
        item = _single_key_item(element)
        if item is None:
            continue
        key, value = item
        verb = _verb_after_role(key, msg.role)
        if verb is None:
            continue
        if isinstance(value, list) and value:
            obj = _coerce_text(value[0])
            detail = _coerce_text(value[1]) if len(value) > 1 else None
        else:
            obj = _coerce_text(value)
            detail = None
        if obj is None:
            continue
        quad = SvoaQuadruplet(msg.role, verb, obj, _clean_detail(detail), msg_index)
        fingerprint = quad.normalized_tuple()
        if fingerprint in seen:
            continue
        seen.add(fingerprint)
        quadruplets.append(quad)
    return quadruplets


def extract_message(
    conv: ConversationRecord,
    msg_index: int,
    cfg: ExtractionConfig,
    backend: ChatBackend,
    warnings: Optional[list[ExtractionWarning]] = None,
) -> list[SvoaQuadruplet]:
    if cfg.mode is ExtractionMode.SINGLE_STEP:
        return extract_single_step(conv, msg_index, cfg, backend, warnings)
    triplets = extract_triplets(conv, msg_index, cfg, backend, warnings)
    return augment_adjuncts(conv, msg_index, triplets, cfg, backend, warnings)


def extract_conversation(
    conv: ConversationRecord,
    cfg: ExtractionConfig,
    backend: ChatBackend,
    warnings: Optional[list[ExtractionWarning]] = None,
    max_workers: Optional[int] = None,
) -> list[SvoaQuadruplet]:
    """All quadruplets of a conversation, in message order.

    Messages may be processed concurrently (the backend must tolerate
    concurrent calls); results and warnings are merged deterministically by
    message index.
    """
    indices = range(len(conv.messages))
    per_message: list[tuple[list[SvoaQuadruplet], list[ExtractionWarning]]]
    if max_workers and max_workers > 1:
        def worker(i: int) -> tuple[list[SvoaQuadruplet], list[ExtractionWarning]]:
            local: list[ExtractionWarning] = []
            return extract_message(conv, i, cfg, backend, local), local

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            per_message = list(pool.map(worker, indices))
    else:
        per_message = []
        for i in indices:
            local: list[ExtractionWarning] = []
            per_message.append((extract_message(conv, i, cfg, backend, local), local))

    quadruplets: list[SvoaQuadruplet] = []
    for quads, local in per_message:
        quadruplets.extend(quads)
        if warnings is not None:
            warnings.extend(local)
    return quadruplets


# ---------------------------------------------------------------------------
# Offline backends
# ---------------------------------------------------------------------------

MOCK_STOPWORDS = frozenset(
    """
    a an the i you he she it we they me him her them us my your his its our
    their this that these those what which who whom when where why how do
    does did done is are was were be been being am can could will would
    shall should may might must have has had having not no yes if then else
    and or but so to of in at on by as from about for with because thanks
    thank please hello hi hey tell know think want wants like really more
    some any just very okay ok here there
    """.split()
)

_MOCK_PREPOSITIONS = ("about", "for", "with")
_PUNCT_STRIP = ".,!?;:\"'()[]"


def mock_extract(
    conv: ConversationRecord, msg_index: int
) -> list[tuple[str, str, str, Optional[str]]]:
    """Deterministic rule-based stand-in for a chat model.

    Verb from a fixed table keyed by surface patterns, object as the most
    frequent non-stopword token, adjunct as the first prepositional tail.
    """
    msg = conv.messages[msg_index]
    text = msg.text.strip()
    tokens = tokenize(text)

    if text.endswith("?"):
        verb = "asks"
    elif tokens and tokens[0] in ("thanks", "thank"):
        verb = "thanks"
    else:
        verb = "mentions"

    counts = Counter(t for t in tokens if t not in MOCK_STOPWORDS)
    if counts:
        best = max(counts.values())
        obj = next(t for t in tokens if counts.get(t) == best)
    else:
        obj = "person"

    adjunct: Optional[str] = None
    words = text.split()
    for i, word in enumerate(words):
        lowered = word.strip(_PUNCT_STRIP).lower()
        two_word = (
            lowered == "because"
            and i + 1 < len(words)
            and words[i + 1].strip(_PUNCT_STRIP).lower() == "of"
        )
        if lowered in _MOCK_PREPOSITIONS or two_word:
            tail = " ".join(words[i:]).rstrip(_PUNCT_STRIP)
            if tail:
                adjunct = tail
            break

    return [(msg.role, verb, obj, adjunct)]


def _section(prompt: str, header: str, next_markers: Sequence[str]) -> Optional[str]:
    marker = header + "\n"
    start = prompt.find(marker)
    if start < 0:
        return None
    body = prompt[start + len(marker) :]
    cut = len(body)
    for nxt in next_markers:
        pos = body.find(nxt)
        if 0 <= pos < cut:
            cut = pos
    return body[:cut].strip("\n")


class MockChatBackend:
    """Replays the rule table of :func:`mock_extract` through the real prompt
    plumbing: it parses the filled template it receives and answers with the
    JSON shape the corresponding parser expects."""

    def complete(
        self,
        system_prompt: str,
        few_shot_turns: FewShotTurns,
        user_message: str,
        temperature: float,
        max_tokens: int,
    ) -> str:
        role, text = self._message_from(user_message)
        conv = ConversationRecord.from_texts("mock", [(role, text)])
        (subject, verb, obj, adjunct) = mock_extract(conv, 0)[0]

        if "[$information list$]" in user_message:
            info = _section(user_message, "[$information list$]", ["\n\nChoose the best"])
            lines = [ln for ln in (info or "").splitlines() if ln.strip()]
            detail = adjunct if adjunct is not None else _NO_INFORMATION
            payload = {"detailed_information": [{line: detail} for line in lines]}
            return json.dumps(payload)

        if "information_quadruplet" in system_prompt:
            detail = adjunct if adjunct is not None else _NO_INFORMATION
            payload = {"information_quadruplet": [{f"{subject} {verb}": [obj, detail]}]}
            return json.dumps(payload)

        payload = {"information_triplet": [{f"{subject} {verb}": obj}]}
        return json.dumps(payload)

    @staticmethod
    def _message_from(user_message: str) -> tuple[str, str]:
        body = _section(
            user_message,
            "[$message$]",
            ["\n\n[$information list$]", "\n\nExtract as much"],
        )
        if not body:
            raise ContractViolation("mock backend could not locate the message block")
        line = body.splitlines()[0]
        role, sep, text = line.partition(": ")
        if not sep:
            raise ContractViolation(f"mock backend could not split role from {line!r}")
        return role, text


class ScriptedChatBackend:
    """Returns canned responses in order; records every prompt it saw."""

    def __init__(self, responses: Sequence[str], repeat_last: bool = False) -> None:
        self._responses = list(responses)
        self._repeat_last = repeat_last
        self._pos = 0
        self._lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []

    def complete(
        self,
        system_prompt: str,
        few_shot_turns: FewShotTurns,
        user_message: str,
        temperature: float,
        max_tokens: int,
    ) -> str:
        with self._lock:
            self.calls.append((system_prompt, user_message))
            if self._pos >= len(self._responses):
                if self._repeat_last and self._responses:
                    return self._responses[-1]
                raise RuntimeError("scripted backend exhausted")
            response = self._responses[self._pos]
            self._pos += 1
            return response


class HttpChatBackend:
    """Chat-completion endpoint client (OpenAI-compatible wire shape).

    The API key is read from the environment, never from configuration files.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "CHAT_API_KEY",
        timeout: float = 60.0,
        transport: Optional[httpx.BaseTransport] = None,
    ) -> None:
        self.model = model
        headers = {}
        api_key = os.environ.get(api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(
            base_url=base_url, timeout=timeout, headers=headers, transport=transport
        )

    def complete(
        self,
        system_prompt: str,
        few_shot_turns: FewShotTurns,
        user_message: str,
        temperature: float,
        max_tokens: int,
    ) -> str:
        messages = [{"role": "system", "content": system_prompt}]
        for shot_user, shot_assistant in few_shot_turns:
            messages.append({"role": "user", "content": shot_user})
            messages.append({"role": "assistant", "content": shot_assistant})
        messages.append({"role": "user", "content": user_message})
        response = self._client.post(
            "/chat/completions",
            json={
                "model": self.model,
                "messages": messages,
                "temperature": temperature,
                "max_tokens": max_tokens,
            },
        )
        response.raise_for_status()
        return response.json()["choices"][0]["message"]["content"]

    def close(self) -> None:
        self._client.close()
