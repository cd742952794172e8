"""Context pruning: oracle and similarity baselines, an HTTP model pruner,
prompt rendering for the three pipeline modes, and pruning-quality F1.

Prompts are rendered byte-exactly from fixed templates. When marker mode is
on, the keyword region is wrapped in ``<|startofcontext|>`` /
``<|endofcontext|>`` so a downstream consumer can locate exactly which
character span is eligible for context compression; instruction text stays
outside the markers.
"""

from __future__ import annotations

import json
import logging
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Iterable

from .corpus import BiasingList
from .errors import ParseError, ProtocolError, TransportError
from .textnorm import contains_sequence, normalize_keyword, tokenize

log = logging.getLogger(__name__)

START_OF_CONTEXT = "<|startofcontext|>"
END_OF_CONTEXT = "<|endofcontext|>"

MODE_PC = "pc-with-keywords"
MODE_PC_NO_KEYWORDS = "pc-no-keywords"
MODE_TPI_PRUNE = "tpi-prune"
MODE_TPI_RECOGNIZE = "tpi-recognize"
MODE_JPI = "jpi"

_PC_TEMPLATE = (
    "Transcribe speech to text according to keywords that may appear in the "
    "utterance. Possible keywords are: {}"
)

PROMPT_TEMPLATES = {
    MODE_PC: _PC_TEMPLATE,
    MODE_PC_NO_KEYWORDS: "Transcribe speech to text.",
    MODE_TPI_PRUNE: (
        "Select keywords that may appear in the speech from the following "
        "keywords list: {}"
    ),
    MODE_TPI_RECOGNIZE: _PC_TEMPLATE,
    MODE_JPI: (
        "First select keywords that may appear in the speech from given "
        "keywords list. Then transcribe speech to text according to selected "
        "keywords. Keywords are: {}"
    ),
}

_JPI_KEYWORDS_MARKER = "Selected keywords are:"
_JPI_TRANSCRIPTION_MARKER = "Transcription:"


@dataclass(frozen=True)
class PruneResult:
    """Kept keywords in order, optional per-keyword scores, and the pruner kind."""

    kept: tuple[str, ...]
    scores: tuple[float, ...] | None
    source: str  # "oracle" | "similarity" | "model"

    def to_dict(self, utterance_id: str | None = None) -> dict:
        doc: dict = {"kept": list(self.kept), "source": self.source}
        if utterance_id is not None:
            doc["id"] = utterance_id
        if self.scores is not None:
            doc["scores"] = list(self.scores)
        return doc


@dataclass(frozen=True)
class RenderedPrompt:
    mode: str
    text: str
    context_span: tuple[int, int] | None

    def keyword_region(self) -> str:
        if self.context_span is None:
            return ""
        return self.text[self.context_span[0] : self.context_span[1]]


@dataclass(frozen=True)
class JpiResponse:
    selected_keywords: tuple[str, ...]
    transcription: str


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to reach the external inference endpoint."""

    base_url: str
    timeout: float = 10.0
    max_retries: int = 3
    backoff_base: float = 0.5


def _keyword_list(keywords: BiasingList | Iterable[str]) -> list[str]:
    raw = keywords.entries if isinstance(keywords, BiasingList) else keywords
    out = []
    seen = set()
    for k in raw:
        norm = normalize_keyword(k)
        if norm and norm not in seen:
            seen.add(norm)
            out.append(norm)
    return out


def oracle_prune(keywords: BiasingList | Iterable[str], transcript: str) -> PruneResult:
    """Keep exactly the keywords that occur in the transcript, input order."""
    transcript_tokens = tokenize(transcript)
    kept = [
        k for k in _keyword_list(keywords)
        if contains_sequence(transcript_tokens, k.split())
    ]
    return PruneResult(kept=tuple(kept), scores=None, source="oracle")


def edit_distance(a: str, b: str) -> int:
    """Character-level Levenshtein distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def word_similarity(a: str, b: str) -> float:
    """1 - edit_distance / max length, in [0, 1]."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - edit_distance(a, b) / longest


def similarity_prune(keywords: BiasingList | Iterable[str], reference_text: str,
                     top_k: int | None = None, threshold: float = 0.8) -> PruneResult:
    """Similarity baseline: score each keyword by its best normalized edit
    similarity against any reference word; keep scores >= threshold, capped
    at the top_k best (ties resolved by input order). Kept keywords are
    reported in input order with their scores.
    """
    if top_k is not None and top_k < 0:
        raise ValueError(f"top_k must be >= 0, got {top_k}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    candidates = _keyword_list(keywords)
    reference_words = tokenize(reference_text)
    scored = []
    for pos, keyword in enumerate(candidates):
        best = max((word_similarity(keyword, w) for w in reference_words), default=0.0)
        if best >= threshold:
            scored.append((pos, keyword, best))
    if top_k is not None and len(scored) > top_k:
        scored = sorted(scored, key=lambda item: (-item[2], item[0]))[:top_k]
        scored.sort(key=lambda item: item[0])
    return PruneResult(
        kept=tuple(k for _, k, _ in scored),
        scores=tuple(s for _, _, s in scored),
        source="similarity",
    )


def render_prompt(mode: str, keywords: Iterable[str] = (),
                  with_markers: bool = False) -> RenderedPrompt:
    """Instantiate a prompt template; keywords are joined by ", ".

    Every mode except ``pc-no-keywords`` requires at least one keyword.
    With markers enabled the joined keyword region is wrapped by the
    start/end context tokens and ``context_span`` points at the region
    inside them.
    """
    if mode not in PROMPT_TEMPLATES:
        raise ValueError(f"unknown prompt mode {mode!r} (expected one of {sorted(PROMPT_TEMPLATES)})")
    template = PROMPT_TEMPLATES[mode]
    if mode == MODE_PC_NO_KEYWORDS:
        return RenderedPrompt(mode=mode, text=template, context_span=None)
    keywords = list(keywords)
    if not keywords:
        raise ValueError(f"prompt mode {mode!r} requires keywords")
    joined = ", ".join(keywords)
    prefix, suffix = template.split("{}")
    if with_markers:
        text = prefix + START_OF_CONTEXT + joined + END_OF_CONTEXT + suffix
        start = len(prefix) + len(START_OF_CONTEXT)
    else:
        text = prefix + joined + suffix
        start = len(prefix)
    return RenderedPrompt(mode=mode, text=text, context_span=(start, start + len(joined)))


def render_joint_response(keywords: Iterable[str], transcription: str) -> str:
    """The joint pruning+recognition response format."""
    return (
        f"{_JPI_KEYWORDS_MARKER} {', '.join(keywords)}. "
        f"{_JPI_TRANSCRIPTION_MARKER} {transcription}"
    )


def parse_joint_response(text: str) -> JpiResponse:
    """Split a joint response into its keyword list and transcription.

    Raises ParseError (carrying the offending text) when either marker
    phrase is missing or the transcription is empty.
    """
    kw_at = text.find(_JPI_KEYWORDS_MARKER)
    if kw_at < 0:
        raise ParseError(f"missing {_JPI_KEYWORDS_MARKER!r} in response: {text!r}")
    tr_at = text.find(_JPI_TRANSCRIPTION_MARKER, kw_at + len(_JPI_KEYWORDS_MARKER))
    if tr_at < 0:
        raise ParseError(f"missing {_JPI_TRANSCRIPTION_MARKER!r} in response: {text!r}")
    segment = text[kw_at + len(_JPI_KEYWORDS_MARKER) : tr_at].strip()
    segment = segment.rstrip(".").strip()
    selected = tuple(k.strip() for k in segment.split(",") if k.strip())
    transcription = text[tr_at + len(_JPI_TRANSCRIPTION_MARKER) :].strip()
    if not transcription:
        raise ParseError(f"empty transcription in response: {text!r}")
    return JpiResponse(selected_keywords=selected, transcription=transcription)


def prune_f1(predicted: PruneResult | Iterable[str], gold: Iterable[str]) -> float:
    """Set-level F1 over normalized keyword types, in [0, 1].

    Two empty sets score 1.0; exactly one empty set scores 0.0.
    """
    pred_list = predicted.kept if isinstance(predicted, PruneResult) else predicted
    pred = {normalize_keyword(k) for k in pred_list} - {""}
    gold_set = {normalize_keyword(k) for k in gold} - {""}
    if not pred and not gold_set:
        return 1.0
    if not pred or not gold_set:
        return 0.0
    true_pos = len(pred & gold_set)
    precision = true_pos / len(pred)
    recall = true_pos / len(gold_set)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def corpus_prune_f1(pairs: Iterable[tuple[Iterable[str], Iterable[str]]]) -> float:
    """Micro-averaged F1 over (predicted, gold) keyword pairs, in [0, 1].

    Pools true/false positives and misses across utterances; the same
    edge-case rules as :func:`prune_f1` apply to the pooled sets.
    """
    true_pos = pred_total = gold_total = 0
    for predicted, gold in pairs:
        pred = {normalize_keyword(k) for k in predicted} - {""}
        gold_set = {normalize_keyword(k) for k in gold} - {""}
        true_pos += len(pred & gold_set)
        pred_total += len(pred)
        gold_total += len(gold_set)
    if pred_total == 0 and gold_total == 0:
        return 1.0
    if pred_total == 0 or gold_total == 0:
        return 0.0
    precision = true_pos / pred_total
    recall = true_pos / gold_total
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class PruneRequest:
    """One model-pruning call: the keyword list plus a payload reference
    (an embedding or audio file the endpoint can resolve)."""

    keywords: tuple[str, ...]
    payload_ref: str | None = None
    mode: str = MODE_TPI_PRUNE


def _post_json(url: str, payload: dict, timeout: float) -> str:
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(
        url, data=body, headers={"Content-Type": "application/json"}, method="POST"
    )
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read().decode("utf-8")


def model_prune(request: PruneRequest, endpoint: EndpointConfig) -> PruneResult:
    """Ask an external inference endpoint to prune the keyword list.

    Sends ``{"prompt": ..., "payload_ref": ...}`` and expects
    ``{"text": ...}`` with a comma- or newline-separated keyword list.
    Keywords the model invents (not in the input list) are dropped with a
    warning. Transport failures are retried with exponential backoff up to
    the configured cap, then raised as TransportError; an undecodable body
    raises ProtocolError carrying the raw body.
    """
    candidates = _keyword_list(request.keywords)
    if not candidates:
        raise ValueError("model_prune requires a non-empty keyword list")
    prompt = render_prompt(request.mode, candidates).text
    payload = {"prompt": prompt, "payload_ref": request.payload_ref}

    last_error: Exception | None = None
    for attempt in range(endpoint.max_retries + 1):
        if attempt:
            time.sleep(endpoint.backoff_base * 2 ** (attempt - 1))
        try:
            raw = _post_json(endpoint.base_url, payload, endpoint.timeout)
            break
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last_error = exc
            log.warning("endpoint attempt %d/%d failed: %s",
                        attempt + 1, endpoint.max_retries + 1, exc)
    else:
        raise TransportError(
            f"endpoint {endpoint.base_url} unreachable after "
            f"{endpoint.max_retries + 1} attempts: {last_error}"
        ) from last_error

    try:
        doc = json.loads(raw)
        text = doc["text"]
        if not isinstance(text, str):
            raise TypeError(f"'text' is {type(text).__name__}, not str")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ProtocolError(f"endpoint body is not {{'text': ...}}: {exc!r}", body=raw) from exc

    allowed = set(candidates)
    kept = []
    seen = set()
    for piece in re.split(r"[,\n]", text):
        keyword = normalize_keyword(piece)
        if not keyword or keyword in seen:
            continue
        if keyword not in allowed:
            log.warning("dropping keyword %r not in the input list", keyword)
            continue
        seen.add(keyword)
        kept.append(keyword)
    return PruneResult(kept=tuple(kept), scores=None, source="model")
