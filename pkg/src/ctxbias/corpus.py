"""Biasing-corpus construction: manifests, bias lists, slide clustering, stats.

A manifest is JSONL, one utterance per line:

    {"id": "u1", "transcript": "...", "slides": [{"index": 0, "keywords": [...]}],
     "hypothesis": "...", "embedding_path": "...", "slide_index": 0}

``hypothesis`` and ``embedding_path`` are optional. ``slide_index`` names the
slide on screen while the utterance was spoken (by its ``index`` value) and
defaults to the first listed slide; clustering windows are centered there.
Slide keywords are normalized and deduplicated on load.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError, ResourceError
from .kernel import SplitMix64
from .textnorm import contains_sequence, normalize_keyword, tokenize

PROVENANCE_CORE = "core"
PROVENANCE_DISTRACTOR = "distractor"


def _dedup(items: Iterable[str]) -> list[str]:
    seen = set()
    out = []
    for item in items:
        if item and item not in seen:
            seen.add(item)
            out.append(item)
    return out


@dataclass(frozen=True)
class Slide:
    index: int
    keywords: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "keywords", tuple(_dedup(normalize_keyword(k) for k in self.keywords))
        )

    def keyword_set(self) -> set[str]:
        return set(self.keywords)


@dataclass
class Utterance:
    id: str
    transcript: str
    slides: list[Slide] = field(default_factory=list)
    hypothesis: str | None = None
    embedding_path: str | None = None
    slide_index: int | None = None

    def context_keywords(self) -> list[str]:
        """Union of slide keywords in first-appearance order."""
        return _dedup(k for slide in self.slides for k in slide.keywords)

    def current_slide_position(self) -> int:
        """Position of the on-screen slide within ``slides``."""
        if not self.slides:
            raise ValueError(f"utterance {self.id!r} has no slides")
        if self.slide_index is None:
            return 0
        for pos, slide in enumerate(self.slides):
            if slide.index == self.slide_index:
                return pos
        raise ValueError(
            f"utterance {self.id!r}: slide_index {self.slide_index} matches no slide"
        )


@dataclass(frozen=True)
class BiasingList:
    """Ordered unique keywords with per-entry provenance (core/distractor)."""

    entries: tuple[str, ...]
    provenance: tuple[str, ...]

    def __post_init__(self):
        if len(self.entries) != len(self.provenance):
            raise ValueError("entries and provenance lengths differ")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("biasing list contains duplicate entries")

    def core_entries(self) -> list[str]:
        return [e for e, p in zip(self.entries, self.provenance) if p == PROVENANCE_CORE]

    def distractor_entries(self) -> list[str]:
        return [e for e, p in zip(self.entries, self.provenance) if p == PROVENANCE_DISTRACTOR]


@dataclass(frozen=True)
class VocabResources:
    """Frequent-word vocabulary plus a disjoint pool of rare words."""

    common_vocab: frozenset[str]
    rare_pool: tuple[str, ...]

    def __post_init__(self):
        overlap = self.common_vocab.intersection(self.rare_pool)
        if overlap:
            sample = ", ".join(sorted(overlap)[:5])
            raise ValueError(f"common vocabulary and rare pool overlap ({sample}, ...)")

    @classmethod
    def load(cls, common_path: str | Path, rare_path: str | Path) -> "VocabResources":
        common = load_wordlist(common_path)
        rare = load_wordlist(rare_path)
        return cls(common_vocab=frozenset(common), rare_pool=tuple(rare))


@dataclass(frozen=True)
class ContextStats:
    keyword_coverage_rate: float  # percent of transcript tokens that are core keywords
    information_rate: float  # percent of supplied keyword types that are core
    token_length_mean: float
    token_length_median: float

    def to_dict(self) -> dict:
        return {
            "keyword_coverage_rate": self.keyword_coverage_rate,
            "information_rate": self.information_rate,
            "token_length_mean": self.token_length_mean,
            "token_length_median": self.token_length_median,
        }


@dataclass(frozen=True)
class WindowClustering:
    """Merge the k consecutive slides centered on the current one."""

    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"window size must be >= 1, got {self.k}")


@dataclass(frozen=True)
class JaccardClustering:
    """Greedily merge adjacent slides while their Jaccard index stays >= threshold."""

    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"jaccard threshold must be in [0, 1], got {self.threshold}")


def _as_rng(seed: int | SplitMix64) -> SplitMix64:
    return seed if isinstance(seed, SplitMix64) else SplitMix64(seed)


def build_bias_list(transcript: str, vocab: VocabResources, n_distractors: int,
                    seed: int | SplitMix64) -> BiasingList:
    """Core keywords (transcript words outside the common vocabulary) plus
    seeded distractors drawn without replacement from the rare pool.

    Distractor candidates exclude every transcript word, so no distractor
    can ever appear in the reference. Raises ResourceError when the pool
    cannot supply ``n_distractors`` after exclusions.
    """
    if n_distractors < 0:
        raise ValueError(f"n_distractors must be >= 0, got {n_distractors}")
    tokens = tokenize(transcript)
    token_set = set(tokens)
    core = _dedup(t for t in tokens if t not in vocab.common_vocab)
    candidates = [w for w in vocab.rare_pool if w not in token_set]
    if len(candidates) < n_distractors:
        raise ResourceError(
            f"rare pool supplies only {len(candidates)} candidates after excluding "
            f"transcript words, need {n_distractors} "
            f"(short by {n_distractors - len(candidates)})"
        )
    distractors = _as_rng(seed).sample(candidates, n_distractors)
    entries = core + distractors
    provenance = [PROVENANCE_CORE] * len(core) + [PROVENANCE_DISTRACTOR] * len(distractors)
    return BiasingList(entries=tuple(entries), provenance=tuple(provenance))


def sample_distractor_count(seed: int | SplitMix64) -> int:
    """Training-style distractor count: uniform integer in [400, 800]."""
    return _as_rng(seed).randint(400, 800)


def jaccard(a: set[str], b: set[str]) -> float:
    """|a n b| / |a u b|; two empty sets count as identical (1.0)."""
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def cluster_slides(slides: Sequence[Slide],
                   mode: WindowClustering | JaccardClustering) -> list[list[str]]:
    """Merged keyword context for every slide position.

    Window mode unions the keywords of the k slides centered on each
    position, truncated at the deck boundaries (never wrapping). Jaccard
    mode splits the deck left-to-right whenever two adjacent slides' keyword
    sets fall below the threshold, then every slide inherits the union of
    its cluster. Unions preserve first-appearance order and deduplicate.
    """
    if isinstance(mode, WindowClustering):
        before = (mode.k - 1) // 2
        after = mode.k // 2
        merged = []
        for pos in range(len(slides)):
            lo = max(0, pos - before)
            hi = min(len(slides), pos + after + 1)
            merged.append(_dedup(k for s in slides[lo:hi] for k in s.keywords))
        return merged
    if isinstance(mode, JaccardClustering):
        clusters: list[list[int]] = []
        for pos, slide in enumerate(slides):
            if pos and jaccard(slides[pos - 1].keyword_set(), slide.keyword_set()) >= mode.threshold:
                clusters[-1].append(pos)
            else:
                clusters.append([pos])
        merged = [[] for _ in slides]
        for members in clusters:
            union = _dedup(k for p in members for k in slides[p].keywords)
            for p in members:
                merged[p] = union
        return merged
    raise ValueError(f"unknown clustering mode {mode!r}")


def merge_utterance_context(utterance: Utterance,
                            mode: WindowClustering | JaccardClustering) -> list[str]:
    """The merged context for an utterance's own (current) slide."""
    merged = cluster_slides(utterance.slides, mode)
    return merged[utterance.current_slide_position()]


def core_keywords(transcript_tokens: list[str], keywords: Iterable[str]) -> list[str]:
    """Keyword types whose normalized tokens occur in the transcript."""
    return [k for k in keywords if contains_sequence(transcript_tokens, k.split())]


def context_stats(utterances: Sequence[Utterance]) -> ContextStats:
    """Corpus-level coverage/information rates and context-length stats.

    Coverage is token-level (share of transcript tokens that belong to a
    core keyword) and the information rate is type-level (share of supplied
    keyword types that are core). Both pool numerators and denominators over
    the corpus rather than averaging per-utterance rates.
    """
    if not utterances:
        raise ValueError("context_stats needs at least one utterance")
    cover_num = cover_den = 0
    info_num = info_den = 0
    lengths = []
    for utt in utterances:
        transcript_tokens = tokenize(utt.transcript)
        keywords = utt.context_keywords()
        core = core_keywords(transcript_tokens, keywords)
        core_tokens = {t for k in core for t in k.split()}
        cover_num += sum(1 for t in transcript_tokens if t in core_tokens)
        cover_den += len(transcript_tokens)
        info_num += len(core)
        info_den += len(keywords)
        lengths.append(sum(len(k.split()) for k in keywords))
    return ContextStats(
        keyword_coverage_rate=100.0 * cover_num / cover_den if cover_den else 0.0,
        information_rate=100.0 * info_num / info_den if info_den else 0.0,
        token_length_mean=float(statistics.fmean(lengths)),
        token_length_median=float(statistics.median(lengths)),
    )


def load_wordlist(path: str | Path) -> list[str]:
    """One word per line, UTF-8; normalized and deduplicated, order kept."""
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = normalize_keyword(line.strip())
        if word:
            words.append(word)
    return _dedup(words)


def utterance_from_dict(doc: dict, origin: str = "manifest") -> Utterance:
    try:
        slides = [
            Slide(index=int(s["index"]), keywords=tuple(s["keywords"]))
            for s in doc.get("slides", [])
        ]
        return Utterance(
            id=str(doc["id"]),
            transcript=str(doc["transcript"]),
            slides=slides,
            hypothesis=doc.get("hypothesis"),
            embedding_path=doc.get("embedding_path"),
            slide_index=doc.get("slide_index"),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{origin}: bad utterance record ({exc!r})") from exc


def utterance_to_dict(utt: Utterance) -> dict:
    doc: dict = {
        "id": utt.id,
        "transcript": utt.transcript,
        "slides": [{"index": s.index, "keywords": list(s.keywords)} for s in utt.slides],
    }
    if utt.hypothesis is not None:
        doc["hypothesis"] = utt.hypothesis
    if utt.embedding_path is not None:
        doc["embedding_path"] = utt.embedding_path
    if utt.slide_index is not None:
        doc["slide_index"] = utt.slide_index
    return doc


def load_manifest(path: str | Path) -> list[Utterance]:
    """Parse a JSONL manifest; parse errors carry the 1-based line number."""
    utterances = []
    ids = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        utt = utterance_from_dict(doc, origin=f"{path}:{lineno}")
        if utt.id in ids:
            raise ParseError(f"{path}:{lineno}: duplicate utterance id {utt.id!r}")
        ids.add(utt.id)
        utterances.append(utt)
    return utterances


def dump_manifest(utterances: Iterable[Utterance]) -> str:
    return "".join(
        json.dumps(utterance_to_dict(u), sort_keys=True, ensure_ascii=False) + "\n"
        for u in utterances
    )
