"""Reference/hypothesis alignment and biased/unbiased error-rate scoring.

``align`` produces a minimal-edit alignment with a deterministic backtrace
(ties broken Match > Substitute > Delete > Insert), ``score`` splits the
errors by biasing-list membership, and ``aggregate`` pools per-utterance
counts into corpus rates. Total error counts never depend on the tie-break,
but the biased/unbiased attribution does, which is why the backtrace is
pinned.

Membership is decided per normalized token: multi-word keywords contribute
each of their tokens to the biased set. Substitutions and deletions follow
the reference word's membership; insertions follow the inserted hypothesis
word's membership by default (``insertion_policy="hypothesis"``), or can all
be charged to the unbiased side (``insertion_policy="unbiased"``). Under
either policy the biased and unbiased numerators sum exactly to the overall
error count, and the denominators sum to the reference length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

from .textnorm import tokenize

INSERTION_POLICIES = ("hypothesis", "unbiased")

COUNT_KEYS = (
    "sub", "del", "ins", "hits",
    "b_sub", "b_del", "b_ins", "b_hits",
    "ref_len", "b_ref_len",
)


class EditOp(NamedTuple):
    kind: str  # "match" | "sub" | "del" | "ins"
    ref_index: int | None
    hyp_index: int | None


@dataclass(frozen=True)
class Alignment:
    ops: tuple[EditOp, ...]
    cost: int


@dataclass(frozen=True)
class ScoreReport:
    """Error rates in percent; a rate is None when its denominator is 0."""

    wer: float | None
    uwer: float | None
    bwer: float | None
    recall: float | None
    counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "uwer": self.uwer,
            "bwer": self.bwer,
            "recall": self.recall,
            "counts": dict(self.counts),
        }


def normalize(text: str) -> list[str]:
    """Case-fold, strip punctuation (keeping intra-word ' and -), split."""
    return tokenize(text)


def align(ref: Sequence[str], hyp: Sequence[str]) -> Alignment:
    """Minimum-edit alignment of two token sequences, unit costs.

    The backtrace prefers Match, then Substitute, then Delete, then Insert
    whenever several predecessors achieve the optimal cost, so the returned
    trace is unique and reproducible.
    """
    nref, nhyp = len(ref), len(hyp)
    rows = [list(range(nhyp + 1))]
    for i in range(1, nref + 1):
        prev = rows[i - 1]
        cur = [i] + [0] * nhyp
        ri = ref[i - 1]
        for j in range(1, nhyp + 1):
            if ri == hyp[j - 1]:
                cur[j] = prev[j - 1]  # diagonal match is never beaten
            else:
                best = prev[j - 1]
                if prev[j] < best:
                    best = prev[j]
                if cur[j - 1] < best:
                    best = cur[j - 1]
                cur[j] = best + 1
        rows.append(cur)

    ops = []
    i, j = nref, nhyp
    while i > 0 or j > 0:
        cost_ij = rows[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and rows[i - 1][j - 1] == cost_ij:
            ops.append(EditOp("match", i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and rows[i - 1][j - 1] + 1 == cost_ij:
            ops.append(EditOp("sub", i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and rows[i - 1][j] + 1 == cost_ij:
            ops.append(EditOp("del", i - 1, None))
            i -= 1
        else:
            ops.append(EditOp("ins", None, j - 1))
            j -= 1
    ops.reverse()
    return Alignment(ops=tuple(ops), cost=rows[nref][nhyp])


def bias_token_set(keywords) -> set[str]:
    """Normalized single tokens covered by a keyword list.

    Accepts any iterable of keyword strings, or an object exposing
    ``entries`` (a biasing list).
    """
    tokens: set[str] = set()
    for keyword in getattr(keywords, "entries", keywords):
        tokens.update(tokenize(keyword))
    return tokens


def score(alignment: Alignment, ref: Sequence[str], hyp: Sequence[str],
          bias: Iterable[str], insertion_policy: str = "hypothesis") -> ScoreReport:
    """Attribute alignment errors to the biased/unbiased partition."""
    if insertion_policy not in INSERTION_POLICIES:
        raise ValueError(
            f"insertion_policy must be one of {INSERTION_POLICIES}, got {insertion_policy!r}"
        )
    ref_seen = sum(1 for op in alignment.ops if op.ref_index is not None)
    hyp_seen = sum(1 for op in alignment.ops if op.hyp_index is not None)
    if ref_seen != len(ref) or hyp_seen != len(hyp):
        raise ValueError(
            f"alignment covers {ref_seen} reference / {hyp_seen} hypothesis tokens, "
            f"inputs have {len(ref)} / {len(hyp)}"
        )

    biased = bias_token_set(bias)
    counts = dict.fromkeys(COUNT_KEYS, 0)
    counts["ref_len"] = len(ref)
    counts["b_ref_len"] = sum(1 for w in ref if w in biased)

    for op in alignment.ops:
        if op.kind == "match":
            counts["hits"] += 1
            if ref[op.ref_index] in biased:
                counts["b_hits"] += 1
        elif op.kind == "sub":
            counts["sub"] += 1
            if ref[op.ref_index] in biased:
                counts["b_sub"] += 1
        elif op.kind == "del":
            counts["del"] += 1
            if ref[op.ref_index] in biased:
                counts["b_del"] += 1
        else:
            counts["ins"] += 1
            if insertion_policy == "hypothesis" and hyp[op.hyp_index] in biased:
                counts["b_ins"] += 1
    return report_from_counts(counts)


def report_from_counts(counts: dict[str, int]) -> ScoreReport:
    """Recompute all rates from raw counts (shared by score and aggregate)."""
    ref_len = counts["ref_len"]
    b_ref_len = counts["b_ref_len"]
    u_ref_len = ref_len - b_ref_len
    errors = counts["sub"] + counts["del"] + counts["ins"]
    b_errors = counts["b_sub"] + counts["b_del"] + counts["b_ins"]
    u_errors = errors - b_errors

    wer = 100.0 * errors / ref_len if ref_len else None
    bwer = 100.0 * b_errors / b_ref_len if b_ref_len else None
    uwer = 100.0 * u_errors / u_ref_len if u_ref_len else None
    recall = 100.0 * counts["b_hits"] / b_ref_len if b_ref_len else None
    return ScoreReport(wer=wer, uwer=uwer, bwer=bwer, recall=recall, counts=dict(counts))


def aggregate(reports: Iterable[ScoreReport]) -> ScoreReport:
    """Pool count fields and recompute rates from the summed numerators.

    Never averages per-utterance percentages, so any partition of a corpus
    aggregates to the same report as the whole corpus.
    """
    totals = dict.fromkeys(COUNT_KEYS, 0)
    seen = 0
    for report in reports:
        seen += 1
        for key in COUNT_KEYS:
            totals[key] += report.counts[key]
    if seen == 0:
        raise ValueError("aggregate needs at least one report")
    return report_from_counts(totals)


def score_utterance(ref_text: str, hyp_text: str, bias: Iterable[str],
                    insertion_policy: str = "hypothesis") -> ScoreReport:
    """Normalize, align, and score one reference/hypothesis pair."""
    ref = normalize(ref_text)
    hyp = normalize(hyp_text)
    return score(align(ref, hyp), ref, hyp, bias, insertion_policy=insertion_policy)
