"""Native ROUGE implementation used for checkpoint selection and evaluation.

Scoring convention, fixed so results reproduce bit-exactly: lowercase,
whitespace tokenization, no stemming; sentence boundaries are newlines.
All three score components reduce to integer counts, and F1 is computed
as 2*hits / (cand_total + ref_total) so every value is a single
correctly-rounded float division.

External metrics (BERTScore, METEOR, sacreBLEU, NIST, SummaC) are not
implemented here; `run_external_metric` shells out to a plugin that
reads candidate/reference pairs as JSON on stdin and prints a
{name: float} JSON object.
"""

from __future__ import annotations

import json
import subprocess
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, hits: int, cand_total: int, ref_total: int) -> "RougeScore":
        p = hits / cand_total if cand_total else 0.0
        r = hits / ref_total if ref_total else 0.0
        f = 2 * hits / (cand_total + ref_total) if (cand_total + ref_total) else 0.0
        return cls(precision=p, recall=r, f1=f)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def sentences(text: str) -> list[list[str]]:
    return [tokenize(s) for s in text.split("\n") if s.strip()]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    """Clipped n-gram overlap: P over candidate grams, R over reference grams."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    cand = _ngrams(candidate, n)
    ref = _ngrams(reference, n)
    hits = sum(min(c, ref[g]) for g, c in cand.items())
    return RougeScore.from_counts(hits, sum(cand.values()), sum(ref.values()))


def _lcs_table(a: Sequence[str], b: Sequence[str]) -> list[list[int]]:
    m, n = len(a), len(b)
    t = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        ai = a[i - 1]
        row, prev = t[i], t[i - 1]
        for j in range(1, n + 1):
            if ai == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = row[j - 1] if row[j - 1] >= prev[j] else prev[j]
    return t


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    return _lcs_table(a, b)[len(a)][len(b)]


def _lcs_positions(ref: Sequence[str], cand: Sequence[str]) -> set[int]:
    """Positions in `ref` taken by one canonical longest common subsequence."""
    if not ref or not cand:
        return set()
    t = _lcs_table(ref, cand)
    out: set[int] = set()
    i, j = len(ref), len(cand)
    while i > 0 and j > 0:
        if ref[i - 1] == cand[j - 1]:
            out.add(i - 1)
            i -= 1
            j -= 1
        elif t[i - 1][j] >= t[i][j - 1]:
            i -= 1
        else:
            j -= 1
    return out


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    """Longest-common-subsequence overlap over whole token sequences."""
    hits = lcs_length(candidate, reference)
    return RougeScore.from_counts(hits, len(candidate), len(reference))


def rouge_lsum(
    candidate_sentences: Sequence[Sequence[str]],
    reference_sentences: Sequence[Sequence[str]],
) -> RougeScore:
    """Summary-level ROUGE-L: union-LCS per reference sentence.

    Each reference sentence contributes the union of its LCS positions
    against every candidate sentence; hits are clipped by candidate
    token multiplicity so no candidate token is credited twice.
    """
    cand_total = sum(len(s) for s in candidate_sentences)
    ref_total = sum(len(s) for s in reference_sentences)
    budget = Counter()
    for s in candidate_sentences:
        budget.update(s)
    hits = 0
    for ref_sent in reference_sentences:
        union: set[int] = set()
        for cand_sent in candidate_sentences:
            union |= _lcs_positions(ref_sent, cand_sent)
        for pos in union:
            tok = ref_sent[pos]
            if budget[tok] > 0:
                budget[tok] -= 1
                hits += 1
    return RougeScore.from_counts(hits, cand_total, ref_total)


def score_pair(candidate_text: str, reference_text: str) -> dict[str, RougeScore]:
    """All four metrics for one candidate/reference pair of texts."""
    cand = tokenize(candidate_text)
    ref = tokenize(reference_text)
    return {
        "rouge1": rouge_n(cand, ref, 1),
        "rouge2": rouge_n(cand, ref, 2),
        "rougeL": rouge_l(cand, ref),
        "rougeLsum": rouge_lsum(sentences(candidate_text), sentences(reference_text)),
    }


METRIC_NAMES = ("rouge1", "rouge2", "rougeL", "rougeLsum")


@dataclass(frozen=True)
class EvalReport:
    doc_count: int
    per_doc: tuple[dict[str, RougeScore], ...]
    means: dict[str, RougeScore]

    def to_json(self) -> dict:
        def enc(s: RougeScore) -> dict:
            return {"precision": s.precision, "recall": s.recall, "f1": s.f1}

        return {
            "version": 1,
            "doc_count": self.doc_count,
            "corpus": {m: enc(self.means[m]) for m in METRIC_NAMES},
            "documents": [
                {m: enc(doc[m]) for m in METRIC_NAMES} for doc in self.per_doc
            ],
        }


def evaluate_corpus(pairs: Sequence[tuple[str, str]]) -> EvalReport:
    """Score every (candidate, reference) text pair and average the components."""
    if not pairs:
        raise DataError("cannot evaluate an empty corpus")
    per_doc = tuple(score_pair(c, r) for c, r in pairs)
    n = len(per_doc)
    means = {
        m: RougeScore(
            precision=sum(d[m].precision for d in per_doc) / n,
            recall=sum(d[m].recall for d in per_doc) / n,
            f1=sum(d[m].f1 for d in per_doc) / n,
        )
        for m in METRIC_NAMES
    }
    return EvalReport(doc_count=n, per_doc=per_doc, means=means)


def run_external_metric(
    command: list[str], pairs: Sequence[tuple[str, str]], timeout: float = 300.0
) -> dict[str, float]:
    """Invoke a metric plugin subprocess; returns its {name: value} output."""
    payload = json.dumps(
        {"pairs": [{"candidate": c, "reference": r} for c, r in pairs]}
    )
    proc = subprocess.run(
        command,
        input=payload.encode("utf-8"),
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        timeout=timeout,
    )
    if proc.returncode != 0:
        raise DataError(
            f"metric plugin failed with code {proc.returncode}: "
            f"{proc.stderr.decode('utf-8', 'replace').strip()}"
        )
    try:
        out = json.loads(proc.stdout.decode("utf-8"))
        return {str(k): float(v) for k, v in out.items()}
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise DataError(f"metric plugin emitted invalid JSON: {exc}") from exc
