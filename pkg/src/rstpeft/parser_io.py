"""Discourse-parse ingestion, validation, serialization and synthesis.

The wire format is JSONL, one document per line:

    {"doc_id": str, "token_count": int, "edus": [[start, end], ...],
     "k": int, "labels": {"Asynchronous": "Temporal", ...},
     "relations": [{"i": int, "j": int, "type": str, "p": float}, ...]}

Only nonzero probability cells are listed; absent cells densify to 0.
The diagonal of the probability tensor is structurally zero: no unit
supports itself.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseFileError, SchemaError
from .tokens import FIRST_CONTENT_ID
from .util import round_half_up

# Grouped relation types, in canonical axis order, with the default
# mapping from raw parser labels.
RELATION_GROUPS = ("Temporal", "Contingency", "Comparison", "Expansion")

# Half-width of the per-unit cell jitter, as a fraction of the class range.
ROW_JITTER_FRACTION = 0.1

DEFAULT_LABEL_MAP = {
    "Asynchronous": "Temporal",
    "Synchronous": "Temporal",
    "Cause": "Contingency",
    "Condition": "Contingency",
    "Contrast": "Comparison",
    "Concession": "Comparison",
    "Explanation": "Expansion",
    "Elaboration": "Expansion",
    "Conjunction": "Expansion",
}


@dataclass(frozen=True)
class EDUSegmentation:
    """Token spans of the elementary discourse units of one document.

    Spans are half-open ``[start, end)``, contiguous and in order;
    the first starts at 0 and the last ends at or before token_count.
    """

    doc_id: str
    spans: tuple[tuple[int, int], ...]
    token_count: int

    @property
    def n_edu(self) -> int:
        return len(self.spans)

    def violations(self) -> list[str]:
        out: list[str] = []
        if not self.spans:
            out.append("segmentation has no spans")
            return out
        for idx, (s, e) in enumerate(self.spans):
            if e - s < 1:
                out.append(f"span {idx} has length < 1")
        if self.spans[0][0] != 0:
            out.append("first span does not start at 0")
        for idx in range(1, len(self.spans)):
            prev_end = self.spans[idx - 1][1]
            start = self.spans[idx][0]
            if start < prev_end:
                out.append(f"spans overlap at index {idx}")
            elif start > prev_end:
                out.append(f"spans leave a gap at index {idx}")
        if self.spans[-1][1] > self.token_count:
            out.append("last span ends past token_count")
        return out


@dataclass
class ParseOutput:
    """Dense discourse-probability tensor plus its segmentation.

    ``probs[i, j, k]`` is the probability that unit i is the nucleus of
    unit j under grouped relation k.  ``groups`` fixes the k-axis order;
    ``label_map`` maps raw parser labels onto those groups.
    """

    segmentation: EDUSegmentation
    probs: np.ndarray
    label_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_LABEL_MAP))
    groups: tuple[str, ...] = RELATION_GROUPS

    @property
    def n_edu(self) -> int:
        return int(self.probs.shape[0])

    @property
    def k_relations(self) -> int:
        return int(self.probs.shape[2])

    def violations(self) -> list[str]:
        out = self.segmentation.violations()
        p = self.probs
        if p.ndim != 3 or p.shape[0] != p.shape[1]:
            out.append("probability tensor is not n_edu x n_edu x k")
            return out
        if p.shape[0] != self.segmentation.n_edu:
            out.append("n_edu does not match segmentation span count")
        if len(self.groups) != p.shape[2]:
            out.append("k does not match relation group count")
        diag = p[np.arange(p.shape[0]), np.arange(p.shape[0]), :]
        if np.any(diag != 0.0):
            out.append("nonzero diagonal")
        if np.any(p < 0.0) or np.any(p > 1.0):
            out.append("probability out of range")
        if not np.all(np.isfinite(p)):
            out.append("non-finite probability")
        return out


@dataclass(frozen=True)
class ValidationReport:
    doc_id: str
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(parse: ParseOutput) -> ValidationReport:
    """Report every violated invariant; empty report iff the parse is valid."""
    return ValidationReport(parse.segmentation.doc_id, tuple(parse.violations()))


def _groups_from_labels(labels: dict[str, str]) -> tuple[str, ...]:
    """Fix the k-axis order for a label map.

    The canonical four-group order is used whenever the map targets a
    subset of it; otherwise groups are ordered by first appearance so
    the order survives a serialization round trip.
    """
    targets = list(dict.fromkeys(labels.values()))
    if set(targets) <= set(RELATION_GROUPS):
        return tuple(g for g in RELATION_GROUPS if g in targets) or RELATION_GROUPS
    return tuple(targets)


def parse_record(obj: dict, line_no: int = 0) -> ParseOutput:
    """Densify and validate one JSONL record."""
    try:
        doc_id = obj["doc_id"]
        token_count = int(obj["token_count"])
        spans = tuple((int(s), int(e)) for s, e in obj["edus"])
        k = int(obj["k"])
        labels = dict(obj.get("labels") or DEFAULT_LABEL_MAP)
        relations = obj.get("relations", [])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseFileError(line_no, f"malformed record ({exc})") from exc

    groups = _groups_from_labels(labels)
    if len(groups) != k:
        raise SchemaError(
            f"{doc_id}: k={k} but label map yields {len(groups)} grouped types"
        )
    group_index = {g: i for i, g in enumerate(groups)}

    seg = EDUSegmentation(doc_id=doc_id, spans=spans, token_count=token_count)
    seg_problems = seg.violations()
    if seg_problems:
        raise SchemaError(f"{doc_id}: {seg_problems[0]}")

    n = seg.n_edu
    probs = np.zeros((n, n, k), dtype=np.float64)
    for rec in relations:
        try:
            i, j, p = int(rec["i"]), int(rec["j"]), float(rec["p"])
            raw = rec.get("type", rec.get("k"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseFileError(line_no, f"malformed relation record ({exc})") from exc
        if raw in labels:
            group = labels[raw]
        elif raw in group_index:
            group = raw
        else:
            raise SchemaError(f"{doc_id}: unknown relation label {raw!r}")
        if not (0 <= i < n and 0 <= j < n):
            raise SchemaError(f"{doc_id}: relation index ({i},{j}) out of range")
        if i == j:
            raise SchemaError(f"{doc_id}: diagonal must be zero (i=j={i})")
        if not (0.0 <= p <= 1.0):
            raise SchemaError(f"{doc_id}: probability out of range ({p})")
        probs[i, j, group_index[group]] = p

    parse = ParseOutput(segmentation=seg, probs=probs, label_map=labels, groups=groups)
    problems = parse.violations()
    if problems:
        raise SchemaError(f"{doc_id}: {problems[0]}")
    return parse


def serialize_parse(parse: ParseOutput) -> dict:
    """Sparse JSON form of a parse; only nonzero cells are listed."""
    group_of = {i: g for i, g in enumerate(parse.groups)}
    # Write labels grouped in k-axis order so the order is recoverable.
    labels = dict(
        sorted(
            parse.label_map.items(),
            key=lambda kv: (parse.groups.index(kv[1]) if kv[1] in parse.groups else 0, kv[0]),
        )
    )
    nz = np.argwhere(parse.probs != 0.0)
    relations = [
        {
            "i": int(i),
            "j": int(j),
            "type": group_of[int(g)],
            "p": float(parse.probs[i, j, g]),
        }
        for i, j, g in nz
    ]
    return {
        "doc_id": parse.segmentation.doc_id,
        "token_count": parse.segmentation.token_count,
        "edus": [[s, e] for s, e in parse.segmentation.spans],
        "k": parse.k_relations,
        "labels": labels,
        "relations": relations,
    }


def write_parses(path: str | Path, parses: list[ParseOutput]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for parse in parses:
            f.write(json.dumps(serialize_parse(parse)) + "\n")


def load_parses(path: str | Path) -> list[ParseOutput]:
    """Load every document in a parse file, densifying sparse records."""
    out: list[ParseOutput] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseFileError(line_no, f"invalid JSON ({exc.msg})") from exc
            out.append(parse_record(obj, line_no))
    return out


def load_parse(path: str | Path, doc_id: str | None = None) -> ParseOutput:
    """Load a single document; `doc_id` selects one from a multi-doc file."""
    parses = load_parses(path)
    if doc_id is not None:
        for p in parses:
            if p.segmentation.doc_id == doc_id:
                return p
        raise SchemaError(f"doc_id {doc_id!r} not found in {path}")
    if len(parses) != 1:
        raise SchemaError(
            f"{path} holds {len(parses)} documents; pass doc_id to pick one"
        )
    return parses[0]


# -- synthetic corpus --------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for the planted-nucleus benchmark corpus.

    Nucleus rows of the probability tensor draw from nucleus_prob_range,
    satellite rows from satellite_prob_range; the ranges are disjoint with
    the nucleus range strictly higher, so nucleus rows always carry more
    incoming support.  The reference summary is the concatenation of the
    nucleus units' tokens in document order.
    """

    n_docs: int
    n_edu_range: tuple[int, int] = (6, 10)
    tokens_per_edu_range: tuple[int, int] = (3, 5)
    nucleus_ratio: float = 0.3
    nucleus_prob_range: tuple[float, float] = (0.6, 0.95)
    satellite_prob_range: tuple[float, float] = (0.05, 0.35)
    vocab_size: int = 512
    seed: int = 0

    def check(self) -> None:
        if self.n_docs < 1:
            raise ConfigError("n_docs must be >= 1")
        lo, hi = self.n_edu_range
        if not (2 <= lo <= hi):
            raise ConfigError("n_edu_range must be well-ordered with min >= 2")
        tlo, thi = self.tokens_per_edu_range
        if not (1 <= tlo <= thi):
            raise ConfigError("tokens_per_edu_range must be well-ordered with min >= 1")
        if not (0.0 < self.nucleus_ratio < 1.0):
            raise ConfigError("nucleus_ratio must lie in (0, 1)")
        nlo, nhi = self.nucleus_prob_range
        slo, shi = self.satellite_prob_range
        for name, (a, b) in (
            ("nucleus_prob_range", (nlo, nhi)),
            ("satellite_prob_range", (slo, shi)),
        ):
            if not (0.0 <= a <= b <= 1.0):
                raise ConfigError(f"{name} must be well-ordered within [0, 1]")
        if not shi < nlo:
            raise ConfigError(
                "satellite_prob_range must sit strictly below nucleus_prob_range"
            )
        if self.vocab_size <= FIRST_CONTENT_ID:
            raise ConfigError(f"vocab_size must exceed {FIRST_CONTENT_ID}")
        if round_half_up(self.nucleus_ratio * lo) < 1:
            raise ConfigError("nucleus count rounds to 0 for the smallest document")


@dataclass(frozen=True)
class SynthDoc:
    parse: ParseOutput
    doc_tokens: tuple[int, ...]
    summary_tokens: tuple[int, ...]
    nucleus_edus: tuple[int, ...]


def synth_parse(config: SynthConfig) -> list[SynthDoc]:
    """Generate a deterministic corpus of parses with planted nuclei."""
    config.check()
    rng = np.random.default_rng(config.seed)
    docs: list[SynthDoc] = []
    k = len(RELATION_GROUPS)
    for d in range(config.n_docs):
        n_edu = int(rng.integers(config.n_edu_range[0], config.n_edu_range[1] + 1))
        lengths = rng.integers(
            config.tokens_per_edu_range[0],
            config.tokens_per_edu_range[1] + 1,
            size=n_edu,
        )
        spans, start = [], 0
        for ln in lengths:
            spans.append((start, start + int(ln)))
            start += int(ln)
        token_count = start

        n_nuc = round_half_up(config.nucleus_ratio * n_edu)
        if n_nuc < 1:
            raise ConfigError(f"document {d}: nucleus count rounds to 0")
        nuclei = np.sort(rng.choice(n_edu, size=n_nuc, replace=False))
        is_nucleus = np.zeros(n_edu, dtype=bool)
        is_nucleus[nuclei] = True

        # Each unit draws one support strength from its class range; cell
        # probabilities concentrate around it (a parser's confidence about a
        # unit is correlated across that unit's support cells).  Cells stay
        # clipped inside the configured range.
        probs = np.zeros((n_edu, n_edu, k), dtype=np.float64)
        for i in range(n_edu):
            lo, hi = (
                config.nucleus_prob_range if is_nucleus[i] else config.satellite_prob_range
            )
            strength = float(rng.uniform(lo, hi))
            jitter = ROW_JITTER_FRACTION * (hi - lo)
            cell_lo = max(lo, strength - jitter)
            cell_hi = min(hi, strength + jitter)
            draws = rng.uniform(cell_lo, cell_hi, size=(n_edu, k))
            draws[i, :] = 0.0
            probs[i] = draws

        # Content tokens are drawn without replacement when the vocabulary
        # allows it, so a token identifies its document position uniquely.
        n_content = config.vocab_size - FIRST_CONTENT_ID
        if n_content >= token_count:
            tokens = FIRST_CONTENT_ID + rng.choice(n_content, size=token_count, replace=False)
        else:
            tokens = rng.integers(FIRST_CONTENT_ID, config.vocab_size, size=token_count)
        doc_tokens = tuple(int(t) for t in tokens)
        summary: list[int] = []
        for i in nuclei:
            s, e = spans[i]
            summary.extend(doc_tokens[s:e])

        seg = EDUSegmentation(
            doc_id=f"synth-{d:04d}", spans=tuple(spans), token_count=token_count
        )
        parse = ParseOutput(segmentation=seg, probs=probs)
        docs.append(
            SynthDoc(
                parse=parse,
                doc_tokens=doc_tokens,
                summary_tokens=tuple(summary),
                nucleus_edus=tuple(int(i) for i in nuclei),
            )
        )
    return docs


def write_corpus(path: str | Path, docs: list[SynthDoc]) -> None:
    """Companion JSONL carrying document and reference-summary tokens."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(
                json.dumps(
                    {
                        "doc_id": doc.parse.segmentation.doc_id,
                        "tokens": list(doc.doc_tokens),
                        "summary": list(doc.summary_tokens),
                    }
                )
                + "\n"
            )


def load_corpus(path: str | Path) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
    """Map doc_id -> (document tokens, reference summary tokens)."""
    out: dict[str, tuple[tuple[int, ...], tuple[int, ...]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out[obj["doc_id"]] = (
                    tuple(int(t) for t in obj["tokens"]),
                    tuple(int(t) for t in obj["summary"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseFileError(line_no, f"malformed corpus record ({exc})") from exc
    return out
