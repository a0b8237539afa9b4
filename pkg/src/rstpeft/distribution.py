"""Per-unit importance distributions derived from the parse tensor.

Four variants: binary or probabilistic, with or without relation labels.

    p_w   probabilities, label-aware        -> n_edu x k
    p_wo  probabilities, label-agnostic     -> n_edu x 1
    b_w   thresholded at 0.5, label-aware   -> n_edu x k
    b_wo  thresholded at 0.5, label-agnostic-> n_edu x 1

Merging the support axis excludes the structurally-zero diagonal by
default so values read as mean support; `include_diagonal` restores the
deflated convention.  Binarization happens on the raw tensor before the
merge by default; `binarize_after_merge` flips that for sensitivity runs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .parser_io import ParseOutput

VARIANTS = ("b_wo", "b_w", "p_wo", "p_w")

LABEL_AWARE = {"b_w", "p_w"}


@dataclass(frozen=True)
class RSTDistribution:
    """Importance indices per unit, tagged with the producing variant."""

    variant: str
    values: np.ndarray
    n_edu: int
    k_relations: int

    def __post_init__(self):
        expected_cols = self.k_relations if self.variant in LABEL_AWARE else 1
        if self.values.shape != (self.n_edu, expected_cols):
            raise DataError(
                f"variant {self.variant} expects shape ({self.n_edu}, {expected_cols}), "
                f"got {self.values.shape}"
            )

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "shape": [int(s) for s in self.values.shape],
            "values": [float(v) for v in self.values.reshape(-1)],
        }

    @classmethod
    def from_json(cls, obj: dict, k_relations: int | None = None) -> "RSTDistribution":
        rows, cols = obj["shape"]
        values = np.asarray(obj["values"], dtype=np.float64).reshape(rows, cols)
        k = cols if k_relations is None else k_relations
        return cls(variant=obj["variant"], values=values, n_edu=rows, k_relations=k)


def importance_index(parse: ParseOutput, include_diagonal: bool = False) -> np.ndarray:
    """Mean support each unit receives per relation group.

    out[i, k] averages probs[i, j, k] over j != i (or over all j when
    include_diagonal is set, which uniformly deflates rows by
    (n_edu - 1) / n_edu without reordering them).
    """
    n = parse.n_edu
    if n < 2:
        raise DataError(f"{parse.segmentation.doc_id}: need at least 2 units, got {n}")
    totals = parse.probs.sum(axis=1)
    denom = n if include_diagonal else n - 1
    return totals / float(denom)


def binarize_tensor(parse: ParseOutput, threshold: float = 0.5) -> ParseOutput:
    """Map each off-diagonal cell to 1 if >= threshold else 0; diagonal stays 0."""
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    probs = np.where(parse.probs >= threshold, 1.0, 0.0)
    idx = np.arange(parse.n_edu)
    probs[idx, idx, :] = 0.0
    out = copy.copy(parse)
    out.probs = probs
    return out


def collapse_labels(values: np.ndarray) -> np.ndarray:
    """Merge the relation axis: out[i] = mean over k of values[i, k]."""
    if values.ndim != 2 or values.shape[1] < 1:
        raise DataError(f"expected an n_edu x k matrix, got shape {values.shape}")
    return values.mean(axis=1, keepdims=True)


def make_variant(
    parse: ParseOutput,
    variant: str,
    threshold: float = 0.5,
    include_diagonal: bool = False,
    binarize_after_merge: bool = False,
) -> RSTDistribution:
    """Build one of the four distributions from a dense parse."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")

    if variant.startswith("b") and not binarize_after_merge:
        source = binarize_tensor(parse, threshold)
    else:
        source = parse

    values = importance_index(source, include_diagonal=include_diagonal)
    if variant.startswith("b") and binarize_after_merge:
        values = np.where(values >= threshold, 1.0, 0.0)
    if variant not in LABEL_AWARE:
        values = collapse_labels(values)
    return RSTDistribution(
        variant=variant,
        values=values,
        n_edu=parse.n_edu,
        k_relations=parse.k_relations,
    )
