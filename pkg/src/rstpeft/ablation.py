"""Control weightings and parser-degradation transforms.

Three controls replace the learned weighting outright: ones at even or
odd flat positions of the token-level matrix, or i.i.d. uniform noise.
`mask_parse` degrades the parse tensor itself, replacing a fixed
fraction of off-diagonal cells with uniform draws while preserving the
structural zero diagonal.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .gamma import GammaMatrix
from .parser_io import ParseOutput
from .util import round_half_up

PATTERN_KINDS = ("even", "odd", "random")


@dataclass(frozen=True)
class MaskSpec:
    fraction: float
    seed: int

    def check(self) -> None:
        if not (0.0 <= self.fraction <= 1.0):
            raise ConfigError(f"mask fraction must lie in [0, 1], got {self.fraction}")


def gamma_pattern(
    kind: str,
    seq_len: int,
    d_model: int,
    seed: int | None = None,
    doc_region: tuple[int, int] | None = None,
) -> GammaMatrix:
    """Build a control weighting matrix.

    Parity is computed on the 0-based row-major flattened index.  When a
    doc_region is given, the pattern fills that row window and the rest
    stays zero (so controls slot into the same prompt layout as learned
    weightings); by default the whole matrix is the document region.
    """
    if seq_len < 1 or d_model < 1:
        raise ConfigError("seq_len and d_model must be positive")
    if kind not in PATTERN_KINDS:
        raise ConfigError(f"unknown pattern {kind!r}; expected one of {PATTERN_KINDS}")
    region = (0, seq_len) if doc_region is None else doc_region
    start, end = region
    if not (0 <= start <= end <= seq_len):
        raise ConfigError(f"doc_region {region} out of bounds for seq_len {seq_len}")

    rows = end - start
    if kind == "random":
        if seed is None:
            raise ConfigError("random pattern requires a seed")
        block = np.random.default_rng(seed).random((rows, d_model))
    else:
        flat = np.arange(rows * d_model)
        ones_at_even = (flat % 2 == 0).astype(np.float64)
        block = (ones_at_even if kind == "even" else 1.0 - ones_at_even).reshape(
            rows, d_model
        )

    values = np.zeros((seq_len, d_model), dtype=np.float64)
    values[start:end] = block
    return GammaMatrix(values=values, doc_region=region)


def mask_parse(parse: ParseOutput, spec: MaskSpec) -> ParseOutput:
    """Replace a fraction of off-diagonal cells with uniform noise.

    Exactly round(fraction * off_diagonal_cells) distinct cells are
    selected uniformly under the seed and overwritten with i.i.d.
    Uniform[0,1] draws.  The result still satisfies every parse invariant.
    """
    spec.check()
    n, k = parse.n_edu, parse.k_relations
    off_diag = [(i, j, r) for i in range(n) for j in range(n) if i != j for r in range(k)]
    count = round_half_up(spec.fraction * len(off_diag))
    out = copy.copy(parse)
    out.probs = parse.probs.copy()
    if count == 0:
        return out
    rng = np.random.default_rng(spec.seed)
    chosen = rng.choice(len(off_diag), size=count, replace=False)
    draws = rng.uniform(0.0, 1.0, size=count)
    for idx, value in zip(chosen, draws):
        i, j, r = off_diag[int(idx)]
        out.probs[i, j, r] = float(value)
    return out
