"""Token-level weighting matrices broadcast from unit-level distributions.

Every token inside a unit's span shares that unit's importance values;
positions outside the document region (prompt scaffolding, padding,
generated text) are exactly zero.  Label-aware distributions spread
their k channels across the model width by cyclic tiling; a contiguous
banded layout is available for sensitivity checks.

Binary file format (.rstg): magic "RSTG", u16 version=1, u32 seq_len,
u32 d_model, u32 doc_start, u32 doc_end, then little-endian float32
values in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .distribution import RSTDistribution
from .errors import ConfigError, ContractViolation, DataError, ShapeError
from .parser_io import EDUSegmentation

MAGIC = b"RSTG"
VERSION = 1

LAYOUTS = ("tile", "band")


@dataclass
class GammaMatrix:
    """Non-negative seq_len x d_model weighting consumed by the adapter path."""

    values: np.ndarray
    doc_region: tuple[int, int]

    @property
    def seq_len(self) -> int:
        return int(self.values.shape[0])

    @property
    def d_model(self) -> int:
        return int(self.values.shape[1])

    def violations(self, seg: EDUSegmentation | None = None, doc_offset: int = 0) -> list[str]:
        out: list[str] = []
        v = self.values
        if np.any(v < 0.0):
            out.append("negative entry")
        start, end = self.doc_region
        if np.any(v[:start] != 0.0) or np.any(v[end:] != 0.0):
            out.append("nonzero entry outside doc_region")
        if seg is not None:
            for idx, (s, e) in enumerate(seg.spans):
                rows = v[doc_offset + s : doc_offset + e]
                if rows.shape[0] and not np.all(rows == rows[0]):
                    out.append(f"rows differ inside span {idx}")
        return out


def _spread(row: np.ndarray, d_model: int, layout: str) -> np.ndarray:
    """Lay a k-vector across the model width."""
    k = row.shape[0]
    if layout == "tile":
        reps = -(-d_model // k)
        return np.tile(row, reps)[:d_model]
    if layout == "band":
        edges = [(c * d_model) // k for c in range(k + 1)]
        out = np.empty(d_model, dtype=row.dtype)
        for c in range(k):
            out[edges[c] : edges[c + 1]] = row[c]
        return out
    raise ConfigError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")


def project_gamma(
    dist: RSTDistribution,
    seg: EDUSegmentation,
    seq_len: int,
    d_model: int,
    doc_offset: int = 0,
    layout: str = "tile",
) -> GammaMatrix:
    """Broadcast unit-level importance values onto token rows."""
    if d_model < 1 or seq_len < 1:
        raise ConfigError("seq_len and d_model must be positive")
    if dist.n_edu != seg.n_edu:
        raise DataError(
            f"distribution covers {dist.n_edu} units but segmentation has {seg.n_edu}"
        )
    if doc_offset < 0 or doc_offset + seg.token_count > seq_len:
        raise ShapeError(
            f"document of {seg.token_count} tokens at offset {doc_offset} "
            f"overruns seq_len {seq_len}"
        )
    if np.any(dist.values < 0.0):
        raise ContractViolation("distribution holds a negative importance value")

    values = np.zeros((seq_len, d_model), dtype=np.float64)
    for i, (s, e) in enumerate(seg.spans):
        row = _spread(dist.values[i], d_model, layout)
        values[doc_offset + s : doc_offset + e] = row
    doc_end = doc_offset + (seg.spans[-1][1] if seg.spans else 0)
    return GammaMatrix(values=values, doc_region=(doc_offset, doc_end))


def zero_gamma(seq_len: int, d_model: int) -> GammaMatrix:
    """All-zero weighting: the injected forward reverts to the vanilla one."""
    if seq_len < 1 or d_model < 1:
        raise ConfigError("seq_len and d_model must be positive")
    return GammaMatrix(
        values=np.zeros((seq_len, d_model), dtype=np.float64),
        doc_region=(0, seq_len),
    )


def save_gamma(path: str | Path, gamma: GammaMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    start, end = gamma.doc_region
    header = MAGIC + struct.pack("<HIIII", VERSION, gamma.seq_len, gamma.d_model, start, end)
    payload = np.ascontiguousarray(gamma.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_gamma(path: str | Path) -> GammaMatrix:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, seq_len, d_model, start, end = struct.unpack("<HIIII", blob[4:22])
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    expected = seq_len * d_model * 4
    payload = blob[22:]
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(seq_len, d_model).astype(np.float32)
    return GammaMatrix(values=values, doc_region=(start, end))
