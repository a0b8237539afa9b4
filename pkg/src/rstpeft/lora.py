"""Low-rank adapter math: vanilla forward, weighted-input forward, merge.

The adapter adds a rank-r residual to a frozen projection:

    h = x @ W_base + (alpha / r) * (m @ w_down) @ w_up

where m is x for the vanilla path and x * (1 + gamma) for the injected
path.  The base path always sees the unmodulated input; gamma only
steers what the low-rank pair learns.  With gamma == 0 (or any uniform
value folded into w_up) the layer is exactly a conventional adapter.

w_up starts at zero so an adapted model is initially identical to its
frozen backbone.  Dropout hits the (modulated) adapter input and only
in training mode.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContractViolation, DataError, ShapeError

DOWN_INIT_STD = 0.02

DEFAULT_TARGETS = ("attn.q", "attn.k", "attn.v", "attn.o")


@dataclass(frozen=True)
class LoRAConfig:
    r: int = 8
    alpha: float = 32.0
    dropout: float = 0.1
    target_layers: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError(f"rank must be >= 1, got {self.r}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def scale(self) -> float:
        return self.alpha / self.r


class LoRAAdapter(nn.Module):
    """Trainable rank-r pair attached to one frozen A x B projection.

    base_weight is held as a plain attribute (it may be a backbone
    parameter shared with the host projection), so state_dict and
    parameters() cover only w_down and w_up.
    """

    def __init__(
        self,
        base_weight: torch.Tensor,
        config: LoRAConfig,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if base_weight.ndim != 2:
            raise ShapeError(f"base weight must be a matrix, got {tuple(base_weight.shape)}")
        a, b = base_weight.shape
        if config.r >= min(a, b):
            raise ConfigError(
                f"rank {config.r} must be smaller than min{(a, b)} of the base weight"
            )
        base_weight.requires_grad_(False)
        # Bypass nn.Module registration: the base may be a backbone parameter
        # owned by the host projection and must not appear in this module's
        # state_dict or parameters().
        object.__setattr__(self, "base_weight", base_weight)
        self.config = config
        down = torch.empty(a, config.r, dtype=base_weight.dtype)
        down.normal_(0.0, DOWN_INIT_STD, generator=generator)
        self.w_down = nn.Parameter(down)
        self.w_up = nn.Parameter(torch.zeros(config.r, b, dtype=base_weight.dtype))

    @property
    def scale(self) -> float:
        return self.config.scale

    def _modulate(self, x: torch.Tensor, gamma: torch.Tensor | None) -> torch.Tensor:
        if gamma is None:
            return x
        if gamma.shape != x.shape:
            raise ShapeError(
                f"gamma shape {tuple(gamma.shape)} must equal input shape {tuple(x.shape)}"
            )
        if bool((gamma < 0).any()):
            raise ContractViolation("gamma holds a negative entry")
        return x * (1.0 + gamma)

    def adapter_path(self, x: torch.Tensor, gamma: torch.Tensor | None = None) -> torch.Tensor:
        """Only the low-rank term, without the frozen base projection."""
        m = self._modulate(x, gamma)
        if self.training and self.config.dropout > 0.0:
            m = F.dropout(m, p=self.config.dropout)
        return self.scale * ((m @ self.w_down) @ self.w_up)

    def forward(self, x: torch.Tensor, gamma: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.base_weight.shape[0]:
            raise ShapeError(
                f"input width {x.shape[-1]} does not match base weight "
                f"{tuple(self.base_weight.shape)}"
            )
        return x @ self.base_weight + self.adapter_path(x, gamma)


def forward_vanilla(x: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    return adapter(x, None)


def forward_rst(x: torch.Tensor, gamma: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    return adapter(x, gamma)


def delta_weight(adapter: LoRAAdapter) -> torch.Tensor:
    """Effective weight delta; adding it to the base reproduces the forward."""
    with torch.no_grad():
        return adapter.scale * (adapter.w_down @ adapter.w_up)


def merged_weight(adapter: LoRAAdapter) -> torch.Tensor:
    with torch.no_grad():
        return adapter.base_weight + delta_weight(adapter)


def trainable_param_count(config: LoRAConfig, layer_dims: list[tuple[int, int]]) -> int:
    """Sum of r * (A + B) over target layers; rank must fit every layer."""
    total = 0
    for a, b in layer_dims:
        if config.r >= min(a, b):
            raise ConfigError(
                f"rank {config.r} does not satisfy r < min{(a, b)} for a target layer"
            )
        total += config.r * (a + b)
    return total


def adapter_grads(
    x: torch.Tensor,
    gamma: torch.Tensor | None,
    adapter: LoRAAdapter,
    upstream: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Closed-form gradients of the adapter pair for a given upstream dL/dh.

    With m = x * (1 + gamma) and s = alpha / r:
        dL/dw_down = s * m^T @ (upstream @ w_up^T)
        dL/dw_up   = s * (m @ w_down)^T @ upstream
    Dropout is ignored (eval-mode gradients).
    """
    with torch.no_grad():
        m = x if gamma is None else x * (1.0 + gamma)
        flat_m = m.reshape(-1, m.shape[-1])
        flat_up = upstream.reshape(-1, upstream.shape[-1])
        g_down = adapter.scale * flat_m.T @ (flat_up @ adapter.w_up.T)
        g_up = adapter.scale * (flat_m @ adapter.w_down).T @ flat_up
    return g_down, g_up


# -- checkpoint container ----------------------------------------------------
#
# Self-describing single file: magic "ADPT", u16 version, u32 header length,
# UTF-8 JSON header, then raw little-endian matrices at the offsets the
# header declares.  Round trips are bit-exact in either float width.

CKPT_MAGIC = b"ADPT"
CKPT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_adapters(
    path: str | Path,
    adapters: dict[str, LoRAAdapter],
    meta: dict | None = None,
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layers = []
    blobs: list[bytes] = []
    offset = 0
    configs = {name: a.config for name, a in adapters.items()}
    first_config = next(iter(configs.values())) if configs else LoRAConfig()
    for name in sorted(adapters):
        a = adapters[name]
        dtype = str(a.w_down.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise DataError(f"unsupported adapter dtype {dtype}")
        down = a.w_down.detach().cpu().numpy().astype(_DTYPES[dtype], copy=False)
        up = a.w_up.detach().cpu().numpy().astype(_DTYPES[dtype], copy=False)
        down_bytes, up_bytes = down.tobytes(), up.tobytes()
        layers.append(
            {
                "name": name,
                "a": int(down.shape[0]),
                "r": int(down.shape[1]),
                "b": int(up.shape[1]),
                "dtype": dtype,
                "down_offset": offset,
                "up_offset": offset + len(down_bytes),
            }
        )
        blobs.extend([down_bytes, up_bytes])
        offset += len(down_bytes) + len(up_bytes)
    header = {
        "version": CKPT_VERSION,
        "config": {
            "r": first_config.r,
            "alpha": first_config.alpha,
            "dropout": first_config.dropout,
            "target_layers": list(first_config.target_layers),
        },
        "layers": layers,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)


def load_adapters(path: str | Path) -> tuple[LoRAConfig, dict[str, tuple[np.ndarray, np.ndarray]], dict]:
    """Read a checkpoint: (config, {layer: (w_down, w_up)}, meta)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, header_len = struct.unpack("<HI", blob[4:10])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[10 : 10 + header_len].decode("utf-8"))
    payload = blob[10 + header_len :]
    cfg = header["config"]
    config = LoRAConfig(
        r=cfg["r"],
        alpha=cfg["alpha"],
        dropout=cfg["dropout"],
        target_layers=tuple(cfg["target_layers"]),
    )
    weights: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for layer in header["layers"]:
        dt = _DTYPES[layer["dtype"]]
        a, r, b = layer["a"], layer["r"], layer["b"]
        down = np.frombuffer(
            payload, dtype=dt, count=a * r, offset=layer["down_offset"]
        ).reshape(a, r)
        up = np.frombuffer(
            payload, dtype=dt, count=r * b, offset=layer["up_offset"]
        ).reshape(r, b)
        weights[layer["name"]] = (down.copy(), up.copy())
    return config, weights, header.get("meta", {})


def restore_adapters(
    adapters: dict[str, LoRAAdapter],
    weights: dict[str, tuple[np.ndarray, np.ndarray]],
) -> None:
    """Load checkpoint matrices into live adapters, bit-exact per dtype."""
    missing = set(adapters) ^ set(weights)
    if missing:
        raise DataError(f"checkpoint layers do not match adapters: {sorted(missing)}")
    with torch.no_grad():
        for name, adapter in adapters.items():
            down, up = weights[name]
            adapter.w_down.copy_(torch.from_numpy(down).to(adapter.w_down.dtype))
            adapter.w_up.copy_(torch.from_numpy(up).to(adapter.w_up.dtype))
