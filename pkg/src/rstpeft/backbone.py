"""Toy transformer backbones with adapter injection points.

Two architectures, decoder-only and encoder-decoder, expose every
linear projection (per-layer attention q/k/v/o and the feed-forward
pair) under a stable name so adapters can be attached selectively.
Weights are deterministically initialized from the config seed and are
frozen the moment adapters are attached: training only ever touches the
low-rank pairs.

Token-level weighting matrices flow to the self-attention q/k/v
projections of the stack that reads the document (the encoder for
seq2seq, the decoder itself for decoder-only); all other projections
always see the plain input.

Init schemes: "gaussian" is a plain N(0, 0.02) init; "residual_copy"
initializes value/output projections near identity and gives every
token embedding a shared offset direction, which lets a frozen network
transport token identity through attention so that the adapters only
have to learn where to attend.  The synthetic benchmark uses the latter.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .lora import LoRAAdapter, LoRAConfig
from .tokens import PAD

ARCHITECTURES = ("seq2seq", "decoder_only")
INIT_SCHEMES = ("gaussian", "residual_copy")

NEG_INF = -1e9

# residual_copy init scales.  The scheme plants the structure a pretrained
# model would bring to a copy-flavored task: sinusoidal positions, scaled
# near-identity query/key maps (soft content-and-position matching that
# leaves softmax gradients alive), and near-identity value/output paths so
# token identity survives the frozen stack.  Adapters then only have to
# learn which tokens to route, which is where the weighting matrix acts.
# Token embeddings stay small relative to attention outputs so transported
# content can outweigh a position's own embedding at the tied head; the
# shared offset gives adapters a content-independent channel into the
# attention logits.
RC_EMB_STD = 0.25
RC_EMB_OFFSET = 0.5
RC_POS_SCALE = 0.4
RC_QK_GAIN = 0.3
RC_QK_NOISE = 0.02
RC_VO_NOISE = 0.02
RC_FF_OUT_SCALE = 0.05


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "decoder_only"
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ff: int = 128
    vocab_size: int = 512
    max_seq_len: int = 256
    seed: int = 0
    tie_embeddings: bool = True
    init_scheme: str = "residual_copy"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}"
            )
        if self.init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")
        for name in ("layers", "heads", "d_model", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be divisible by heads {self.heads}"
            )

    @classmethod
    def from_dict(cls, obj: dict) -> "BackboneConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown backbone config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "BackboneConfig":
        """Load from a JSON object or flat key=value lines."""
        import json

        text = open(path, "r", encoding="utf-8").read()
        stripped = text.lstrip()
        if stripped.startswith("{"):
            return cls.from_dict(json.loads(text))
        obj: dict = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = key.strip(), value.strip()
            if value in ("true", "false"):
                obj[key] = value == "true"
            elif key in ("architecture", "init_scheme"):
                obj[key] = value
            else:
                obj[key] = int(value)
        return cls.from_dict(obj)


class Projection(nn.Module):
    """One named linear map, optionally carrying an adapter.

    The weight is stored input-major (A x B) so the forward is x @ W,
    matching the adapter math.  `use_gamma` is set at attach time for
    projections that should see the token weighting.
    """

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.weight = nn.Parameter(weight)
        self.adapter: LoRAAdapter | None = None
        self.use_gamma = False

    def forward(self, x: torch.Tensor, gamma: torch.Tensor | None = None) -> torch.Tensor:
        if self.adapter is not None:
            return self.adapter(x, gamma if self.use_gamma else None)
        return x @ self.weight

    @property
    def dims(self) -> tuple[int, int]:
        return int(self.weight.shape[0]), int(self.weight.shape[1])


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, make_proj):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.q = make_proj("q")
        self.k = make_proj("k")
        self.v = make_proj("v")
        self.o = make_proj("o")

    def forward(
        self,
        x_q: torch.Tensor,
        x_kv: torch.Tensor,
        mask: torch.Tensor | None,
        gamma_q: torch.Tensor | None = None,
        gamma_kv: torch.Tensor | None = None,
    ) -> torch.Tensor:
        bsz, t_q, d = x_q.shape
        t_kv = x_kv.shape[1]
        q = self.q(x_q, gamma_q).view(bsz, t_q, self.heads, self.d_head).transpose(1, 2)
        k = self.k(x_kv, gamma_kv).view(bsz, t_kv, self.heads, self.d_head).transpose(1, 2)
        v = self.v(x_kv, gamma_kv).view(bsz, t_kv, self.heads, self.d_head).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores + mask
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, t_q, d)
        return self.o(out, None)


class FeedForward(nn.Module):
    def __init__(self, make_proj):
        super().__init__()
        self.w_in = make_proj("in")
        self.w_out = make_proj("out")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_out(torch.nn.functional.gelu(self.w_in(x, None)), None)


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, make_proj):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, lambda p: make_proj(f"attn.{p}"))
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(lambda p: make_proj(f"ff.{p}"))

    def forward(self, x, mask, gamma):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask, gamma_q=gamma, gamma_kv=gamma)
        return x + self.ff(self.ln2(x))


class DecoderBlock(nn.Module):
    """Causal self-attention plus cross-attention over encoder memory."""

    def __init__(self, d_model: int, heads: int, make_proj):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, heads, lambda p: make_proj(f"attn.{p}"))
        self.ln2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads, lambda p: make_proj(f"cross.{p}"))
        self.ln3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(lambda p: make_proj(f"ff.{p}"))

    def forward(self, x, memory, self_mask, cross_mask):
        h = self.ln1(x)
        x = x + self.self_attn(h, h, self_mask)
        h = self.ln2(x)
        x = x + self.cross_attn(h, memory, cross_mask)
        return x + self.ff(self.ln3(x))


class _Init:
    """Deterministic weight factory for one backbone build."""

    def __init__(self, config: BackboneConfig, dtype: torch.dtype):
        self.config = config
        self.dtype = dtype
        self.gen = torch.Generator().manual_seed(config.seed)

    def normal(self, *shape: int, std: float) -> torch.Tensor:
        w = torch.empty(*shape, dtype=torch.float64)
        w.normal_(0.0, std, generator=self.gen)
        return w.to(self.dtype)

    def scaled_identity(self, dim: int, gain: float, noise: float) -> torch.Tensor:
        eye = torch.eye(dim, dtype=torch.float64) * gain
        return (eye + self.normal(dim, dim, std=noise)).to(self.dtype)

    def projection_weight(self, kind: str, a: int, b: int) -> torch.Tensor:
        c = self.config
        if c.init_scheme == "gaussian":
            return self.normal(a, b, std=0.02)
        if kind in ("v", "o") and a == b:
            return self.scaled_identity(a, gain=1.0, noise=RC_VO_NOISE)
        if kind in ("q", "k") and a == b:
            return self.scaled_identity(a, gain=RC_QK_GAIN, noise=RC_QK_NOISE)
        if kind == "in":
            return self.normal(a, b, std=1.0 / math.sqrt(a))
        if kind == "out":
            return self.normal(a, b, std=RC_FF_OUT_SCALE / math.sqrt(a))
        return self.normal(a, b, std=0.02)

    def token_embedding(self) -> torch.Tensor:
        c = self.config
        if c.init_scheme == "gaussian":
            return self.normal(c.vocab_size, c.d_model, std=0.02)
        emb = self.normal(c.vocab_size, c.d_model, std=RC_EMB_STD)
        offset = self.normal(c.d_model, std=1.0)
        offset = offset * (RC_EMB_OFFSET / offset.norm())
        return emb + offset.unsqueeze(0)

    def position_embedding(self, rows: int) -> torch.Tensor:
        c = self.config
        if c.init_scheme == "gaussian":
            return self.normal(rows, c.d_model, std=0.02)
        pe = torch.zeros(rows, c.d_model, dtype=torch.float64)
        pos = torch.arange(rows, dtype=torch.float64).unsqueeze(1)
        pairs = c.d_model // 2
        freqs = torch.exp(
            torch.arange(pairs, dtype=torch.float64) * (-math.log(10000.0) / pairs)
        ).unsqueeze(0)
        pe[:, 0 : 2 * pairs : 2] = torch.sin(pos * freqs)
        pe[:, 1 : 2 * pairs : 2] = torch.cos(pos * freqs)
        return (pe * RC_POS_SCALE).to(self.dtype)

    def head(self) -> torch.Tensor:
        c = self.config
        if c.init_scheme == "gaussian":
            return self.normal(c.d_model, c.vocab_size, std=0.02)
        return self.normal(c.d_model, c.vocab_size, std=1.0 / math.sqrt(c.d_model))


def _causal_mask(t: int, dtype: torch.dtype, device) -> torch.Tensor:
    mask = torch.full((1, 1, t, t), NEG_INF, dtype=dtype, device=device)
    return torch.triu(mask, diagonal=1)


def _pad_mask(tokens: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    # (B, 1, 1, T): NEG_INF on key positions holding padding
    return (tokens == PAD).to(dtype).mul(NEG_INF)[:, None, None, :]


class _BackboneBase(nn.Module):
    config: BackboneConfig

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self._projections: dict[str, Projection] = {}

    def _register_projection(self, name: str, proj: Projection) -> Projection:
        self._projections[name] = proj
        return proj

    def projection_names(self) -> tuple[str, ...]:
        return tuple(self._projections)

    def get_projection(self, name: str) -> Projection:
        try:
            return self._projections[name]
        except KeyError:
            raise ConfigError(f"unknown target layer {name!r}") from None

    def _check_len(self, t: int) -> None:
        if t > self.config.max_seq_len:
            raise ShapeError(
                f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}"
            )

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        x = self.ln_f(x)
        if self.config.tie_embeddings:
            return x @ self.tok_emb.T
        return x @ self.head


class DecoderOnlyBackbone(_BackboneBase):
    def __init__(self, config: BackboneConfig, dtype: torch.dtype = torch.float32):
        super().__init__(config)
        init = _Init(config, dtype)
        self.tok_emb = nn.Parameter(init.token_embedding())
        self.pos_emb = nn.Parameter(init.position_embedding(config.max_seq_len))
        self.blocks = nn.ModuleList()
        for i in range(config.layers):
            def make_proj(suffix, i=i):
                kind = suffix.split(".")[-1]
                a = config.d_model if kind != "out" else config.d_ff
                b = config.d_model if kind != "in" else config.d_ff
                proj = Projection(init.projection_weight(kind, a, b))
                return self._register_projection(f"block{i}.{suffix}", proj)

            self.blocks.append(EncoderBlock(config.d_model, config.heads, make_proj))
        self.ln_f = nn.LayerNorm(config.d_model)
        if not config.tie_embeddings:
            self.head = nn.Parameter(init.head())
        self.to(dtype)

    def forward(self, tokens: torch.Tensor, gamma: torch.Tensor | None = None) -> torch.Tensor:
        bsz, t = tokens.shape
        self._check_len(t)
        x = self.tok_emb[tokens] + self.pos_emb[:t]
        mask = _causal_mask(t, x.dtype, x.device) + _pad_mask(tokens, x.dtype)
        for idx, block in enumerate(self.blocks):
            g = gamma if self._gamma_reaches(idx) else None
            x = block(x, mask, g)
        return self._logits(x)

    def _gamma_reaches(self, layer_idx: int) -> bool:
        # Cheap static check: gamma is dropped entirely for layers whose
        # q/k/v projections were not flagged at attach time.
        for p in ("q", "k", "v"):
            proj = self._projections.get(f"block{layer_idx}.attn.{p}")
            if proj is not None and proj.use_gamma:
                return True
        return False


class Seq2SeqBackbone(_BackboneBase):
    def __init__(self, config: BackboneConfig, dtype: torch.dtype = torch.float32):
        super().__init__(config)
        init = _Init(config, dtype)
        self.tok_emb = nn.Parameter(init.token_embedding())
        self.pos_emb = nn.Parameter(init.position_embedding(config.max_seq_len))
        self.encoder = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in range(config.layers):
            def make_enc(suffix, i=i):
                kind = suffix.split(".")[-1]
                a = config.d_model if kind != "out" else config.d_ff
                b = config.d_model if kind != "in" else config.d_ff
                proj = Projection(init.projection_weight(kind, a, b))
                return self._register_projection(f"enc{i}.{suffix}", proj)

            self.encoder.append(EncoderBlock(config.d_model, config.heads, make_enc))
        for i in range(config.layers):
            def make_dec(suffix, i=i):
                kind = suffix.split(".")[-1]
                a = config.d_model if kind != "out" else config.d_ff
                b = config.d_model if kind != "in" else config.d_ff
                proj = Projection(init.projection_weight(kind, a, b))
                return self._register_projection(f"dec{i}.{suffix}", proj)

            self.decoder.append(DecoderBlock(config.d_model, config.heads, make_dec))
        self.ln_enc = nn.LayerNorm(config.d_model)
        self.ln_f = nn.LayerNorm(config.d_model)
        if not config.tie_embeddings:
            self.head = nn.Parameter(init.head())
        self.to(dtype)

    def encode(self, src: torch.Tensor, gamma: torch.Tensor | None = None) -> torch.Tensor:
        bsz, s = src.shape
        self._check_len(s)
        x = self.tok_emb[src] + self.pos_emb[:s]
        mask = _pad_mask(src, x.dtype)
        for idx, block in enumerate(self.encoder):
            g = gamma if self._gamma_reaches(idx) else None
            x = block(x, mask, g)
        return self.ln_enc(x)

    def decode(self, memory: torch.Tensor, src: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        bsz, t = tgt_in.shape
        self._check_len(t)
        x = self.tok_emb[tgt_in] + self.pos_emb[:t]
        self_mask = _causal_mask(t, x.dtype, x.device) + _pad_mask(tgt_in, x.dtype)
        cross_mask = _pad_mask(src, x.dtype)
        for block in self.decoder:
            x = block(x, memory, self_mask, cross_mask)
        return self._logits(x)

    def forward(
        self,
        src: torch.Tensor,
        tgt_in: torch.Tensor,
        gamma: torch.Tensor | None = None,
    ) -> torch.Tensor:
        return self.decode(self.encode(src, gamma), src, tgt_in)

    def _gamma_reaches(self, layer_idx: int) -> bool:
        for p in ("q", "k", "v"):
            proj = self._projections.get(f"enc{layer_idx}.attn.{p}")
            if proj is not None and proj.use_gamma:
                return True
        return False


def build_backbone(config: BackboneConfig, dtype: torch.dtype = torch.float32):
    """Deterministically initialized backbone for the configured architecture."""
    if config.architecture == "decoder_only":
        return DecoderOnlyBackbone(config, dtype)
    return Seq2SeqBackbone(config, dtype)


def backbone_param_count(config: BackboneConfig) -> int:
    """Closed-form parameter count for an audit against the live model."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    ln = 2 * d
    attn = 4 * d * d
    ffp = 2 * d * ff
    if config.architecture == "decoder_only":
        per_layer = attn + ffp + 2 * ln
        total = config.layers * per_layer + ln  # final LN
    else:
        enc_layer = attn + ffp + 2 * ln
        dec_layer = 2 * attn + ffp + 3 * ln
        total = config.layers * (enc_layer + dec_layer) + 2 * ln  # enc LN + final LN
    total += v * d + config.max_seq_len * d  # embeddings
    if not config.tie_embeddings:
        total += d * v
    return total


# -- adapter attachment ------------------------------------------------------

GAMMA_ELIGIBLE_SUFFIXES = (".attn.q", ".attn.k", ".attn.v")


@dataclass
class AdaptedModel:
    """A frozen backbone plus its trainable adapters."""

    backbone: nn.Module
    adapters: dict[str, LoRAAdapter]
    rst_enabled: bool
    gamma_targets: frozenset[str]
    lora_config: LoRAConfig
    dtype: torch.dtype = torch.float32

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def forward(self, *args, gamma: torch.Tensor | None = None, **kwargs) -> torch.Tensor:
        if not self.rst_enabled:
            gamma = None
        return self.backbone(*args, gamma=gamma, **kwargs)

    def train(self, mode: bool = True) -> "AdaptedModel":
        self.backbone.train(mode)
        return self

    def eval(self) -> "AdaptedModel":
        return self.train(False)

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.backbone.parameters() if p.requires_grad]

    def trainable_param_count(self) -> int:
        return sum(p.numel() for p in self.trainable_parameters())

    def total_param_count(self) -> int:
        return sum(p.numel() for p in self.backbone.parameters())


def _gamma_eligible(name: str, architecture: str) -> bool:
    if not name.endswith(GAMMA_ELIGIBLE_SUFFIXES):
        return False
    if architecture == "seq2seq":
        return name.startswith("enc")
    return name.startswith("block")


def attach_lora(
    model: _BackboneBase,
    lora_config: LoRAConfig,
    rst_enabled: bool = True,
    seed: int = 0,
    gamma_layers: str = "all",
) -> AdaptedModel:
    """Freeze the backbone and attach zero-initialized adapters.

    Target names in the adapter config are matched as full projection
    names or as suffixes ("attn.q" hits that projection in every layer).
    With rst_enabled, weighting matrices reach the self-attention q/k/v
    projections of the document-reading stack; gamma_layers="first"
    restricts that to layer 0.
    """
    if gamma_layers not in ("all", "first"):
        raise ConfigError(f"gamma_layers must be 'all' or 'first', got {gamma_layers!r}")
    for p in model.parameters():
        p.requires_grad_(False)

    names = model.projection_names()
    matched: list[str] = []
    for target in lora_config.target_layers:
        hits = [n for n in names if n == target or n.endswith("." + target)]
        if not hits:
            raise ConfigError(f"unknown target layer {target!r}")
        matched.extend(hits)
    matched = sorted(dict.fromkeys(matched))

    gen = torch.Generator().manual_seed(seed)
    adapters: dict[str, LoRAAdapter] = {}
    gamma_targets: set[str] = set()
    arch = model.config.architecture
    for name in matched:
        proj = model.get_projection(name)
        adapter = LoRAAdapter(proj.weight, lora_config, generator=gen)
        proj.adapter = adapter
        adapters[name] = adapter
        if rst_enabled and _gamma_eligible(name, arch):
            if gamma_layers == "first" and not (
                name.startswith("block0.") or name.startswith("enc0.")
            ):
                continue
            proj.use_gamma = True
            gamma_targets.add(name)
    return AdaptedModel(
        backbone=model,
        adapters=adapters,
        rst_enabled=rst_enabled,
        gamma_targets=frozenset(gamma_targets),
        lora_config=lora_config,
        dtype=next(model.parameters()).dtype,
    )


def weight_checksum(model: nn.Module) -> str:
    """Digest over every frozen backbone weight, adapter weights excluded."""
    h = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if ".adapter." in name or name.startswith("adapter"):
            continue
        h.update(name.encode("utf-8"))
        h.update(param.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# Reference configuration for the trainable-fraction audit: four layers at
# d_model 256 with adapters on every attention projection at rank 8 keep the
# trainable share below half a percent of the full model.
REFERENCE_CONFIG = BackboneConfig(
    architecture="decoder_only",
    layers=4,
    heads=8,
    d_model=256,
    d_ff=2048,
    vocab_size=16384,
    max_seq_len=512,
    seed=0,
    tie_embeddings=False,
    init_scheme="gaussian",
)
