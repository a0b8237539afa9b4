"""Adapter fine-tuning and decoding.

Training follows a fixed recipe: AdamW on the adapter pairs only, a
cosine learning-rate schedule with linear warm-up over the first 20% of
steps, cross-entropy on reference-summary positions only, checkpoint
selection by validation Rouge-2 F1 (earliest epoch wins ties) and early
stopping on the same metric.  Everything is deterministic under the run
seed.

Decoding: beam search with score = logprob / len**length_penalty and
n-gram repeat blocking over the generated tokens.  Validation inside
the training loop uses batched greedy decoding for speed; beam search
is meant for final evaluation (`val_use_beam` forces it throughout).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import AdaptedModel
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .metrics import rouge_n
from .tokens import BOS, EOS, PAD, SEP
from .util import round_half_up


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    warmup_ratio: float = 0.2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-9
    weight_decay: float = 0.1
    epochs: int = 50
    batch_size: int = 16
    early_stopping_patience: int = 5
    seed: int = 0
    precision: str = "32"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not (0.0 <= self.warmup_ratio <= 1.0):
            raise ConfigError(f"warmup_ratio must lie in [0, 1], got {self.warmup_ratio}")
        if self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.precision not in ("32", "64"):
            raise ConfigError(f"precision must be '32' or '64', got {self.precision!r}")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "64" else torch.float32


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    length_penalty: float = 3.0
    no_repeat_ngram: int = 3
    max_length: int = 64

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.no_repeat_ngram < 0:
            raise ConfigError("no_repeat_ngram must be >= 0")
        if self.max_length < 1:
            raise ConfigError("max_length must be >= 1")


@dataclass(frozen=True)
class Example:
    doc_id: str
    doc_tokens: tuple[int, ...]
    summary_tokens: tuple[int, ...]
    # Token weighting rows for the document region only (doc_len x d_model);
    # None means zero weighting everywhere.
    gamma_doc: np.ndarray | None = None


@dataclass
class TrainResult:
    log: list[tuple[int, float, float]]  # (epoch, train_loss, val_r2_f1)
    best_epoch: int
    best_val_r2: float
    stopped_early: bool


def cosine_lr_factor(step: int, total_steps: int, warmup_ratio: float) -> float:
    """Closed-form schedule multiplier: 0 at step 0, 1 at the warm-up
    boundary, cosine down to 0 at total_steps."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    warmup = max(1, round_half_up(warmup_ratio * total_steps))
    if step < warmup:
        return step / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def select_checkpoint(log: list[tuple[int, float]]) -> int:
    """Epoch with the highest validation Rouge-2 F1; earliest wins ties."""
    if not log:
        raise DataError("cannot select a checkpoint from an empty log")
    best_epoch, best_val = log[0][0], log[0][1]
    for row in log[1:]:
        epoch, val = row[0], row[1]
        if val > best_val:
            best_epoch, best_val = epoch, val
    return best_epoch


def beam_score(logprob: float, length: int, length_penalty: float) -> float:
    """Completed-hypothesis score: raw log-probability over length**penalty."""
    return logprob / (max(1, length) ** length_penalty)


# -- batching ----------------------------------------------------------------


def _gamma_rows(ex: Example, d_model: int, dtype: torch.dtype) -> torch.Tensor | None:
    if ex.gamma_doc is None:
        return None
    rows = torch.as_tensor(np.ascontiguousarray(ex.gamma_doc), dtype=dtype)
    if rows.shape != (len(ex.doc_tokens), d_model):
        raise ShapeError(
            f"{ex.doc_id}: gamma rows {tuple(rows.shape)} do not cover the "
            f"document ({len(ex.doc_tokens)} x {d_model})"
        )
    return rows


def _decoder_only_batch(
    examples: list[Example], d_model: int, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Pack [BOS] doc [SEP] summary [EOS] rows; loss covers summary + EOS."""
    seqs = [[BOS, *ex.doc_tokens, SEP, *ex.summary_tokens, EOS] for ex in examples]
    width = max(len(s) for s in seqs)
    tokens = torch.full((len(seqs), width), PAD, dtype=torch.long)
    gamma = torch.zeros((len(seqs), width, d_model), dtype=dtype)
    loss_mask = torch.zeros((len(seqs), width - 1), dtype=torch.bool)
    for b, (ex, seq) in enumerate(zip(examples, seqs)):
        tokens[b, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        rows = _gamma_rows(ex, d_model, dtype)
        if rows is not None:
            gamma[b, 1 : 1 + len(ex.doc_tokens)] = rows
        sep_pos = 1 + len(ex.doc_tokens)
        # Targets are tokens shifted by one; predictions from the separator
        # position onward cover the summary and the end marker.
        loss_mask[b, sep_pos : sep_pos + len(ex.summary_tokens) + 1] = True
    return tokens[:, :-1], gamma[:, :-1], tokens[:, 1:], loss_mask


def _seq2seq_batch(
    examples: list[Example], d_model: int, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    src_width = max(len(ex.doc_tokens) for ex in examples)
    tgt_width = max(len(ex.summary_tokens) for ex in examples) + 1
    n = len(examples)
    src = torch.full((n, src_width), PAD, dtype=torch.long)
    gamma = torch.zeros((n, src_width, d_model), dtype=dtype)
    tgt_in = torch.full((n, tgt_width), PAD, dtype=torch.long)
    targets = torch.full((n, tgt_width), PAD, dtype=torch.long)
    loss_mask = torch.zeros((n, tgt_width), dtype=torch.bool)
    for b, ex in enumerate(examples):
        src[b, : len(ex.doc_tokens)] = torch.tensor(ex.doc_tokens, dtype=torch.long)
        rows = _gamma_rows(ex, d_model, dtype)
        if rows is not None:
            gamma[b, : len(ex.doc_tokens)] = rows
        out = [*ex.summary_tokens, EOS]
        tgt_in[b, : len(out)] = torch.tensor([BOS, *ex.summary_tokens], dtype=torch.long)
        targets[b, : len(out)] = torch.tensor(out, dtype=torch.long)
        loss_mask[b, : len(out)] = True
    return src, gamma, tgt_in, targets, loss_mask


def _batch_loss(model: AdaptedModel, batch: list[Example]) -> torch.Tensor:
    d_model = model.config.d_model
    if model.config.architecture == "decoder_only":
        inputs, gamma, targets, mask = _decoder_only_batch(batch, d_model, model.dtype)
        logits = model.forward(inputs, gamma=gamma)
    else:
        src, gamma, tgt_in, targets, mask = _seq2seq_batch(batch, d_model, model.dtype)
        logits = model.forward(src, tgt_in, gamma=gamma)
    flat = logits.reshape(-1, logits.shape[-1])[mask.reshape(-1)]
    gold = targets.reshape(-1)[mask.reshape(-1)]
    return nn.functional.cross_entropy(flat, gold)


# -- decoding ----------------------------------------------------------------


# Structural tokens never appear inside a reference summary, so decoding
# suppresses them outright; EOS stays available as the stop signal.
SUPPRESSED_AT_DECODE = (PAD, BOS, SEP)


def _banned_tokens(generated: list[int], n: int) -> set[int]:
    """Tokens that would repeat an n-gram already present in `generated`."""
    if n <= 0 or len(generated) < n - 1:
        return set()
    prefix = tuple(generated[len(generated) - (n - 1) :]) if n > 1 else ()
    banned: set[int] = set()
    for i in range(len(generated) - n + 1):
        if tuple(generated[i : i + n - 1]) == prefix:
            banned.add(generated[i + n - 1])
    return banned


def _check_decode_length(model: AdaptedModel, ex: Example, decode: DecodeConfig) -> None:
    if model.config.architecture == "decoder_only":
        need = 2 + len(ex.doc_tokens) + decode.max_length
    else:
        need = max(len(ex.doc_tokens), 1 + decode.max_length)
    if need > model.config.max_seq_len:
        raise ShapeError(
            f"{ex.doc_id}: document plus max_length needs {need} positions, "
            f"max_seq_len is {model.config.max_seq_len}"
        )


class _Decoder:
    """Stepwise next-token log-probabilities for either architecture."""

    def __init__(self, model: AdaptedModel, ex: Example):
        self.model = model
        self.arch = model.config.architecture
        d_model = model.config.d_model
        self.dtype = model.dtype
        if self.arch == "decoder_only":
            self.context = [BOS, *ex.doc_tokens, SEP]
            self.gamma_rows = _gamma_rows(ex, d_model, self.dtype)
        else:
            src = torch.tensor([list(ex.doc_tokens)], dtype=torch.long)
            gamma = torch.zeros((1, len(ex.doc_tokens), d_model), dtype=self.dtype)
            rows = _gamma_rows(ex, d_model, self.dtype)
            if rows is not None:
                gamma[0] = rows
            with torch.no_grad():
                self.memory = self.model.backbone.encode(
                    src, gamma if self.model.rst_enabled else None
                )
            self.src = src

    def logprobs(self, prefixes: list[list[int]]) -> torch.Tensor:
        """(n_prefixes, vocab) log-probabilities of the next token."""
        with torch.no_grad():
            if self.arch == "decoder_only":
                seqs = [self.context + p for p in prefixes]
                width = max(len(s) for s in seqs)
                tokens = torch.full((len(seqs), width), PAD, dtype=torch.long)
                for b, s in enumerate(seqs):
                    tokens[b, : len(s)] = torch.tensor(s, dtype=torch.long)
                gamma = torch.zeros(
                    (len(seqs), width, self.model.config.d_model), dtype=self.dtype
                )
                if self.gamma_rows is not None:
                    gamma[:, 1 : 1 + self.gamma_rows.shape[0]] = self.gamma_rows
                logits = self.model.forward(tokens, gamma=gamma)
                idx = torch.tensor([len(s) - 1 for s in seqs])
                rows = logits[torch.arange(len(seqs)), idx]
            else:
                tgt_in = torch.tensor([[BOS, *p] for p in prefixes], dtype=torch.long)
                memory = self.memory.expand(len(prefixes), -1, -1)
                src = self.src.expand(len(prefixes), -1)
                logits = self.model.backbone.decode(memory, src, tgt_in)
                rows = logits[:, -1, :]
            lp = torch.log_softmax(rows.to(torch.float64), dim=-1)
            lp[:, list(SUPPRESSED_AT_DECODE)] = -float("inf")
            return lp


def greedy_decode_batch(
    model: AdaptedModel, examples: list[Example], decode: DecodeConfig
) -> list[list[int]]:
    """Argmax decoding for a batch of documents, with n-gram blocking."""
    if not examples:
        return []
    for ex in examples:
        _check_decode_length(model, ex, decode)
    model.eval()
    d_model = model.config.d_model
    n = len(examples)
    outs: list[list[int]] = [[] for _ in range(n)]
    done = [False] * n

    with torch.no_grad():
        if model.config.architecture == "decoder_only":
            contexts = [[BOS, *ex.doc_tokens, SEP] for ex in examples]
            width = max(len(c) for c in contexts) + decode.max_length
            tokens = torch.full((n, width), PAD, dtype=torch.long)
            gamma = torch.zeros((n, width, d_model), dtype=model.dtype)
            pos = torch.zeros(n, dtype=torch.long)
            for b, (ex, ctx) in enumerate(zip(examples, contexts)):
                tokens[b, : len(ctx)] = torch.tensor(ctx, dtype=torch.long)
                rows = _gamma_rows(ex, d_model, model.dtype)
                if rows is not None:
                    gamma[b, 1 : 1 + len(ex.doc_tokens)] = rows
                pos[b] = len(ctx) - 1
            for _ in range(decode.max_length):
                cur = int(pos.max()) + 1
                logits = model.forward(tokens[:, :cur], gamma=gamma[:, :cur])
                rows = logits[torch.arange(n), pos].to(torch.float64)
                lp = torch.log_softmax(rows, dim=-1)
                lp[:, list(SUPPRESSED_AT_DECODE)] = -float("inf")
                for b in range(n):
                    if done[b]:
                        continue
                    row = lp[b]
                    banned = _banned_tokens(outs[b], decode.no_repeat_ngram)
                    if banned:
                        row = row.clone()
                        row[list(banned)] = -float("inf")
                    nxt = int(torch.argmax(row))
                    if nxt == EOS:
                        done[b] = True
                        continue
                    outs[b].append(nxt)
                    tokens[b, pos[b] + 1] = nxt
                    pos[b] += 1
                if all(done):
                    break
        else:
            src_width = max(len(ex.doc_tokens) for ex in examples)
            src = torch.full((n, src_width), PAD, dtype=torch.long)
            gamma = torch.zeros((n, src_width, d_model), dtype=model.dtype)
            for b, ex in enumerate(examples):
                src[b, : len(ex.doc_tokens)] = torch.tensor(ex.doc_tokens, dtype=torch.long)
                rows = _gamma_rows(ex, d_model, model.dtype)
                if rows is not None:
                    gamma[b, : len(ex.doc_tokens)] = rows
            memory = model.backbone.encode(src, gamma if model.rst_enabled else None)
            tgt = torch.full((n, 1), BOS, dtype=torch.long)
            for _ in range(decode.max_length):
                logits = model.backbone.decode(memory, src, tgt)
                lp = torch.log_softmax(logits[:, -1, :].to(torch.float64), dim=-1)
                lp[:, list(SUPPRESSED_AT_DECODE)] = -float("inf")
                column = torch.full((n, 1), PAD, dtype=torch.long)
                for b in range(n):
                    if done[b]:
                        continue
                    row = lp[b]
                    banned = _banned_tokens(outs[b], decode.no_repeat_ngram)
                    if banned:
                        row = row.clone()
                        row[list(banned)] = -float("inf")
                    nxt = int(torch.argmax(row))
                    if nxt == EOS:
                        done[b] = True
                        continue
                    outs[b].append(nxt)
                    column[b, 0] = nxt
                if all(done):
                    break
                tgt = torch.cat([tgt, column], dim=1)
    return outs


def greedy_decode(model: AdaptedModel, ex: Example, decode: DecodeConfig) -> list[int]:
    return greedy_decode_batch(model, [ex], decode)[0]


def generate_from_gamma(
    model: AdaptedModel,
    doc_tokens: list[int] | tuple[int, ...],
    gamma,
    decode: DecodeConfig,
) -> list[int]:
    """Decode a bare document with an optional GammaMatrix.

    The matrix's document region must cover exactly the document tokens;
    `None` decodes with a zero weighting.
    """
    rows = None
    if gamma is not None:
        start, end = gamma.doc_region
        rows = np.asarray(gamma.values[start:end], dtype=np.float64)
    ex = Example("adhoc", tuple(doc_tokens), (), rows)
    return generate(model, ex, decode)


def generate(model: AdaptedModel, ex: Example, decode: DecodeConfig) -> list[int]:
    """Beam search with length-penalized scoring and n-gram blocking.

    A beam of one degenerates to greedy argmax decoding.
    """
    if decode.beam_size == 1:
        return greedy_decode(model, ex, decode)
    _check_decode_length(model, ex, decode)
    model.eval()
    dec = _Decoder(model, ex)

    beams: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[tuple[list[int], float]] = []  # (tokens, score)
    exhausted = False
    for step in range(decode.max_length):
        lp = dec.logprobs([b[0] for b in beams])
        vocab = lp.shape[-1]
        candidates: list[tuple[float, int, int]] = []  # (total_lp, beam_idx, token)
        for bi, (toks, blp) in enumerate(beams):
            row = lp[bi].clone()
            banned = _banned_tokens(toks, decode.no_repeat_ngram)
            if banned:
                row[list(banned)] = -float("inf")
            k = min(2 * decode.beam_size, vocab)
            top = torch.topk(row, k)
            for val, tok in zip(top.values.tolist(), top.indices.tolist()):
                candidates.append((blp + val, bi, tok))
        # Deterministic order: total desc, then beam index, then token id.
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        next_beams: list[tuple[list[int], float]] = []
        for total, bi, tok in candidates:
            if math.isinf(total):
                continue
            if tok == EOS:
                toks = beams[bi][0]
                finished.append(
                    (toks, beam_score(total, len(toks) + 1, decode.length_penalty))
                )
            else:
                next_beams.append((beams[bi][0] + [tok], total))
            if len(next_beams) >= decode.beam_size:
                break
        if not next_beams:
            break
        beams = next_beams
        if step == decode.max_length - 1:
            exhausted = True
        elif finished:
            best_done = max(s for _, s in finished)
            # Log-probability only falls, so the best score any live beam can
            # still reach divides its current mass by the largest length term.
            reachable = max(
                beam_score(blp, decode.max_length, decode.length_penalty)
                for _, blp in beams
            )
            if reachable <= best_done:
                break
    if exhausted:
        for toks, blp in beams:
            finished.append((toks, beam_score(blp, len(toks), decode.length_penalty)))
    if not finished:
        finished = [
            (toks, beam_score(blp, len(toks), decode.length_penalty))
            for toks, blp in beams
        ]
    finished.sort(key=lambda f: -f[1])
    return list(finished[0][0])


# -- training loop -----------------------------------------------------------


def _tokens_as_strings(tokens: list[int]) -> list[str]:
    return [str(t) for t in tokens]


def validation_rouge2(
    model: AdaptedModel,
    val_set: list[Example],
    decode: DecodeConfig,
    use_beam: bool = False,
) -> float:
    """Mean Rouge-2 F1 of decoded summaries against the references."""
    if use_beam:
        cands = [generate(model, ex, decode) for ex in val_set]
    else:
        cands = greedy_decode_batch(model, val_set, decode)
    scores = [
        rouge_n(_tokens_as_strings(c), _tokens_as_strings(list(ex.summary_tokens)), 2).f1
        for c, ex in zip(cands, val_set)
    ]
    return sum(scores) / len(scores)


def train(
    model: AdaptedModel,
    train_set: list[Example],
    val_set: list[Example],
    config: TrainConfig,
    decode: DecodeConfig,
    val_use_beam: bool = False,
) -> TrainResult:
    """Fine-tune the adapters; the model is left holding the best checkpoint."""
    if not train_set or not val_set:
        raise DataError("train and validation splits must be non-empty")

    torch.manual_seed(config.seed)
    order_rng = random.Random(config.seed)

    params = model.trainable_parameters()
    if not params:
        raise ConfigError("model has no trainable parameters; attach adapters first")
    baseline = [p.detach().clone() for p in model.backbone.parameters()]

    optimizer = torch.optim.AdamW(
        params,
        lr=config.lr,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    batches_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: cosine_lr_factor(step, total_steps, config.warmup_ratio),
    )

    log: list[tuple[int, float, float]] = []
    best_epoch, best_val = 0, -1.0
    best_state: dict[str, torch.Tensor] | None = None
    bad_epochs = 0
    step = 0
    stopped_early = False

    for epoch in range(1, config.epochs + 1):
        model.train()
        indices = list(range(len(train_set)))
        order_rng.shuffle(indices)
        epoch_loss = 0.0
        for start in range(0, len(indices), config.batch_size):
            batch = [train_set[i] for i in indices[start : start + config.batch_size]]
            loss = _batch_loss(model, batch)
            if not torch.isfinite(loss):
                raise DivergenceError(step, repr(float(loss)))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            epoch_loss += float(loss.detach())
            step += 1
        train_loss = epoch_loss / batches_per_epoch

        val_r2 = validation_rouge2(model, val_set, decode, use_beam=val_use_beam)
        log.append((epoch, train_loss, val_r2))

        if val_r2 > best_val:
            best_epoch, best_val = epoch, val_r2
            best_state = {
                name: t.detach().clone() for name, t in _adapter_state(model).items()
            }
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stopping_patience:
                stopped_early = True
                break

    # Freeze contract: every non-trainable weight must be bit-identical to
    # where it started.
    for before, after in zip(baseline, model.backbone.parameters()):
        if after.requires_grad:
            continue
        if not torch.equal(before, after):
            raise DataError("frozen backbone weight changed during training")

    if best_state is not None:
        _load_adapter_state(model, best_state)
    model.eval()
    return TrainResult(
        log=log, best_epoch=best_epoch, best_val_r2=best_val, stopped_early=stopped_early
    )


def _adapter_state(model: AdaptedModel) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for name, adapter in model.adapters.items():
        out[f"{name}.w_down"] = adapter.w_down
        out[f"{name}.w_up"] = adapter.w_up
    return out


def _load_adapter_state(model: AdaptedModel, state: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, tensor in _adapter_state(model).items():
            tensor.copy_(state[name])
