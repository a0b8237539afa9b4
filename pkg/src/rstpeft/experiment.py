"""End-to-end experiment orchestration.

An experiment is a TOML config naming a synthetic corpus, a backbone, an
adapter setup and a set of conditions x seeds.  Each (condition, seed)
pair becomes one sub-run directory holding a config snapshot, the
per-epoch metric log, the best adapter checkpoint, a test report and a
manifest that hashes every emitted file.  A consolidated comparison
table (CSV plus JSON twin, plus rendered figures) summarizes test
Rouge F1 per condition as mean and standard deviation over seeds.

Condition grammar:
    p_w | p_wo | b_w | b_wo      importance-distribution variants
    even | odd | random          control weightings
    vanilla                      plain adapter, no weighting
optionally suffixed with "@mask=F" to degrade the parser output by
replacing fraction F of off-diagonal cells with uniform noise.

Seed derivations are fixed formulas so reruns are byte-identical:
corpus-level parser noise uses corpus.seed; condition masking and
random-pattern weightings derive from the run seed and document index.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__
from .ablation import MaskSpec, gamma_pattern, mask_parse
from .backbone import BackboneConfig, attach_lora, build_backbone, weight_checksum
from .distribution import VARIANTS, make_variant
from .errors import ConfigError, ToolkitError
from .gamma import project_gamma
from .lora import LoRAConfig, save_adapters
from .metrics import METRIC_NAMES, evaluate_corpus
from .parser_io import SynthConfig, SynthDoc, synth_parse, write_corpus, write_parses
from .tokens import to_text
from .trainer import DecodeConfig, Example, TrainConfig, generate, train
from .util import sha256_file, write_json

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PATTERNS = ("even", "odd", "random")


@dataclass(frozen=True)
class Condition:
    label: str
    kind: str  # "variant" | "pattern" | "vanilla"
    variant: str | None = None
    pattern: str | None = None
    mask_fraction: float = 0.0


def parse_condition(label: str) -> Condition:
    base, mask = label, 0.0
    if "@" in label:
        base, _, suffix = label.partition("@")
        if not suffix.startswith("mask="):
            raise ConfigError(f"condition {label!r}: unknown suffix {suffix!r}")
        try:
            mask = float(suffix[len("mask=") :])
        except ValueError as exc:
            raise ConfigError(f"condition {label!r}: bad mask fraction") from exc
        if not (0.0 <= mask <= 1.0):
            raise ConfigError(f"condition {label!r}: mask fraction out of [0, 1]")
    if base in VARIANTS:
        return Condition(label=label, kind="variant", variant=base, mask_fraction=mask)
    if base in PATTERNS:
        return Condition(label=label, kind="pattern", pattern=base, mask_fraction=mask)
    if base == "vanilla":
        return Condition(label=label, kind="vanilla", mask_fraction=mask)
    raise ConfigError(
        f"unknown condition {base!r}; expected a variant {VARIANTS}, "
        f"a pattern {PATTERNS}, or 'vanilla'"
    )


@dataclass
class ExperimentConfig:
    name: str
    conditions: list[str]
    seeds: list[int]
    synth: SynthConfig
    splits: tuple[int, int, int]
    noise_fraction: float
    backbone: BackboneConfig
    lora: LoRAConfig
    train_cfg: TrainConfig
    decode: DecodeConfig
    gamma_layout: str = "tile"
    include_diagonal: bool = False
    binarize_after_merge: bool = False
    gamma_layers: str = "all"
    val_use_beam: bool = False
    sweep_param: str | None = None
    sweep_values: list[float] = field(default_factory=list)
    raw: dict = field(default_factory=dict)


def _require(section: dict, name: str, table: str):
    if name not in section:
        raise ConfigError(f"missing key {name!r} in [{table}]")
    return section[name]


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return config_from_raw(raw, default_name=path.stem)


def config_from_raw(raw: dict, default_name: str = "experiment") -> ExperimentConfig:
    exp = raw.get("experiment", {})
    corpus = raw.get("corpus", {})
    train_tbl = raw.get("train", {})
    decode_tbl = raw.get("decode", {})
    lora_tbl = raw.get("lora", {})
    backbone_tbl = dict(raw.get("backbone", {}))
    gamma_tbl = raw.get("gamma", {})

    splits = (
        int(_require(corpus, "train", "corpus")),
        int(_require(corpus, "val", "corpus")),
        int(_require(corpus, "test", "corpus")),
    )
    synth = SynthConfig(
        n_docs=sum(splits),
        n_edu_range=tuple(corpus.get("n_edu", (6, 10))),
        tokens_per_edu_range=tuple(corpus.get("tokens_per_edu", (3, 5))),
        nucleus_ratio=float(corpus.get("nucleus_ratio", 0.3)),
        nucleus_prob_range=tuple(corpus.get("nucleus_prob", (0.6, 0.95))),
        satellite_prob_range=tuple(corpus.get("satellite_prob", (0.05, 0.35))),
        vocab_size=int(corpus.get("vocab_size", 512)),
        seed=int(corpus.get("seed", 0)),
    )
    synth.check()

    backbone_tbl.setdefault("vocab_size", synth.vocab_size)
    backbone = BackboneConfig.from_dict(backbone_tbl)

    lora = LoRAConfig(
        r=int(lora_tbl.get("r", 8)),
        alpha=float(lora_tbl.get("alpha", 32.0)),
        dropout=float(lora_tbl.get("dropout", 0.1)),
        target_layers=tuple(lora_tbl.get("targets", LoRAConfig().target_layers)),
    )
    train_cfg = TrainConfig(
        lr=float(train_tbl.get("lr", 5e-5)),
        warmup_ratio=float(train_tbl.get("warmup_ratio", 0.2)),
        betas=tuple(train_tbl.get("betas", (0.9, 0.999))),
        eps=float(train_tbl.get("eps", 1e-9)),
        weight_decay=float(train_tbl.get("weight_decay", 0.1)),
        epochs=int(train_tbl.get("epochs", 50)),
        batch_size=int(train_tbl.get("batch_size", 16)),
        early_stopping_patience=int(train_tbl.get("patience", 5)),
        precision=str(train_tbl.get("precision", "32")),
    )
    decode = DecodeConfig(
        beam_size=int(decode_tbl.get("beam_size", 4)),
        length_penalty=float(decode_tbl.get("length_penalty", 3.0)),
        no_repeat_ngram=int(decode_tbl.get("no_repeat_ngram", 3)),
        max_length=int(decode_tbl.get("max_length", 64)),
    )

    conditions = list(exp.get("conditions", ["p_w"]))
    for label in conditions:
        parse_condition(label)
    seeds = [int(s) for s in exp.get("seeds", [0])]
    if not seeds:
        raise ConfigError("experiment needs at least one seed")

    return ExperimentConfig(
        name=str(exp.get("name", default_name)),
        conditions=conditions,
        seeds=seeds,
        synth=synth,
        splits=splits,
        noise_fraction=float(corpus.get("noise_fraction", 0.0)),
        backbone=backbone,
        lora=lora,
        train_cfg=train_cfg,
        decode=decode,
        gamma_layout=str(gamma_tbl.get("layout", "tile")),
        include_diagonal=bool(gamma_tbl.get("include_diagonal", False)),
        binarize_after_merge=bool(gamma_tbl.get("binarize_after_merge", False)),
        gamma_layers=str(gamma_tbl.get("gamma_layers", "all")),
        val_use_beam=bool(exp.get("val_use_beam", False)),
        sweep_param=exp.get("sweep_param"),
        sweep_values=[float(v) for v in exp.get("sweep_values", [])],
        raw=raw,
    )


# -- corpus and weighting assembly ------------------------------------------


def _noise_seed(corpus_seed: int, doc_index: int) -> int:
    return corpus_seed * 100_003 + doc_index


def _condition_seed(run_seed: int, doc_index: int) -> int:
    return run_seed * 1_000_003 + doc_index


def build_splits(cfg: ExperimentConfig) -> tuple[list[SynthDoc], list[SynthDoc], list[SynthDoc]]:
    docs = synth_parse(cfg.synth)
    if cfg.noise_fraction > 0.0:
        docs = [
            SynthDoc(
                parse=mask_parse(
                    d.parse,
                    MaskSpec(cfg.noise_fraction, _noise_seed(cfg.synth.seed, i)),
                ),
                doc_tokens=d.doc_tokens,
                summary_tokens=d.summary_tokens,
                nucleus_edus=d.nucleus_edus,
            )
            for i, d in enumerate(docs)
        ]
    n_train, n_val, n_test = cfg.splits
    return (
        docs[:n_train],
        docs[n_train : n_train + n_val],
        docs[n_train + n_val : n_train + n_val + n_test],
    )


def make_examples(
    docs: list[SynthDoc],
    condition: Condition,
    cfg: ExperimentConfig,
    run_seed: int,
    doc_index_base: int,
) -> list[Example]:
    """Attach per-document weighting rows according to the condition."""
    d_model = cfg.backbone.d_model
    out: list[Example] = []
    for offset, doc in enumerate(docs):
        doc_index = doc_index_base + offset
        parse = doc.parse
        if condition.mask_fraction > 0.0:
            parse = mask_parse(
                parse,
                MaskSpec(condition.mask_fraction, _condition_seed(run_seed, doc_index)),
            )
        doc_len = len(doc.doc_tokens)
        if condition.kind == "variant":
            dist = make_variant(
                parse,
                condition.variant,
                include_diagonal=cfg.include_diagonal,
                binarize_after_merge=cfg.binarize_after_merge,
            )
            gm = project_gamma(
                dist,
                parse.segmentation,
                seq_len=doc_len,
                d_model=d_model,
                doc_offset=0,
                layout=cfg.gamma_layout,
            )
            gamma_doc = gm.values
        elif condition.kind == "pattern":
            gm = gamma_pattern(
                condition.pattern,
                seq_len=doc_len,
                d_model=d_model,
                seed=_condition_seed(run_seed, doc_index),
            )
            gamma_doc = gm.values
        else:
            gamma_doc = None
        out.append(
            Example(
                doc_id=doc.parse.segmentation.doc_id,
                doc_tokens=doc.doc_tokens,
                summary_tokens=doc.summary_tokens,
                gamma_doc=gamma_doc,
            )
        )
    return out


# -- sub-run execution -------------------------------------------------------


@dataclass
class SubRunResult:
    condition: str
    seed: int
    run_dir: Path
    status: str
    test_f1: dict[str, float] = field(default_factory=dict)
    error: str = ""


def run_single(
    cfg: ExperimentConfig,
    condition_label: str,
    seed: int,
    run_dir: str | Path,
    splits: tuple[list[SynthDoc], list[SynthDoc], list[SynthDoc]] | None = None,
    lora_override: LoRAConfig | None = None,
    make_figures: bool = True,
) -> SubRunResult:
    """Train and evaluate one (condition, seed) cell into `run_dir`."""
    from . import report

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    condition = parse_condition(condition_label)
    lora_cfg = lora_override or cfg.lora

    if splits is None:
        splits = build_splits(cfg)
    train_docs, val_docs, test_docs = splits
    n_train, n_val = len(train_docs), len(val_docs)

    train_set = make_examples(train_docs, condition, cfg, seed, 0)
    val_set = make_examples(val_docs, condition, cfg, seed, n_train)
    test_set = make_examples(test_docs, condition, cfg, seed, n_train + n_val)

    torch.manual_seed(seed)
    backbone_cfg = BackboneConfig(
        **{
            **{f: getattr(cfg.backbone, f) for f in cfg.backbone.__dataclass_fields__},
            "seed": cfg.backbone.seed + seed,
        }
    )
    model = build_backbone(backbone_cfg, dtype=cfg.train_cfg.dtype)
    adapted = attach_lora(
        model,
        lora_cfg,
        rst_enabled=condition.kind != "vanilla",
        seed=seed,
        gamma_layers=cfg.gamma_layers,
    )
    checksum_before = weight_checksum(model)

    train_cfg = TrainConfig(
        **{
            **{f: getattr(cfg.train_cfg, f) for f in cfg.train_cfg.__dataclass_fields__},
            "seed": seed,
        }
    )
    result = train(
        adapted, train_set, val_set, train_cfg, cfg.decode, val_use_beam=cfg.val_use_beam
    )
    if weight_checksum(model) != checksum_before:
        raise ToolkitError("backbone checksum changed during training")

    # Per-epoch metric log, CSV with a JSON twin
    metrics_path = run_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_r2_f1"])
        for epoch, loss, val in result.log:
            writer.writerow([epoch, repr(loss), repr(val)])
    write_json(
        run_dir / "metrics.json",
        [
            {"epoch": epoch, "train_loss": loss, "val_r2_f1": val}
            for epoch, loss, val in result.log
        ],
    )

    ckpt_path = run_dir / "adapter.ckpt"
    save_adapters(
        ckpt_path,
        adapted.adapters,
        meta={
            "condition": condition_label,
            "seed": seed,
            "best_epoch": result.best_epoch,
            "backbone_seed": backbone_cfg.seed,
        },
    )

    # Final evaluation: beam decoding on the held-out test split.
    pairs = []
    for ex in test_set:
        cand = generate(adapted, ex, cfg.decode)
        pairs.append((to_text(cand), to_text(list(ex.summary_tokens))))
    eval_report = evaluate_corpus(pairs)

    report_payload = {
        "condition": condition_label,
        "seed": seed,
        "best_epoch": result.best_epoch,
        "best_val_r2": result.best_val_r2,
        "stopped_early": result.stopped_early,
        "test": eval_report.to_json(),
    }
    write_json(run_dir / "report.json", report_payload)
    write_json(
        run_dir / "config.json",
        {
            "condition": condition_label,
            "seed": seed,
            "experiment": cfg.raw,
            "lora": {
                "r": lora_cfg.r,
                "alpha": lora_cfg.alpha,
                "dropout": lora_cfg.dropout,
                "target_layers": list(lora_cfg.target_layers),
            },
        },
    )
    outputs = [
        metrics_path,
        run_dir / "metrics.json",
        ckpt_path,
        run_dir / "report.json",
        run_dir / "config.json",
    ]
    if make_figures:
        report.training_curve_figure(result.log, run_dir / "training_curve.png")
        outputs.append(run_dir / "training_curve.png")

    _write_manifest(
        run_dir,
        command="train",
        seed=seed,
        config={"condition": condition_label},
        outputs=outputs,
    )
    return SubRunResult(
        condition=condition_label,
        seed=seed,
        run_dir=run_dir,
        status="ok",
        test_f1={m: eval_report.means[m].f1 for m in METRIC_NAMES},
    )


def _write_manifest(
    run_dir: Path, command: str, seed, config: dict, outputs: list[Path]
) -> None:
    write_json(
        run_dir / "manifest.json",
        {
            "command": command,
            "tool_version": __version__,
            "seed": seed,
            "config": config,
            "outputs": [
                {"path": p.name, "sha256": sha256_file(p)} for p in outputs if p.exists()
            ],
        },
    )


# -- experiment driver -------------------------------------------------------

METRIC_COLUMNS = {"rouge1": "r1", "rouge2": "r2", "rougeL": "rl", "rougeLsum": "rlsum"}


def _mean_sd(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


@dataclass
class ExperimentOutcome:
    out_dir: Path
    rows: list[dict]
    failures: list[SubRunResult]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_pipeline(config_path: str | Path, out_dir: str | Path) -> ExperimentOutcome:
    """Run every (condition, seed) cell of an experiment config."""
    cfg = load_experiment_config(config_path)
    return run_experiment(cfg, out_dir)


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[str, str, LoRAConfig | None]]:
    """Resolve (row label, condition, adapter override) triples.

    Without a sweep each condition is its own row.  A rank sweep varies
    the adapter rank over the first condition; a mask sweep varies the
    parser-degradation fraction.
    """
    if not cfg.sweep_param:
        return [(label, label, None) for label in cfg.conditions]
    base = cfg.conditions[0]
    if "@" in base:
        raise ConfigError("sweep base condition must not carry a mask suffix")
    rows: list[tuple[str, str, LoRAConfig | None]] = []
    if cfg.sweep_param == "rank":
        for value in cfg.sweep_values:
            r = int(value)
            override = LoRAConfig(
                r=r,
                alpha=cfg.lora.alpha,
                dropout=cfg.lora.dropout,
                target_layers=cfg.lora.target_layers,
            )
            rows.append((f"r={r}", base, override))
    elif cfg.sweep_param == "mask":
        for value in cfg.sweep_values:
            label = base if value == 0 else f"{base}@mask={value}"
            rows.append((f"mask={value}", label, None))
    else:
        raise ConfigError(f"unknown sweep parameter {cfg.sweep_param!r}")
    if not rows:
        raise ConfigError("sweep_values must be non-empty when sweep_param is set")
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> ExperimentOutcome:
    from . import report

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    splits = build_splits(cfg)
    corpus_dir = out_dir / "corpus"
    all_docs = [d for split in splits for d in split]
    write_parses(corpus_dir / "parses.jsonl", [d.parse for d in all_docs])
    write_corpus(corpus_dir / "corpus.jsonl", all_docs)

    rows_spec = expand_sweep(cfg)
    results: list[SubRunResult] = []
    for row_label, condition_label, override in rows_spec:
        for seed in cfg.seeds:
            run_dir = out_dir / "runs" / f"{_slug(row_label)}-seed{seed}"
            try:
                res = run_single(
                    cfg,
                    condition_label,
                    seed,
                    run_dir,
                    splits=splits,
                    lora_override=override,
                )
            except ToolkitError as exc:
                res = SubRunResult(
                    condition=row_label,
                    seed=seed,
                    run_dir=run_dir,
                    status="failed",
                    error=str(exc),
                )
                write_json(run_dir / "manifest.json", {
                    "command": "train",
                    "tool_version": __version__,
                    "seed": seed,
                    "config": {"condition": condition_label},
                    "status": "failed",
                    "error": str(exc),
                    "outputs": [],
                })
            else:
                res.condition = row_label
            results.append(res)

    rows = []
    for row_label, _, _ in rows_spec:
        cell = [r for r in results if r.condition == row_label and r.status == "ok"]
        if not cell:
            continue
        row: dict = {"condition": row_label, "seeds": [r.seed for r in cell]}
        for metric, col in METRIC_COLUMNS.items():
            per_seed = [r.test_f1[metric] for r in cell]
            mean, sd = _mean_sd(per_seed)
            row[f"{col}_mean"], row[f"{col}_sd"] = mean, sd
            row[f"{col}_per_seed"] = per_seed
        rows.append(row)

    _write_comparison(out_dir, rows)
    figures_dir = out_dir / "figures"
    if cfg.sweep_param:
        report.sweep_figure(rows, cfg.sweep_param, figures_dir / "sweep_rouge2.png")
    report.comparison_figure(rows, "r2", figures_dir / "comparison_rouge2.png")

    failures = [r for r in results if r.status != "ok"]
    outputs = [
        out_dir / "comparison.csv",
        out_dir / "comparison.json",
        corpus_dir / "parses.jsonl",
        corpus_dir / "corpus.jsonl",
        figures_dir / "comparison_rouge2.png",
        figures_dir / "sweep_rouge2.png",
    ]
    write_json(
        out_dir / "manifest.json",
        {
            "command": "experiment",
            "tool_version": __version__,
            "seed": cfg.seeds,
            "config": {
                "name": cfg.name,
                "conditions": cfg.conditions,
                "sweep": cfg.sweep_param,
            },
            "runs": [str(r.run_dir.relative_to(out_dir)) for r in results],
            "outputs": [
                {"path": str(p.relative_to(out_dir)), "sha256": sha256_file(p)}
                for p in outputs
                if p.exists()
            ],
        },
    )
    return ExperimentOutcome(out_dir=out_dir, rows=rows, failures=failures)


def _slug(label: str) -> str:
    return (
        label.replace("@", "_").replace("=", "").replace(".", "p").replace("/", "-")
    )


def restore_run(run_dir: str | Path):
    """Rebuild the adapted model of a finished run from its directory.

    Returns (cfg, condition_label, seed, model, splits): the backbone is
    rebuilt from its seeds, adapters reattached and the checkpoint
    weights restored bit-exactly.
    """
    from .lora import load_adapters, restore_adapters
    from .util import read_json

    run_dir = Path(run_dir)
    snapshot = read_json(run_dir / "config.json")
    cfg = config_from_raw(snapshot["experiment"])
    condition_label = snapshot["condition"]
    seed = int(snapshot["seed"])
    lora_snap = snapshot["lora"]
    lora_cfg = LoRAConfig(
        r=int(lora_snap["r"]),
        alpha=float(lora_snap["alpha"]),
        dropout=float(lora_snap["dropout"]),
        target_layers=tuple(lora_snap["target_layers"]),
    )
    condition = parse_condition(condition_label)
    backbone_cfg = BackboneConfig(
        **{
            **{f: getattr(cfg.backbone, f) for f in cfg.backbone.__dataclass_fields__},
            "seed": cfg.backbone.seed + seed,
        }
    )
    model = build_backbone(backbone_cfg, dtype=cfg.train_cfg.dtype)
    adapted = attach_lora(
        model,
        lora_cfg,
        rst_enabled=condition.kind != "vanilla",
        seed=seed,
        gamma_layers=cfg.gamma_layers,
    )
    _, weights, _ = load_adapters(run_dir / "adapter.ckpt")
    restore_adapters(adapted.adapters, weights)
    adapted.eval()
    return cfg, condition_label, seed, adapted, build_splits(cfg)


def decode_run(run_dir: str | Path, split: str = "test") -> list[tuple[str, str, str]]:
    """Beam-decode one split of a finished run.

    Returns (doc_id, candidate text, reference text) triples.
    """
    cfg, condition_label, seed, model, splits = restore_run(run_dir)
    index = {"train": 0, "val": 1, "test": 2}
    if split not in index:
        raise ConfigError(f"unknown split {split!r}")
    docs = splits[index[split]]
    base = sum(len(splits[i]) for i in range(index[split]))
    examples = make_examples(docs, parse_condition(condition_label), cfg, seed, base)
    out = []
    for ex in examples:
        cand = generate(model, ex, cfg.decode)
        out.append((ex.doc_id, to_text(cand), to_text(list(ex.summary_tokens))))
    return out


def _write_comparison(out_dir: Path, rows: list[dict]) -> None:
    csv_path = out_dir / "comparison.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        header = ["condition", "n_seeds"]
        for col in METRIC_COLUMNS.values():
            header += [f"{col}_mean", f"{col}_sd"]
        writer.writerow(header)
        for row in rows:
            out = [row["condition"], len(row["seeds"])]
            for col in METRIC_COLUMNS.values():
                out += [repr(row[f"{col}_mean"]), repr(row[f"{col}_sd"])]
            writer.writerow(out)
    write_json(out_dir / "comparison.json", {"version": 1, "rows": rows})
