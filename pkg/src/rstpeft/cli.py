"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 data error, 4 training
divergence.  Tabular outputs are CSV with a JSON twin; report paths
render figures next to the tables they summarize.
"""

from __future__ import annotations

import functools
import json
import shlex
import sys
from pathlib import Path

import click

from . import __version__
from .ablation import MaskSpec, gamma_pattern, mask_parse
from .distribution import VARIANTS, make_variant
from .errors import ToolkitError
from .gamma import LAYOUTS, project_gamma, save_gamma
from .metrics import evaluate_corpus, run_external_metric
from .parser_io import (
    SynthConfig,
    load_parse,
    load_parses,
    synth_parse,
    validate,
    write_corpus,
    write_parses,
)
from .util import write_json


def _tolerant(fn):
    """Map toolkit errors onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ToolkitError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)

    return wrapper


def _int_pair(value: str) -> tuple[int, int]:
    lo, _, hi = value.partition(",")
    return int(lo), int(hi)


def _float_pair(value: str) -> tuple[float, float]:
    lo, _, hi = value.partition(",")
    return float(lo), float(hi)


@click.group()
@click.version_option(__version__)
@click.option("--seed", type=int, default=0, show_default=True, help="Global seed.")
@click.option(
    "--precision",
    type=click.Choice(["32", "64"]),
    default="32",
    show_default=True,
    help="Float width for model arithmetic.",
)
@click.option(
    "--out-dir",
    type=click.Path(path_type=Path),
    default=Path("runs"),
    show_default=True,
    help="Default output directory.",
)
@click.pass_context
def main(ctx, seed, precision, out_dir):
    """Discourse-weighted adapter fine-tuning toolkit."""
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, precision=precision, out_dir=out_dir)


@main.command()
@click.option("--n-docs", type=int, required=True)
@click.option("--n-edu", default="6,10", show_default=True, help="min,max units per doc")
@click.option("--tokens-per-edu", default="3,5", show_default=True)
@click.option("--nucleus-ratio", type=float, default=0.3, show_default=True)
@click.option("--nucleus-prob", default="0.6,0.95", show_default=True)
@click.option("--satellite-prob", default="0.05,0.35", show_default=True)
@click.option("--vocab-size", type=int, default=512, show_default=True)
@click.option("--seed", type=int, default=None, help="Overrides the global seed.")
@click.option("--out-dir", type=click.Path(path_type=Path), default=None)
@click.pass_context
@_tolerant
def synth(ctx, n_docs, n_edu, tokens_per_edu, nucleus_ratio, nucleus_prob,
          satellite_prob, vocab_size, seed, out_dir):
    """Generate a planted-nucleus corpus (parses + documents + references)."""
    out_dir = out_dir or ctx.obj["out_dir"]
    config = SynthConfig(
        n_docs=n_docs,
        n_edu_range=_int_pair(n_edu),
        tokens_per_edu_range=_int_pair(tokens_per_edu),
        nucleus_ratio=nucleus_ratio,
        nucleus_prob_range=_float_pair(nucleus_prob),
        satellite_prob_range=_float_pair(satellite_prob),
        vocab_size=vocab_size,
        seed=ctx.obj["seed"] if seed is None else seed,
    )
    docs = synth_parse(config)
    out_dir = Path(out_dir)
    write_parses(out_dir / "parses.jsonl", [d.parse for d in docs])
    write_corpus(out_dir / "corpus.jsonl", docs)
    click.echo(f"wrote {len(docs)} documents to {out_dir}")


@main.command("validate")
@click.option("--parse-file", type=click.Path(exists=True, path_type=Path), required=True)
@_tolerant
def validate_cmd(parse_file):
    """Check every parse invariant; nonzero exit on violations."""
    parses = load_parses(parse_file)
    bad = 0
    for parse in parses:
        report = validate(parse)
        if not report.ok:
            bad += 1
            for violation in report.violations:
                click.echo(f"{report.doc_id}: {violation}")
    if bad:
        click.echo(f"{bad}/{len(parses)} documents violate invariants", err=True)
        sys.exit(3)
    click.echo(f"{len(parses)} documents valid")


@main.command()
@click.option("--parse-file", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--variant", type=click.Choice(VARIANTS), default="p_w", show_default=True)
@click.option("--merge-include-diagonal", is_flag=True, default=False)
@click.option("--binarize-after-merge", is_flag=True, default=False)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_tolerant
def build(parse_file, variant, merge_include_diagonal, binarize_after_merge, threshold, out):
    """Build importance distributions for every document in a parse file."""
    parses = load_parses(parse_file)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for parse in parses:
            dist = make_variant(
                parse,
                variant,
                threshold=threshold,
                include_diagonal=merge_include_diagonal,
                binarize_after_merge=binarize_after_merge,
            )
            record = {"doc_id": parse.segmentation.doc_id, **dist.to_json()}
            f.write(json.dumps(record) + "\n")
    click.echo(f"wrote {len(parses)} distributions to {out}")


@main.command("gamma")
@click.option("--parse-file", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--doc-id", default=None, help="Document to project (default: sole doc).")
@click.option("--variant", type=click.Choice(VARIANTS), default="p_w", show_default=True)
@click.option("--seq-len", type=int, required=True)
@click.option("--d-model", type=int, required=True)
@click.option("--doc-offset", type=int, default=0, show_default=True)
@click.option("--layout", type=click.Choice(LAYOUTS), default="tile", show_default=True)
@click.option("--merge-include-diagonal", is_flag=True, default=False)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_tolerant
def gamma_cmd(parse_file, doc_id, variant, seq_len, d_model, doc_offset, layout,
              merge_include_diagonal, out):
    """Project one document's distribution onto token rows (.rstg file)."""
    parse = load_parse(parse_file, doc_id=doc_id)
    dist = make_variant(parse, variant, include_diagonal=merge_include_diagonal)
    gm = project_gamma(
        dist, parse.segmentation, seq_len=seq_len, d_model=d_model,
        doc_offset=doc_offset, layout=layout,
    )
    save_gamma(out, gm)
    click.echo(f"wrote {seq_len}x{d_model} weighting to {out}")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              required=True, help="Experiment TOML.")
@click.option("--variant", "condition", default="p_w", show_default=True,
              help="Condition label (variant, pattern, or 'vanilla').")
@click.option("--seed", type=int, default=None, help="Overrides the global seed.")
@click.option("--out-dir", type=click.Path(path_type=Path), default=None)
@click.pass_context
@_tolerant
def train_cmd(ctx, config_path, condition, seed, out_dir):
    """Fine-tune adapters for one condition and evaluate on the test split."""
    from .experiment import load_experiment_config, run_single

    cfg = load_experiment_config(config_path)
    seed = ctx.obj["seed"] if seed is None else seed
    out_dir = Path(out_dir or ctx.obj["out_dir"])
    result = run_single(cfg, condition, seed, out_dir)
    r2 = result.test_f1["rouge2"]
    click.echo(f"run complete: test Rouge-2 F1 {r2:.4f} ({result.run_dir})")


@main.command("generate")
@click.option("--run-dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test",
              show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@_tolerant
def generate_cmd(run_dir, split, out):
    """Beam-decode a finished run's split into a summaries JSONL."""
    from .experiment import decode_run

    triples = decode_run(run_dir, split)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for doc_id, cand, ref in triples:
            f.write(json.dumps({"doc_id": doc_id, "text": cand, "reference": ref}) + "\n")
    click.echo(f"wrote {len(triples)} summaries to {out}")


def _read_texts(path: Path) -> list[tuple[str, str]]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append((str(obj.get("doc_id", len(out))), obj["text"]))
    return out


@main.command("eval")
@click.option("--cands", type=click.Path(exists=True, path_type=Path), required=True,
              help="JSONL of {doc_id, text}.")
@click.option("--refs", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--plugin", default=None,
              help="External metric command reading pairs JSON on stdin.")
@_tolerant
def eval_cmd(cands, refs, out, plugin):
    """Score candidates against references with the native ROUGE family."""
    cand_rows = _read_texts(cands)
    ref_rows = dict(_read_texts(refs))
    pairs = []
    for doc_id, text in cand_rows:
        if doc_id not in ref_rows:
            click.echo(f"error: no reference for doc_id {doc_id!r}", err=True)
            sys.exit(3)
        pairs.append((text, ref_rows[doc_id]))
    report = evaluate_corpus(pairs)
    payload = report.to_json()
    if plugin:
        payload["external"] = run_external_metric(shlex.split(plugin), pairs)
    write_json(out, payload)
    means = payload["corpus"]
    click.echo(
        "corpus F1: "
        + "  ".join(f"{m}={means[m]['f1']:.4f}" for m in ("rouge1", "rouge2", "rougeL", "rougeLsum"))
    )


@main.command("ablate")
@click.option("--kind", type=click.Choice(["even", "odd", "random"]), default=None)
@click.option("--seq-len", type=int, default=None)
@click.option("--d-model", type=int, default=None)
@click.option("--mask", type=float, default=None, help="Fraction of parse cells to degrade.")
@click.option("--parse-file", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--seed", type=int, default=None, help="Overrides the global seed.")
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.pass_context
@_tolerant
def ablate_cmd(ctx, kind, seq_len, d_model, mask, parse_file, seed, out):
    """Emit a control weighting (--kind) or a degraded parse file (--mask)."""
    seed = ctx.obj["seed"] if seed is None else seed
    if (kind is None) == (mask is None):
        click.echo("error: pass exactly one of --kind or --mask", err=True)
        sys.exit(2)
    if kind is not None:
        if seq_len is None or d_model is None:
            click.echo("error: --kind needs --seq-len and --d-model", err=True)
            sys.exit(2)
        gm = gamma_pattern(kind, seq_len, d_model, seed=seed)
        save_gamma(out, gm)
        click.echo(f"wrote {kind} pattern to {out}")
    else:
        if parse_file is None:
            click.echo("error: --mask needs --parse-file", err=True)
            sys.exit(2)
        parses = load_parses(parse_file)
        masked = [
            mask_parse(p, MaskSpec(mask, seed + idx)) for idx, p in enumerate(parses)
        ]
        write_parses(out, masked)
        click.echo(f"wrote {len(masked)} degraded parses to {out}")


@main.command("experiment")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--out-dir", type=click.Path(path_type=Path), default=None)
@click.pass_context
@_tolerant
def experiment_cmd(ctx, config_path, out_dir):
    """Run the full condition x seed grid and consolidate a comparison table."""
    from .experiment import run_pipeline

    out_dir = Path(out_dir or ctx.obj["out_dir"])
    outcome = run_pipeline(config_path, out_dir)
    for row in outcome.rows:
        click.echo(
            f"{row['condition']}: Rouge-2 F1 {row['r2_mean']:.4f} +/- {row['r2_sd']:.4f}"
        )
    click.echo(f"comparison table: {outcome.out_dir / 'comparison.csv'}")
    if not outcome.ok:
        for failure in outcome.failures:
            click.echo(f"failed: {failure.condition} seed {failure.seed}: {failure.error}",
                       err=True)
        sys.exit(1)


@main.command("sweep")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--param", type=click.Choice(["rank", "mask"]), required=True)
@click.option("--values", required=True, help="Comma-separated sweep values.")
@click.option("--out-dir", type=click.Path(path_type=Path), default=None)
@click.pass_context
@_tolerant
def sweep_cmd(ctx, config_path, param, values, out_dir):
    """Sweep adapter rank or parser-mask fraction over the base condition."""
    from .experiment import load_experiment_config, run_experiment

    cfg = load_experiment_config(config_path)
    cfg.sweep_param = param
    cfg.sweep_values = [float(v) for v in values.split(",") if v.strip()]
    out_dir = Path(out_dir or ctx.obj["out_dir"])
    outcome = run_experiment(cfg, out_dir)
    for row in outcome.rows:
        click.echo(
            f"{row['condition']}: Rouge-2 F1 {row['r2_mean']:.4f} +/- {row['r2_sd']:.4f}"
        )
    if not outcome.ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
