"""Command-line entry point.

Subcommands: ingest, synth, adapt, retrieve, eval-classes, eval-tasks,
ablate, sweep. Reports are JSON-first with CSV mirrors; report-producing
commands also render a matplotlib figure next to the delimited output.
Errors exit with a family-specific code (see errors module / README).
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import sys
from pathlib import Path

import click

from . import figures
from .adaptation import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .errors import NotFoundError, QadaptError
from .evaluation import load_tasks
from .pipeline import (
    adapt_report,
    checkpoint_query_encoder,
    eval_classes as eval_classes_fn,
    eval_tasks as eval_tasks_fn,
    pretrained_query_encoder,
    run_ablation,
    run_adapt,
    run_sweep,
    write_json,
)
from .retrieval import retrieve, retrieve_across_scenes, retrieve_with_checkpoint
from .store import load_ground_truth, load_store, save_store
from .synth import SynthConfig, write_benchmark

logger = logging.getLogger(__name__)


def _fail(exc: QadaptError):
    click.echo(f"error: {exc}", err=True)
    sys.exit(exc.exit_code)


def handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except QadaptError as exc:
            _fail(exc)

    return wrapper


def config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None, help="INI config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Training seed override.")(fn)
    fn = click.option("--epochs", type=int, default=None)(fn)
    fn = click.option("--batch-size", type=int, default=None)(fn)
    fn = click.option("--learning-rate", type=float, default=None)(fn)
    fn = click.option("--tau", type=float, default=None)(fn)
    fn = click.option("--k", type=int, default=None, help="Top-k selection size.")(fn)
    fn = click.option("--n-negatives", type=int, default=None)(fn)
    fn = click.option("--m-context", type=int, default=None)(fn)
    fn = click.option("--loss", "loss_kind", type=click.Choice(["ueo", "upl-ce"]), default=None)(fn)
    fn = click.option("--use-negatives", type=click.BOOL, default=None)(fn)
    fn = click.option("--use-topk", type=click.BOOL, default=None)(fn)
    fn = click.option(
        "--negative-source", type=click.Choice(["captions", "random-words"]), default=None
    )(fn)
    fn = click.option("--detach-weights", type=click.BOOL, default=None)(fn)
    fn = click.option("--encoder", "encoder_kind", type=click.Choice(["toy", "http"]), default=None)(fn)
    fn = click.option("--encoder-endpoint", default=None)(fn)
    fn = click.option("--encoder-seed", type=int, default=None)(fn)
    fn = click.option("--llm", "llm_kind", type=click.Choice(["none", "stub", "http"]), default=None)(fn)
    fn = click.option("--llm-endpoint", default=None)(fn)
    fn = click.option("--llm-rules", "llm_rules_path", type=click.Path(), default=None)(fn)
    fn = click.option("--stopwords", "stopwords_path", type=click.Path(), default=None)(fn)
    return fn


def build_config(config_path, **overrides) -> RunConfig:
    names = {f.name for f in dataclasses.fields(RunConfig)}
    clean = {k: v for k, v in overrides.items() if k in names and v is not None}
    return load_run_config(Path(config_path) if config_path else None, overrides=clean)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool):
    """Adapt vision-language embeddings to natural-language queries using
    archives of previously observed object segments."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.argument("store_dir", type=click.Path())
@click.option("--out", type=click.Path(), default=None, help="Re-save canonically to this directory.")
@handles_errors
def ingest(store_dir, out):
    """Validate an archive directory (optionally re-save it)."""
    store = load_store(Path(store_dir))
    click.echo(
        f"ok: {len(store.scenes)} scenes, {store.n_segments} segments, dim {store.dim}"
    )
    if out:
        save_store(store, Path(out))
        click.echo(f"wrote canonical archive to {out}")


@main.command()
@click.option("--out", type=click.Path(), required=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--adapt-scenes", type=int, default=8, show_default=True)
@click.option("--eval-scenes", type=int, default=2, show_default=True)
@click.option("--segments-per-scene", type=int, default=60, show_default=True)
@click.option("--distractor-fraction", type=float, default=0.7, show_default=True)
@click.option("--shift-angle", type=float, default=35.0, show_default=True)
@click.option("--shift-bias", type=float, default=0.2, show_default=True)
@click.option("--noise-sigma", type=float, default=0.3, show_default=True)
@click.option("--encoder-seed", type=int, default=7, show_default=True)
@handles_errors
def synth(out, seed, adapt_scenes, eval_scenes, segments_per_scene, distractor_fraction,
          shift_angle, shift_bias, noise_sigma, encoder_seed):
    """Generate the synthetic benchmark (adapt/eval archives + tasks)."""
    cfg = SynthConfig(
        n_adapt_scenes=adapt_scenes,
        n_eval_scenes=eval_scenes,
        segments_per_scene=segments_per_scene,
        distractor_fraction=distractor_fraction,
        shift_angle_deg=shift_angle,
        shift_bias=shift_bias,
        noise_sigma=noise_sigma,
        seed=seed,
        encoder_seed=encoder_seed,
    )
    result = write_benchmark(cfg, Path(out))
    click.echo(
        f"wrote benchmark to {out}: {len(result.adapt_store.scenes)} adapt scenes, "
        f"{len(result.eval_store.scenes)} eval scenes, {len(result.tasks)} tasks"
    )


def _parse_classes(classes: str | None) -> list[str] | None:
    if classes is None:
        return None
    names = [c.strip().lower() for c in classes.split(",") if c.strip()]
    if not names:
        raise click.UsageError("--classes must list at least one class")
    return names


@main.command()
@click.option("--store", "store_dir", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True, help="Checkpoint directory.")
@click.option("--query", default=None, help="Natural-language request (needs an LLM backend).")
@click.option("--classes", default=None, help="Comma-separated target classes (skips the LLM).")
@click.option("--threads", type=int, default=1, show_default=True, help="Worker cap for selection.")
@config_options
@handles_errors
def adapt(store_dir, out, query, classes, threads, config_path, **overrides):
    """Adapt the model to a query or a target-class list."""
    if (query is None) == (classes is None):
        raise click.UsageError("exactly one of --query or --classes is required")
    cfg = build_config(config_path, **overrides)
    store = load_store(Path(store_dir))
    outcome = run_adapt(store, cfg, targets=_parse_classes(classes), query=query, threads=threads)
    out = Path(out)
    save_checkpoint(outcome.checkpoint, out)
    report = adapt_report(outcome, cfg, str(store_dir))
    write_json(out / "run_report.json", report)
    if outcome.checkpoint.loss_trace:
        figures.render_loss_trace(list(outcome.checkpoint.loss_trace), out / "loss_trace.png")
    click.echo(
        f"adapted {outcome.checkpoint.mode} checkpoint -> {out} "
        f"({outcome.n_training_items} items, {outcome.train_seconds:.2f}s)"
    )


@main.command(name="retrieve")
@click.option("--store", "store_dir", type=click.Path(), required=True)
@click.option("--scene", "scene_id", default=None, help="Scene to rank (required unless --all-scenes).")
@click.option("--class", "class_name", default=None)
@click.option("--query", default=None, help="Free-text query (encoded directly).")
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(), default=None)
@click.option("--top-k", type=int, default=5, show_default=True)
@click.option("--all-scenes", is_flag=True, help="Rank across every scene instead of one.")
@click.option("--out", type=click.Path(), default=None, help="Write ranking JSON here.")
@config_options
@handles_errors
def retrieve_cmd(store_dir, scene_id, class_name, query, checkpoint_dir, top_k, all_scenes,
                 out, config_path, **overrides):
    """Rank a scene's segments against a class prompt or query."""
    if (query is None) == (class_name is None):
        raise click.UsageError("exactly one of --query or --class is required")
    if scene_id is None and not all_scenes:
        raise click.UsageError("--scene is required unless --all-scenes is given")
    cfg = build_config(config_path, **overrides)
    store = load_store(Path(store_dir))
    text = class_name or query
    if checkpoint_dir:
        ckpt = load_checkpoint(Path(checkpoint_dir))
        if all_scenes:
            from qadapt.retrieval import checkpoint_class_feature
            feature = checkpoint_class_feature(ckpt, text)
            result = retrieve_across_scenes(store, feature, top_k, query_class=text)
        else:
            result = retrieve_with_checkpoint(store, scene_id, ckpt, text, top_k)
    else:
        encoder = pretrained_query_encoder(store, cfg, [text])
        if all_scenes:
            result = retrieve_across_scenes(store, encoder(text), top_k, query_class=text)
        else:
            result = retrieve(store, scene_id, encoder(text), top_k, query_class=text)
    payload = {
        "scene_id": scene_id,
        "query": text,
        "ranked": [{"segment_id": sid, "similarity": sim} for sid, sim in result.ranked],
    }
    click.echo(json.dumps(payload, indent=2))
    if out:
        write_json(Path(out), payload)


def _load_eval_inputs(store_dir, gt_dir):
    store = load_store(Path(store_dir))
    gt = load_ground_truth(Path(gt_dir) if gt_dir else Path(store_dir), store)
    if not gt:
        raise NotFoundError("no ground-truth files found for evaluation")
    return store, gt


def _query_encoder_for(cfg, store, classes, checkpoint_dir):
    if checkpoint_dir:
        return checkpoint_query_encoder(load_checkpoint(Path(checkpoint_dir)))
    return pretrained_query_encoder(store, cfg, classes)


def _write_eval_outputs(report, out_prefix: Path):
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out_prefix.with_suffix(".json"))
    report.write_csv(out_prefix.with_suffix(".csv"))
    click.echo(f"wrote {out_prefix.with_suffix('.json')} and .csv")


@main.command(name="eval-classes")
@click.option("--store", "store_dir", type=click.Path(), required=True)
@click.option("--gt", "gt_dir", type=click.Path(), default=None, help="Directory with gt_points files (default: store).")
@click.option("--classes", required=True, help="Comma-separated class names.")
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(), default=None)
@click.option("--synonyms", "synonyms_path", type=click.Path(), default=None,
              help="Rules JSON whose synonym table also counts as a label match.")
@click.option("--out", type=click.Path(), default="eval_classes", show_default=True)
@config_options
@handles_errors
def eval_classes_cmd(store_dir, gt_dir, classes, checkpoint_dir, synonyms_path, out,
                     config_path, **overrides):
    """Recall@1 per class prompt over all ground-truthed scenes."""
    cfg = build_config(config_path, **overrides)
    store, gt = _load_eval_inputs(store_dir, gt_dir)
    names = _parse_classes(classes)
    encoder = _query_encoder_for(cfg, store, names, checkpoint_dir)
    synonyms = None
    if synonyms_path:
        synonyms = json.loads(Path(synonyms_path).read_text(encoding="utf-8")).get("synonyms", {})
    report = eval_classes_fn(
        store, gt, names, encoder, config_echo=cfg.to_dict(), synonyms=synonyms
    )
    _write_eval_outputs(report, Path(out))
    click.echo(f"recall@1 = {report.recall_at_1}")


@main.command(name="eval-tasks")
@click.option("--store", "store_dir", type=click.Path(), required=True)
@click.option("--gt", "gt_dir", type=click.Path(), default=None)
@click.option("--tasks", "tasks_path", type=click.Path(), required=True)
@click.option("--checkpoint", "checkpoint_dir", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default="eval_tasks", show_default=True)
@config_options
@handles_errors
def eval_tasks_cmd(store_dir, gt_dir, tasks_path, checkpoint_dir, out, config_path, **overrides):
    """Average task recall over a tasks file."""
    cfg = build_config(config_path, **overrides)
    store, gt = _load_eval_inputs(store_dir, gt_dir)
    if not Path(tasks_path).is_file():
        raise NotFoundError(f"tasks file {tasks_path} not found")
    tasks = load_tasks(Path(tasks_path))
    classes = sorted({c for t in tasks for c in t.relevant_classes})
    encoder = _query_encoder_for(cfg, store, classes, checkpoint_dir)
    report = eval_tasks_fn(store, gt, tasks, encoder, config_echo=cfg.to_dict())
    _write_eval_outputs(report, Path(out))
    click.echo(f"ATR = {report.atr}")


@main.command()
@click.option("--adapt-store", "adapt_dir", type=click.Path(), required=True)
@click.option("--eval-store", "eval_dir", type=click.Path(), required=True)
@click.option("--gt", "gt_dir", type=click.Path(), default=None)
@click.option("--classes", required=True)
@click.option("--out", type=click.Path(), default="ablation", show_default=True)
@config_options
@handles_errors
def ablate(adapt_dir, eval_dir, gt_dir, classes, out, config_path, **overrides):
    """Run the seven standard variants and compare recall@1."""
    cfg = build_config(config_path, **overrides)
    adapt_store = load_store(Path(adapt_dir))
    eval_store, gt = _load_eval_inputs(eval_dir, gt_dir or eval_dir)
    targets = _parse_classes(classes)
    rows = run_ablation(adapt_store, eval_store, gt, targets, cfg)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(out.with_suffix(".json"), {"config": cfg.to_dict(), "rows": rows})
    with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    figures.render_ablation(rows, out.with_suffix(".png"))
    for row in rows:
        click.echo(f"{row['variant']:>18}: recall@1 = {row['recall_at_1']:.4f}")


@main.command()
@click.option("--adapt-store", "adapt_dir", type=click.Path(), required=True)
@click.option("--eval-store", "eval_dir", type=click.Path(), required=True)
@click.option("--gt", "gt_dir", type=click.Path(), default=None)
@click.option("--classes", required=True)
@click.option("--param", type=click.Choice(["k", "negatives", "scenes"]), required=True)
@click.option("--values", required=True, help="Comma-separated integers.")
@click.option("--out", type=click.Path(), default="sweep", show_default=True)
@config_options
@handles_errors
def sweep(adapt_dir, eval_dir, gt_dir, classes, param, values, out, config_path, **overrides):
    """Sweep k, negative count, or scene count; CSV + figure output."""
    cfg = build_config(config_path, **overrides)
    adapt_store = load_store(Path(adapt_dir))
    eval_store, gt = _load_eval_inputs(eval_dir, gt_dir or eval_dir)
    targets = _parse_classes(classes)
    vals = [int(v) for v in values.split(",") if v.strip()]
    rows = run_sweep(adapt_store, eval_store, gt, targets, cfg, param, vals)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["value", "recall_at_1", "pretrained_recall_at_1", "train_seconds"]
        )
        writer.writeheader()
        writer.writerows(rows)
    write_json(out.with_suffix(".json"), {"param": param, "config": cfg.to_dict(), "rows": rows})
    figures.render_sweep(rows, param, out.with_suffix(".png"))
    for row in rows:
        click.echo(
            f"{param}={row['value']}: recall@1 {row['recall_at_1']:.4f} "
            f"(pretrained {row['pretrained_recall_at_1']:.4f}, {row['train_seconds']:.2f}s)"
        )


if __name__ == "__main__":
    main()
