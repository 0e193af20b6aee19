"""End-to-end wiring: query -> class set -> selection -> training -> eval.

Shared by the CLI commands and the acceptance suite so both exercise the
exact same paths. Reports deliberately exclude wall-clock timing so that
identical (archive, config, seed) runs emit identical bytes; sweeps keep
their timing column by contract.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adaptation import (
    LOSS_UEO,
    LOSS_UPL,
    NEGATIVES_FROM_CAPTIONS,
    NEGATIVES_RANDOM_WORDS,
    AdapterCheckpoint,
    train,
)
from .config import RunConfig
from .errors import ValidationError
from .evaluation import EvalReport, TaskQuery, average_task_recall, recall_at_1
from .llm import HttpLlm, StubLlm, decompose_query
from .retrieval import checkpoint_class_feature
from .selection import (
    ClassSet,
    build_class_set,
    default_noise_vocabulary,
    default_stopwords,
    extract_negative_classes,
    full_store_training_set,
    load_word_list,
    select_training_data,
)
from .store import GroundTruth, SceneStore
from .text_encoding import (
    HttpTextEncoder,
    TokenVocab,
    ToyBackend,
    ToyTextEncoder,
    encode_prompted_class,
    init_context,
)

logger = logging.getLogger(__name__)


def make_llm_backend(cfg: RunConfig):
    if cfg.llm_kind == "none":
        return None
    if cfg.llm_kind == "stub":
        if not cfg.llm_rules_path:
            return StubLlm()
        return StubLlm.from_rules_file(Path(cfg.llm_rules_path))
    if cfg.llm_kind == "http":
        if not cfg.llm_endpoint:
            raise ValidationError("llm_kind=http requires llm.endpoint")
        return HttpLlm(cfg.llm_endpoint, cfg.llm_model)
    raise ValidationError(f"unknown llm kind {cfg.llm_kind!r}")


def build_toy_backend(store: SceneStore, class_set: ClassSet, cfg: RunConfig) -> ToyBackend:
    """Frozen encoder over the store's caption vocabulary plus the class
    names, with the context initialised from the configured phrase."""
    vocab = TokenVocab.build(
        store.captions() + list(class_set.all) + [cfg.context_phrase]
    )
    encoder = ToyTextEncoder.create(
        vocab,
        token_dim=cfg.token_dim,
        hidden_dim=cfg.hidden_dim,
        out_dim=cfg.out_dim,
        seed=cfg.encoder_seed,
        embed_scale=cfg.embed_scale,
    )
    learner = init_context(encoder, cfg.context_phrase, cfg.m_context)
    return ToyBackend(encoder, learner)


def mine_negatives(store: SceneStore, targets: list[str], cfg: RunConfig) -> list[str]:
    """Negative class names per the configured source."""
    stopwords = (
        set(load_word_list(Path(cfg.stopwords_path), ""))
        if cfg.stopwords_path
        else default_stopwords()
    )
    if not cfg.use_negatives or cfg.n_negatives <= 0:
        return []
    if cfg.negative_source == NEGATIVES_FROM_CAPTIONS:
        return extract_negative_classes(store, cfg.n_negatives, stopwords)
    rng = np.random.default_rng(cfg.seed)
    pool = [w for w in default_noise_vocabulary() if w not in stopwords and w not in targets]
    picks = rng.permutation(len(pool))[: cfg.n_negatives]
    return [pool[i] for i in sorted(picks)]


@dataclass
class AdaptOutcome:
    checkpoint: AdapterCheckpoint
    class_set: ClassSet
    n_training_items: int
    train_seconds: float
    backend: object


def run_adapt(
    store: SceneStore,
    cfg: RunConfig,
    targets: list[str] | None = None,
    query: str | None = None,
    llm_backend=None,
    http_encoder: HttpTextEncoder | None = None,
    threads: int = 1,
) -> AdaptOutcome:
    """The full adaptation pipeline over an archive already in memory."""
    if targets is None:
        if query is None:
            raise ValidationError("either targets or a query is required")
        if llm_backend is None:
            llm_backend = make_llm_backend(cfg)
        targets = decompose_query(llm_backend, query)
    targets = [t.lower() for t in targets]

    negatives = mine_negatives(store, targets, cfg)
    class_set = build_class_set(targets, negatives, llm_backend)

    if cfg.encoder_kind == "toy":
        backend = build_toy_backend(store, class_set, cfg)
    else:
        backend = http_encoder or HttpTextEncoder(cfg.encoder_endpoint, expected_dim=store.dim)

    train_cfg = cfg.train_config()
    if train_cfg.use_topk:
        training_set = select_training_data(
            store, class_set, backend, train_cfg.k, threads=threads
        )
    else:
        training_set = full_store_training_set(store, class_set, backend)

    start = time.perf_counter()
    checkpoint = train(store, class_set, training_set, backend, train_cfg)
    elapsed = time.perf_counter() - start
    logger.info(
        "trained %s adapter on %d items in %.2fs",
        checkpoint.mode,
        len(training_set),
        elapsed,
    )
    return AdaptOutcome(checkpoint, class_set, len(training_set), elapsed, backend)


def adapt_report(outcome: AdaptOutcome, cfg: RunConfig, store_path: str) -> dict:
    """Reproducible run report (no timing, which varies between runs)."""
    return {
        "store": store_path,
        "config": cfg.to_dict(),
        "class_set": {
            "targets": list(outcome.class_set.targets),
            "negatives": list(outcome.class_set.negatives),
        },
        "n_training_items": outcome.n_training_items,
        "loss_trace": list(outcome.checkpoint.loss_trace),
        "mode": outcome.checkpoint.mode,
    }


def pretrained_query_encoder(store: SceneStore, cfg: RunConfig, class_names: list[str]):
    """Class -> feature map for the unadapted model."""
    if cfg.encoder_kind == "toy":
        vocab = TokenVocab.build(store.captions() + list(class_names) + [cfg.context_phrase])
        encoder = ToyTextEncoder.create(
            vocab,
            token_dim=cfg.token_dim,
            hidden_dim=cfg.hidden_dim,
            out_dim=cfg.out_dim,
            seed=cfg.encoder_seed,
            embed_scale=cfg.embed_scale,
        )
        learner = init_context(encoder, cfg.context_phrase, cfg.m_context)
        return lambda name: encode_prompted_class(encoder, learner, name)
    client = HttpTextEncoder(cfg.encoder_endpoint, expected_dim=store.dim)
    return lambda name: client.encode_class_features([name])[0]


def checkpoint_query_encoder(checkpoint: AdapterCheckpoint, http_encoder=None):
    return lambda name: checkpoint_class_feature(checkpoint, name, http_encoder)


def eval_classes(
    store: SceneStore,
    gt_by_scene: dict[str, GroundTruth],
    classes: list[str],
    query_encoder,
    config_echo: dict | None = None,
    synonyms: dict[str, str] | None = None,
) -> EvalReport:
    """Recall@1 of each class prompt over every ground-truthed scene."""
    report = EvalReport(config=config_echo or {})
    all_hits = []
    for scene_id in store.scene_ids:
        gt = gt_by_scene.get(scene_id)
        if gt is None:
            report.skipped.append(f"scene:{scene_id}")
            continue
        hits, _, skipped = recall_at_1(
            store, scene_id, gt, classes, query_encoder, synonyms=synonyms
        )
        report.skipped.extend(skipped)
        for name, hit in hits.items():
            report.per_class_recall_at_1[f"{scene_id}:{name}"] = hit
            all_hits.append(hit)
    if all_hits:
        report.recall_at_1 = float(np.mean(all_hits))
    return report


def eval_tasks(
    store: SceneStore,
    gt_by_scene: dict[str, GroundTruth],
    tasks: list[TaskQuery],
    query_encoder,
    config_echo: dict | None = None,
) -> EvalReport:
    return average_task_recall(tasks, store, gt_by_scene, query_encoder, config_echo)


ABLATION_VARIANTS = (
    "pretrained",
    "full",
    "topk-only",
    "negatives-no-topk",
    "random-words",
    "ueo-vanilla",
    "upl",
)


def _variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return replace(cfg)
    if variant == "topk-only":
        return replace(cfg, use_negatives=False)
    if variant == "negatives-no-topk":
        return replace(cfg, use_topk=False)
    if variant == "random-words":
        return replace(cfg, negative_source=NEGATIVES_RANDOM_WORDS)
    if variant == "ueo-vanilla":
        return replace(cfg, use_negatives=False, use_topk=False, loss_kind=LOSS_UEO)
    if variant == "upl":
        return replace(cfg, use_negatives=False, loss_kind=LOSS_UPL)
    raise ValidationError(f"unknown ablation variant {variant!r}")


def run_ablation(
    adapt_store: SceneStore,
    eval_store: SceneStore,
    gt_by_scene: dict[str, GroundTruth],
    targets: list[str],
    cfg: RunConfig,
    llm_backend=None,
) -> list[dict]:
    """Recall@1 for the standard seven variants on a shared benchmark."""
    pre_encoder = pretrained_query_encoder(eval_store, cfg, targets)
    pre_report = eval_classes(eval_store, gt_by_scene, targets, pre_encoder)
    rows = [
        {
            "variant": "pretrained",
            "recall_at_1": pre_report.recall_at_1,
            "loss_kind": None,
            "use_negatives": None,
            "use_topk": None,
        }
    ]
    for variant in ABLATION_VARIANTS:
        if variant == "pretrained":
            continue
        vcfg = _variant_config(cfg, variant)
        outcome = run_adapt(adapt_store, vcfg, targets=targets, llm_backend=llm_backend)
        encoder = checkpoint_query_encoder(outcome.checkpoint)
        report = eval_classes(eval_store, gt_by_scene, targets, encoder)
        rows.append(
            {
                "variant": variant,
                "recall_at_1": report.recall_at_1,
                "loss_kind": vcfg.loss_kind,
                "use_negatives": vcfg.use_negatives,
                "use_topk": vcfg.use_topk,
            }
        )
    return rows


SWEEP_PARAMS = ("k", "negatives", "scenes")


def run_sweep(
    adapt_store: SceneStore,
    eval_store: SceneStore,
    gt_by_scene: dict[str, GroundTruth],
    targets: list[str],
    cfg: RunConfig,
    param: str,
    values: list[int],
) -> list[dict]:
    """One adapt+eval cycle per parameter value.

    ``scenes`` sweeps use the first j scenes of the adaptation store.
    """
    if param not in SWEEP_PARAMS:
        raise ValidationError(f"sweep param must be one of {SWEEP_PARAMS}")
    pre_encoder = pretrained_query_encoder(eval_store, cfg, targets)
    pre_recall = eval_classes(eval_store, gt_by_scene, targets, pre_encoder).recall_at_1
    rows = []
    for value in values:
        vcfg = cfg
        vstore = adapt_store
        if param == "k":
            vcfg = replace(cfg, k=int(value))
        elif param == "negatives":
            vcfg = replace(cfg, n_negatives=int(value), use_negatives=int(value) > 0)
        else:
            vstore = adapt_store.prefix_scenes(int(value))
        outcome = run_adapt(vstore, vcfg, targets=targets)
        encoder = checkpoint_query_encoder(outcome.checkpoint)
        report = eval_classes(eval_store, gt_by_scene, targets, encoder)
        rows.append(
            {
                "value": int(value),
                "recall_at_1": report.recall_at_1,
                "pretrained_recall_at_1": pre_recall,
                "train_seconds": outcome.train_seconds,
            }
        )
    return rows


def write_json(path: Path, obj) -> None:
    Path(path).write_text(
        json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
