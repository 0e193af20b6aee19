"""Adaptation objective and training loop.

The objective couples per-sample entropy minimisation (weighted by batch-
normalised confidence) with entropy maximisation of the inverse-weighted
mean prediction, so confident samples sharpen while the batch as a whole
stays diverse. A pseudo-label cross-entropy variant serves as a baseline.
Both losses return analytic gradients w.r.t. the probability rows, which
the loop backpropagates through the softmax and the text encoder.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ArchiveFormatError,
    EmptyTrainingSet,
    NonFiniteGradient,
    NotFoundError,
    TrainError,
    ValidationError,
)
from .selection import ClassSet, TrainingSet
from .store import SceneStore, read_embeddings_file
from .text_encoding import DEFAULT_CONTEXT_PHRASE, TokenVocab, ToyTextEncoder

logger = logging.getLogger(__name__)

MAGIC_CHECKPOINT = b"QACK"
CHECKPOINT_VERSION = 1

LOSS_UEO = "ueo"
LOSS_UPL = "upl-ce"

NEGATIVES_FROM_CAPTIONS = "captions"
NEGATIVES_RANDOM_WORDS = "random-words"

MODE_PROMPT = "prompt"
MODE_RESIDUAL = "residual"

_TINY = 1e-300  # log/div guard; true zeros only occur from softmax underflow

# Counts w-tilde clamps (contract: clamp below 1e-12 and keep a counter).
clamp_warnings = 0


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the reference operating point."""

    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.0005
    tau: float = 0.01
    k: int = 8
    n_negatives: int = 100
    m_context: int = 4
    loss_kind: str = LOSS_UEO
    use_negatives: bool = True
    use_topk: bool = True
    negative_source: str = NEGATIVES_FROM_CAPTIONS
    detach_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError("tau must be > 0")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.loss_kind == LOSS_UEO and self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 for the ueo loss")
        if self.loss_kind not in (LOSS_UEO, LOSS_UPL):
            raise ValidationError(f"unknown loss kind {self.loss_kind!r}")
        if self.negative_source not in (NEGATIVES_FROM_CAPTIONS, NEGATIVES_RANDOM_WORDS):
            raise ValidationError(f"unknown negative source {self.negative_source!r}")


@dataclass
class BatchPrediction:
    """Class probabilities plus batch confidence weights."""

    probs: np.ndarray  # (B, A), rows sum to 1
    weights: np.ndarray  # (B,), per-row max probability
    norm_weights: np.ndarray  # (B,), weights normalised to sum 1


def class_probabilities(
    features: np.ndarray, class_feats: np.ndarray, tau: float
) -> BatchPrediction:
    """Temperature softmax over cosine similarities (rows are unit-norm,
    so cosine reduces to a dot product); max-subtracted for stability."""
    if tau <= 0:
        raise ValidationError("tau must be > 0")
    logits = features @ class_feats.T / tau
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)
    weights = probs.max(axis=1)
    return BatchPrediction(probs, weights, weights / weights.sum())


def ueo_loss(pred: BatchPrediction, detach_weights: bool = False) -> tuple[float, np.ndarray]:
    """Weighted-entropy loss and its analytic gradient w.r.t. the probs.

    loss = sum_x wt(x) H(p(x)) - H(pbar) with natural-log entropy, where
    wt is the batch-normalised max probability and pbar is the normalised
    inverse-weighted mean prediction. By default confidence weights are
    differentiated through (full path); ``detach_weights`` treats them as
    constants.
    """
    global clamp_warnings
    P = pred.probs
    B, A = P.shape
    if B < 2:
        raise ValidationError("ueo loss needs a batch of at least 2 rows")

    amax = np.argmax(P, axis=1)
    rows = np.arange(B)
    w = P[rows, amax]
    W = w.sum()
    wt = w / W
    if (wt < 1e-12).any():
        clamp_warnings += int((wt < 1e-12).sum())
        logger.warning("clamped %d norm weights below 1e-12", int((wt < 1e-12).sum()))
        wt = np.maximum(wt, 1e-12)

    logP = np.log(np.maximum(P, _TINY))
    H_rows = -(P * logP).sum(axis=1)
    term1 = float((wt * H_rows).sum())

    # pbar = sum_x p(x)/wt(x) / sum_x 1/wt(x); the shared W cancels, so it
    # equals the 1/w-weighted mean of the rows.
    u = 1.0 / np.maximum(w, 1e-12)
    U = u.sum()
    pbar = (u[:, None] * P).sum(axis=0) / U
    log_pbar = np.log(np.maximum(pbar, _TINY))
    term2 = float(-(pbar * log_pbar).sum())
    loss = term1 - term2

    grad = -wt[:, None] * (logP + 1.0)
    grad += (log_pbar + 1.0)[None, :] * (u[:, None] / U)
    if not detach_weights:
        # Terms from dw/dp: w(x) is the argmax entry of row x.
        grad[rows, amax] += (H_rows - term1) / W
        S = ((log_pbar + 1.0)[None, :] * (pbar[None, :] - P)).sum(axis=1)
        grad[rows, amax] += S / (w * w * U)
    return loss, grad


def upl_cross_entropy(
    pred: BatchPrediction, pseudo_labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean pseudo-label cross-entropy and its gradient w.r.t. the probs."""
    P = pred.probs
    B, A = P.shape
    labels = np.asarray(pseudo_labels, dtype=int)
    if labels.shape != (B,) or (labels < 0).any() or (labels >= A).any():
        raise ValidationError("pseudo labels must be one class index per row")
    rows = np.arange(B)
    picked = np.maximum(P[rows, labels], _TINY)
    loss = float(-np.log(picked).mean())
    grad = np.zeros_like(P)
    grad[rows, labels] = -1.0 / (B * picked)
    return loss, grad


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """dL/dlogits from dL/dprobs through a row softmax."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


class Adam:
    """Bias-corrected Adam over a list of parameter arrays (in place)."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        for g in grads:
            if not np.isfinite(g).all():
                raise NonFiniteGradient("gradient contains NaN or Inf")
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: Adam,
    lr: float | None = None,
) -> None:
    """Single optimizer step through a persistent :class:`Adam` state."""
    if lr is not None:
        state.lr = lr
    state.step(params, grads)


@dataclass
class EncoderSpec:
    """Everything needed to rebuild a toy encoder deterministically."""

    seed: int
    token_dim: int
    hidden_dim: int
    out_dim: int
    vocab_tokens: tuple[str, ...]
    context_phrase: str = DEFAULT_CONTEXT_PHRASE
    embed_scale: float = 16.0

    def build(self) -> ToyTextEncoder:
        return ToyTextEncoder.create(
            TokenVocab(tuple(self.vocab_tokens)),
            token_dim=self.token_dim,
            hidden_dim=self.hidden_dim,
            out_dim=self.out_dim,
            seed=self.seed,
            embed_scale=self.embed_scale,
        )

    @classmethod
    def of(cls, encoder: ToyTextEncoder, phrase: str = DEFAULT_CONTEXT_PHRASE) -> "EncoderSpec":
        return cls(
            seed=encoder.seed,
            token_dim=encoder.token_dim,
            hidden_dim=encoder.hidden_dim,
            out_dim=encoder.out_dim,
            vocab_tokens=tuple(encoder.vocab.tokens),
            context_phrase=phrase,
            embed_scale=encoder.embed_scale,
        )


@dataclass
class AdapterCheckpoint:
    """Trained adapter parameters plus the config needed to replay them.

    Parameters are stored as float32 (matching the on-disk payload) so a
    checkpoint in memory and its reload behave bit-identically.
    """

    mode: str  # MODE_PROMPT | MODE_RESIDUAL
    class_set: ClassSet
    config: TrainConfig
    loss_trace: tuple[float, ...]
    context: np.ndarray | None = None  # (m, d) float32, prompt mode
    residual_map: np.ndarray | None = None  # (D, D) float32
    residual_bias: np.ndarray | None = None  # (D,) float32
    encoder_spec: EncoderSpec | None = None  # prompt mode
    base_class_features: np.ndarray | None = None  # (A, D) float32, residual mode

    def param_tensors(self) -> list[tuple[str, np.ndarray]]:
        if self.mode == MODE_PROMPT:
            return [("context", self.context)]
        return [("residual_map", self.residual_map), ("residual_bias", self.residual_bias)]


def _write_params(path: Path, tensors: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC_CHECKPOINT)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for _, arr in tensors:
            mat = np.atleast_2d(np.asarray(arr, dtype="<f4"))
            fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
            fh.write(np.ascontiguousarray(mat).tobytes())


def _read_params(path: Path, n_tensors: int) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC_CHECKPOINT:
            raise ArchiveFormatError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ArchiveFormatError(f"{path}: unsupported version {version}")
        out = []
        for _ in range(n_tensors):
            rows, cols = struct.unpack("<II", fh.read(8))
            payload = fh.read(rows * cols * 4)
            if len(payload) != rows * cols * 4:
                raise ArchiveFormatError(f"{path}: truncated tensor payload")
            out.append(np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy())
        if fh.read(1):
            raise ArchiveFormatError(f"{path}: trailing bytes")
    return out


def save_checkpoint(ckpt: AdapterCheckpoint, path: Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "mode": ckpt.mode,
        "config": asdict(ckpt.config),
        "class_set": {
            "targets": list(ckpt.class_set.targets),
            "negatives": list(ckpt.class_set.negatives),
        },
        "loss_trace": list(ckpt.loss_trace),
        "encoder": (
            {
                "seed": ckpt.encoder_spec.seed,
                "token_dim": ckpt.encoder_spec.token_dim,
                "hidden_dim": ckpt.encoder_spec.hidden_dim,
                "out_dim": ckpt.encoder_spec.out_dim,
                "vocab_tokens": list(ckpt.encoder_spec.vocab_tokens),
                "context_phrase": ckpt.encoder_spec.context_phrase,
                "embed_scale": ckpt.encoder_spec.embed_scale,
            }
            if ckpt.encoder_spec is not None
            else None
        ),
    }
    (path / "meta.json").write_text(
        json.dumps(meta, ensure_ascii=False, separators=(",", ":"), sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _write_params(path / "params.bin", ckpt.param_tensors())
    if ckpt.base_class_features is not None:
        from .store import _write_embeddings  # same binary layout as embeddings

        _write_embeddings(path / "class_feats.bin", ckpt.base_class_features)


def load_checkpoint(path: Path) -> AdapterCheckpoint:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise NotFoundError(f"checkpoint {path} missing meta.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    config = TrainConfig(**meta["config"])
    class_set = ClassSet(
        tuple(meta["class_set"]["targets"]), tuple(meta["class_set"]["negatives"])
    )
    mode = meta["mode"]
    if mode == MODE_PROMPT:
        (context,) = _read_params(path / "params.bin", 1)
        enc = meta["encoder"]
        spec = EncoderSpec(
            seed=enc["seed"],
            token_dim=enc["token_dim"],
            hidden_dim=enc["hidden_dim"],
            out_dim=enc["out_dim"],
            vocab_tokens=tuple(enc["vocab_tokens"]),
            context_phrase=enc["context_phrase"],
            embed_scale=enc.get("embed_scale", 16.0),
        )
        return AdapterCheckpoint(
            mode=mode,
            class_set=class_set,
            config=config,
            loss_trace=tuple(meta["loss_trace"]),
            context=context,
            encoder_spec=spec,
        )
    if mode == MODE_RESIDUAL:
        mat, bias = _read_params(path / "params.bin", 2)
        feats_path = path / "class_feats.bin"
        feats = read_embeddings_file(feats_path) if feats_path.is_file() else None
        return AdapterCheckpoint(
            mode=mode,
            class_set=class_set,
            config=config,
            loss_trace=tuple(meta["loss_trace"]),
            residual_map=mat,
            residual_bias=bias.reshape(-1),
            base_class_features=feats,
        )
    raise ArchiveFormatError(f"unknown checkpoint mode {mode!r}")


def identity_residual_checkpoint(
    class_set: ClassSet, config: TrainConfig, base_class_features: np.ndarray
) -> AdapterCheckpoint:
    """Untrained residual checkpoint: behaves exactly like the base model."""
    dim = base_class_features.shape[1]
    return AdapterCheckpoint(
        mode=MODE_RESIDUAL,
        class_set=class_set,
        config=config,
        loss_trace=(),
        residual_map=np.eye(dim, dtype=np.float32),
        residual_bias=np.zeros(dim, dtype=np.float32),
        base_class_features=base_class_features.astype(np.float32),
    )


def residual_forward(
    mat: np.ndarray, bias: np.ndarray, base_feats: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalised affine transform of base class features."""
    pre = base_feats @ np.asarray(mat, dtype=np.float64).T + np.asarray(bias, dtype=np.float64)
    norms = np.linalg.norm(pre, axis=1, keepdims=True)
    return pre, norms, pre / norms


def _batch_slices(n: int, batch_size: int) -> list[np.ndarray]:
    """Index blocks; a trailing block of 1 merges into its predecessor."""
    blocks = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if len(blocks) > 1 and len(blocks[-1]) < 2:
        blocks[-2] = np.concatenate([blocks[-2], blocks[-1]])
        blocks.pop()
    return blocks


def train(
    store: SceneStore,
    class_set: ClassSet,
    training_set: TrainingSet,
    backend,
    config: TrainConfig,
) -> AdapterCheckpoint:
    """Optimise the adapter on the selected segments.

    A gradient-capable backend tunes the prompt context; an HTTP backend
    falls back to a residual affine map over precomputed class features
    (initialised to identity). Shuffling, batching and updates are fully
    determined by ``config.seed``.
    """
    if len(training_set) == 0:
        raise EmptyTrainingSet("no training items")
    if config.loss_kind == LOSS_UEO and len(training_set) < 2:
        raise TrainError("ueo loss needs at least 2 training items")

    class_names = list(class_set.all)
    feats_img = store.embeddings[
        np.array([item.embedding_row for item in training_set.items])
    ].astype(np.float64)
    labels_all = np.array([item.class_index for item in training_set.items])

    prompt_mode = getattr(backend, "supports_gradient", False)
    if prompt_mode:
        params = [backend.learner.context]
    else:
        base_feats = np.asarray(backend.encode_class_features(class_names), dtype=np.float64)
        dim = base_feats.shape[1]
        mat = np.eye(dim)
        bias = np.zeros(dim)
        params = [mat, bias]

    optimizer = Adam(config.learning_rate)
    rng = np.random.default_rng(config.seed)
    trace: list[float] = []

    for _ in range(config.epochs):
        perm = rng.permutation(len(training_set))
        losses = []
        weights = []
        for block in _batch_slices(len(perm), config.batch_size):
            idx = perm[block]
            batch_img = feats_img[idx]

            if prompt_mode:
                class_feats = backend.encode_class_features(class_names)
            else:
                pre, norms, class_feats = residual_forward(mat, bias, base_feats)

            pred = class_probabilities(batch_img, class_feats, config.tau)
            if not np.isfinite(pred.probs).all():
                raise NonFiniteGradient("non-finite probabilities in training step")
            if config.loss_kind == LOSS_UEO:
                loss, grad_probs = ueo_loss(pred, detach_weights=config.detach_weights)
            else:
                loss, grad_probs = upl_cross_entropy(pred, labels_all[idx])

            grad_logits = softmax_backward(pred.probs, grad_probs)
            grad_class = grad_logits.T @ batch_img / config.tau  # (A, D)

            if prompt_mode:
                grad_ctx = backend.context_grad(class_names, grad_class)
                optimizer.step(params, [grad_ctx])
            else:
                gu = (grad_class - class_feats * (class_feats * grad_class).sum(axis=1, keepdims=True)) / norms
                grad_mat = gu.T @ base_feats
                grad_bias = gu.sum(axis=0)
                optimizer.step(params, [grad_mat, grad_bias])

            losses.append(loss)
            weights.append(len(idx))
        trace.append(float(np.average(losses, weights=weights)))

    if prompt_mode:
        return AdapterCheckpoint(
            mode=MODE_PROMPT,
            class_set=class_set,
            config=config,
            loss_trace=tuple(trace),
            context=backend.learner.context.astype(np.float32),
            encoder_spec=EncoderSpec.of(backend.encoder),
        )
    return AdapterCheckpoint(
        mode=MODE_RESIDUAL,
        class_set=class_set,
        config=config,
        loss_trace=tuple(trace),
        residual_map=mat.astype(np.float32),
        residual_bias=bias.astype(np.float32),
        base_class_features=base_feats.astype(np.float32),
    )
