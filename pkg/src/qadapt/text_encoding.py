"""Text-side encoders: learnable prompt context through a frozen toy MLP,
plus an HTTP client for serving-backed feature computation.

The toy encoder mean-pools the learnable context vectors with the class
token embeddings and pushes the pool through a frozen 2-layer tanh MLP,
emitting a unit-norm feature. Gradients w.r.t. the context are analytic.
Token embeddings are content-addressed (per-token seeded streams), so two
encoders built from different vocabularies but the same seed agree on
every shared token.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import numpy as np
import requests

from .errors import DimMismatch, EncoderError, ValidationError
from .rng import derive_seed, seeded_weights

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"
UNK_ID = 0

DEFAULT_TOKEN_DIM = 32
DEFAULT_HIDDEN_DIM = 64
DEFAULT_OUT_DIM = 32
DEFAULT_ENCODER_SEED = 7
DEFAULT_CONTEXT_PHRASE = "a photo of a"

# Token embeddings use a wider seeded range than the +/-1/sqrt(d) weight
# mapping: large token vectors push the tanh layer into its curved regime,
# giving the frozen MLP class-specific Jacobians (without them, tuning the
# shared context could only translate every class feature identically).
DEFAULT_EMBED_SCALE = 16.0

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def split_tokens(text: str) -> list[str]:
    """Lowercase alphanumeric runs of ``text``, in order."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenVocab:
    """Sorted token list with contiguous ids; id 0 is reserved for UNK."""

    tokens: tuple[str, ...]
    ids: dict[str, int] = field(compare=False, default_factory=dict)

    def __post_init__(self):
        ids = {UNK_TOKEN: UNK_ID}
        for i, tok in enumerate(self.tokens):
            ids[tok] = i + 1
        object.__setattr__(self, "ids", ids)

    @classmethod
    def build(cls, texts: list[str]) -> "TokenVocab":
        tokens = sorted({tok for text in texts for tok in split_tokens(text)})
        return cls(tuple(tokens))

    @property
    def size(self) -> int:
        return len(self.tokens) + 1

    def id_of(self, token: str) -> int:
        return self.ids.get(token, UNK_ID)

    def all_tokens(self) -> list[str]:
        """Row-ordered token strings, UNK first."""
        return [UNK_TOKEN, *self.tokens]


def tokenize(text: str, vocab: TokenVocab) -> list[int]:
    """Token ids for ``text``; unknown tokens map to UNK (id 0)."""
    return [vocab.id_of(tok) for tok in split_tokens(text)]


@dataclass(frozen=True)
class ToyTextEncoder:
    """Frozen mean-pool + 2-layer tanh MLP with seeded weights."""

    vocab: TokenVocab
    embed_table: np.ndarray  # (|vocab|, d) float64
    w1: np.ndarray  # (h, d)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (D, h)
    b2: np.ndarray  # (D,)
    token_dim: int
    hidden_dim: int
    out_dim: int
    seed: int
    embed_scale: float = DEFAULT_EMBED_SCALE

    @classmethod
    def create(
        cls,
        vocab: TokenVocab,
        token_dim: int = DEFAULT_TOKEN_DIM,
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        out_dim: int = DEFAULT_OUT_DIM,
        seed: int = DEFAULT_ENCODER_SEED,
        embed_scale: float = DEFAULT_EMBED_SCALE,
    ) -> "ToyTextEncoder":
        embed = np.stack(
            [
                token_embedding(seed, tok, token_dim, embed_scale)
                for tok in vocab.all_tokens()
            ]
        )
        in_bound = 1.0 / np.sqrt(token_dim)
        hid_bound = 1.0 / np.sqrt(hidden_dim)
        return cls(
            vocab=vocab,
            embed_table=embed,
            w1=seeded_weights(derive_seed(seed, "w1"), (hidden_dim, token_dim), in_bound),
            b1=seeded_weights(derive_seed(seed, "b1"), (hidden_dim,), in_bound),
            w2=seeded_weights(derive_seed(seed, "w2"), (out_dim, hidden_dim), hid_bound),
            b2=seeded_weights(derive_seed(seed, "b2"), (out_dim,), hid_bound),
            token_dim=token_dim,
            hidden_dim=hidden_dim,
            out_dim=out_dim,
            seed=seed,
            embed_scale=embed_scale,
        )

    def checksum(self) -> int:
        """Hash over all frozen weights, for frozen-parameter assertions."""
        parts = [self.embed_table, self.w1, self.b1, self.w2, self.b2]
        return hash(tuple(arr.tobytes() for arr in parts))


def token_embedding(
    seed: int, token: str, token_dim: int, embed_scale: float = DEFAULT_EMBED_SCALE
) -> np.ndarray:
    """Content-addressed embedding row for ``token``."""
    bound = embed_scale / np.sqrt(token_dim)
    return seeded_weights(derive_seed(seed, "tok:" + token), (token_dim,), bound)


@dataclass
class PromptLearner:
    """The learnable context vectors prepended to every class name."""

    context: np.ndarray  # (m, d) float64

    def __post_init__(self):
        self.context = np.asarray(self.context, dtype=np.float64)
        if self.context.ndim != 2 or self.context.shape[0] < 1:
            raise ValidationError("context must be a (m >= 1, d) array")
        if not np.isfinite(self.context).all():
            raise ValidationError("context contains non-finite values")

    @property
    def m(self) -> int:
        return int(self.context.shape[0])

    def copy(self) -> "PromptLearner":
        return PromptLearner(self.context.copy())


def init_context(
    encoder: ToyTextEncoder, phrase: str = DEFAULT_CONTEXT_PHRASE, m: int | None = None
) -> PromptLearner:
    """Context vectors copied from the embedding rows of ``phrase``.

    With explicit ``m``, extra tokens are truncated and missing rows are
    zero-padded (with a warning).
    """
    ids = tokenize(phrase, encoder.vocab)
    if m is None:
        m = len(ids)
    if m < 1:
        raise ValidationError("context length m must be >= 1")
    rows = encoder.embed_table[ids[:m]]
    if len(ids) < m:
        logger.warning(
            "context phrase %r has %d tokens, padding to m=%d with zeros",
            phrase,
            len(ids),
            m,
        )
        pad = np.zeros((m - len(ids), encoder.token_dim))
        rows = np.concatenate([rows, pad], axis=0) if len(ids) else pad
    return PromptLearner(rows.copy())


def _forward_pool(encoder: ToyTextEncoder, pooled: np.ndarray):
    """MLP forward on pooled rows (batch, d) -> activations and features."""
    z = pooled @ encoder.w1.T + encoder.b1
    h = np.tanh(z)
    u = h @ encoder.w2.T + encoder.b2
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    return h, u, norms, u / norms


def _pooled_inputs(
    encoder: ToyTextEncoder, learner: PromptLearner | None, class_names: list[str]
):
    """Mean-pooled MLP inputs per class plus the pooling denominators."""
    m = learner.m if learner is not None else 0
    ctx_sum = learner.context.sum(axis=0) if learner is not None else 0.0
    pooled = np.zeros((len(class_names), encoder.token_dim))
    denoms = np.zeros(len(class_names))
    for i, name in enumerate(class_names):
        ids = tokenize(name, encoder.vocab)
        if m + len(ids) == 0:
            raise EncoderError(
                f"class {name!r} tokenizes to nothing and no context vectors exist"
            )
        total = ctx_sum + encoder.embed_table[ids].sum(axis=0)
        pooled[i] = total / (m + len(ids))
        denoms[i] = m + len(ids)
    return pooled, denoms


def encode_prompted_class(
    encoder: ToyTextEncoder, learner: PromptLearner | None, class_name: str
) -> np.ndarray:
    """Unit feature for context-then-class-tokens through the frozen MLP."""
    return encode_classes(encoder, learner, [class_name])[0]


def encode_classes(
    encoder: ToyTextEncoder, learner: PromptLearner | None, class_names: list[str]
) -> np.ndarray:
    """Unit features for many classes, rows aligned with ``class_names``."""
    pooled, _ = _pooled_inputs(encoder, learner, class_names)
    return _forward_pool(encoder, pooled)[3]


def context_gradient(
    encoder: ToyTextEncoder,
    learner: PromptLearner,
    class_name: str,
    upstream: np.ndarray,
) -> np.ndarray:
    """Exact dL/dcontext given dL/dfeature for one class."""
    return context_gradient_batch(encoder, learner, [class_name], upstream[None, :])


def context_gradient_batch(
    encoder: ToyTextEncoder,
    learner: PromptLearner,
    class_names: list[str],
    upstream: np.ndarray,
) -> np.ndarray:
    """Summed dL/dcontext over classes given per-class dL/dfeature rows.

    Backpropagates through l2-normalize -> MLP -> mean pooling; frozen
    weights receive no gradient. Mean pooling makes every context row's
    gradient identical.
    """
    pooled, denoms = _pooled_inputs(encoder, learner, class_names)
    h, u, norms, f = _forward_pool(encoder, pooled)
    # d(u/|u|)/du = (I - f f^T) / |u|
    gu = (upstream - f * (f * upstream).sum(axis=1, keepdims=True)) / norms
    gh = (gu @ encoder.w2) * (1.0 - h * h)
    gpooled = gh @ encoder.w1
    per_row = (gpooled / denoms[:, None]).sum(axis=0)
    return np.tile(per_row, (learner.m, 1))


@dataclass
class ToyBackend:
    """Gradient-capable encoder backend: frozen MLP + learnable context."""

    encoder: ToyTextEncoder
    learner: PromptLearner

    supports_gradient = True

    @property
    def out_dim(self) -> int:
        return self.encoder.out_dim

    def encode_class_features(self, class_names: list[str]) -> np.ndarray:
        return encode_classes(self.encoder, self.learner, list(class_names))

    def context_grad(self, class_names: list[str], upstream: np.ndarray) -> np.ndarray:
        return context_gradient_batch(
            self.encoder, self.learner, list(class_names), upstream
        )


class HttpTextEncoder:
    """Forward-only client for the POST /encode wire contract.

    Results are L2-renormalized and cached per exact input string.
    """

    supports_gradient = False

    def __init__(self, endpoint: str, expected_dim: int | None = None, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.expected_dim = expected_dim
        self.timeout = timeout
        self._cache: dict[str, np.ndarray] = {}
        self.request_count = 0

    @property
    def out_dim(self) -> int | None:
        return self.expected_dim

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        """Unit features for ``texts``; one network call for the misses."""
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            try:
                resp = requests.post(
                    self.endpoint + "/encode",
                    json={"texts": missing},
                    timeout=self.timeout,
                )
                resp.raise_for_status()
                body = resp.json()
            except requests.RequestException as exc:
                raise EncoderError(f"text encoder request failed: {exc}") from exc
            self.request_count += 1
            rows = body.get("embeddings")
            dim = body.get("dim")
            if rows is None or dim is None:
                raise EncoderError("encoder response missing 'dim' or 'embeddings'")
            if len(rows) != len(missing):
                raise EncoderError(
                    f"encoder returned {len(rows)} rows for {len(missing)} texts"
                )
            if self.expected_dim is not None and int(dim) != self.expected_dim:
                raise DimMismatch(
                    f"encoder dim {dim} does not match expected {self.expected_dim}"
                )
            for text, row in zip(missing, rows):
                vec = np.asarray(row, dtype=np.float64)
                if vec.shape != (int(dim),):
                    raise DimMismatch(
                        f"embedding for {text!r} has shape {vec.shape}, expected ({dim},)"
                    )
                norm = np.linalg.norm(vec)
                if norm == 0:
                    raise EncoderError(f"encoder returned a zero vector for {text!r}")
                self._cache[text] = vec / norm
        if not texts:
            return np.zeros((0, self.expected_dim or 0))
        return np.stack([self._cache[t] for t in texts])

    def encode_class_features(self, class_names: list[str]) -> np.ndarray:
        return self.encode_texts(["a photo of a " + name for name in class_names])


def encode_query_http(endpoint: str, texts: list[str], expected_dim: int | None = None) -> np.ndarray:
    """One-shot helper over :class:`HttpTextEncoder` for raw query texts."""
    if not texts:
        return np.zeros((0, expected_dim or 0))
    return HttpTextEncoder(endpoint, expected_dim=expected_dim).encode_texts(texts)
