"""Language-model gateway for query decomposition and synonym filtering.

Two backends: a pure deterministic stub driven by a rules file (offline
tests, reproducible runs) and an HTTP backend that extracts a JSON array
out of a free-form model reply.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import requests

from .errors import LlmError, NoRuleForQuery, UnparseableLlmReply

logger = logging.getLogger(__name__)


def _bundled_template(name: str) -> str:
    return resources.files("qadapt.data").joinpath(name).read_text("utf-8").strip()


# editable prompt templates; users can ship their own via HttpLlm(templates=...)
DECOMPOSE_TEMPLATE = _bundled_template("prompt_decompose.txt")
SYNONYM_TEMPLATE = _bundled_template("prompt_synonym.txt")
AFFORDANCE_TEMPLATE = _bundled_template("prompt_affordance.txt")

_ARRAY_RE = re.compile(r"\[.*?\]", re.DOTALL)


def fold_plural(word: str) -> str:
    """Strip a trailing 'es' then 's' when the stem keeps length >= 3."""
    if word.endswith("es") and len(word) - 2 >= 3:
        return word[:-2]
    if word.endswith("s") and len(word) - 1 >= 3:
        return word[:-1]
    return word


def extract_json_array(text: str) -> list:
    """First parseable JSON array embedded in ``text``."""
    for match in _ARRAY_RE.finditer(text):
        try:
            parsed = json.loads(match.group(0))
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, list):
            return parsed
    raise UnparseableLlmReply(f"no JSON array found in reply: {text[:200]!r}")


@dataclass
class StubLlm:
    """Deterministic rule-table backend; zero I/O."""

    queries: dict[str, list[str]] = field(default_factory=dict)
    synonyms: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_rules_file(cls, path: Path) -> "StubLlm":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            queries={k.lower(): list(v) for k, v in obj.get("queries", {}).items()},
            synonyms={k.lower(): v.lower() for k, v in obj.get("synonyms", {}).items()},
        )

    def decompose(self, query: str) -> list[str]:
        key = query.strip().lower()
        if key not in self.queries:
            raise NoRuleForQuery(f"stub has no decomposition rule for {query!r}")
        return list(self.queries[key])

    def is_synonym(self, a: str, b: str) -> bool:
        a = fold_plural(a.lower())
        b = fold_plural(b.lower())
        table = {fold_plural(k): fold_plural(v) for k, v in self.synonyms.items()}
        return table.get(a) == b or table.get(b) == a


class HttpLlm:
    """HTTP backend; retries parse failures twice at temperature 0.
    Synonym checks may run concurrently up to ``max_concurrency``."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        timeout: float = 60.0,
        retries: int = 2,
        max_concurrency: int = 4,
        templates: dict[str, str] | None = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.max_concurrency = max_concurrency
        templates = templates or {}
        self.decompose_template = templates.get("decompose", DECOMPOSE_TEMPLATE)
        self.synonym_template = templates.get("synonym", SYNONYM_TEMPLATE)
        self.affordance_template = templates.get("affordance", AFFORDANCE_TEMPLATE)

    def _complete(self, prompt: str) -> str:
        try:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model, "prompt": prompt},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()["text"]
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise LlmError(f"llm request failed: {exc}") from exc

    def _complete_array(self, prompt: str) -> list:
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            text = self._complete(prompt)
            try:
                return extract_json_array(text)
            except UnparseableLlmReply as exc:
                last = exc
                logger.warning("unparseable llm reply (attempt %d): %s", attempt + 1, exc)
        raise UnparseableLlmReply(f"llm reply unparseable after {self.retries + 1} attempts") from last

    def decompose(self, query: str) -> list[str]:
        items = self._complete_array(self.decompose_template.format(query=query))
        return [str(x) for x in items]

    def is_synonym(self, a: str, b: str) -> bool:
        items = self._complete_array(self.synonym_template.format(a=a, b=b))
        return bool(items and items[0] is True)

    def affordances(self, classes: list[str]) -> list[str]:
        """Most-common-use-case phrase per class, for affordance-style
        target sets."""
        items = self._complete_array(
            self.affordance_template.format(classes=", ".join(classes))
        )
        return [str(x) for x in items]


def decompose_query(backend, query: str) -> list[str]:
    """Target classes for ``query``: lowercase, deduplicated, order kept."""
    if not query or not query.strip():
        raise LlmError("query must be nonempty")
    raw = backend.decompose(query)
    out: list[str] = []
    for name in raw:
        name = str(name).strip().lower()
        if name and name not in out:
            out.append(name)
    return out


def filter_synonyms(backend, negatives: list[str], targets: list[str]) -> list[str]:
    """Negatives minus anything synonymous with a target.

    Exact and plural-folded matches are dropped before the backend is
    consulted; ``backend`` may be None to skip model-based checks. Backend
    consultations run concurrently up to the backend's ``max_concurrency``
    (order of the surviving negatives is preserved either way).
    """
    target_stems = {fold_plural(t.lower()) for t in targets}
    candidates = [n for n in negatives if fold_plural(n.lower()) not in target_stems]
    if backend is None or not candidates:
        return candidates

    def synonymous(neg: str) -> bool:
        return any(backend.is_synonym(neg, t) for t in targets)

    workers = getattr(backend, "max_concurrency", 1)
    if workers > 1 and len(candidates) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            flags = list(pool.map(synonymous, candidates))
    else:
        flags = [synonymous(n) for n in candidates]
    return [n for n, is_syn in zip(candidates, flags) if not is_syn]
