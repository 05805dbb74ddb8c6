"""Two-stage pipeline: the classifier proposes top-K labels, a re-ranker picks one.

Backends return a raw text reply; :func:`rerank` resolves it against the
candidate labels (exact match after trim + casefold) and falls back to the
classifier's top-1 on anything else.
"""

from __future__ import annotations

import json
import logging
import os
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import ConfusionMap, Dataset, Vocab
from .errors import ConfigError, ShapeError, TemplateError, TransportError
from .numerics import Rng
from .objectives import MetricsReport, confusion_matrix

log = logging.getLogger(__name__)

DEFAULT_K = 15
TOKEN_ENV = "IMB_RERANK_TOKEN"
MATCHED, FALLBACK_INVALID, FALLBACK_TIMEOUT = "matched", "fallback_invalid", "fallback_timeout"


def default_template() -> str:
    return resources.files("imbtext").joinpath("templates/rerank_v1.txt").read_text(encoding="utf-8")


def load_template(path) -> str:
    text = Path(path).read_text(encoding="utf-8")
    check_template(text)
    return text


def check_template(template: str) -> None:
    missing = [p for p in ("{text}", "{candidates}") if p not in template]
    if missing:
        raise TemplateError(f"template is missing placeholder(s): {', '.join(missing)}")


# ---------------------------------------------------------------------------
# Candidates and prompts
# ---------------------------------------------------------------------------


@dataclass
class CandidateSet:
    candidates: list[tuple[int, float]]
    text: str = ""

    @property
    def ids(self) -> list[int]:
        return [c for c, _ in self.candidates]

    @property
    def top1(self) -> int:
        return self.candidates[0][0]

    def __len__(self) -> int:
        return len(self.candidates)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max())
    return z / z.sum()


def top_k_candidates(logits, k: int = DEFAULT_K, text: str = "") -> CandidateSet:
    """Top min(k, C) classes by softmax probability; ties go to the lower id."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.size == 0:
        raise ShapeError("top_k_candidates needs a non-empty logit vector")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    probs = softmax(logits)
    order = np.lexsort((np.arange(probs.size), -probs))[: min(k, probs.size)]
    return CandidateSet([(int(i), float(probs[i])) for i in order], text)


def build_prompt(text: str, candidate_labels: Sequence[str], template: str | None = None) -> str:
    """Render the template with the query verbatim and a numbered candidate list."""
    if not candidate_labels:
        raise ConfigError("build_prompt needs at least one candidate")
    template = default_template() if template is None else template
    check_template(template)
    listing = "\n".join(f"{i}. {label}" for i, label in enumerate(candidate_labels, start=1))
    # single pass so braces inside the query are never re-substituted
    head, _, tail = template.partition("{text}")
    return head.replace("{candidates}", listing) + text + tail.replace("{candidates}", listing)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


@dataclass
class RerankRequest:
    text: str
    candidates: CandidateSet
    labels: Sequence[str]  # all class names, indexed by id
    gold: int | None = None

    def candidate_labels(self) -> list[str]:
        return [self.labels[c] for c in self.candidates.ids]


class Backend:
    kind = "base"

    def reply(self, request: RerankRequest) -> str:
        raise NotImplementedError

    def reply_many(self, requests: Sequence[RerankRequest]) -> list[str | Exception]:
        out: list[str | Exception] = []
        for req in requests:
            try:
                out.append(self.reply(req))
            except TransportError as exc:
                out.append(exc)
        return out


class OracleBackend(Backend):
    """Upper bound: picks the gold label whenever it is among the candidates."""

    kind = "oracle"

    def pick(self, request: RerankRequest) -> int:
        if request.gold is not None and request.gold in request.candidates.ids:
            return request.gold
        return request.candidates.top1

    def reply(self, request: RerankRequest) -> str:
        return request.labels[self.pick(request)]


class SimulatedMismatchBackend(OracleBackend):
    """Oracle pick, replaced with probability ``p`` by an adjacent label.

    Models a re-ranker whose choice is semantically plausible but wrong for
    the task's schema. When no adjacent label is among the candidates the
    reply names one outside the list, which resolves to the top-1 fallback.
    """

    kind = "simulated_mismatch"

    def __init__(self, p: float, confusion: ConfusionMap, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"mismatch probability must be in [0, 1], got {p}")
        self.p = p
        self.confusion = confusion
        self.rng = Rng(seed)

    def reply(self, request: RerankRequest) -> str:
        base = self.pick(request)
        if self.rng.uniform() >= self.p:
            return request.labels[base]
        nbrs = self.confusion.neighbors(base)
        inside = [(c, w) for c, w in nbrs if c in request.candidates.ids]
        if inside:
            return request.labels[inside[self.rng.choice([w for _, w in inside])][0]]
        if nbrs:
            return request.labels[max(nbrs, key=lambda cw: (cw[1], -cw[0]))[0]]
        return request.labels[base]


class HttpBackend(Backend):
    """Chat-completions style endpoint; bearer token from IMB_RERANK_TOKEN."""

    kind = "http"

    def __init__(
        self,
        url: str,
        model: str,
        template: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 3,
        concurrency: int = 4,
        backoff: float = 0.5,
    ):
        if timeout <= 0:
            raise ConfigError("http timeout must be positive")
        if concurrency < 1 or max_retries < 0:
            raise ConfigError("need concurrency >= 1 and max_retries >= 0")
        self.url = url
        self.model = model
        self.template = default_template() if template is None else template
        check_template(self.template)
        self.timeout = timeout
        self.max_retries = max_retries
        self.concurrency = concurrency
        self.backoff = backoff

    def _post(self, prompt: str) -> str:
        body = json.dumps(
            {"model": self.model, "messages": [{"role": "user", "content": prompt}], "temperature": 0}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return extract_reply(payload)

    def reply(self, request: RerankRequest) -> str:
        prompt = build_prompt(request.text, request.candidate_labels(), self.template)
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                return self._post(prompt)
            except (urllib.error.URLError, OSError, ValueError, KeyError, TypeError) as exc:
                last = exc
                if attempt < self.max_retries:
                    time.sleep(self.backoff * 2**attempt)
        raise TransportError(f"re-rank request failed after {self.max_retries + 1} attempts: {last}")

    def reply_many(self, requests):
        with ThreadPoolExecutor(max_workers=self.concurrency) as pool:
            return list(pool.map(self._safe_reply, requests))

    def _safe_reply(self, request):
        try:
            return self.reply(request)
        except TransportError as exc:
            return exc


def extract_reply(payload) -> str:
    """Text of a chat-completions response (or a bare {"content": ...})."""
    if isinstance(payload, dict) and "choices" in payload:
        return str(payload["choices"][0]["message"]["content"])
    if isinstance(payload, dict) and "content" in payload:
        return str(payload["content"])
    raise ValueError("unrecognized re-rank response body")


def backend_from_config(cfg: dict, num_classes: int | None = None) -> Backend:
    kind = cfg.get("kind", "oracle")
    if kind == "oracle":
        return OracleBackend()
    if kind == "simulated_mismatch":
        conf = cfg.get("confusion", "siblings")
        if conf == "siblings":
            if num_classes is None:
                raise ConfigError("sibling confusion map needs num_classes")
            confusion = ConfusionMap.siblings(num_classes)
        elif isinstance(conf, dict):
            confusion = ConfusionMap.from_json(conf)
        else:
            confusion = ConfusionMap.from_json(json.loads(Path(conf).read_text(encoding="utf-8")))
        return SimulatedMismatchBackend(float(cfg.get("p", 0.5)), confusion, int(cfg.get("seed", 0)))
    if kind == "http":
        template = load_template(cfg["template"]) if cfg.get("template") else None
        try:
            return HttpBackend(
                cfg["url"],
                cfg.get("model", "default"),
                template,
                float(cfg.get("timeout", 30.0)),
                int(cfg.get("max_retries", 3)),
                int(cfg.get("concurrency", 4)),
                float(cfg.get("backoff", 0.5)),
            )
        except KeyError:
            raise ConfigError("http backend needs a 'url'") from None
    raise ConfigError(f"unknown re-rank backend kind {kind!r}")


# ---------------------------------------------------------------------------
# Resolution and pipeline evaluation
# ---------------------------------------------------------------------------


@dataclass
class RerankResult:
    final: int
    reply: str
    resolution: str


def resolve(reply: str | Exception, candidates: CandidateSet, labels: Sequence[str]) -> RerankResult:
    if isinstance(reply, Exception):
        return RerankResult(candidates.top1, str(reply), FALLBACK_TIMEOUT)
    wanted = reply.strip().casefold()
    for c in candidates.ids:
        if labels[c].strip().casefold() == wanted:
            return RerankResult(c, reply, MATCHED)
    return RerankResult(candidates.top1, reply, FALLBACK_INVALID)


def rerank(
    candidates: CandidateSet,
    text: str,
    backend: Backend,
    labels: Sequence[str],
    gold: int | None = None,
) -> RerankResult:
    if not candidates.candidates:
        raise ConfigError("rerank needs a non-empty candidate set")
    reply = backend.reply_many([RerankRequest(text, candidates, labels, gold)])[0]
    return resolve(reply, candidates, labels)


@dataclass
class PipelineReport:
    classifier: MetricsReport
    reranked: MetricsReport
    delta_macro_f1: float
    per_class_delta: list[float]
    resolution_counts: dict[str, int]
    k: int
    backend: str
    results: list[RerankResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "classifier": self.classifier.to_dict(),
            "reranked": self.reranked.to_dict(),
            "delta_macro_f1": self.delta_macro_f1,
            "per_class_delta": self.per_class_delta,
            "resolution_counts": self.resolution_counts,
            "k": self.k,
            "backend": self.backend,
        }


def pipeline_eval_logits(
    logits: np.ndarray,
    golds: Sequence[int],
    texts: Sequence[str],
    labels: Sequence[str],
    backend: Backend,
    k: int = DEFAULT_K,
) -> PipelineReport:
    """Classifier-only vs re-ranked metrics on the same logits."""
    logits = np.asarray(logits, dtype=np.float64)
    C = logits.shape[1]
    cand_sets = [top_k_candidates(row, k, t) for row, t in zip(logits, texts)]
    requests = [RerankRequest(t, cs, labels, int(g)) for t, cs, g in zip(texts, cand_sets, golds)]
    replies = backend.reply_many(requests)
    results = [resolve(r, cs, labels) for r, cs in zip(replies, cand_sets)]
    base_preds = [cs.top1 for cs in cand_sets]
    rr_preds = [r.final for r in results]
    base = MetricsReport.from_confusion(confusion_matrix(base_preds, golds, C))
    rer = MetricsReport.from_confusion(confusion_matrix(rr_preds, golds, C))
    counts = {MATCHED: 0, FALLBACK_INVALID: 0, FALLBACK_TIMEOUT: 0}
    for r in results:
        counts[r.resolution] += 1
    return PipelineReport(
        classifier=base,
        reranked=rer,
        delta_macro_f1=rer.macro_f1 - base.macro_f1,
        per_class_delta=[b - a for a, b in zip(base.per_class_f1, rer.per_class_f1)],
        resolution_counts=counts,
        k=k,
        backend=backend.kind,
        results=results,
    )


def pipeline_eval(ckpt: Checkpoint, backend: Backend, dataset: Dataset, k: int = DEFAULT_K, batch_size: int = 128) -> PipelineReport:
    from .trainer import align_labels, encode_dataset, model_from_checkpoint, predict_logits

    model = model_from_checkpoint(ckpt)
    dataset = align_labels(dataset, ckpt.label_map)
    encoded = encode_dataset(dataset, Vocab(ckpt.vocab), model.config.encoder.max_len)
    logits = predict_logits(model, encoded, batch_size)
    labels = Dataset([], ckpt.label_map).label_names()
    return pipeline_eval_logits(logits, dataset.labels, [ex.text for ex in dataset.examples], labels, backend, k)
