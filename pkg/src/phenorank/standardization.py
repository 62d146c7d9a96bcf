"""Mention standardization: map surface strings onto ontology terms.

A deterministic character n-gram embedding indexes every term name and synonym;
retrieval is an exhaustive cosine scan (exact by construction), and a selector
turns the candidate list into a final term id or none.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import (
    DataError,
    EmbeddingError,
    IndexBuildError,
    RetrievalError,
)
from .extraction import Mention, PromptTemplate, RemoteBackendConfig, remote_complete
from .ontology import Ontology

logger = logging.getLogger(__name__)

DEFAULT_DIMENSION = 4096
DEFAULT_TAU = 0.35
DEFAULT_TOP_K = 10

_NON_ALNUM_RE = re.compile(r"[^a-z0-9]+")

# FNV-1a, 32 bit: fixed so embeddings are identical across platforms and runs.
_FNV_OFFSET = 0x811C9DC5
_FNV_PRIME = 0x01000193


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFF
    return h


def default_embed(text: str, dimension: int = DEFAULT_DIMENSION) -> np.ndarray:
    """Hashed character n-gram (n = 3..5) term-frequency vector, L2-normalized.

    Text is lowercased and punctuation runs collapse to single spaces before
    n-grams are taken; a single space pads each side so word edges contribute.
    """
    collapsed = _NON_ALNUM_RE.sub(" ", text.lower()).strip()
    if not collapsed:
        raise EmbeddingError(f"text {text!r} is empty after normalization")
    padded = f" {collapsed} "
    vec = np.zeros(dimension, dtype=np.float64)
    raw = padded.encode("utf-8")
    for n in (3, 4, 5):
        for i in range(len(raw) - n + 1):
            vec[_fnv1a(raw[i : i + n]) % dimension] += 1.0
    return vec / np.linalg.norm(vec)


@dataclass(frozen=True)
class EmbeddingProvider:
    name: str
    dimension: int
    embed: Callable[[str], np.ndarray]


def default_provider() -> EmbeddingProvider:
    return EmbeddingProvider(
        name="char-ngram-v1", dimension=DEFAULT_DIMENSION, embed=default_embed
    )


@dataclass
class IndexEntry:
    term_id: str
    text: str


class VectorIndex:
    """Embedded name/synonym entries for every non-obsolete term.

    Entry vectors live in one sparse row matrix; rows for a term are
    contiguous, ordered by term id then name before synonyms.
    """

    def __init__(
        self,
        provider: EmbeddingProvider,
        entries: list[IndexEntry],
        matrix: sparse.csr_matrix,
        term_ids: list[str],
        term_starts: np.ndarray,
    ):
        self.provider = provider
        self.entries = entries
        self.matrix = matrix
        self.term_ids = term_ids  # sorted, aligned with term_starts
        self.term_starts = term_starts  # row offset where each term's entries begin

    def __len__(self) -> int:
        return len(self.entries)


def build_index(o: Ontology, provider: EmbeddingProvider | None = None) -> VectorIndex:
    """Embed every term name and synonym into a retrieval index."""
    provider = provider or default_provider()
    entries: list[IndexEntry] = []
    term_ids: list[str] = []
    term_starts: list[int] = []
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for tid in o.non_obsolete_ids():
        rec = o.terms[tid]
        term_ids.append(tid)
        term_starts.append(len(entries))
        for text in [rec.name, *rec.synonyms]:
            try:
                vec = provider.embed(text)
            except Exception as e:
                raise IndexBuildError(
                    f"cannot embed {text!r} for term {tid}: {e}"
                ) from e
            nz = np.nonzero(vec)[0]
            row = len(entries)
            rows.extend([row] * len(nz))
            cols.extend(nz.tolist())
            vals.extend(vec[nz].tolist())
            entries.append(IndexEntry(term_id=tid, text=text))
    matrix = sparse.csr_matrix(
        (vals, (rows, cols)), shape=(len(entries), provider.dimension)
    )
    return VectorIndex(
        provider=provider,
        entries=entries,
        matrix=matrix,
        term_ids=term_ids,
        term_starts=np.asarray(term_starts, dtype=np.int64),
    )


def retrieve(
    index: VectorIndex, query: str, k: int = DEFAULT_TOP_K
) -> list[tuple[str, float]]:
    """Exhaustive cosine scan: top-k terms, each scored by its best entry.

    Ties in score resolve to the smaller term id. Scores are clipped into
    [-1, 1] to absorb floating-point overshoot.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not index.entries:
        raise RetrievalError("vector index is empty")
    qv = index.provider.embed(query)
    scores = index.matrix.dot(qv)
    per_term = np.maximum.reduceat(scores, index.term_starts)
    per_term = np.clip(per_term, -1.0, 1.0)
    # term_ids are pre-sorted ascending; a stable sort on -score keeps id order
    # within ties.
    order = np.argsort(-per_term, kind="stable")[:k]
    return [(index.term_ids[i], float(per_term[i])) for i in order]


# -- selection ---------------------------------------------------------------------


@dataclass(frozen=True)
class CandidateTerm:
    term_id: str
    name: str
    definition: str
    score: float


@dataclass
class StandardizedMention:
    """Trace row: one mention, its candidates, and the selector's decision."""

    mention: Mention
    resolved: str | None
    candidates: list[tuple[str, float]]
    selector_name: str
    decision_score: float
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            **self.mention.to_dict(),
            "resolved": self.resolved,
            "candidates": [[t, s] for t, s in self.candidates],
            "selectorName": self.selector_name,
            "decisionScore": self.decision_score,
            "error": self.error,
        }


class ThresholdSelector:
    """Pick the top-cosine candidate when it clears the threshold, else none."""

    def __init__(self, tau: float = DEFAULT_TAU):
        self.tau = tau
        self.name = f"threshold(tau={tau:g})"

    def select(
        self, surface: str, candidates: Sequence[CandidateTerm]
    ) -> tuple[str | None, float]:
        if not candidates:
            raise DataError("selector needs at least one candidate")
        top = candidates[0]
        return (top.term_id if top.score >= self.tau else None), top.score


_SELECTOR_TEMPLATE = PromptTemplate(
    task_statement=(
        "You map a clinical mention onto one ontology term. Choose the single "
        "best-matching candidate, or answer none if no candidate matches."
    ),
    markup_guide="Answer with exactly one candidate id, or the word none.",
    phenotype_definition="",
    input_slot="{input}",
)

_TERM_ID_TOKEN_RE = re.compile(r"HP:\d{7}")


class RemoteSelector:
    """Ask a remote model to choose among retrieval candidates.

    Ids outside the candidate list are treated as none (hallucination guard).
    """

    def __init__(self, cfg: RemoteBackendConfig):
        self.cfg = cfg
        self.name = f"remote({cfg.model_name})"

    def select(
        self, surface: str, candidates: Sequence[CandidateTerm]
    ) -> tuple[str | None, float]:
        if not candidates:
            raise DataError("selector needs at least one candidate")
        lines = [f"Mention: {surface}", "Candidates:"]
        for c in candidates:
            entry = f"- {c.term_id}: {c.name}"
            if c.definition:
                entry += f" ({c.definition})"
            lines.append(entry)
        prompt = (
            _SELECTOR_TEMPLATE.task_statement
            + "\n\n"
            + _SELECTOR_TEMPLATE.markup_guide
            + "\n\n"
            + "\n".join(lines)
            + "\nAnswer:"
        )
        answer = remote_complete(self.cfg, prompt)
        by_id = {c.term_id: c for c in candidates}
        m = _TERM_ID_TOKEN_RE.search(answer)
        if m is not None:
            tid = m.group()
            if tid in by_id:
                return tid, by_id[tid].score
            logger.warning(
                "selector proposed %s outside the candidate list; using none", tid
            )
            return None, candidates[0].score
        if "none" not in answer.lower():
            logger.warning("unparseable selector answer %r; using none", answer[:80])
        return None, candidates[0].score


@dataclass
class StandardizationResult:
    # Per-patient resolved term ids, deduplicated, in first-resolution order.
    terms_by_patient: dict[str, list[str]]
    trace: list[StandardizedMention]


def standardize_corpus(
    mentions_by_patient: dict[str, list[Mention]],
    o: Ontology,
    index: VectorIndex,
    selector,
    k: int = DEFAULT_TOP_K,
) -> StandardizationResult:
    """Resolve every mention and collect per-patient term sets plus a trace.

    Selector failures are captured per mention (resolved none, error noted);
    the trace keeps one row per mention, resolved or not.
    """
    cache: dict[str, list[tuple[str, float]]] = {}
    terms_by_patient: dict[str, list[str]] = {}
    trace: list[StandardizedMention] = []
    for pid in sorted(mentions_by_patient):
        resolved_terms: list[str] = []
        for mention in mentions_by_patient[pid]:
            key = mention.surface.lower()
            candidates = cache.get(key)
            if candidates is None:
                candidates = retrieve(index, mention.surface, k=k)
                cache[key] = candidates
            cand_objs = [
                CandidateTerm(
                    term_id=t,
                    name=o.terms[t].name,
                    definition=o.terms[t].definition,
                    score=s,
                )
                for t, s in candidates
            ]
            error: str | None = None
            try:
                resolved, score = selector.select(mention.surface, cand_objs)
            except Exception as e:  # noqa: BLE001 - per-mention isolation
                resolved, score = None, 0.0
                error = f"{type(e).__name__}: {e}"
                logger.warning("selector failed on %r: %s", mention.surface, error)
            if resolved is not None and resolved not in resolved_terms:
                resolved_terms.append(resolved)
            trace.append(
                StandardizedMention(
                    mention=mention,
                    resolved=resolved,
                    candidates=candidates,
                    selector_name=selector.name,
                    decision_score=score,
                    error=error,
                )
            )
        terms_by_patient[pid] = resolved_terms
    return StandardizationResult(terms_by_patient=terms_by_patient, trace=trace)
