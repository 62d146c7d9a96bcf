"""Disease and gene annotation knowledge base and per-term feature rows.

Disease annotations come from two closed sources (omim, orphanet). IDF-style
features are per-source; count and fraction features pool the sources, matching
how information content is computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DataError, IngestError, ParseError
from .ontology import Ontology, OntologyStats

DISEASE_SOURCES = ("omim", "orphanet")

CSV_HEADER = (
    "term_id,ic,gene_count,gene_fraction,disease_count,disease_fraction,"
    "idf_omim,idf_orphanet"
)


@dataclass
class AnnotationKB:
    """Immutable annotation store with descendant-propagated count caches."""

    disease_annots: dict[str, dict[str, frozenset[str]]]
    gene_annots: dict[str, frozenset[str]]
    disease_totals: dict[str, int]
    total_genes: int
    propagated_disease_counts: dict[str, dict[str, int]] = field(repr=False)
    propagated_gene_counts: dict[str, int] = field(repr=False)


def _propagate(o: Ontology, direct: dict[str, set[str]]) -> dict[str, int]:
    # Invert to document -> terms, then count each document once per ancestor.
    by_doc: dict[str, set[str]] = {}
    for tid, docs in direct.items():
        for d in docs:
            by_doc.setdefault(d, set()).add(tid)
    counts: dict[str, int] = {}
    for terms in by_doc.values():
        reached: set[str] = set()
        for tid in terms:
            reached |= o.ancestors(tid)
        for t in reached:
            counts[t] = counts.get(t, 0) + 1
    return counts


def load_annotations(disease_text: str, gene_text: str, o: Ontology) -> AnnotationKB:
    """Load tab-separated disease and gene annotation rows.

    Disease rows are ``term<TAB>disease<TAB>source``; gene rows are
    ``term<TAB>gene``. Blank lines and ``#`` comments are skipped. Duplicate
    rows collapse. Structurally malformed rows raise ParseError with their line
    number; rows naming unknown/obsolete terms or an unknown source are
    collected and raised together as IngestError.
    """
    disease_direct: dict[str, dict[str, set[str]]] = {s: {} for s in DISEASE_SOURCES}
    gene_direct: dict[str, set[str]] = {}
    bad_rows: list[str] = []

    for lineno, raw in enumerate(disease_text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"disease annotations line {lineno}: expected 3 columns")
        tid, disease, source = (p.strip() for p in parts)
        if not tid or not disease or not source:
            raise ParseError(f"disease annotations line {lineno}: empty column")
        if source not in DISEASE_SOURCES:
            bad_rows.append(f"line {lineno}: unknown source {source!r}")
            continue
        rec = o.terms.get(tid)
        if rec is None or rec.obsolete:
            bad_rows.append(f"line {lineno}: unresolvable term {tid}")
            continue
        disease_direct[source].setdefault(tid, set()).add(disease)

    for lineno, raw in enumerate(gene_text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"gene annotations line {lineno}: expected 2 columns")
        tid, gene = (p.strip() for p in parts)
        if not tid or not gene:
            raise ParseError(f"gene annotations line {lineno}: empty column")
        rec = o.terms.get(tid)
        if rec is None or rec.obsolete:
            bad_rows.append(f"gene line {lineno}: unresolvable term {tid}")
            continue
        gene_direct.setdefault(tid, set()).add(gene)

    if bad_rows:
        raise IngestError("rejected annotation rows: " + "; ".join(bad_rows))

    disease_totals = {
        s: len({d for docs in per_term.values() for d in docs})
        for s, per_term in disease_direct.items()
    }
    total_genes = len({g for gs in gene_direct.values() for g in gs})
    propagated = {s: _propagate(o, disease_direct[s]) for s in DISEASE_SOURCES}
    return AnnotationKB(
        disease_annots={
            s: {t: frozenset(d) for t, d in per_term.items()}
            for s, per_term in disease_direct.items()
        },
        gene_annots={t: frozenset(g) for t, g in gene_direct.items()},
        disease_totals=disease_totals,
        total_genes=total_genes,
        propagated_disease_counts=propagated,
        propagated_gene_counts=_propagate(o, gene_direct),
    )


def idf(kb: AnnotationKB, source: str, term_id: str, propagate: bool = True) -> float:
    """Inverse document frequency of a term within one disease source.

    idf = -ln(d / D) for d annotated diseases out of D in the source; terms no
    disease reaches use add-one smoothing, -ln(1 / (D + 1)).
    """
    if source not in DISEASE_SOURCES:
        raise DataError(f"unknown disease source {source!r}")
    total = kb.disease_totals[source]
    if total == 0:
        raise DataError(f"disease source {source!r} is empty; idf undefined")
    if propagate:
        d = kb.propagated_disease_counts[source].get(term_id, 0)
    else:
        d = len(kb.disease_annots[source].get(term_id, ()))
    if d == 0:
        return -math.log(1.0 / (total + 1.0))
    return -math.log(d / total)


@dataclass(frozen=True)
class TermFeatureRow:
    """Knowledge-base features for one term, counts descendant-propagated."""

    term_id: str
    ic: float
    gene_count: int
    gene_fraction: float
    disease_count: int
    disease_fraction: float
    idf_omim: float
    idf_orphanet: float


def featurize_term(
    o: Ontology, s: OntologyStats, kb: AnnotationKB, term_id: str
) -> TermFeatureRow:
    o.require(term_id)
    gene_count = kb.propagated_gene_counts.get(term_id, 0)
    disease_count = s.annot_count.get(term_id, 0)
    return TermFeatureRow(
        term_id=term_id,
        ic=s.ic[term_id],
        gene_count=gene_count,
        gene_fraction=gene_count / kb.total_genes if kb.total_genes else 0.0,
        disease_count=disease_count,
        disease_fraction=disease_count / s.total_diseases,
        idf_omim=idf(kb, "omim", term_id),
        idf_orphanet=idf(kb, "orphanet", term_id),
    )


def feature_table(
    o: Ontology, s: OntologyStats, kb: AnnotationKB
) -> list[TermFeatureRow]:
    """One row per non-obsolete term, ordered by term id."""
    return [featurize_term(o, s, kb, tid) for tid in o.non_obsolete_ids()]


def feature_table_csv(rows: list[TermFeatureRow]) -> str:
    out = [CSV_HEADER]
    for r in rows:
        out.append(
            f"{r.term_id},{r.ic!r},{r.gene_count},{r.gene_fraction!r},"
            f"{r.disease_count},{r.disease_fraction!r},{r.idf_omim!r},{r.idf_orphanet!r}"
        )
    return "\n".join(out) + "\n"
