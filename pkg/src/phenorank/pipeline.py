"""End-to-end pipeline steps over a shared work directory.

Every artifact is JSONL whose first line is a meta record embedding the
configuration hash and seed it was produced under. Report-producing steps
refuse artifacts from a different configuration unless forced. Writes are
atomic (temp file then rename) so an interrupted step never leaves a
half-written artifact behind.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Iterable

from . import annotations, corpus, evaluation, extraction, ontology, standardization
from .config import PipelineConfig, config_hash
from .errors import ConfigError, DataError, StructuralError
from .ranking import (
    BoostedHyper,
    FeatureSchema,
    LinearHyper,
    RankModel,
    build_instances,
    rank_terms,
    select_model,
    split_cohort,
    train_boosted,
    train_pairwise_linear,
)
from .ranking.features import term_feature_map

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = 1

FEATURES_CSV = "features.csv"
INGEST_MANIFEST = "ingest.json"
COHORT_FILE = "cohort.jsonl"
NOTES_FILE = "notes.jsonl"
CHUNKS_FILE = "chunks.jsonl"
MENTIONS_FILE = "mentions.jsonl"
STANDARDIZED_FILE = "standardized.jsonl"
TRACE_FILE = "standardize_trace.jsonl"
MODEL_FILE = "model.json"
RANKINGS_FILE = "rankings.jsonl"
EVAL_REPORT = "report_evaluation.json"
EVAL_CSV = "report_evaluation.csv"
ABLATION_REPORT = "report_ablation.json"
ABLATION_CSV = "report_ablation.csv"
PERMTEST_REPORT = "report_permutation.json"
PERMTEST_CSV = "report_permutation.csv"


def workdir(cfg: PipelineConfig) -> Path:
    path = Path(cfg.paths.workdir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _meta(cfg: PipelineConfig, step: str, **extra) -> dict:
    meta = {
        "step": step,
        "configHash": config_hash(cfg),
        "seed": cfg.seed,
        "version": ARTIFACT_VERSION,
    }
    meta.update(extra)
    return meta


def write_jsonl(path: Path, meta: dict, rows: Iterable[dict]) -> None:
    lines = [json.dumps({"__meta__": meta}, sort_keys=True)]
    lines.extend(json.dumps(row, sort_keys=True) for row in rows)
    _atomic_write(path, "\n".join(lines) + "\n")


def read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read artifact {path}: {e}") from e
    meta: dict | None = None
    rows: list[dict] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path} line {lineno}: invalid JSON ({e.msg})") from e
        if meta is None:
            if not isinstance(obj, dict) or "__meta__" not in obj:
                raise StructuralError(f"{path} does not start with a meta line")
            meta = obj["__meta__"]
        else:
            rows.append(obj)
    if meta is None:
        raise StructuralError(f"{path} is empty")
    return meta, rows


def check_artifact(meta: dict, cfg: PipelineConfig, label: str, force: bool) -> None:
    """Refuse artifacts produced under a different configuration.

    With force the mismatch is logged and the artifact used as-is.
    """
    expected = config_hash(cfg)
    found = meta.get("configHash")
    if found == expected:
        return
    message = (
        f"{label} was produced under configuration {str(found)[:12]}, "
        f"active configuration is {expected[:12]}"
    )
    if force:
        logger.warning("%s (forced, continuing)", message)
        return
    raise ConfigError(message + "; rerun the producing step or pass force")


# -- shared loading ----------------------------------------------------------------


def load_ontology(cfg: PipelineConfig) -> ontology.Ontology:
    path = Path(cfg.paths.ontology)
    if not cfg.paths.ontology:
        raise ConfigError("paths.ontology is not set")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read ontology {path}: {e}") from e
    if path.suffix.lower() == ".json":
        return ontology.parse_ontology_json(text)
    return ontology.parse_obo(text)


def load_kb(cfg: PipelineConfig, o: ontology.Ontology) -> annotations.AnnotationKB:
    if not cfg.paths.disease_annotations or not cfg.paths.gene_annotations:
        raise ConfigError("paths.disease_annotations and paths.gene_annotations required")
    try:
        disease_text = Path(cfg.paths.disease_annotations).read_text(encoding="utf-8")
        gene_text = Path(cfg.paths.gene_annotations).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read annotations: {e}") from e
    return annotations.load_annotations(disease_text, gene_text, o)


def _load_cohort(cfg: PipelineConfig) -> list[corpus.Patient]:
    _, rows = read_jsonl(workdir(cfg) / COHORT_FILE)
    return [corpus.Patient.from_dict(r) for r in rows]


def _gold_by_patient(cohort: list[corpus.Patient]) -> dict[str, set[str]]:
    return {p.patient_id: set(p.curated_terms) for p in cohort}


def _remote_backend_config(cfg: PipelineConfig) -> extraction.RemoteBackendConfig:
    ex = cfg.extraction
    return extraction.RemoteBackendConfig(
        endpoint_url=ex.endpoint_url,
        model_name=ex.model_name,
        api_key_env_var=ex.api_key_env_var,
        temperature=ex.temperature,
        timeout=ex.timeout,
        max_retries=ex.max_retries,
    )


def _eval_config(cfg: PipelineConfig) -> evaluation.EvalConfig:
    ev = cfg.evaluation
    return evaluation.EvalConfig(
        cutoffs=ev.cutoffs,
        bootstrap_iterations=ev.bootstrap_iterations,
        permutations=ev.permutations,
        seed=cfg.seed,
    )


def _provenance(cfg: PipelineConfig, **extra) -> dict:
    prov = {"configHash": config_hash(cfg), "seed": cfg.seed}
    prov.update(extra)
    return prov


# -- steps -------------------------------------------------------------------------


def step_ingest(cfg: PipelineConfig) -> dict:
    """Parse ontology and annotations, write the per-term feature table."""
    o = load_ontology(cfg)
    kb = load_kb(cfg, o)
    s = ontology.compute_stats(o, kb)
    rows = annotations.feature_table(o, s, kb)
    wd = workdir(cfg)
    _atomic_write(wd / FEATURES_CSV, annotations.feature_table_csv(rows))
    summary = {
        "terms": len(o.non_obsolete_ids()),
        "obsolete": sum(1 for t in o.terms.values() if t.obsolete),
        "diseases": {src: kb.disease_totals.get(src, 0) for src in annotations.DISEASE_SOURCES},
        "genes": kb.total_genes,
        "featureRows": len(rows),
    }
    manifest = {"__meta__": _meta(cfg, "ingest"), "summary": summary}
    _atomic_write(wd / INGEST_MANIFEST, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return summary


def _distractor_pool(
    o: ontology.Ontology, s: ontology.OntologyStats, size: int
) -> list[str]:
    # Common, well-annotated terms make realistic non-gold findings.
    eligible = [t for t in o.non_obsolete_ids() if t != o.root]
    eligible.sort(key=lambda t: (-s.annot_count.get(t, 0), t))
    return eligible[:size]


def step_synth(cfg: PipelineConfig) -> dict:
    """Generate the synthetic cohort and one narrative note per patient."""
    o = load_ontology(cfg)
    kb = load_kb(cfg, o)
    s = ontology.compute_stats(o, kb)
    cohort = corpus.synth_cohort(
        o, cfg.cohort.size, cfg.seed, max_terms=cfg.cohort.max_terms
    )
    per_patient = cfg.cohort.distractors_per_patient
    pool = _distractor_pool(o, s, per_patient + 4) if per_patient else []
    notes = []
    for patient in cohort:
        distractors = tuple(
            t for t in pool if t not in patient.curated_terms
        )[:per_patient]
        _, note = corpus.synth_narrative(patient, o, cfg.seed, distractors)
        notes.append(note)
    wd = workdir(cfg)
    write_jsonl(wd / COHORT_FILE, _meta(cfg, "synth"), (p.to_dict() for p in cohort))
    write_jsonl(wd / NOTES_FILE, _meta(cfg, "synth"), (n.to_dict() for n in notes))
    return {"patients": len(cohort), "notes": len(notes)}


def step_chunk(cfg: PipelineConfig) -> dict:
    """Split every note into sentence-preserving chunks."""
    wd = workdir(cfg)
    _, note_rows = read_jsonl(wd / NOTES_FILE)
    chunks: list[corpus.NoteChunk] = []
    for row in note_rows:
        note = corpus.ClinicalNote.from_dict(row)
        chunks.extend(corpus.chunk_note(note, cfg.chunking.max_chars))
    write_jsonl(wd / CHUNKS_FILE, _meta(cfg, "chunk"), (c.to_dict() for c in chunks))
    return {"notes": len(note_rows), "chunks": len(chunks)}


def step_extract(cfg: PipelineConfig) -> dict:
    """Run the configured extraction backend over every chunk."""
    wd = workdir(cfg)
    _, chunk_rows = read_jsonl(wd / CHUNKS_FILE)
    chunks = [corpus.NoteChunk.from_dict(r) for r in chunk_rows]
    if cfg.extraction.backend == "remote":
        backend_cfg = _remote_backend_config(cfg)
        extraction.verify_credentials(backend_cfg)
        template = extraction.DEFAULT_PROMPT_TEMPLATE

        def backend(chunk):
            return extraction.remote_extract(backend_cfg, template, chunk)

    else:
        o = load_ontology(cfg)

        def backend(chunk):
            return extraction.gazetteer_extract(chunk, o)

    result = extraction.extract_corpus(
        chunks, backend, concurrency_limit=cfg.extraction.concurrency
    )
    failures = [{"chunkId": f.chunk_id, "error": f.error} for f in result.failures]
    rows = (
        {
            "patientId": pid,
            "mentions": [m.to_dict() for m in result.mentions_by_patient[pid]],
        }
        for pid in sorted(result.mentions_by_patient)
    )
    write_jsonl(
        wd / MENTIONS_FILE,
        _meta(cfg, "extract", backend=cfg.extraction.backend, failures=failures),
        rows,
    )
    total = sum(len(v) for v in result.mentions_by_patient.values())
    return {
        "chunks": len(chunks),
        "mentions": total,
        "patients": len(result.mentions_by_patient),
        "failures": len(failures),
    }


def _load_mentions(cfg: PipelineConfig) -> dict[str, list[extraction.Mention]]:
    _, rows = read_jsonl(workdir(cfg) / MENTIONS_FILE)
    out: dict[str, list[extraction.Mention]] = {}
    for row in rows:
        out[row["patientId"]] = [
            extraction.Mention.from_dict(m) for m in row["mentions"]
        ]
    return out


def step_standardize(cfg: PipelineConfig) -> dict:
    """Resolve extracted mentions to ontology terms."""
    o = load_ontology(cfg)
    mentions = _load_mentions(cfg)
    index = standardization.build_index(o)
    if cfg.standardization.selector == "remote":
        selector = standardization.RemoteSelector(_remote_backend_config(cfg))
    else:
        selector = standardization.ThresholdSelector(cfg.standardization.tau)
    result = standardization.standardize_corpus(
        mentions, o, index, selector, k=cfg.standardization.top_k
    )
    wd = workdir(cfg)
    write_jsonl(
        wd / STANDARDIZED_FILE,
        _meta(cfg, "standardize", selector=selector.name),
        (
            {"patientId": pid, "terms": result.terms_by_patient[pid]}
            for pid in sorted(result.terms_by_patient)
        ),
    )
    write_jsonl(
        wd / TRACE_FILE,
        _meta(cfg, "standardize", selector=selector.name),
        (t.to_dict() for t in result.trace),
    )
    resolved = sum(1 for t in result.trace if t.resolved is not None)
    return {
        "mentions": len(result.trace),
        "resolved": resolved,
        "patients": len(result.terms_by_patient),
    }


def _load_standardized(cfg: PipelineConfig) -> dict[str, list[str]]:
    _, rows = read_jsonl(workdir(cfg) / STANDARDIZED_FILE)
    return {row["patientId"]: list(row["terms"]) for row in rows}


def step_train(cfg: PipelineConfig) -> dict:
    """Fit the configured ranking model on the synthetic cohort."""
    o = load_ontology(cfg)
    kb = load_kb(cfg, o)
    s = ontology.compute_stats(o, kb)
    cohort = _load_cohort(cfg)
    train_patients, val_patients = split_cohort(
        cohort, ratio=cfg.training.split_ratio, seed=cfg.seed
    )
    schema = FeatureSchema.for_cohort(cohort)
    features = term_feature_map(o, s, kb)
    tr = cfg.training
    common = dict(
        schema=schema,
        per_class_per_positive=tr.per_class_per_positive,
        term_features=features,
    )
    train_inst = build_instances(train_patients, o, s, kb, cfg.seed, **common)
    val_inst = build_instances(val_patients, o, s, kb, cfg.seed, **common)
    linear_hyper = LinearHyper(
        learning_rate=tr.linear_learning_rate,
        epochs=tr.linear_epochs,
        l2=tr.linear_l2,
    )
    boosted_hyper = BoostedHyper(
        learning_rate=tr.boosted_learning_rate,
        rounds=tr.boosted_rounds,
        max_depth=tr.boosted_max_depth,
        min_leaf=tr.boosted_min_leaf,
        l1=tr.boosted_l1,
        l2=tr.boosted_l2,
        early_stop_patience=tr.boosted_patience,
    )
    if tr.model == "linear":
        model = train_pairwise_linear(
            train_inst, linear_hyper, schema=schema, seed=cfg.seed
        )
    elif tr.model == "boosted":
        model = train_boosted(
            train_inst, boosted_hyper, validation=val_inst, schema=schema, seed=cfg.seed
        )
    else:
        linear = train_pairwise_linear(
            train_inst, linear_hyper, schema=schema, seed=cfg.seed
        )
        boosted = train_boosted(
            train_inst, boosted_hyper, validation=val_inst, schema=schema, seed=cfg.seed
        )
        model = select_model([linear, boosted], val_inst)
    doc = json.loads(model.to_json())
    doc["configHash"] = config_hash(cfg)
    _atomic_write(
        workdir(cfg) / MODEL_FILE, json.dumps(doc, sort_keys=True, indent=2) + "\n"
    )
    return {
        "kind": model.kind,
        "trainInstances": len(train_inst),
        "valInstances": len(val_inst),
        "validationMap30": model.meta.validation_map30,
    }


def load_model(cfg: PipelineConfig) -> RankModel:
    path = workdir(cfg) / MODEL_FILE
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read model {path}: {e}") from e
    return RankModel.from_json(text)


def step_rank(cfg: PipelineConfig) -> dict:
    """Order each patient's standardized terms by model score."""
    o = load_ontology(cfg)
    kb = load_kb(cfg, o)
    s = ontology.compute_stats(o, kb)
    cohort = {p.patient_id: p for p in _load_cohort(cfg)}
    standardized = _load_standardized(cfg)
    model = load_model(cfg)
    features = term_feature_map(o, s, kb)
    rows = []
    for pid in sorted(standardized):
        patient = cohort.get(pid)
        if patient is None:
            raise DataError(f"standardized terms for unknown patient {pid}")
        ranked = rank_terms(model, patient, standardized[pid], features)
        rows.append(
            {
                "patientId": pid,
                "terms": [t for t, _ in ranked],
                "scores": [score for _, score in ranked],
            }
        )
    write_jsonl(
        workdir(cfg) / RANKINGS_FILE, _meta(cfg, "rank", model=model.kind), rows
    )
    return {"patients": len(rows)}


def _load_rankings(cfg: PipelineConfig) -> tuple[dict, dict[str, list[str]]]:
    meta, rows = read_jsonl(workdir(cfg) / RANKINGS_FILE)
    return meta, {row["patientId"]: list(row["terms"]) for row in rows}


def step_evaluate(cfg: PipelineConfig, force: bool = False) -> dict:
    """Score the prioritized rankings against the cohort gold standard."""
    o = load_ontology(cfg)
    kb = load_kb(cfg, o)
    s = ontology.compute_stats(o, kb)
    meta, rankings = _load_rankings(cfg)
    check_artifact(meta, cfg, RANKINGS_FILE, force)
    cohort_meta, _ = read_jsonl(workdir(cfg) / COHORT_FILE)
    check_artifact(cohort_meta, cfg, COHORT_FILE, force)
    gold = _gold_by_patient(_load_cohort(cfg))
    report = evaluation.evaluate_cohort(
        rankings,
        gold,
        o,
        s,
        _eval_config(cfg),
        configuration="prioritized",
        provenance=_provenance(cfg, artifact=RANKINGS_FILE),
    )
    wd = workdir(cfg)
    _atomic_write(wd / EVAL_REPORT, report.to_json())
    _atomic_write(wd / EVAL_CSV, evaluation.report_csv([report]))
    return {"patients": report.cohort_size, "report": str(wd / EVAL_REPORT)}


def step_ablate(cfg: PipelineConfig, force: bool = False) -> dict:
    """Evaluate the pipeline cut after extraction, standardization, ranking."""
    o = load_ontology(cfg)
    kb = load_kb(cfg, o)
    s = ontology.compute_stats(o, kb)
    wd = workdir(cfg)
    mention_meta, _ = read_jsonl(wd / MENTIONS_FILE)
    check_artifact(mention_meta, cfg, MENTIONS_FILE, force)
    std_meta, _ = read_jsonl(wd / STANDARDIZED_FILE)
    check_artifact(std_meta, cfg, STANDARDIZED_FILE, force)
    rank_meta, rankings = _load_rankings(cfg)
    check_artifact(rank_meta, cfg, RANKINGS_FILE, force)
    gold = _gold_by_patient(_load_cohort(cfg))
    reports = evaluation.ablation_run(
        _load_mentions(cfg),
        _load_standardized(cfg),
        rankings,
        gold,
        o,
        s,
        _eval_config(cfg),
        provenance=_provenance(cfg),
    )
    doc = {"reports": [r.to_dict() for r in reports]}
    _atomic_write(wd / ABLATION_REPORT, json.dumps(doc, sort_keys=True, indent=2) + "\n")
    _atomic_write(wd / ABLATION_CSV, evaluation.report_csv(reports))
    return {
        "stages": [r.configuration for r in reports],
        "report": str(wd / ABLATION_REPORT),
    }


def step_permtest(cfg: PipelineConfig, force: bool = False) -> dict:
    """Compare prioritized rankings against random permutations of themselves."""
    o = load_ontology(cfg)
    kb = load_kb(cfg, o)
    s = ontology.compute_stats(o, kb)
    meta, rankings = _load_rankings(cfg)
    check_artifact(meta, cfg, RANKINGS_FILE, force)
    gold = _gold_by_patient(_load_cohort(cfg))
    report = evaluation.permutation_delta(
        rankings,
        gold,
        o,
        s,
        _eval_config(cfg),
        provenance=_provenance(cfg, artifact=RANKINGS_FILE),
    )
    wd = workdir(cfg)
    _atomic_write(wd / PERMTEST_REPORT, report.to_json())
    _atomic_write(wd / PERMTEST_CSV, evaluation.report_csv([report]))
    return {"patients": report.cohort_size, "report": str(wd / PERMTEST_REPORT)}
