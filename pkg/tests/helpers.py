"""Shared fixture builders and independent brute-force oracles.

The oracles deliberately reimplement graph and metric logic with naive loops
so the package implementations are checked against something that cannot share
their bugs.
"""

from __future__ import annotations

import math
import random
from collections import deque

from phenorank.corpus import NoteChunk
from phenorank.ontology import Ontology, TermRecord

# -- small seven-term ontology -------------------------------------------------------
#
#            ROOT
#           /    \
#        BRANCH_A BRANCH_B
#        /   \        \
#      A_ONE A_TWO   B_ONE
#       |
#     A_LEAF
#
# plus one obsolete term that must stay invisible to every query.

ROOT = "HP:0000001"
BRANCH_A = "HP:0000002"
BRANCH_B = "HP:0000003"
A_ONE = "HP:0000011"
A_TWO = "HP:0000012"
B_ONE = "HP:0000031"
A_LEAF = "HP:0000111"
OBSOLETE = "HP:0000999"
ORPHAN = "HP:0000004"  # annotation-free sibling branch, only in the variant


def _term(tid, name, parents=(), obsolete=False, synonyms=(), definition=""):
    return TermRecord(
        id=tid,
        name=name,
        synonyms=list(synonyms),
        definition=definition,
        parents=list(parents),
        obsolete=obsolete,
    )


def small_terms() -> dict[str, TermRecord]:
    return {
        ROOT: _term(ROOT, "Clinical finding"),
        BRANCH_A: _term(BRANCH_A, "Branch alpha", [ROOT]),
        BRANCH_B: _term(BRANCH_B, "Branch beta", [ROOT]),
        A_ONE: _term(A_ONE, "Alpha one", [BRANCH_A], synonyms=["First alpha"]),
        A_TWO: _term(A_TWO, "Alpha two", [BRANCH_A]),
        B_ONE: _term(B_ONE, "Beta one", [BRANCH_B]),
        A_LEAF: _term(A_LEAF, "Alpha one leaf", [A_ONE]),
        OBSOLETE: _term(OBSOLETE, "obsolete finding", obsolete=True),
    }


def small_ontology() -> Ontology:
    return Ontology(small_terms())


def small_ontology_with_orphan() -> Ontology:
    terms = small_terms()
    terms[ORPHAN] = _term(ORPHAN, "Annotation free branch", [ROOT])
    return Ontology(terms)


SMALL_DISEASE_TSV = "\n".join(
    [
        "# term\tdisease\tsource",
        f"{A_LEAF}\td1\tomim",
        f"{A_ONE}\td2\tomim",
        f"{A_TWO}\td3\tomim",
        f"{B_ONE}\td4\tomim",
        f"{A_LEAF}\td1\torphanet",
        "",
    ]
)

SMALL_GENE_TSV = "\n".join(
    [
        f"{A_LEAF}\tg1",
        f"{A_TWO}\tg2",
        f"{B_ONE}\tg3",
        "",
    ]
)

# -- layered synthetic ontology: 1 root, 8 hubs, 32 mids, 128 leaves ------------------


def layered_ids() -> tuple[str, list[str], list[str], list[str]]:
    root = "HP:0100000"
    hubs = [f"HP:{100001 + i:07d}" for i in range(8)]
    mids = [f"HP:{101000 + i * 10 + j:07d}" for i in range(8) for j in range(4)]
    leaves = [
        f"HP:{102000 + i * 100 + j * 10 + k:07d}"
        for i in range(8)
        for j in range(4)
        for k in range(4)
    ]
    return root, hubs, mids, leaves


def layered_ontology() -> Ontology:
    root, hubs, mids, leaves = layered_ids()
    terms: dict[str, TermRecord] = {}
    counter = 0

    def add(tid, parents):
        nonlocal counter
        counter += 1
        terms[tid] = _term(
            tid,
            f"Finding {counter:04d}",
            parents,
            synonyms=[f"Observation {counter:04d}"],
            definition=f"Synthetic finding number {counter}.",
        )

    add(root, [])
    for i, hub in enumerate(hubs):
        add(hub, [root])
    for i in range(8):
        for j in range(4):
            add(mids[i * 4 + j], [hubs[i]])
    for i in range(8):
        for j in range(4):
            for k in range(4):
                add(leaves[i * 16 + j * 4 + k], [mids[i * 4 + j]])
    return Ontology(terms)


def layered_annotation_text() -> tuple[str, str]:
    """One omim disease and one gene per leaf; every second leaf in orphanet."""
    _, _, _, leaves = layered_ids()
    disease_rows = []
    gene_rows = []
    for m, leaf in enumerate(leaves, start=1):
        disease_rows.append(f"{leaf}\tD{m:04d}\tomim")
        if m % 2 == 0:
            disease_rows.append(f"{leaf}\tD{m:04d}\torphanet")
        gene_rows.append(f"{leaf}\tG{m:04d}")
    return "\n".join(disease_rows) + "\n", "\n".join(gene_rows) + "\n"


# -- small realistic vocabulary for retrieval tests -----------------------------------

MYOPIA = "HP:0000545"


def clinical_ontology() -> Ontology:
    terms = {
        "HP:0000001": _term("HP:0000001", "All"),
        "HP:0000118": _term("HP:0000118", "Phenotypic abnormality", ["HP:0000001"]),
        "HP:0000478": _term(
            "HP:0000478", "Abnormality of the eye", ["HP:0000118"]
        ),
        MYOPIA: _term(
            MYOPIA,
            "Myopia",
            ["HP:0000478"],
            synonyms=["Nearsightedness", "Near sightedness"],
            definition="An increased refractive power of the eye.",
        ),
        "HP:0000486": _term("HP:0000486", "Strabismus", ["HP:0000478"]),
        "HP:0000505": _term(
            "HP:0000505", "Visual impairment", ["HP:0000478"], synonyms=["Low vision"]
        ),
        "HP:0001250": _term(
            "HP:0001250", "Seizure", ["HP:0000118"], synonyms=["Seizures"]
        ),
        "HP:0001252": _term(
            "HP:0001252", "Hypotonia", ["HP:0000118"], synonyms=["Low muscle tone"]
        ),
        "HP:0001263": _term(
            "HP:0001263",
            "Global developmental delay",
            ["HP:0000118"],
            synonyms=["Developmental delay"],
        ),
        "HP:0004322": _term("HP:0004322", "Short stature", ["HP:0000118"]),
        "HP:0001629": _term(
            "HP:0001629", "Ventricular septal defect", ["HP:0000118"]
        ),
        "HP:0009999": _term("HP:0009999", "obsolete Ataxic gait", obsolete=True),
    }
    return Ontology(terms)


CLINICAL_DISEASE_TSV = "\n".join(
    [
        f"{MYOPIA}\tMD1\tomim",
        "HP:0000486\tMD2\tomim",
        "HP:0000505\tMD3\tomim",
        "HP:0001250\tMD4\tomim",
        "HP:0001252\tMD5\tomim",
        "HP:0001263\tMD6\tomim",
        "HP:0004322\tMD7\tomim",
        "HP:0001629\tMD8\tomim",
        f"{MYOPIA}\tRD1\torphanet",
        "HP:0001250\tRD2\torphanet",
        "",
    ]
)

CLINICAL_GENE_TSV = "\n".join(
    [
        f"{MYOPIA}\tGJA1",
        "HP:0001250\tSCN1A",
        "HP:0001252\tSCN1A",
        "",
    ]
)


# -- random rooted DAGs ---------------------------------------------------------------


def random_ontology(seed: int, max_terms: int = 50) -> Ontology:
    """Random single-root DAG; term i>0 parents into earlier terms only."""
    rng = random.Random(f"dag:{seed}")
    n = rng.randint(8, max_terms)
    ids = [f"HP:{5000000 + i:07d}" for i in range(n)]
    terms = {ids[0]: _term(ids[0], "Synthetic root")}
    for i in range(1, n):
        k = 1 + (1 if rng.random() < 0.3 and i > 1 else 0)
        parents = rng.sample(ids[:i], k)
        terms[ids[i]] = _term(ids[i], f"Synthetic term {i}", parents)
    return Ontology(terms)


# -- brute-force oracles ---------------------------------------------------------------


def bf_ancestors(o: Ontology, tid: str) -> set[str]:
    out = {tid}
    stack = [tid]
    while stack:
        t = stack.pop()
        for p in o.terms[t].parents:
            if p not in out:
                out.add(p)
                stack.append(p)
    return out


def bf_undirected_distance(o: Ontology, a: str, b: str) -> int | None:
    ids = set(o.non_obsolete_ids())
    adj: dict[str, set[str]] = {t: set() for t in ids}
    for t in ids:
        for p in o.terms[t].parents:
            if p in ids:
                adj[t].add(p)
                adj[p].add(t)
    dist = {a: 0}
    queue = deque([a])
    while queue:
        t = queue.popleft()
        if t == b:
            return dist[t]
        for nxt in adj[t]:
            if nxt not in dist:
                dist[nxt] = dist[t] + 1
                queue.append(nxt)
    return None


def bf_mica(o: Ontology, ic: dict[str, float], a: str, b: str) -> str:
    common = bf_ancestors(o, a) & bf_ancestors(o, b)
    best = None
    for t in sorted(common):
        if best is None or ic[t] > ic[best]:
            best = t
    return best


def bf_lin(o: Ontology, ic: dict[str, float], a: str, b: str) -> float:
    m = bf_mica(o, a=a, b=b, ic=ic)
    denom = ic[a] + ic[b]
    if denom == 0.0:
        return 1.0 if a == b else 0.0
    return abs(2.0 * ic[m] / denom)


def bf_bma(o: Ontology, ic: dict[str, float], left: set[str], right: set[str]) -> float:
    fwd = sum(max(bf_lin(o, ic, a, b) for b in right) for a in left) / len(left)
    bwd = sum(max(bf_lin(o, ic, a, b) for a in left) for b in right) / len(right)
    return (fwd + bwd) / 2.0


def bf_negative_pools(
    o: Ontology,
    positives: set[str],
    medium_range=(3, 5),
    easy_min_lineage=3,
    implausible_radius=2,
) -> dict[str, set[str]]:
    ids = set(o.non_obsolete_ids())
    children: dict[str, set[str]] = {t: set() for t in ids}
    for t in ids:
        for p in o.terms[t].parents:
            children[p].add(t)

    def up_within(t, radius):
        out = {t}
        frontier = {t}
        for _ in range(radius):
            frontier = {
                p for x in frontier for p in o.terms[x].parents if p not in out
            }
            out |= frontier
        return out

    def min_hops(t, neighbors):
        hops = {t: 0}
        queue = deque([t])
        while queue:
            x = queue.popleft()
            for nxt in neighbors(x):
                if nxt not in hops:
                    hops[nxt] = hops[x] + 1
                    queue.append(nxt)
        return hops

    difficult: set[str] = set()
    medium: set[str] = set()
    easy: set[str] = set()
    lo, hi = medium_range
    for p in positives:
        parents = set(o.terms[p].parents)
        for par in parents:
            difficult |= children[par] - {p}
        grandparents = {g for par in parents for g in o.terms[par].parents}
        for g in grandparents:
            for mid in children[g]:
                for c in children[mid]:
                    if c != p and not (set(o.terms[c].parents) & parents):
                        difficult.add(c)
        up = min_hops(p, lambda x: o.terms[x].parents)
        down = min_hops(p, lambda x: children[x])
        lineal = set(up) | set(down)
        both = min_hops(p, lambda x: set(o.terms[x].parents) | children[x])
        for t, d in both.items():
            if lo <= d <= hi and t not in lineal:
                medium.add(t)
        easy |= {t for t, d in up.items() if d >= easy_min_lineage}
        easy |= {t for t, d in down.items() if d >= easy_min_lineage}

    near = set()
    for p in positives:
        near |= up_within(p, implausible_radius)
    implausible = {
        t
        for t in ids
        if t not in positives and not (up_within(t, implausible_radius) & near)
    }
    difficult -= positives
    medium = medium - positives - difficult
    easy = easy - positives - difficult - medium
    implausible = implausible - difficult - medium - easy
    return {
        "difficult": difficult,
        "medium": medium,
        "easy": easy,
        "implausible": implausible,
    }


def bf_ap_at_k(relevance: list[int], total_relevant: int, k: int) -> float:
    norm = min(total_relevant, k)
    if norm == 0:
        return 0.0
    hits = 0
    score = 0.0
    for i, rel in enumerate(relevance[:k], start=1):
        if rel:
            hits += 1
            score += hits / i
    return score / norm


def make_chunk(text: str, chunk_id: str = "N1#c000", patient_id: str = "P0001") -> NoteChunk:
    return NoteChunk(
        chunk_id=chunk_id,
        note_id="N1",
        patient_id=patient_id,
        text=text,
        start_offset=0,
        end_offset=len(text),
    )


def log_ic(count: int, total: int) -> float:
    if count == 0:
        return -math.log(1.0 / (total + 1))
    return -math.log(count / total)


def separable_instances(
    n_patients: int,
    pos_per: int = 3,
    neg_per: int = 5,
    dim: int = 6,
    seed: int = 0,
):
    """Instances whose first feature alone separates positives from negatives."""
    import numpy as np

    from phenorank.ranking import RankingInstance

    rng = np.random.default_rng([seed, 4242])
    out = []
    counter = 0
    for i in range(n_patients):
        pid = f"P{i + 1:04d}"
        for label, count, lo, hi, cls in (
            (1, pos_per, 1.0, 2.0, "none"),
            (0, neg_per, -2.0, -1.0, "difficult"),
        ):
            for _ in range(count):
                counter += 1
                x = rng.normal(0.0, 0.1, dim)
                x[0] = rng.uniform(lo, hi)
                out.append(
                    RankingInstance(
                        patient_id=pid,
                        term_id=f"HP:{9000000 + counter:07d}",
                        label=label,
                        negative_class=cls,
                        features=x,
                    )
                )
    return out


def ontology_to_json(o: Ontology) -> str:
    """Serialize an ontology into the JSON list form the package loads."""
    import json

    rows = []
    for tid in sorted(o.terms):
        rec = o.terms[tid]
        rows.append(
            {
                "id": rec.id,
                "name": rec.name,
                "synonyms": list(rec.synonyms),
                "def": rec.definition,
                "is_a": list(rec.parents),
                "is_obsolete": rec.obsolete,
            }
        )
    return json.dumps(rows, indent=1)
