"""Negative sampling stratified by ontology distance from a patient's positives.

Four pools, ordered hardest to easiest to tell apart from a true term:

* difficult: siblings (a shared parent) and cousins (a shared grandparent but
  no shared parent) of some positive;
* medium: terms three to five undirected edges from some positive, excluding
  that positive's ancestors and descendants;
* easy: lineal ancestors or descendants of some positive at three or more
  hops;
* implausible: terms sharing no ancestry within two hops with any positive
  (both near-ancestor sets include the term itself).

A term eligible for several pools lands in the strongest one. Pools never
contain positives or obsolete terms.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Iterable

from ..errors import DataError, SamplingError
from ..ontology import Ontology, terms_within_distance

NEGATIVE_CLASSES = ("difficult", "medium", "easy", "implausible")


@dataclass(frozen=True)
class NegativePools:
    difficult: frozenset[str]
    medium: frozenset[str]
    easy: frozenset[str]
    implausible: frozenset[str]

    def as_dict(self) -> dict[str, frozenset[str]]:
        return {
            "difficult": self.difficult,
            "medium": self.medium,
            "easy": self.easy,
            "implausible": self.implausible,
        }


def negative_pools(
    o: Ontology,
    positives: Iterable[str],
    medium_range: tuple[int, int] = (3, 5),
    easy_min_lineage: int = 3,
    implausible_radius: int = 2,
) -> NegativePools:
    pos = sorted(set(positives))
    if not pos:
        raise DataError("negative pools need at least one positive term")
    for p in pos:
        o.require(p)
    pos_set = set(pos)

    difficult: set[str] = set()
    medium: set[str] = set()
    easy: set[str] = set()
    lo, hi = medium_range

    for p in pos:
        parents = set(o.parents(p))
        siblings = {c for par in parents for c in o.children(par)} - {p}
        grandparents = {g for par in parents for g in o.parents(par)}
        cousin_cands = {
            c for g in grandparents for mid in o.children(g) for c in o.children(mid)
        } - {p}
        cousins = {c for c in cousin_cands if not (set(o.parents(c)) & parents)}
        difficult |= siblings | cousins

        lineal = o.ancestors(p) | o.descendants(p, include_self=True)
        for t, d in terms_within_distance(o, p, hi).items():
            if lo <= d <= hi and t not in lineal:
                medium.add(t)

        up = o.lineage_hops_up(p)
        down = o.lineage_hops_down(p)
        easy |= {t for t, d in up.items() if d >= easy_min_lineage}
        easy |= {t for t, d in down.items() if d >= easy_min_lineage}

    near_positives: set[str] = set()
    for p in pos:
        near_positives |= o.ancestors_within(p, implausible_radius)
    implausible = {
        t
        for t in o.non_obsolete_ids()
        if t not in pos_set
        and not (o.ancestors_within(t, implausible_radius) & near_positives)
    }

    difficult -= pos_set
    medium = medium - pos_set - difficult
    easy = easy - pos_set - difficult - medium
    implausible = implausible - difficult - medium - easy
    return NegativePools(
        difficult=frozenset(difficult),
        medium=frozenset(medium),
        easy=frozenset(easy),
        implausible=frozenset(implausible),
    )


def sample_negatives(
    pools: NegativePools,
    positives: Iterable[str],
    per_class_per_positive: int = 1,
    seed: int | str = 0,
) -> list[tuple[str, str]]:
    """Draw up to per_class_per_positive * |positives| terms from each pool.

    Sampling is uniform without replacement within each pool and deterministic
    for a fixed seed. Returns (term_id, class) pairs, pools in fixed order.
    """
    pos = sorted(set(positives))
    if not pos:
        raise DataError("sampling needs at least one positive term")
    if per_class_per_positive < 1:
        raise DataError("per_class_per_positive must be >= 1")
    by_class = pools.as_dict()
    if all(not by_class[c] for c in NEGATIVE_CLASSES):
        raise SamplingError("all negative pools are empty")
    rng = random.Random(f"{seed}")
    want = per_class_per_positive * len(pos)
    drawn: list[tuple[str, str]] = []
    for cls in NEGATIVE_CLASSES:
        pool = sorted(by_class[cls])
        take = min(want, len(pool))
        if take:
            drawn.extend((t, cls) for t in rng.sample(pool, take))
    return drawn
