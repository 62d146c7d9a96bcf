"""Two hand-rolled pairwise rankers sharing one model contract.

Both optimize the within-patient pairwise logistic loss

    sum over patients, over (pos, neg) pairs of log(1 + exp(-(s_pos - s_neg)))

the linear ranker by full-batch gradient descent on standardized features with
an L2 penalty, the boosted ranker by gradient boosting with depth-limited
regression trees on the pairwise gradients, early-stopped on validation MAP@30.
Models serialize to versioned JSON and round-trip exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from ..corpus import Patient
from ..errors import ConfigError, DataError, TrainingError
from .features import FeatureSchema, RankingInstance
from .metrics import map_at_k

MODEL_FORMAT_VERSION = 1

KIND_LINEAR = "pairwiseLinear"
KIND_BOOSTED = "boostedTrees"


@dataclass
class TrainingMeta:
    seed: int | str | None = None
    rounds: int = 0
    best_round: int | None = None
    validation_map30: float | None = None
    map_history: list[float] = field(default_factory=list)
    train_loss_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "rounds": self.rounds,
            "bestRound": self.best_round,
            "validationMap30": self.validation_map30,
            "mapHistory": self.map_history,
            "trainLossHistory": self.train_loss_history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingMeta":
        return cls(
            seed=d.get("seed"),
            rounds=d.get("rounds", 0),
            best_round=d.get("bestRound"),
            validation_map30=d.get("validationMap30"),
            map_history=list(d.get("mapHistory") or []),
            train_loss_history=list(d.get("trainLossHistory") or []),
        )


@dataclass
class RankModel:
    kind: str
    schema: FeatureSchema
    params: dict
    meta: TrainingMeta

    def score(self, features: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.kind == KIND_LINEAR:
            mean = np.asarray(self.params["mean"], dtype=np.float64)
            scale = np.asarray(self.params["scale"], dtype=np.float64)
            w = np.asarray(self.params["weights"], dtype=np.float64)
            return (X - mean) / scale @ w
        if self.kind == KIND_BOOSTED:
            lr = self.params["learning_rate"]
            out = np.zeros(X.shape[0], dtype=np.float64)
            for tree in self.params["trees"]:
                out += lr * _tree_predict(tree, X)
            return out
        raise DataError(f"unknown model kind {self.kind!r}")

    def to_json(self) -> str:
        doc = {
            "formatVersion": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "schema": self.schema.to_dict(),
            "params": self.params,
            "meta": self.meta.to_dict(),
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RankModel":
        doc = json.loads(text)
        if doc.get("formatVersion") != MODEL_FORMAT_VERSION:
            raise DataError(
                f"unsupported model format version {doc.get('formatVersion')!r}"
            )
        return cls(
            kind=doc["kind"],
            schema=FeatureSchema.from_dict(doc["schema"]),
            params=doc["params"],
            meta=TrainingMeta.from_dict(doc["meta"]),
        )


@dataclass(frozen=True)
class LinearHyper:
    learning_rate: float = 0.05
    epochs: int = 200
    l2: float = 1e-4


@dataclass(frozen=True)
class BoostedHyper:
    learning_rate: float = 0.1
    rounds: int = 100
    max_depth: int = 3
    min_leaf: int = 1
    l1: float = 0.0
    l2: float = 1.0
    early_stop_patience: int = 10


def _group_pairs(
    instances: Sequence[RankingInstance],
) -> list[tuple[np.ndarray, np.ndarray]]:
    by_patient: dict[str, tuple[list[int], list[int]]] = {}
    for i, inst in enumerate(instances):
        pos, neg = by_patient.setdefault(inst.patient_id, ([], []))
        (pos if inst.label else neg).append(i)
    groups = [
        (np.asarray(pos, dtype=np.int64), np.asarray(neg, dtype=np.int64))
        for pos, neg in (by_patient[p] for p in sorted(by_patient))
        if pos and neg
    ]
    return groups


def pairwise_loss(
    scores: np.ndarray, groups: list[tuple[np.ndarray, np.ndarray]]
) -> float:
    loss = 0.0
    for pos, neg in groups:
        margins = scores[pos][:, None] - scores[neg][None, :]
        loss += float(np.logaddexp(0.0, -margins).sum())
    return loss


def _pairwise_grad_hess(
    scores: np.ndarray, groups: list[tuple[np.ndarray, np.ndarray]]
) -> tuple[np.ndarray, np.ndarray]:
    g = np.zeros_like(scores)
    h = np.zeros_like(scores)
    for pos, neg in groups:
        margins = scores[pos][:, None] - scores[neg][None, :]
        sig = expit(-margins)  # d loss / d margin, negated
        g[pos] -= sig.sum(axis=1)
        g[neg] += sig.sum(axis=0)
        curv = sig * (1.0 - sig)
        h[pos] += curv.sum(axis=1)
        h[neg] += curv.sum(axis=0)
    return g, h


def train_pairwise_linear(
    instances: Sequence[RankingInstance],
    hyper: LinearHyper = LinearHyper(),
    schema: FeatureSchema | None = None,
    seed: int | str | None = None,
) -> RankModel:
    """Full-batch gradient descent on the L2-regularized pairwise loss.

    Features are standardized to zero mean and unit variance on the training
    set; the transform is stored in the model so scoring stays consistent.
    Zero epochs return the zero-weight model.
    """
    if hyper.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if not instances:
        raise TrainingError("no training instances")
    X = np.vstack([inst.features for inst in instances])
    groups = _group_pairs(instances)
    if not groups:
        raise TrainingError("no patient contributes both a positive and a negative")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0.0] = 1.0
    Xs = (X - mean) / scale
    w = np.zeros(X.shape[1], dtype=np.float64)
    loss_history: list[float] = []
    for _ in range(hyper.epochs):
        scores = Xs @ w
        loss_history.append(
            pairwise_loss(scores, groups) + hyper.l2 * float(w @ w)
        )
        g_s, _ = _pairwise_grad_hess(scores, groups)
        grad = Xs.T @ g_s + 2.0 * hyper.l2 * w
        w -= hyper.learning_rate * grad
    meta = TrainingMeta(
        seed=seed, rounds=hyper.epochs, train_loss_history=loss_history
    )
    return RankModel(
        kind=KIND_LINEAR,
        schema=schema if schema is not None else _schema_stub(X.shape[1]),
        params={
            "weights": w.tolist(),
            "mean": mean.tolist(),
            "scale": scale.tolist(),
            "learning_rate": hyper.learning_rate,
            "l2": hyper.l2,
        },
        meta=meta,
    )


def pairwise_linear_gradient(
    instances: Sequence[RankingInstance], weights: np.ndarray, l2: float = 0.0
) -> np.ndarray:
    """Analytic gradient of the pairwise loss at ``weights`` (raw features).

    Exposed so the finite-difference check in the test suite exercises exactly
    the expression the trainer uses.
    """
    X = np.vstack([inst.features for inst in instances])
    groups = _group_pairs(instances)
    scores = X @ np.asarray(weights, dtype=np.float64)
    g_s, _ = _pairwise_grad_hess(scores, groups)
    return X.T @ g_s + 2.0 * l2 * np.asarray(weights, dtype=np.float64)


def pairwise_loss_at(
    instances: Sequence[RankingInstance], weights: np.ndarray, l2: float = 0.0
) -> float:
    X = np.vstack([inst.features for inst in instances])
    w = np.asarray(weights, dtype=np.float64)
    return pairwise_loss(X @ w, _group_pairs(instances)) + l2 * float(w @ w)


def _schema_stub(dim: int) -> FeatureSchema:
    return FeatureSchema(
        symptom_categories=(),
        names=tuple(f"f{i}" for i in range(dim)),
    )


# -- boosted trees ------------------------------------------------------------------


def _soft_threshold(value: float, l1: float) -> float:
    if value > l1:
        return value - l1
    if value < -l1:
        return value + l1
    return 0.0


def _leaf_value(g_sum: float, h_sum: float, l1: float, l2: float) -> float:
    return -_soft_threshold(g_sum, l1) / (h_sum + l2)


def _build_tree(
    X: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    idx: np.ndarray,
    depth: int,
    hyper: BoostedHyper,
) -> dict:
    g_sum = float(g[idx].sum())
    h_sum = float(h[idx].sum())
    if depth >= hyper.max_depth or len(idx) < 2 * hyper.min_leaf:
        return {"leaf": _leaf_value(g_sum, h_sum, hyper.l1, hyper.l2)}
    parent_gain = g_sum * g_sum / (h_sum + hyper.l2)
    best = None  # (gain, feature, threshold, left_idx, right_idx)
    for f in range(X.shape[1]):
        vals = X[idx, f]
        order = np.argsort(vals, kind="stable")
        sv = vals[order]
        sg = np.cumsum(g[idx][order])
        sh = np.cumsum(h[idx][order])
        for cut in range(hyper.min_leaf - 1, len(idx) - hyper.min_leaf):
            if sv[cut] == sv[cut + 1]:
                continue
            gl, hl = sg[cut], sh[cut]
            gr, hr = g_sum - gl, h_sum - hl
            gain = (
                gl * gl / (hl + hyper.l2)
                + gr * gr / (hr + hyper.l2)
                - parent_gain
            )
            if gain > 1e-12 and (best is None or gain > best[0]):
                threshold = (sv[cut] + sv[cut + 1]) / 2.0
                best = (gain, f, threshold, order[: cut + 1], order[cut + 1 :])
    if best is None:
        return {"leaf": _leaf_value(g_sum, h_sum, hyper.l1, hyper.l2)}
    _, f, threshold, left_local, right_local = best
    return {
        "feature": f,
        "threshold": float(threshold),
        "left": _build_tree(X, g, h, idx[left_local], depth + 1, hyper),
        "right": _build_tree(X, g, h, idx[right_local], depth + 1, hyper),
    }


def _tree_predict(tree: dict, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0], dtype=np.float64)
    stack = [(tree, np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        if "leaf" in node:
            out[idx] = node["leaf"]
            continue
        mask = X[idx, node["feature"]] <= node["threshold"]
        stack.append((node["left"], idx[mask]))
        stack.append((node["right"], idx[~mask]))
    return out


def train_boosted(
    instances: Sequence[RankingInstance],
    hyper: BoostedHyper = BoostedHyper(),
    validation: Sequence[RankingInstance] = (),
    schema: FeatureSchema | None = None,
    seed: int | str | None = None,
) -> RankModel:
    """Gradient boosting on pairwise gradients with MAP@30 early stopping.

    Each round fits a depth-limited regression tree to the pairwise
    gradient/hessian pairs, scores the validation cohort, and stops once MAP@30
    has not improved for ``early_stop_patience`` rounds. The returned ensemble
    is trimmed to the best round seen.
    """
    if hyper.max_depth < 1:
        raise ConfigError("max_depth must be >= 1")
    if hyper.rounds < 1:
        raise ConfigError("rounds must be >= 1")
    if not instances:
        raise TrainingError("no training instances")
    if not validation:
        raise TrainingError("boosted training needs a validation cohort")
    X = np.vstack([inst.features for inst in instances])
    groups = _group_pairs(instances)
    if not groups:
        raise TrainingError("no patient contributes both a positive and a negative")
    Xv = np.vstack([inst.features for inst in validation])
    scores = np.zeros(X.shape[0], dtype=np.float64)
    val_scores = np.zeros(Xv.shape[0], dtype=np.float64)
    trees: list[dict] = []
    map_history: list[float] = []
    loss_history: list[float] = []
    best_map = -np.inf
    best_round = -1
    stale = 0
    all_idx = np.arange(X.shape[0])
    for _ in range(hyper.rounds):
        loss_history.append(pairwise_loss(scores, groups))
        g, h = _pairwise_grad_hess(scores, groups)
        tree = _build_tree(X, g, h, all_idx, 0, hyper)
        trees.append(tree)
        scores += hyper.learning_rate * _tree_predict(tree, X)
        val_scores += hyper.learning_rate * _tree_predict(tree, Xv)
        val_map = map_at_k(val_scores, validation, k=30)
        map_history.append(val_map)
        if val_map > best_map:
            best_map = val_map
            best_round = len(trees) - 1
            stale = 0
        else:
            stale += 1
            if stale >= hyper.early_stop_patience:
                break
    kept = trees[: best_round + 1]
    meta = TrainingMeta(
        seed=seed,
        rounds=len(trees),
        best_round=best_round,
        validation_map30=float(best_map),
        map_history=map_history,
        train_loss_history=loss_history,
    )
    return RankModel(
        kind=KIND_BOOSTED,
        schema=schema if schema is not None else _schema_stub(X.shape[1]),
        params={
            "trees": kept,
            "learning_rate": hyper.learning_rate,
            "max_depth": hyper.max_depth,
            "l1": hyper.l1,
            "l2": hyper.l2,
        },
        meta=meta,
    )


def select_model(
    candidates: Sequence[RankModel],
    validation: Sequence[RankingInstance],
    k: int = 30,
) -> RankModel:
    """Pick the candidate with the best validation MAP@k.

    Ties prefer the pairwise linear model, then earlier training order. The
    winning model's meta records the validation score used.
    """
    if not candidates:
        raise DataError("select_model needs at least one candidate model")
    scored: list[tuple[float, int, RankModel]] = []
    for i, model in enumerate(candidates):
        score = map_at_k(model, validation, k=k)
        model.meta.validation_map30 = float(score)
        scored.append((score, i, model))
    best_score = max(s for s, _, _ in scored)
    tied = [(i, m) for s, i, m in scored if s == best_score]
    for i, m in tied:
        if m.kind == KIND_LINEAR:
            return m
    return tied[0][1]


def rank_terms(
    model: RankModel,
    patient: Patient,
    candidate_terms: Sequence[str],
    term_features: dict,
) -> list[tuple[str, float]]:
    """Score candidate terms for one patient, best first, ties by term id."""
    cands = sorted(set(candidate_terms))
    if not cands:
        return []
    feats = np.vstack(
        [model.schema.vector(patient, term_features[t]) for t in cands]
    )
    scores = model.score(feats)
    order = sorted(range(len(cands)), key=lambda i: (-scores[i], cands[i]))
    return [(cands[i], float(scores[i])) for i in order]
