"""Top-K ranking evaluation, popularity baselines, and ablation variants.

Metrics use binary relevance: recall = hits/|relevant|, precision = hits/K,
hit ratio = 1 if any hit, NDCG = DCG/IDCG with 1/log2(rank+1) gains and IDCG
truncated at min(K, |relevant|). Ties in scores break by ascending game id so
every reported number is deterministic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Protocol

import numpy as np

from .context_graph import ContextGraph
from .data import Dataset, Split
from .model import ForwardConfig, FusionWeights, ModelState, ServingForward, SocialGraph, UserItemIndex

CUTOFFS = (5, 10, 20)
METRIC_NAMES = ("ndcg", "recall", "hit_ratio", "precision")


class Recommender(Protocol):
    """Deterministic scorer: one score per catalog game for a given user."""

    game_ids: np.ndarray

    def scores_for(self, user_id: int) -> np.ndarray: ...


class PopularityRecommender:
    """Static popularity scores, identical ranking for every user."""

    def __init__(self, game_ids: np.ndarray, scores: np.ndarray, name: str):
        self.game_ids = game_ids
        self.name = name
        self._scores = scores

    def scores_for(self, user_id: int) -> np.ndarray:
        return self._scores


class ModelRecommender:
    """Wraps a frozen model forward pass; optionally retains what is needed to
    retrain ablation variants from scratch."""

    def __init__(
        self,
        state: ModelState,
        graph: ContextGraph,
        social: SocialGraph,
        index: UserItemIndex,
        config: ForwardConfig,
        training_inputs: dict | None = None,
    ):
        self.state = state
        self.graph = graph
        self.social = social
        self.index = index
        self.config = config
        self.training_inputs = training_inputs
        self.game_ids = index.game_ids
        self._serve = ServingForward.compute(state, graph, social, index, config)

    def scores_for(self, user_id: int) -> np.ndarray:
        return self._serve.scores_for(self.index.user_index(user_id))


def popularity_baseline(train: Dataset, mode: str) -> PopularityRecommender:
    """'count' ranks by distinct engaged users, 'time' by summed minutes."""
    if mode not in ("count", "time"):
        raise ValueError("mode must be 'count' or 'time'")
    codes = np.searchsorted(train.catalog_games, train.eng_game)
    if mode == "count":
        scores = np.bincount(codes, minlength=train.n_games).astype(np.float64)
    else:
        scores = np.bincount(codes, weights=train.eng_minutes, minlength=train.n_games)
    return PopularityRecommender(train.catalog_games, scores, f"popularity_{mode}")


# ------------------------------------------------------------------- ranking


def rank_for_user(rec: Recommender, user_id: int, exclude: Iterable[int], k: int) -> np.ndarray:
    """Top-k game ids by descending score after removing ``exclude``.

    Ties break by ascending game id; if fewer than k candidates remain, the
    shorter list is returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = rec.scores_for(user_id)
    ids = rec.game_ids
    exclude_arr = np.fromiter((int(g) for g in exclude), dtype=np.uint64)
    keep = ~np.isin(ids, exclude_arr) if exclude_arr.size else np.ones(ids.size, dtype=bool)
    cand_ids = ids[keep]
    cand_scores = scores[keep]
    order = np.lexsort((cand_ids, -cand_scores))
    return cand_ids[order[:k]]


def rank_metrics(
    ranked: np.ndarray, relevant: Iterable[int], k: int
) -> tuple[float, float, float, float]:
    """(ndcg, recall, hit, precision) of a ranked list at cutoff ``k``."""
    relevant_set = {int(g) for g in relevant}
    if not relevant_set:
        raise ValueError("relevant set must be non-empty")
    top = [int(g) for g in ranked[:k]]
    hit_positions = [p for p, g in enumerate(top, start=1) if g in relevant_set]
    n_hits = len(hit_positions)
    dcg = sum(1.0 / math.log2(p + 1) for p in hit_positions)
    idcg = sum(1.0 / math.log2(p + 1) for p in range(1, min(k, len(relevant_set)) + 1))
    ndcg = dcg / idcg
    recall = n_hits / len(relevant_set)
    precision = n_hits / k
    hit = 1.0 if n_hits else 0.0
    return ndcg, recall, hit, precision


@dataclass(frozen=True)
class MetricsReport:
    """Mean per-user metrics at each cutoff."""

    ndcg: dict[int, float]
    recall: dict[int, float]
    hit_ratio: dict[int, float]
    precision: dict[int, float]
    users_evaluated: int
    users_skipped: int

    def to_dict(self) -> dict:
        out: dict = {}
        for name in METRIC_NAMES:
            values = getattr(self, name)
            for k in CUTOFFS:
                out[f"{name}@{k}"] = values[k]
        out["users_evaluated"] = self.users_evaluated
        out["users_skipped"] = self.users_skipped
        return out


def evaluate(rec: Recommender, split: Split, phase: str, threads: int = 1) -> MetricsReport:
    """Mean metrics over eval users with a non-empty held-out set.

    Candidates exclude the user's train games; at test time validation games
    are excluded as well.
    """
    if phase not in ("validation", "test"):
        raise ValueError("phase must be 'validation' or 'test'")
    users = [int(u) for u in split.eval_users]
    max_k = max(CUTOFFS)
    rows = np.full((len(users), len(CUTOFFS) * 4), np.nan)

    def work(idx: int) -> None:
        u = users[idx]
        relevant = split.relevant_games(phase, u)
        if relevant.size == 0:
            return
        train_games, _ = split.train.user_games(u)
        exclude = train_games
        if phase == "test":
            exclude = np.concatenate((train_games, split.relevant_games("validation", u)))
        ranked = rank_for_user(rec, u, exclude, max_k)
        vals = []
        for k in CUTOFFS:
            vals.extend(rank_metrics(ranked, relevant, k))
        rows[idx] = vals

    if threads > 1 and len(users) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(users))))
    else:
        for idx in range(len(users)):
            work(idx)

    valid = ~np.isnan(rows[:, 0]) if users else np.zeros(0, dtype=bool)
    n_valid = int(valid.sum())
    means = rows[valid].mean(axis=0) if n_valid else np.zeros(len(CUTOFFS) * 4)
    ndcg, recall, hit, precision = {}, {}, {}, {}
    for pos, k in enumerate(CUTOFFS):
        ndcg[k], recall[k], hit[k], precision[k] = (float(v) for v in means[pos * 4 : pos * 4 + 4])
    return MetricsReport(
        ndcg=ndcg,
        recall=recall,
        hit_ratio=hit,
        precision=precision,
        users_evaluated=n_valid,
        users_skipped=len(users) - n_valid,
    )


# ----------------------------------------------------------------- ablations

ABLATION_VARIANTS = ("A", "B", "C")


def ablation_config(base: ForwardConfig, variant: str) -> ForwardConfig:
    """Forward configuration of an ablation variant.

    A removes the social pathway, B removes the context pathway, C removes
    both; removed fusion mass goes to the self weight.
    """
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    fusion = base.fusion
    if variant == "A":
        return ForwardConfig(
            fusion=FusionWeights(context=fusion.context, social=0.0),
            use_context=base.use_context,
            use_social=False,
            normalization=base.normalization,
            leaky_slope=base.leaky_slope,
        )
    if variant == "B":
        return ForwardConfig(
            fusion=FusionWeights(context=0.0, social=fusion.social),
            use_context=False,
            use_social=base.use_social,
            normalization=base.normalization,
            leaky_slope=base.leaky_slope,
        )
    return ForwardConfig(
        fusion=FusionWeights(context=0.0, social=0.0),
        use_context=False,
        use_social=False,
        normalization=base.normalization,
        leaky_slope=base.leaky_slope,
    )


def ablation_variant(full: ModelRecommender, variant: str) -> ModelRecommender:
    """Retrain the given model from scratch with a pathway removed.

    Requires ``full`` to have been built with its training inputs retained.
    """
    if full.training_inputs is None:
        raise ValueError("full model recommender lacks retraining inputs")
    from .training import train  # late import; training depends on this module

    inputs = full.training_inputs
    config = ablation_config(full.config, variant)
    state, _ = train(
        inputs["split"],
        full.graph,
        full.social,
        full.index,
        inputs["hyperparams"],
        forward=config,
        threads=inputs.get("threads", 1),
    )
    return ModelRecommender(state, full.graph, full.social, full.index, config, training_inputs=inputs)


# --------------------------------------------------------------------- output


def metrics_to_json_dict(reports: dict[str, dict[str, MetricsReport]]) -> dict:
    """{phase: {method: flat metric dict}} with stable ordering."""
    return {
        phase: {method: report.to_dict() for method, report in methods.items()}
        for phase, methods in reports.items()
    }


def metrics_to_csv(reports: dict[str, dict[str, MetricsReport]]) -> str:
    header = ["phase", "method"]
    for name in METRIC_NAMES:
        header.extend(f"{name}@{k}" for k in CUTOFFS)
    header.extend(["users_evaluated", "users_skipped"])
    lines = [",".join(header)]
    for phase, methods in reports.items():
        for method, report in methods.items():
            row = [phase, method]
            for name in METRIC_NAMES:
                values = getattr(report, name)
                row.extend(repr(values[k]) for k in CUTOFFS)
            row.append(str(report.users_evaluated))
            row.append(str(report.users_skipped))
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"
