"""
Evaluation Service
Full-ranking Recall@N / NDCG@N against held-out interactions, plus baseline
scorers (popularity, random) for acceptance comparisons.

Protocol: for every test user, score all items, mask the user's training
positives, rank by descending score with ties broken by ascending item index,
and compare the top N with the held-out items. NDCG uses binary gains.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import AbstractSet, Callable, Dict, List, Sequence

import numpy as np

from kgdiffrec.models import RankingSummary
from kgdiffrec.services.graph import DatasetSplit, InteractionGraph

logger = logging.getLogger(__name__)

# users -> (len(users), num_items) score matrix
Scorer = Callable[[np.ndarray], np.ndarray]


def recall_at_n(ranked: Sequence[int], relevant: AbstractSet[int], n: int) -> float:
    """
    |top-N ∩ relevant| / |relevant|

    Returns 0.0 for an empty relevant set (evaluate skips such users).
    """
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    if not relevant:
        return 0.0
    hits = sum(1 for item in ranked[:n] if item in relevant)
    return hits / len(relevant)


def ndcg_at_n(ranked: Sequence[int], relevant: AbstractSet[int], n: int) -> float:
    """
    DCG@N with gain 1 and discount 1/log2(rank + 1), divided by the ideal
    DCG of min(|relevant|, N) relevant items

    Returns 0.0 for an empty relevant set.
    """
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(rank + 2) for rank, item in enumerate(ranked[:n]) if item in relevant)
    ideal = sum(1.0 / math.log2(rank + 2) for rank in range(min(len(relevant), n)))
    return dcg / ideal


def rank_items(scores: np.ndarray, exclude: np.ndarray, n: int) -> List[int]:
    """
    Top-n item indices by descending score, excluding `exclude`; ties go to
    the lower item index
    """
    excluded = np.zeros(scores.shape[0], dtype=bool)
    excluded[np.asarray(exclude, dtype=np.int64)] = True
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind='stable')
    return [int(item) for item in order[~excluded[order]][:n]]


@dataclass
class RankingResult:
    """
    Per-user rankings and metrics of one evaluation

    Fields:
        top_n: Cutoff N
        ranked: user -> top-N items (training positives masked)
        recall: user -> Recall@N
        ndcg: user -> NDCG@N
    """
    top_n: int
    ranked: Dict[int, List[int]] = field(default_factory=dict)
    recall: Dict[int, float] = field(default_factory=dict)
    ndcg: Dict[int, float] = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.recall)

    @property
    def mean_recall(self) -> float:
        return float(np.mean(list(self.recall.values()))) if self.recall else 0.0

    @property
    def mean_ndcg(self) -> float:
        return float(np.mean(list(self.ndcg.values()))) if self.ndcg else 0.0

    def summary(self, name: str) -> RankingSummary:
        return RankingSummary(
            name=name, top_n=self.top_n, recall=self.mean_recall,
            ndcg=self.mean_ndcg, num_users=self.num_users,
        )


def evaluate(scorer: Scorer, split: DatasetSplit, n: int = 20, batch_size: int = 1024) -> RankingResult:
    """
    Rank all items for every test user and compute Recall@N and NDCG@N

    Args:
        scorer: Callable mapping a user index array to a score matrix
        split: Dataset split (train positives are masked, test pairs are relevant)
        n: Cutoff N
        batch_size: Users scored per scorer call
    """
    result = RankingResult(top_n=n)
    users = np.array(split.test_users, dtype=np.int64)
    relevant_by_user = split.test_items_by_user
    for start in range(0, users.shape[0], batch_size):
        batch = users[start:start + batch_size]
        scores = np.asarray(scorer(batch))
        for row, user in enumerate(batch):
            relevant = relevant_by_user[int(user)]
            if not relevant:
                continue
            ranked = rank_items(scores[row], split.train.user_items(int(user)), n)
            result.ranked[int(user)] = ranked
            result.recall[int(user)] = recall_at_n(ranked, relevant, n)
            result.ndcg[int(user)] = ndcg_at_n(ranked, relevant, n)
    logger.info(
        f"Evaluated {result.num_users} users: Recall@{n}={result.mean_recall:.4f} NDCG@{n}={result.mean_ndcg:.4f}"
    )
    return result


def baseline_popularity(graph: InteractionGraph) -> Scorer:
    """Scorer giving every user the item training degrees"""
    degrees = graph.item_degrees.astype(np.float64)

    def score(users: np.ndarray) -> np.ndarray:
        return np.tile(degrees, (len(users), 1))

    return score


def popularity_ranking(graph: InteractionGraph) -> List[int]:
    """Items by descending training degree, ties by ascending index"""
    return rank_items(graph.item_degrees.astype(np.float64), np.array([], dtype=np.int64), graph.num_items)


def baseline_random(num_items: int, seed: int = 0) -> Scorer:
    """Scorer drawing i.i.d. uniform scores from a seeded generator"""
    rng = np.random.default_rng(seed)

    def score(users: np.ndarray) -> np.ndarray:
        return rng.random((len(users), num_items))

    return score


def embedding_scorer(user_embeddings: np.ndarray, item_embeddings: np.ndarray) -> Scorer:
    """Scorer using inner products of final user and item embeddings"""
    users_matrix = np.asarray(user_embeddings, dtype=np.float64)
    items_matrix = np.asarray(item_embeddings, dtype=np.float64)

    def score(users: np.ndarray) -> np.ndarray:
        return users_matrix[users] @ items_matrix.T

    return score


def random_recall_expectation(split: DatasetSplit, n: int) -> float:
    """
    Expected mean Recall@N of a uniformly random ranking: per user,
    min(N, candidates) / candidates, where candidates excludes train positives
    """
    values = []
    for user in split.test_users:
        candidates = split.train.num_items - split.train.user_items(user).shape[0]
        values.append(min(n, candidates) / candidates if candidates else 0.0)
    return float(np.mean(values)) if values else 0.0
