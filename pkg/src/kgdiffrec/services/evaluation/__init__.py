"""
Evaluation Service Module

Ranking metrics, full-ranking evaluation and baseline scorers.
"""
from .service import (
    RankingResult,
    Scorer,
    baseline_popularity,
    baseline_random,
    embedding_scorer,
    evaluate,
    ndcg_at_n,
    popularity_ranking,
    random_recall_expectation,
    rank_items,
    recall_at_n,
)

__all__ = [
    'RankingResult',
    'Scorer',
    'baseline_popularity',
    'baseline_random',
    'embedding_scorer',
    'evaluate',
    'ndcg_at_n',
    'popularity_ranking',
    'random_recall_expectation',
    'rank_items',
    'recall_at_n',
]
