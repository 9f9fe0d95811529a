"""
RWR Attention Service Module

Random-walk-with-restart visited sets, Jaccard attention matrix and the
attention-aware normalized propagation operator.
"""
from .service import (
    AttentionCache,
    AttentionMatrix,
    PropagationOperator,
    attention_from_visited,
    build_attention_matrix,
    build_propagation_operator,
    compute_visited_sets,
    jaccard,
    node_rng,
    rwr_walk_positions,
    rwr_visited_set,
)

__all__ = [
    'AttentionCache',
    'AttentionMatrix',
    'PropagationOperator',
    'attention_from_visited',
    'build_attention_matrix',
    'build_propagation_operator',
    'compute_visited_sets',
    'jaccard',
    'node_rng',
    'rwr_walk_positions',
    'rwr_visited_set',
]
