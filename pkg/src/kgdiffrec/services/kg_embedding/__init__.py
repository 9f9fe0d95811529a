"""
KG Embedding Service Module

Relation-aware attention that folds entity embeddings into item embeddings.
"""
from .service import (
    KgIndex,
    RelationAwareAggregator,
    aggregate_kg,
    attention_logits,
    relation_attention,
    segment_softmax,
    triple_attention,
)

__all__ = [
    'KgIndex',
    'RelationAwareAggregator',
    'aggregate_kg',
    'attention_logits',
    'relation_attention',
    'segment_softmax',
    'triple_attention',
]
