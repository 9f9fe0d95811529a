"""
KG Embedding Service
Relation-aware aggregation of entity embeddings into knowledge-enhanced item
embeddings:

    a(e, r, j) = softmax_{e in N_j} LeakyReLU( r^T W [z_e || z_j] )
    z_j'       = Norm( z_j + sum_{e in N_j} a(e, r, j) z_e )

Norm is row-wise L2 normalization; zero rows stay zero.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from kgdiffrec.services.graph import KnowledgeGraph

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class KgIndex:
    """
    Triple columns of a knowledge graph as torch index tensors

    Fields:
        items: (K,) item index of each triple
        relations: (K,) relation index of each triple
        entities: (K,) entity index of each triple
        num_items: Size of the item space
    """
    items: torch.Tensor
    relations: torch.Tensor
    entities: torch.Tensor
    num_items: int

    @classmethod
    def from_kg(cls, kg: KnowledgeGraph, device: str = 'cpu') -> 'KgIndex':
        return cls.from_arrays(kg.items, kg.relations, kg.entities, kg.num_items, device=device)

    @classmethod
    def from_arrays(
        cls, items: np.ndarray, relations: np.ndarray, entities: np.ndarray, num_items: int, device: str = 'cpu'
    ) -> 'KgIndex':
        def as_long(values: np.ndarray) -> torch.Tensor:
            return torch.as_tensor(np.asarray(values, dtype=np.int64), device=device)
        return cls(as_long(items), as_long(relations), as_long(entities), num_items)

    @property
    def num_triples(self) -> int:
        return int(self.items.shape[0])


def segment_softmax(logits: torch.Tensor, segments: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of `logits` within groups sharing the same `segments` id"""
    seg_max = torch.full((num_segments,), float('-inf'), dtype=logits.dtype, device=logits.device)
    seg_max = seg_max.scatter_reduce(0, segments, logits.detach(), reduce='amax', include_self=True)
    exp = torch.exp(logits - seg_max[segments])
    denom = torch.zeros(num_segments, dtype=logits.dtype, device=logits.device).index_add(0, segments, exp)
    return exp / denom[segments]


def attention_logits(
    weight: torch.Tensor,
    entity_table: torch.Tensor,
    relation_table: torch.Tensor,
    item_table: torch.Tensor,
    index: KgIndex,
) -> torch.Tensor:
    """Unnormalized relevance LeakyReLU(r^T W [z_e || z_j]) of every triple"""
    pair = torch.cat([entity_table[index.entities], item_table[index.items]], dim=-1)
    projected = pair @ weight.T
    score = (relation_table[index.relations] * projected).sum(dim=-1)
    return F.leaky_relu(score, negative_slope=LEAKY_SLOPE)


def triple_attention(
    weight: torch.Tensor,
    entity_table: torch.Tensor,
    relation_table: torch.Tensor,
    item_table: torch.Tensor,
    index: KgIndex,
) -> torch.Tensor:
    """Attention weight of every triple; weights of one item's triples sum to 1"""
    logits = attention_logits(weight, entity_table, relation_table, item_table, index)
    return segment_softmax(logits, index.items, index.num_items)


def aggregate_kg(
    weight: torch.Tensor,
    entity_table: torch.Tensor,
    relation_table: torch.Tensor,
    item_table: torch.Tensor,
    index: KgIndex,
) -> torch.Tensor:
    """
    Knowledge-enhanced item table

    Items without KG neighbors get Norm(z_j).

    Returns:
        num_items x d tensor with unit (or zero) rows
    """
    if index.num_triples == 0:
        return F.normalize(item_table, p=2, dim=1)
    weights = triple_attention(weight, entity_table, relation_table, item_table, index)
    messages = weights.unsqueeze(-1) * entity_table[index.entities]
    aggregated = item_table.index_add(0, index.items, messages)
    return F.normalize(aggregated, p=2, dim=1)


def relation_attention(
    item: int,
    weight: torch.Tensor,
    entity_table: torch.Tensor,
    relation_table: torch.Tensor,
    item_table: torch.Tensor,
    kg: KnowledgeGraph,
) -> Optional[torch.Tensor]:
    """
    Attention weights over N_j, in the order of kg.neighbors(item)

    Returns:
        Tensor of weights summing to 1, or None when the item has no KG neighbors
    """
    neighbors = kg.neighbors(item)
    if not neighbors:
        return None
    entities = np.array([e for e, _ in neighbors], dtype=np.int64)
    relations = np.array([r for _, r in neighbors], dtype=np.int64)
    items = np.full(len(neighbors), item, dtype=np.int64)
    index = KgIndex.from_arrays(items, relations, entities, kg.num_items, device=str(item_table.device))
    logits = attention_logits(weight, entity_table, relation_table, item_table, index)
    return torch.softmax(logits, dim=0)


class RelationAwareAggregator(nn.Module):
    """
    Holds the attention projection W (d x 2d) and applies aggregate_kg

    Entity and relation tables belong to the recommender so that the main and
    contrastive views share them.
    """

    def __init__(self, dim: int, init_std: float = 0.1, generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(torch.randn(dim, 2 * dim, generator=generator, dtype=dtype) * init_std)

    def forward(
        self,
        entity_table: torch.Tensor,
        relation_table: torch.Tensor,
        item_table: torch.Tensor,
        index: KgIndex,
    ) -> torch.Tensor:
        return aggregate_kg(self.weight, entity_table, relation_table, item_table, index)
