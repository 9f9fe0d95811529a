"""
Graph Schema Definitions

Defines the immutable data structures shared by every service:
- InteractionGraph: bipartite user-item graph with binary adjacency
- KnowledgeGraph: (item, relation, entity) triples with per-item neighbor lists
- DatasetSplit: leave-n-out train graph plus held-out (user, item) pairs
- PlantedLabels: ground truth emitted by the synthetic generator

All indices are dense and 0-based. The original file tokens are kept next to
the indices so graphs can be written back in their input format.
"""
import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

import numpy as np
import scipy.sparse as sp


def _as_index_array(array: np.ndarray, width: int) -> np.ndarray:
    array = np.asarray(array, dtype=np.int64)
    if array.size == 0:
        return np.zeros((0, width), dtype=np.int64)
    return array.reshape(-1, width)


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """
    Bipartite user-item interaction graph

    Fields:
        num_users: Number of users (rows of the adjacency)
        num_items: Number of items (columns of the adjacency)
        edges: (E, 2) int64 array of (user, item) pairs, unique and lexicographically sorted
        user_tokens: Original token of each user index
        item_tokens: Original token of each item index

    Node ids for walks: users occupy 0..num_users-1 and items
    num_users..num_users+num_items-1.
    """
    num_users: int
    num_items: int
    edges: np.ndarray
    user_tokens: Tuple[str, ...] = field(default=())
    item_tokens: Tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        edges = _as_index_array(self.edges, 2)
        if edges.size:
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= self.num_users:
                raise ValueError("Edge user index out of range")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= self.num_items:
                raise ValueError("Edge item index out of range")
            edges = np.unique(edges, axis=0)
        object.__setattr__(self, 'edges', edges)
        if not self.user_tokens:
            object.__setattr__(self, 'user_tokens', tuple(str(u) for u in range(self.num_users)))
        if not self.item_tokens:
            object.__setattr__(self, 'item_tokens', tuple(str(i) for i in range(self.num_items)))
        if len(self.user_tokens) != self.num_users or len(self.item_tokens) != self.num_items:
            raise ValueError("Token tables do not match node counts")

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Binary user x item adjacency A (float64, CSR, sorted indices)"""
        data = np.ones(self.num_edges, dtype=np.float64)
        matrix = sp.csr_matrix(
            (data, (self.edges[:, 0], self.edges[:, 1])),
            shape=(self.num_users, self.num_items),
        )
        matrix.sort_indices()
        return matrix

    @cached_property
    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.num_users).astype(np.int64)

    @cached_property
    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.num_items).astype(np.int64)

    @cached_property
    def user_index(self) -> Dict[str, int]:
        return {token: idx for idx, token in enumerate(self.user_tokens)}

    @cached_property
    def item_index(self) -> Dict[str, int]:
        return {token: idx for idx, token in enumerate(self.item_tokens)}

    def user_items(self, user: int) -> np.ndarray:
        """Items the user interacted with, ascending"""
        adj = self.adjacency
        return adj.indices[adj.indptr[user]:adj.indptr[user + 1]].astype(np.int64)

    @cached_property
    def item_users_matrix(self) -> sp.csr_matrix:
        """Transposed adjacency (item x user) in CSR form"""
        matrix = self.adjacency.T.tocsr()
        matrix.sort_indices()
        return matrix

    def item_users(self, item: int) -> np.ndarray:
        """Users who interacted with the item, ascending"""
        mat = self.item_users_matrix
        return mat.indices[mat.indptr[item]:mat.indptr[item + 1]].astype(np.int64)

    @cached_property
    def bipartite_csr(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        (indptr, indices) of the symmetric (users + items) node graph

        Neighbors of a user are item node ids offset by num_users, and vice versa.
        """
        n = self.num_nodes
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1] + self.num_users])
        cols = np.concatenate([self.edges[:, 1] + self.num_users, self.edges[:, 0]])
        matrix = sp.csr_matrix((np.ones(rows.shape[0]), (rows, cols)), shape=(n, n))
        matrix.sort_indices()
        return matrix.indptr.astype(np.int64), matrix.indices.astype(np.int64)

    def with_edges(self, edges: np.ndarray) -> 'InteractionGraph':
        """A graph over the same user/item index space with a different edge set"""
        return InteractionGraph(
            num_users=self.num_users,
            num_items=self.num_items,
            edges=edges,
            user_tokens=self.user_tokens,
            item_tokens=self.item_tokens,
        )

    def content_hash(self) -> str:
        """sha256 over shape and edge set; identifies the graph for caching"""
        digest = hashlib.sha256()
        digest.update(f"{self.num_users}x{self.num_items}".encode())
        digest.update(np.ascontiguousarray(self.edges).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """
    Item-entity knowledge graph

    Fields:
        num_items: Size of the companion interaction graph's item space
        num_entities: Number of entities (|ε|)
        num_relations: Number of relation types
        triples: (K, 3) int64 array of (item, relation, entity), unique and sorted
        entity_tokens: Original token of each entity index
        relation_tokens: Original token of each relation index
        item_tokens: Item tokens of the companion interaction graph
    """
    num_items: int
    num_entities: int
    num_relations: int
    triples: np.ndarray
    entity_tokens: Tuple[str, ...] = field(default=())
    relation_tokens: Tuple[str, ...] = field(default=())
    item_tokens: Tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        triples = _as_index_array(self.triples, 3)
        if triples.size:
            if triples[:, 0].min() < 0 or triples[:, 0].max() >= self.num_items:
                raise ValueError("Triple item index out of range")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= self.num_relations:
                raise ValueError("Triple relation index out of range")
            if triples[:, 2].min() < 0 or triples[:, 2].max() >= self.num_entities:
                raise ValueError("Triple entity index out of range")
            triples = np.unique(triples, axis=0)
        object.__setattr__(self, 'triples', triples)
        if not self.entity_tokens:
            object.__setattr__(self, 'entity_tokens', tuple(str(e) for e in range(self.num_entities)))
        if not self.relation_tokens:
            object.__setattr__(self, 'relation_tokens', tuple(str(r) for r in range(self.num_relations)))
        if not self.item_tokens:
            object.__setattr__(self, 'item_tokens', tuple(str(i) for i in range(self.num_items)))

    @property
    def num_triples(self) -> int:
        return int(self.triples.shape[0])

    @property
    def items(self) -> np.ndarray:
        return self.triples[:, 0]

    @property
    def relations(self) -> np.ndarray:
        return self.triples[:, 1]

    @property
    def entities(self) -> np.ndarray:
        return self.triples[:, 2]

    @cached_property
    def _item_offsets(self) -> np.ndarray:
        counts = np.bincount(self.items, minlength=self.num_items)
        return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def neighbors(self, item: int) -> List[Tuple[int, int]]:
        """N_j as a list of (entity, relation) pairs"""
        start, stop = self._item_offsets[item], self._item_offsets[item + 1]
        block = self.triples[start:stop]
        return [(int(e), int(r)) for _, r, e in block]

    def relation_rows(self) -> np.ndarray:
        """Dense num_items x num_entities binary matrix; row j is r_j"""
        rows = np.zeros((self.num_items, self.num_entities), dtype=np.float64)
        if self.num_triples:
            rows[self.items, self.entities] = 1.0
        return rows

    def pair_relation(self) -> Dict[Tuple[int, int], int]:
        """(item, entity) -> relation of the first stored triple joining them"""
        mapping: Dict[Tuple[int, int], int] = {}
        for item, relation, entity in self.triples:
            mapping.setdefault((int(item), int(entity)), int(relation))
        return mapping

    def most_frequent_relation(self) -> int:
        """Globally most frequent relation type; ties go to the lower index"""
        if self.num_triples == 0:
            return 0
        return int(np.argmax(np.bincount(self.relations, minlength=self.num_relations)))

    def with_triples(self, triples: np.ndarray) -> 'KnowledgeGraph':
        """A KG over the same entity/relation vocabulary with a different triple set"""
        return KnowledgeGraph(
            num_items=self.num_items,
            num_entities=self.num_entities,
            num_relations=self.num_relations,
            triples=triples,
            entity_tokens=self.entity_tokens,
            relation_tokens=self.relation_tokens,
            item_tokens=self.item_tokens,
        )


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """
    Leave-n-out split of an interaction graph

    Fields:
        train: Training graph (same index space as the full graph)
        test: (P, 2) int64 array of held-out (user, item) pairs
        seed: RNG seed the split was drawn with
        holdout_per_user: Items held out per eligible user
    """
    train: InteractionGraph
    test: np.ndarray
    seed: int
    holdout_per_user: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, 'test', _as_index_array(self.test, 2))

    @cached_property
    def test_items_by_user(self) -> Dict[int, FrozenSet[int]]:
        """user -> held-out items"""
        grouped: Dict[int, set] = {}
        for user, item in self.test:
            grouped.setdefault(int(user), set()).add(int(item))
        return {user: frozenset(items) for user, items in grouped.items()}

    @property
    def test_users(self) -> List[int]:
        return sorted(self.test_items_by_user)


@dataclass(frozen=True, eq=False)
class PlantedLabels:
    """
    Ground truth of a synthetic dataset

    Fields:
        triple_labels: bool per KG triple (aligned with KnowledgeGraph.triples); True = relevant
        user_cluster: Cluster of each user (None when loaded from a labels file)
        item_cluster: Cluster of each item (None when loaded from a labels file)
        entity_cluster: Cluster pool of each entity (None when loaded from a labels file)
        relevant_pairs: (item, entity) pairs labeled relevant
    """
    triple_labels: np.ndarray
    relevant_pairs: FrozenSet[Tuple[int, int]]
    user_cluster: Optional[np.ndarray] = None
    item_cluster: Optional[np.ndarray] = None
    entity_cluster: Optional[np.ndarray] = None

    @property
    def num_relevant(self) -> int:
        return int(np.count_nonzero(self.triple_labels))

    @property
    def num_noise(self) -> int:
        return int(self.triple_labels.shape[0] - self.num_relevant)

    def is_relevant(self, item: int, entity: int) -> bool:
        """Whether (item, entity) was planted as a relevant triple"""
        return (item, entity) in self.relevant_pairs

    def in_pool(self, item: int, entity: int) -> bool:
        """
        Whether entity belongs to the cluster pool of item

        Raises:
            ValueError: If the labels carry no cluster assignments
        """
        if self.item_cluster is None or self.entity_cluster is None:
            raise ValueError("Cluster assignments are only known for generated datasets")
        return bool(self.item_cluster[item] == self.entity_cluster[entity])

    def precision(self, kg: KnowledgeGraph) -> float:
        """Fraction of a KG's (item, entity) pairs labeled relevant"""
        pairs = _item_entity_pairs(kg)
        if not pairs:
            return 0.0
        return sum(self.is_relevant(j, e) for j, e in pairs) / len(pairs)

    def pool_precision(self, kg: KnowledgeGraph) -> float:
        """
        Fraction of a KG's (item, entity) pairs whose entity is in the item's cluster pool

        Counts pool entities never linked to the item as hits, so it can only
        be read alongside precision().

        Raises:
            ValueError: If the labels carry no cluster assignments
        """
        pairs = _item_entity_pairs(kg)
        if not pairs:
            return 0.0
        return sum(self.in_pool(j, e) for j, e in pairs) / len(pairs)


def _item_entity_pairs(kg: KnowledgeGraph) -> Set[Tuple[int, int]]:
    return {(int(j), int(e)) for j, _, e in kg.triples}
