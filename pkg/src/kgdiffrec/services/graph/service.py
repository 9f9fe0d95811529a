"""
Graph Service
Loads, validates, indexes, splits and synthesizes interaction graphs and
item-entity knowledge graphs.

File formats (UTF-8, tab separated, lines starting with `#` are comments):
    interactions: user<TAB>item
    knowledge graph: item<TAB>relation<TAB>entity
    labels: item<TAB>entity<TAB>{relevant|noise}
"""
import logging
import os
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

from kgdiffrec.config import Config
from kgdiffrec.errors import DataFormatError, EmptyGraphError, KnowledgeGraphReferenceError
from kgdiffrec.models import SyntheticSpec
from kgdiffrec.services.graph.schemas import (
    DatasetSplit, InteractionGraph, KnowledgeGraph, PlantedLabels
)

logger = logging.getLogger(__name__)

LABEL_RELEVANT = 'relevant'
LABEL_NOISE = 'noise'


def _token_sort_key(tokens: Sequence[str]) -> Tuple[str, ...]:
    """Dense index order: numeric when every token is an integer, lexicographic otherwise"""
    try:
        return tuple(sorted(set(tokens), key=int))
    except ValueError:
        return tuple(sorted(set(tokens)))


def _read_records(path: str, width: int) -> Iterator[Tuple[int, List[str]]]:
    """
    Yield (line_number, fields) for every non-blank, non-comment line

    A line is a comment only when its first non-blank character is `#`.
    Fields are split on Config.FIELD_SEPARATOR alone, so tokens may hold
    spaces or `#`; surrounding whitespace of each field is dropped.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Data file not found: {path}")
    with open(path, 'r', encoding='utf-8') as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.rstrip('\r\n')
            if not line.strip() or line.lstrip().startswith(Config.COMMENT_PREFIX):
                continue
            fields = [token.strip() for token in line.split(Config.FIELD_SEPARATOR)]
            if len(fields) != width or not all(fields):
                raise DataFormatError(
                    f"expected {width} non-empty fields, found {line!r}",
                    path=path, line_number=line_number,
                )
            yield line_number, fields


def build_interaction_graph(pairs: Sequence[Tuple[str, str]], source: str = '<memory>') -> InteractionGraph:
    """
    Index (user token, item token) pairs into an InteractionGraph

    Duplicate pairs are dropped with a warning.

    Raises:
        EmptyGraphError: If no pairs are given
    """
    if not pairs:
        raise EmptyGraphError(f"No interactions in {source}")

    user_tokens = _token_sort_key([u for u, _ in pairs])
    item_tokens = _token_sort_key([i for _, i in pairs])
    user_index = {token: idx for idx, token in enumerate(user_tokens)}
    item_index = {token: idx for idx, token in enumerate(item_tokens)}

    edges = np.array([(user_index[u], item_index[i]) for u, i in pairs], dtype=np.int64)
    unique = np.unique(edges, axis=0)
    duplicates = edges.shape[0] - unique.shape[0]
    if duplicates:
        logger.warning(f"Dropped {duplicates} duplicate interaction(s) from {source}")

    graph = InteractionGraph(
        num_users=len(user_tokens),
        num_items=len(item_tokens),
        edges=unique,
        user_tokens=user_tokens,
        item_tokens=item_tokens,
    )
    logger.info(f"Loaded {graph.num_users} users, {graph.num_items} items, {graph.num_edges} edges from {source}")
    return graph


def load_interactions(path: str) -> InteractionGraph:
    """
    Load a user<TAB>item edge list

    Args:
        path: Interaction file

    Returns:
        InteractionGraph with contiguous re-indexed users and items

    Raises:
        DataFormatError: On a malformed line (message carries the line number)
        EmptyGraphError: If the file holds no interactions
    """
    pairs = [(fields[0], fields[1]) for _, fields in _read_records(path, 2)]
    return build_interaction_graph(pairs, source=path)


def build_knowledge_graph(
    triples: Sequence[Tuple[str, str, str]],
    graph: InteractionGraph,
    source: str = '<memory>',
    line_numbers: Sequence[int] = (),
) -> KnowledgeGraph:
    """
    Index (item token, relation token, entity token) triples against a graph's items

    Unknown relation and entity tokens are allocated new indices. Duplicate
    triples are dropped with a warning.

    Raises:
        KnowledgeGraphReferenceError: If an item token is not an item of the graph
    """
    item_index = graph.item_index
    for position, (item, _, _) in enumerate(triples):
        if item not in item_index:
            line = line_numbers[position] if line_numbers else None
            where = f" (line {line})" if line is not None else ''
            raise KnowledgeGraphReferenceError(f"{source}{where}: item {item!r} is not in the interaction graph")

    relation_tokens = _token_sort_key([r for _, r, _ in triples])
    entity_tokens = _token_sort_key([e for _, _, e in triples])
    relation_index = {token: idx for idx, token in enumerate(relation_tokens)}
    entity_index = {token: idx for idx, token in enumerate(entity_tokens)}

    indexed = np.array(
        [(item_index[i], relation_index[r], entity_index[e]) for i, r, e in triples],
        dtype=np.int64,
    ).reshape(-1, 3)
    unique = np.unique(indexed, axis=0) if indexed.size else indexed
    duplicates = indexed.shape[0] - unique.shape[0]
    if duplicates:
        logger.warning(f"Dropped {duplicates} duplicate triple(s) from {source}")

    kg = KnowledgeGraph(
        num_items=graph.num_items,
        num_entities=len(entity_tokens),
        num_relations=len(relation_tokens),
        triples=unique,
        entity_tokens=entity_tokens,
        relation_tokens=relation_tokens,
        item_tokens=graph.item_tokens,
    )
    logger.info(
        f"Loaded {kg.num_triples} triples over {kg.num_entities} entities and "
        f"{kg.num_relations} relations from {source}"
    )
    return kg


def load_kg(path: str, graph: InteractionGraph) -> KnowledgeGraph:
    """
    Load an item<TAB>relation<TAB>entity triple file

    Args:
        path: KG file
        graph: Companion interaction graph; item tokens must belong to it

    Returns:
        KnowledgeGraph with per-item neighbor lists

    Raises:
        DataFormatError: On a malformed line
        KnowledgeGraphReferenceError: On an item the graph does not contain
    """
    records = list(_read_records(path, 3))
    triples = [(fields[0], fields[1], fields[2]) for _, fields in records]
    return build_knowledge_graph(triples, graph, source=path, line_numbers=[n for n, _ in records])


def load_labels(path: str, kg: KnowledgeGraph) -> PlantedLabels:
    """
    Load an item<TAB>entity<TAB>{relevant|noise} labels file against a KG

    Raises:
        DataFormatError: On a malformed line or unknown label
        KnowledgeGraphReferenceError: On an item/entity token the KG does not know
    """
    item_index = {token: idx for idx, token in enumerate(kg.item_tokens)}
    entity_index = {token: idx for idx, token in enumerate(kg.entity_tokens)}
    labels: Dict[Tuple[int, int], bool] = {}
    for line_number, (item, entity, label) in _read_records(path, 3):
        if label not in (LABEL_RELEVANT, LABEL_NOISE):
            raise DataFormatError(f"unknown label {label!r}", path=path, line_number=line_number)
        if item not in item_index or entity not in entity_index:
            raise KnowledgeGraphReferenceError(f"{path} (line {line_number}): unknown item or entity")
        labels[(item_index[item], entity_index[entity])] = label == LABEL_RELEVANT

    triple_labels = np.array(
        [labels.get((int(j), int(e)), False) for j, _, e in kg.triples], dtype=bool
    )
    relevant = frozenset(pair for pair, is_relevant in labels.items() if is_relevant)
    return PlantedLabels(triple_labels=triple_labels, relevant_pairs=relevant)


def save_interactions(graph: InteractionGraph, path: str) -> None:
    """Write the graph as a user<TAB>item edge list using the original tokens"""
    sep = Config.FIELD_SEPARATOR
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"# user{sep}item\n")
        for user, item in graph.edges:
            handle.write(f"{graph.user_tokens[user]}{sep}{graph.item_tokens[item]}\n")


def save_kg(kg: KnowledgeGraph, path: str) -> None:
    """Write the KG as item<TAB>relation<TAB>entity lines using the original tokens"""
    sep = Config.FIELD_SEPARATOR
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"# item{sep}relation{sep}entity\n")
        for item, relation, entity in kg.triples:
            handle.write(
                f"{kg.item_tokens[item]}{sep}{kg.relation_tokens[relation]}{sep}{kg.entity_tokens[entity]}\n"
            )


def save_labels(kg: KnowledgeGraph, labels: PlantedLabels, path: str) -> None:
    """Write one labels line per KG triple"""
    sep = Config.FIELD_SEPARATOR
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"# item{sep}entity{sep}label\n")
        for (item, _, entity), relevant in zip(kg.triples, labels.triple_labels):
            label = LABEL_RELEVANT if relevant else LABEL_NOISE
            handle.write(f"{kg.item_tokens[item]}{sep}{kg.entity_tokens[entity]}{sep}{label}\n")


def split_train_test(graph: InteractionGraph, holdout_per_user: int = 1, seed: int = 2024) -> DatasetSplit:
    """
    Leave-n-out split: hold out `holdout_per_user` random items of every user
    whose degree exceeds it

    Users with degree <= holdout_per_user keep all their edges in train and
    contribute no test pairs.

    Raises:
        ValueError: If holdout_per_user < 1
    """
    if holdout_per_user < 1:
        raise ValueError(f"holdout_per_user must be >= 1, got {holdout_per_user}")

    rng = np.random.default_rng(seed)
    keep = np.ones(graph.num_edges, dtype=bool)
    adj = graph.adjacency
    test_pairs: List[Tuple[int, int]] = []
    skipped = 0
    # edges are sorted by (user, item), matching CSR row order
    for user in range(graph.num_users):
        start, stop = adj.indptr[user], adj.indptr[user + 1]
        if stop - start <= holdout_per_user:
            skipped += 1
            continue
        chosen = rng.choice(np.arange(start, stop), size=holdout_per_user, replace=False)
        keep[chosen] = False
        test_pairs.extend((user, int(graph.edges[pos, 1])) for pos in np.sort(chosen))

    if skipped:
        logger.warning(f"{skipped} user(s) with degree <= {holdout_per_user} contribute no test pairs")

    return DatasetSplit(
        train=graph.with_edges(graph.edges[keep]),
        test=np.array(test_pairs, dtype=np.int64),
        seed=seed,
        holdout_per_user=holdout_per_user,
    )


def _contiguous_clusters(count: int, num_clusters: int) -> np.ndarray:
    return (np.arange(count, dtype=np.int64) * num_clusters) // count


def generate_synthetic(spec: SyntheticSpec) -> Tuple[InteractionGraph, KnowledgeGraph, PlantedLabels]:
    """
    Generate a planted-structure dataset

    Users, items and entities are split into `num_clusters` contiguous blocks.
    A same-cluster user/item pair interacts with probability
    intra_cluster_prob, any other pair with noise_edge_prob; nodes left
    isolated get one same-cluster edge so the files re-load onto the same
    index space. Each item links to relevant_relations_per_item entities of its
    cluster pool (labeled relevant) and noise_relations_per_item entities
    outside it (labeled noise), with uniformly drawn relation types.

    Returns:
        (interaction graph, knowledge graph, planted labels)
    """
    rng = np.random.default_rng(spec.seed)
    user_cluster = _contiguous_clusters(spec.num_users, spec.num_clusters)
    item_cluster = _contiguous_clusters(spec.num_items, spec.num_clusters)
    entity_cluster = _contiguous_clusters(spec.num_entities, spec.num_clusters)

    same = user_cluster[:, None] == item_cluster[None, :]
    probs = np.where(same, spec.intra_cluster_prob, spec.noise_edge_prob)
    dense = rng.random((spec.num_users, spec.num_items)) < probs

    all_items = np.arange(spec.num_items)
    for user in np.flatnonzero(~dense.any(axis=1)):
        candidates = all_items[item_cluster == user_cluster[user]]
        dense[user, rng.choice(candidates if candidates.size else all_items)] = True
    all_users = np.arange(spec.num_users)
    for item in np.flatnonzero(~dense.any(axis=0)):
        candidates = all_users[user_cluster == item_cluster[item]]
        dense[rng.choice(candidates if candidates.size else all_users), item] = True

    users, items = np.nonzero(dense)
    graph = build_interaction_graph(
        [(str(u), str(i)) for u, i in zip(users, items)], source='synthetic'
    )

    all_entities = np.arange(spec.num_entities)
    raw_triples: List[Tuple[str, str, str]] = []
    raw_labels: Dict[Tuple[int, int], bool] = {}
    for item in range(spec.num_items):
        in_pool = entity_cluster == item_cluster[item]
        relevant = rng.choice(all_entities[in_pool], size=spec.relevant_relations_per_item, replace=False)
        outside = all_entities[~in_pool]
        if outside.size == 0:
            outside = np.setdiff1d(all_entities, relevant)
        noise = rng.choice(outside, size=spec.noise_relations_per_item, replace=False)
        relations = rng.integers(0, spec.num_relations, size=relevant.size + noise.size)
        for entity, relation, is_relevant in zip(
                np.concatenate([relevant, noise]), relations,
                [True] * relevant.size + [False] * noise.size):
            raw_triples.append((str(item), str(relation), str(entity)))
            raw_labels[(item, int(entity))] = is_relevant

    kg = build_knowledge_graph(raw_triples, graph, source='synthetic')

    # map raw ids onto the (possibly compacted) dense vocabularies
    item_raw = np.array([int(t) for t in graph.item_tokens], dtype=np.int64)
    user_raw = np.array([int(t) for t in graph.user_tokens], dtype=np.int64)
    entity_raw = np.array([int(t) for t in kg.entity_tokens], dtype=np.int64)
    triple_labels = np.array(
        [raw_labels[(int(item_raw[j]), int(entity_raw[e]))] for j, _, e in kg.triples], dtype=bool
    )
    relevant_pairs = frozenset(
        (int(j), int(e)) for (j, _, e), flag in zip(kg.triples, triple_labels) if flag
    )
    labels = PlantedLabels(
        triple_labels=triple_labels,
        relevant_pairs=relevant_pairs,
        user_cluster=user_cluster[user_raw],
        item_cluster=item_cluster[item_raw],
        entity_cluster=entity_cluster[entity_raw],
    )
    logger.info(
        f"Generated synthetic dataset: {graph.num_edges} interactions, "
        f"{labels.num_relevant} relevant / {labels.num_noise} noise triples"
    )
    return graph, kg, labels


def write_dataset(
    graph: InteractionGraph, kg: KnowledgeGraph, labels: PlantedLabels, output_dir: str
) -> Dict[str, str]:
    """
    Write interactions.tsv, kg.tsv and labels.tsv into output_dir

    Returns:
        Mapping of file kind to written path
    """
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        'interactions': os.path.join(output_dir, 'interactions.tsv'),
        'kg': os.path.join(output_dir, 'kg.tsv'),
        'labels': os.path.join(output_dir, 'labels.tsv'),
    }
    save_interactions(graph, paths['interactions'])
    save_kg(kg, paths['kg'])
    save_labels(kg, labels, paths['labels'])
    return paths
