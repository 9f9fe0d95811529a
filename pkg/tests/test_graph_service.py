"""
Test suite for Graph Service
"""
import itertools
import logging
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from kgdiffrec.errors import DataFormatError, EmptyGraphError, KnowledgeGraphReferenceError  # noqa: E402
from kgdiffrec.models import SyntheticSpec  # noqa: E402
from kgdiffrec.services.graph import (  # noqa: E402
    KnowledgeGraph,
    build_interaction_graph,
    build_knowledge_graph,
    generate_synthetic,
    load_interactions,
    load_kg,
    load_labels,
    split_train_test,
    write_dataset,
)


def _write(path, text: str) -> str:
    path.write_text(text, encoding='utf-8')
    return str(path)


def test_singleton_graph() -> None:
    """A single (0, 0) line gives one user, one item and one edge"""
    graph = build_interaction_graph([('0', '0')])
    assert graph.num_users == 1
    assert graph.num_items == 1
    assert graph.num_edges == 1
    assert graph.adjacency.toarray().tolist() == [[1.0]]


def test_duplicate_edges_dropped_with_warning(tmp_path, caplog) -> None:
    """Three lines with one repeat give two edges and a warning"""
    path = _write(tmp_path / 'interactions.tsv', "0\t0\n0\t1\n0\t0\n")
    with caplog.at_level(logging.WARNING):
        graph = load_interactions(path)
    assert graph.num_edges == 2
    assert 'duplicate' in caplog.text


def test_tokens_are_reindexed() -> None:
    """Integer tokens sort numerically, others lexicographically"""
    graph = build_interaction_graph([('10', 'b'), ('2', 'a'), ('10', 'a')])
    assert graph.user_tokens == ('2', '10')
    assert graph.item_tokens == ('a', 'b')
    assert graph.edges.tolist() == [[0, 0], [1, 0], [1, 1]]
    assert graph.user_degrees.tolist() == [1, 2]
    assert graph.item_degrees.tolist() == [2, 1]


def test_degree_sums_match_edge_count() -> None:
    rng = np.random.default_rng(3)
    pairs = [(str(u), str(i)) for u, i in rng.integers(0, 30, size=(200, 2))]
    graph = build_interaction_graph(pairs)
    assert graph.user_degrees.sum() == graph.num_edges
    assert graph.item_degrees.sum() == graph.num_edges
    assert set(np.unique(graph.adjacency.data)) == {1.0}


def test_malformed_line_reports_line_number(tmp_path) -> None:
    path = _write(tmp_path / 'bad.tsv', "# user\titem\n1\t2\n1\t2\t3\n")
    with pytest.raises(DataFormatError) as excinfo:
        load_interactions(path)
    assert excinfo.value.line_number == 3
    assert ':3:' in str(excinfo.value)


def test_empty_interaction_file(tmp_path) -> None:
    path = _write(tmp_path / 'empty.tsv', "# nothing here\n\n")
    with pytest.raises(EmptyGraphError):
        load_interactions(path)


def test_missing_file_raises(tmp_path) -> None:
    with pytest.raises(FileNotFoundError):
        load_interactions(str(tmp_path / 'absent.tsv'))


def test_kg_neighbor_lists(tmp_path) -> None:
    """Triples (0,0,0) and (0,1,1) give N_0 = [(e0, r0), (e1, r1)]"""
    graph = build_interaction_graph([('0', '0'), ('1', '1')])
    kg = load_kg(_write(tmp_path / 'kg.tsv', "0\t0\t0\n0\t1\t1\n"), graph)
    assert kg.neighbors(0) == [(0, 0), (1, 1)]
    assert kg.neighbors(1) == []
    assert kg.relation_rows().tolist() == [[1.0, 1.0], [0.0, 0.0]]


def test_empty_kg_file(tmp_path) -> None:
    graph = build_interaction_graph([('0', '0'), ('1', '1')])
    kg = load_kg(_write(tmp_path / 'kg.tsv', "# item\trelation\tentity\n"), graph)
    assert kg.num_entities == 0
    assert kg.num_triples == 0
    assert all(kg.neighbors(item) == [] for item in range(graph.num_items))


def test_kg_duplicates_removed() -> None:
    """100 triples of which 7 repeat earlier ones leave 93"""
    graph = build_interaction_graph([(str(u), str(u)) for u in range(10)])
    combos = list(itertools.product(range(10), range(5), range(10)))
    rng = np.random.default_rng(11)
    chosen = [combos[k] for k in rng.choice(len(combos), size=93, replace=False)]
    repeats = [chosen[k] for k in rng.choice(93, size=7, replace=False)]
    triples = [(str(i), str(r), str(e)) for i, r, e in chosen + repeats]
    kg = build_knowledge_graph(triples, graph)
    assert kg.num_triples == 93


def test_kg_unknown_item(tmp_path) -> None:
    graph = build_interaction_graph([('0', '0')])
    path = _write(tmp_path / 'kg.tsv', "0\tr\te\n7\tr\te\n")
    with pytest.raises(KnowledgeGraphReferenceError):
        load_kg(path, graph)


def test_kg_new_relation_tokens_get_indices() -> None:
    graph = build_interaction_graph([('0', '0')])
    kg = build_knowledge_graph([('0', 'genre', 'jazz'), ('0', 'mood', 'calm')], graph)
    assert kg.num_relations == 2
    assert kg.relation_tokens == ('genre', 'mood')


def test_split_counts() -> None:
    """User with 5 edges keeps 4 in train and gives one test pair"""
    pairs = [('0', str(i)) for i in range(5)] + [('1', '0')]
    graph = build_interaction_graph(pairs)
    split = split_train_test(graph, holdout_per_user=1, seed=5)
    assert split.train.user_degrees.tolist() == [4, 1]
    assert split.test.shape == (1, 2)
    assert split.test_users == [0]


def test_split_large_graph() -> None:
    """200 users x 5 items, holdout 1: train keeps 800 of 1000 edges"""
    rng = np.random.default_rng(0)
    pairs = [(str(u), str(i)) for u in range(200) for i in rng.choice(50, size=5, replace=False)]
    graph = build_interaction_graph(pairs)
    split = split_train_test(graph, holdout_per_user=1, seed=1)
    assert graph.num_edges == 1000
    assert split.train.num_edges == 800
    assert len(split.test) == 200

    train_pairs = {tuple(edge) for edge in split.train.edges.tolist()}
    test_pairs = {tuple(pair) for pair in split.test.tolist()}
    assert not train_pairs & test_pairs
    assert train_pairs | test_pairs == {tuple(edge) for edge in graph.edges.tolist()}
    assert all(split.train.user_degrees[user] >= 1 for user in split.test_users)


def test_split_deterministic() -> None:
    rng = np.random.default_rng(4)
    pairs = [(str(u), str(i)) for u, i in rng.integers(0, 20, size=(150, 2))]
    graph = build_interaction_graph(pairs)
    first = split_train_test(graph, seed=9)
    second = split_train_test(graph, seed=9)
    assert np.array_equal(first.test, second.test)
    assert np.array_equal(first.train.edges, second.train.edges)


def test_synthetic_block_diagonal() -> None:
    """intra=1, noise=0 with 2 clusters of 2x2 gives a block-diagonal adjacency"""
    spec = SyntheticSpec(
        num_users=4, num_items=4, num_entities=8, num_clusters=2,
        intra_cluster_prob=1.0, noise_edge_prob=0.0,
        relevant_relations_per_item=2, noise_relations_per_item=1, seed=3,
    )
    graph, _, _ = generate_synthetic(spec)
    expected = [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]
    assert graph.adjacency.toarray().astype(int).tolist() == expected


def test_synthetic_label_counts() -> None:
    """relevant=2, noise=1, 10 items: 30 triples, 20 relevant"""
    spec = SyntheticSpec(
        num_users=20, num_items=10, num_entities=20, num_clusters=2,
        relevant_relations_per_item=2, noise_relations_per_item=1, seed=8,
    )
    graph, kg, labels = generate_synthetic(spec)
    assert graph.num_items == 10
    assert kg.num_triples == 30
    assert labels.num_relevant == 20
    assert labels.num_noise == 10
    for (item, _, entity), relevant in zip(kg.triples, labels.triple_labels):
        assert relevant == labels.is_relevant(int(item), int(entity))


def test_synthetic_every_node_connected() -> None:
    spec = SyntheticSpec(num_users=60, num_items=40, num_entities=20, num_clusters=4,
                         intra_cluster_prob=0.02, noise_edge_prob=0.0, seed=1)
    graph, _, _ = generate_synthetic(spec)
    assert graph.num_users == 60
    assert graph.num_items == 40
    assert graph.user_degrees.min() >= 1
    assert graph.item_degrees.min() >= 1


def test_synthetic_files_round_trip(tmp_path) -> None:
    """Written files re-load to the same edges, triples and labels"""
    spec = SyntheticSpec(num_users=40, num_items=30, num_entities=12, num_clusters=2, seed=21)
    graph, kg, labels = generate_synthetic(spec)
    paths = write_dataset(graph, kg, labels, str(tmp_path))

    loaded_graph = load_interactions(paths['interactions'])
    loaded_kg = load_kg(paths['kg'], loaded_graph)
    loaded_labels = load_labels(paths['labels'], loaded_kg)
    assert np.array_equal(loaded_graph.edges, graph.edges)
    assert loaded_graph.item_tokens == graph.item_tokens
    assert np.array_equal(loaded_kg.triples, kg.triples)
    assert np.array_equal(loaded_labels.triple_labels, labels.triple_labels)


def test_synthetic_byte_identical(tmp_path) -> None:
    spec = SyntheticSpec(num_users=30, num_items=20, num_entities=10, num_clusters=2, seed=77)
    first = write_dataset(*generate_synthetic(spec), str(tmp_path / 'a'))
    second = write_dataset(*generate_synthetic(spec), str(tmp_path / 'b'))
    for kind in ('interactions', 'kg', 'labels'):
        with open(first[kind], 'rb') as a, open(second[kind], 'rb') as b:
            assert a.read() == b.read(), f"{kind} differs between runs"


def test_precision_counts_only_labeled_pairs(tmp_path) -> None:
    """Pool entities never linked to their item are not relevant"""
    spec = SyntheticSpec(num_users=40, num_items=20, num_entities=24, num_clusters=2,
                         relevant_relations_per_item=2, noise_relations_per_item=2, seed=13)
    graph, kg, labels = generate_synthetic(spec)
    unlinked = []
    for item in range(kg.num_items):
        linked = {entity for entity, _ in kg.neighbors(item)}
        pool = [e for e in range(kg.num_entities) if labels.in_pool(item, e) and e not in linked]
        unlinked.append((item, 0, pool[0]))
    fake = KnowledgeGraph(num_items=kg.num_items, num_entities=kg.num_entities,
                          num_relations=kg.num_relations, triples=np.array(unlinked))

    assert labels.pool_precision(fake) == 1.0
    assert labels.precision(fake) == 0.0
    assert labels.precision(kg) == pytest.approx(0.5)

    paths = write_dataset(graph, kg, labels, str(tmp_path))
    loaded_graph = load_interactions(paths['interactions'])
    loaded = load_labels(paths['labels'], load_kg(paths['kg'], loaded_graph))
    assert loaded.precision(fake) == 0.0
    assert loaded.precision(kg) == labels.precision(kg)
    with pytest.raises(ValueError):
        loaded.pool_precision(fake)


def test_tokens_keep_spaces_and_hash(tmp_path) -> None:
    """Only a leading # marks a comment; fields split on tabs alone"""
    path = _write(tmp_path / 'interactions.tsv',
                  "# user\titem\n  # indented comment\nuser #1\tthe item\nuser 2\tc#\n")
    graph = load_interactions(path)
    assert graph.user_tokens == ('user #1', 'user 2')
    assert graph.item_tokens == ('c#', 'the item')
    assert graph.num_edges == 2


def test_space_separated_line_is_malformed(tmp_path) -> None:
    path = _write(tmp_path / 'interactions.tsv', "1\t2\n1 3\n")
    with pytest.raises(DataFormatError) as excinfo:
        load_interactions(path)
    assert excinfo.value.line_number == 2
