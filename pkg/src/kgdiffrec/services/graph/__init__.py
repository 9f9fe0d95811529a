"""
Graph Service Module

Loading, indexing, splitting and synthesis of user-item interaction graphs
and item-entity knowledge graphs.
"""
from .schemas import DatasetSplit, InteractionGraph, KnowledgeGraph, PlantedLabels
from .service import (
    build_interaction_graph,
    build_knowledge_graph,
    generate_synthetic,
    load_interactions,
    load_kg,
    load_labels,
    save_interactions,
    save_kg,
    save_labels,
    split_train_test,
    write_dataset,
)

__all__ = [
    'DatasetSplit',
    'InteractionGraph',
    'KnowledgeGraph',
    'PlantedLabels',
    'build_interaction_graph',
    'build_knowledge_graph',
    'generate_synthetic',
    'load_interactions',
    'load_kg',
    'load_labels',
    'save_interactions',
    'save_kg',
    'save_labels',
    'split_train_test',
    'write_dataset',
]
