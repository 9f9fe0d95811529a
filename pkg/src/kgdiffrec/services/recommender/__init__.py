"""
Recommender Service Module

Embedding tables, propagation, losses, the joint training loop and
checkpoint persistence.
"""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .losses import LossBreakdown, backward, bpr_loss, infonce_loss, joint_loss, predict, squared_norm
from .service import (
    KnowledgeDiffusionRecommender,
    RecommenderTrainer,
    SparseOperator,
    ViewEmbeddings,
    configure_threads,
    propagate,
    sample_negatives,
)

__all__ = [
    'Checkpoint',
    'KnowledgeDiffusionRecommender',
    'LossBreakdown',
    'RecommenderTrainer',
    'SparseOperator',
    'ViewEmbeddings',
    'backward',
    'bpr_loss',
    'configure_threads',
    'infonce_loss',
    'joint_loss',
    'load_checkpoint',
    'predict',
    'propagate',
    'sample_negatives',
    'save_checkpoint',
    'squared_norm',
]
