"""
Checkpoint persistence

A checkpoint is one torch.save file holding a versioned header, the resolved
TrainConfig, model and denoiser state dicts, the noise schedule, RNG states,
the train/test split, both KGs, the final embeddings and the metrics trace.
Everything is stored as tensors or plain Python values so it loads with
weights_only=True.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from kgdiffrec.config import Config
from kgdiffrec.errors import CheckpointError
from kgdiffrec.models import EpochMetrics, TrainConfig
from kgdiffrec.services.diffusion import GuidedDenoiser, NoiseSchedule
from kgdiffrec.services.graph import DatasetSplit, InteractionGraph, KnowledgeGraph
from .service import DTYPES, KnowledgeDiffusionRecommender, RecommenderTrainer, ViewEmbeddings

logger = logging.getLogger(__name__)


def _kg_payload(kg: KnowledgeGraph) -> Dict[str, Any]:
    return {
        'num_items': kg.num_items,
        'num_entities': kg.num_entities,
        'num_relations': kg.num_relations,
        'triples': torch.as_tensor(kg.triples),
        'entity_tokens': list(kg.entity_tokens),
        'relation_tokens': list(kg.relation_tokens),
        'item_tokens': list(kg.item_tokens),
    }


def _kg_from_payload(payload: Dict[str, Any]) -> KnowledgeGraph:
    return KnowledgeGraph(
        num_items=payload['num_items'],
        num_entities=payload['num_entities'],
        num_relations=payload['num_relations'],
        triples=payload['triples'].numpy(),
        entity_tokens=tuple(payload['entity_tokens']),
        relation_tokens=tuple(payload['relation_tokens']),
        item_tokens=tuple(payload['item_tokens']),
    )


@dataclass
class Checkpoint:
    """
    Loaded checkpoint contents

    Fields:
        config: Training configuration of the run
        split: Train/test split the run used
        kg: Original knowledge graph
        denoised_kg: Contrastive-view KG at the end of training
        model_state: Recommender state dict
        denoiser_state: Denoiser state dict (None for an empty KG)
        schedule: Noise schedule
        final_embeddings: Main-view embeddings used for ranking
        rng_state: torch generator state and numpy bit generator state
        epoch: Epochs completed
        history: Metrics trace
    """
    config: TrainConfig
    split: DatasetSplit
    kg: KnowledgeGraph
    denoised_kg: KnowledgeGraph
    model_state: Dict[str, torch.Tensor]
    denoiser_state: Optional[Dict[str, torch.Tensor]]
    schedule: NoiseSchedule
    final_embeddings: ViewEmbeddings
    rng_state: Dict[str, Any]
    epoch: int = 0
    history: List[EpochMetrics] = field(default_factory=list)

    def build_model(self) -> KnowledgeDiffusionRecommender:
        model = KnowledgeDiffusionRecommender(
            num_users=self.split.train.num_users,
            num_items=self.split.train.num_items,
            num_entities=self.kg.num_entities,
            num_relations=self.kg.num_relations,
            dim=self.config.embedding_dim,
            num_layers=self.config.num_layers,
            init_std=self.config.init_std,
            dtype=DTYPES[self.config.dtype],
        )
        model.load_state_dict(self.model_state)
        return model

    def build_denoiser(self) -> Optional[GuidedDenoiser]:
        if self.denoiser_state is None:
            return None
        denoiser = GuidedDenoiser(
            num_entities=self.kg.num_entities,
            guidance_dim=self.config.embedding_dim,
            steps=self.config.steps,
            hidden_dim=self.config.denoiser_hidden,
            step_dim=self.config.step_embedding_dim,
            dtype=DTYPES[self.config.dtype],
        )
        denoiser.load_state_dict(self.denoiser_state)
        return denoiser

    def generator(self) -> torch.Generator:
        """torch generator resumed from the saved state"""
        generator = torch.Generator()
        generator.set_state(self.rng_state['torch'])
        return generator

    def rng(self) -> np.random.Generator:
        """numpy generator resumed from the saved bit generator state"""
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state['numpy']
        return rng


def save_checkpoint(trainer: RecommenderTrainer, path: str) -> str:
    """Write the trainer's state to `path`; returns the path"""
    split = trainer.split
    train = split.train
    final = trainer.final_embeddings()
    payload = {
        'header': {'magic': Config.CHECKPOINT_MAGIC, 'version': Config.CHECKPOINT_VERSION},
        'config': trainer.config.model_dump(),
        'model': trainer.model.state_dict(),
        'denoiser': trainer.denoiser.state_dict() if trainer.denoiser is not None else None,
        'schedule': {'betas': torch.as_tensor(trainer.schedule.betas)},
        'split': {
            'num_users': train.num_users,
            'num_items': train.num_items,
            'train_edges': torch.as_tensor(train.edges),
            'test': torch.as_tensor(split.test),
            'seed': split.seed,
            'holdout_per_user': split.holdout_per_user,
            'user_tokens': list(train.user_tokens),
            'item_tokens': list(train.item_tokens),
        },
        'kg': _kg_payload(trainer.kg),
        'denoised_kg': torch.as_tensor(trainer.denoised_kg.triples),
        'final_embeddings': {'users': final.users, 'items': final.items},
        'rng': {'torch': trainer.generator.get_state(), 'numpy': trainer.rng.bit_generator.state},
        'epoch': trainer.epoch,
        'history': [metrics.model_dump() for metrics in trainer.history],
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    torch.save(payload, path)
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint

    Raises:
        CheckpointError: If the file is missing, unreadable, or has a foreign header
    """
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    header = payload.get('header') if isinstance(payload, dict) else None
    if not header or header.get('magic') != Config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a kgdiffrec checkpoint")
    if header.get('version') != Config.CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint version {header.get('version')} (expected {Config.CHECKPOINT_VERSION})"
        )

    try:
        split_payload = payload['split']
        train = InteractionGraph(
            num_users=split_payload['num_users'],
            num_items=split_payload['num_items'],
            edges=split_payload['train_edges'].numpy(),
            user_tokens=tuple(split_payload['user_tokens']),
            item_tokens=tuple(split_payload['item_tokens']),
        )
        split = DatasetSplit(
            train=train,
            test=split_payload['test'].numpy(),
            seed=split_payload['seed'],
            holdout_per_user=split_payload['holdout_per_user'],
        )
        kg = _kg_from_payload(payload['kg'])
        return Checkpoint(
            config=TrainConfig(**payload['config']),
            split=split,
            kg=kg,
            denoised_kg=kg.with_triples(payload['denoised_kg'].numpy()),
            model_state=payload['model'],
            denoiser_state=payload['denoiser'],
            schedule=NoiseSchedule.from_betas(np.asarray(payload['schedule']['betas'].numpy())),
            final_embeddings=ViewEmbeddings(
                users=payload['final_embeddings']['users'],
                items=payload['final_embeddings']['items'],
            ),
            rng_state=payload['rng'],
            epoch=payload['epoch'],
            history=[EpochMetrics(**entry) for entry in payload['history']],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} is incomplete: {e}") from e
