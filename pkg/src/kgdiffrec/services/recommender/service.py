"""
Recommender Service
Embedding tables, attention-aware propagation and the joint training loop.

One training epoch:
1. Refresh the denoised KG view (every `view_refresh_period` epochs), after
   one denoiser epoch in interleaved mode.
2. Build the main view (original KG) and the contrastive view (denoised KG)
   through the same propagation operator.
3. Sample one uniform unobserved item per positive and take minibatch Adam
   steps on L_r + theta1 * (L_s_user + L_s_item) + theta2 * ||Theta||^2.

Gradients stop at the KG reconstruction boundary: the denoiser is trained
only by its own x0-prediction loss.
"""
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn

from kgdiffrec.errors import EmptyGraphError
from kgdiffrec.models import EpochMetrics, TrainConfig
from kgdiffrec.services.diffusion import (
    DenoiserTrainer,
    GuidedDenoiser,
    NoiseSchedule,
    build_schedule,
    generate_denoised_kg,
    guidance_table,
    train_denoiser,
)
from kgdiffrec.services.evaluation import Scorer, embedding_scorer, evaluate
from kgdiffrec.services.graph import DatasetSplit, InteractionGraph, KnowledgeGraph
from kgdiffrec.services.kg_embedding import KgIndex, RelationAwareAggregator
from kgdiffrec.services.rwr_attention import (
    AttentionCache,
    AttentionMatrix,
    PropagationOperator,
    build_attention_matrix,
    build_propagation_operator,
)
from .losses import LossBreakdown, backward, bpr_loss, infonce_loss, joint_loss, predict, squared_norm

logger = logging.getLogger(__name__)

DTYPES = {'float32': torch.float32, 'float64': torch.float64}


@dataclass(frozen=True)
class SparseOperator:
    """Propagation operator and its transpose as torch sparse tensors"""
    matrix: torch.Tensor
    transpose: torch.Tensor

    @classmethod
    def from_csr(cls, matrix: sp.csr_matrix, dtype: torch.dtype = torch.float32) -> 'SparseOperator':
        def to_torch(csr: sp.spmatrix) -> torch.Tensor:
            coo = sp.coo_matrix(csr)
            indices = torch.as_tensor(np.vstack([coo.row, coo.col]).astype(np.int64))
            values = torch.as_tensor(coo.data, dtype=dtype)
            return torch.sparse_coo_tensor(indices, values, size=coo.shape).coalesce()
        return cls(matrix=to_torch(matrix), transpose=to_torch(matrix.T))

    @classmethod
    def from_operator(cls, operator: PropagationOperator, dtype: torch.dtype = torch.float32) -> 'SparseOperator':
        return cls.from_csr(operator.matrix, dtype)


@dataclass
class ViewEmbeddings:
    """Final (layer-mean) user and item embeddings of one view"""
    users: torch.Tensor
    items: torch.Tensor


def propagate(
    operator: SparseOperator,
    users: torch.Tensor,
    items: torch.Tensor,
    num_layers: int,
) -> ViewEmbeddings:
    """
    Layer-wise propagation over the bipartite operator

    Layer l+1 users = L @ items_l and items = L^T @ users_l; the final
    embedding is the mean of layers 0..num_layers.
    """
    user_layers = [users]
    item_layers = [items]
    for _ in range(num_layers):
        users, items = torch.sparse.mm(operator.matrix, items), torch.sparse.mm(operator.transpose, users)
        user_layers.append(users)
        item_layers.append(items)
    return ViewEmbeddings(
        users=torch.stack(user_layers).mean(dim=0),
        items=torch.stack(item_layers).mean(dim=0),
    )


class KnowledgeDiffusionRecommender(nn.Module):
    """
    Trainable tables of the recommender

    Attributes:
        user_embedding: num_users x d
        item_embedding: num_items x d
        entity_embedding: num_entities x d
        relation_embedding: num_relations x d
        aggregator: Relation-aware KG attention (owns W)
        num_layers: Propagation depth L
    """

    def __init__(
        self,
        num_users: int,
        num_items: int,
        num_entities: int,
        num_relations: int,
        dim: int = 64,
        num_layers: int = 2,
        init_std: float = 0.1,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.dim = dim
        self.num_layers = num_layers

        def table(rows: int) -> nn.Parameter:
            return nn.Parameter(torch.randn(rows, dim, generator=generator, dtype=dtype) * init_std)

        self.user_embedding = table(num_users)
        self.item_embedding = table(num_items)
        self.entity_embedding = table(num_entities)
        self.relation_embedding = table(num_relations)
        self.aggregator = RelationAwareAggregator(dim, init_std, generator, dtype)

    def enhanced_items(self, index: KgIndex) -> torch.Tensor:
        """Knowledge-enhanced item table for the KG behind `index`"""
        return self.aggregator(self.entity_embedding, self.relation_embedding, self.item_embedding, index)

    def forward(self, operator: SparseOperator, index: KgIndex) -> ViewEmbeddings:
        return propagate(operator, self.user_embedding, self.enhanced_items(index), self.num_layers)


def sample_negatives(graph: InteractionGraph, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    One uniform unobserved item per entry of `users` (rejection sampling)

    Users who interacted with every item keep an arbitrary item.
    """
    num_items = graph.num_items
    observed = graph.edges[:, 0] * num_items + graph.edges[:, 1]
    negatives = rng.integers(0, num_items, size=users.shape[0])
    sampleable = graph.user_degrees[users] < num_items
    if not sampleable.all():
        logger.warning(f"{int((~sampleable).sum())} positives belong to users who interacted with every item")

    def rejected(rows: np.ndarray) -> np.ndarray:
        return rows[np.isin(users[rows] * num_items + negatives[rows], observed) & sampleable[rows]]

    pending = rejected(np.arange(users.shape[0]))
    while pending.size:
        negatives[pending] = rng.integers(0, num_items, size=pending.size)
        pending = rejected(pending)
    return negatives


def configure_threads(threads: int, deterministic: bool = False) -> int:
    """Set torch's intra-op thread count; 0 means all cores, deterministic forces 1"""
    count = 1 if deterministic else (threads or os.cpu_count() or 1)
    torch.set_num_threads(count)
    return count


class RecommenderTrainer:
    """
    Joint training of the recommender and the denoiser

    Attributes:
        split: Dataset split; only split.train is seen during training
        kg: Original knowledge graph (main view)
        config: Resolved training configuration
        model: Recommender tables
        denoiser: Guided denoiser (None when the KG has no triples)
        schedule: Diffusion noise schedule
        denoised_kg: Current contrastive-view KG
        history: Per-epoch metrics
        generator: torch RNG (init, diffusion, InfoNCE subsampling)
        rng: numpy RNG (shuffling, negatives)
    """

    def __init__(
        self,
        split: DatasetSplit,
        kg: KnowledgeGraph,
        config: TrainConfig,
        attention: Optional[AttentionMatrix] = None,
        cache: Optional[AttentionCache] = None,
        metrics_path: Optional[str] = None,
    ):
        self.split = split
        self.graph = split.train
        self.kg = kg
        self.config = config
        self.metrics_path = metrics_path
        if self.graph.num_edges == 0:
            raise EmptyGraphError("Training set has no interactions")

        self.threads = configure_threads(config.threads, config.deterministic)
        self.dtype = DTYPES[config.dtype]
        self.generator = torch.Generator().manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)

        if attention is None:
            attention = self._attention(cache)
        self.attention = attention
        self.operator = build_propagation_operator(
            self.graph, attention, config.xi, config.degrees_include_attention
        )
        self.sparse_operator = SparseOperator.from_operator(self.operator, self.dtype)

        self.model = KnowledgeDiffusionRecommender(
            num_users=self.graph.num_users,
            num_items=self.graph.num_items,
            num_entities=kg.num_entities,
            num_relations=kg.num_relations,
            dim=config.embedding_dim,
            num_layers=config.num_layers,
            init_std=config.init_std,
            generator=self.generator,
            dtype=self.dtype,
        )
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.learning_rate)

        self.schedule: NoiseSchedule = build_schedule(config.steps, config.beta_start, config.beta_end)
        self.denoiser: Optional[GuidedDenoiser] = None
        self.denoiser_trainer: Optional[DenoiserTrainer] = None
        if kg.num_triples:
            self.denoiser = GuidedDenoiser(
                num_entities=kg.num_entities,
                guidance_dim=config.embedding_dim,
                steps=config.steps,
                hidden_dim=config.denoiser_hidden,
                step_dim=config.step_embedding_dim,
                generator=self.generator,
                dtype=self.dtype,
            )
            self.denoiser_trainer = DenoiserTrainer(
                self.denoiser, self.schedule, config.denoiser_learning_rate,
                config.denoiser_batch_size, self.generator,
            )
        else:
            logger.warning("Knowledge graph is empty; contrastive view equals the main view")

        self.kg_index = KgIndex.from_kg(kg)
        self.denoised_kg = kg
        self.denoised_index = self.kg_index
        self.epoch = 0
        self.history: List[EpochMetrics] = []

    def _attention(self, cache: Optional[AttentionCache]) -> AttentionMatrix:
        walk = self.config.walk_config()
        if self.config.xi == 0:
            # S does not enter the operator; skip the walks
            return AttentionMatrix(matrix=sp.csr_matrix(self.graph.adjacency.shape), config=walk)
        return build_attention_matrix(self.graph, walk, threads=self.threads, cache=cache)

    @property
    def contrastive_enabled(self) -> bool:
        return self.config.theta1 != 0

    def guidance(self) -> torch.Tensor:
        """Per-item guidance rows; zeros when guidance is disabled"""
        table = guidance_table(self.graph, self.model.user_embedding)
        if not self.config.use_guidance:
            return torch.zeros_like(table)
        return table

    def train_denoiser_epochs(self, epochs: int) -> List[float]:
        """Run denoiser epochs on the current guidance; returns per-epoch MSE"""
        if self.denoiser is None or epochs == 0:
            return []
        result = train_denoiser(
            self.kg, self.graph, self.model.user_embedding, self.schedule, self.denoiser,
            epochs=epochs,
            use_guidance=self.config.use_guidance,
            generator=self.generator,
            trainer=self.denoiser_trainer,
        )
        return result.losses

    def refresh_view(self) -> KnowledgeGraph:
        """Regenerate the denoised KG used by the contrastive view"""
        if self.denoiser is None:
            return self.denoised_kg
        self.denoised_kg = generate_denoised_kg(
            self.kg, self.denoiser, self.schedule, self.guidance(), self.config.q,
            generator=self.generator,
            reverse_from_observed=self.config.reverse_from_observed,
            start_step=self.config.observed_start_step,
            sample_noise=self.config.reverse_noise,
        )
        self.denoised_index = KgIndex.from_kg(self.denoised_kg)
        logger.debug(f"Denoised KG refreshed: {self.denoised_kg.num_triples} triples")
        return self.denoised_kg

    def _maybe_refresh(self) -> Optional[float]:
        if self.denoiser is None or not self.contrastive_enabled:
            return None
        if (self.epoch - 1) % self.config.view_refresh_period:
            return None
        loss = None
        if self.config.denoiser_mode == 'interleaved':
            loss = self.train_denoiser_epochs(self.config.denoiser_epochs_per_refresh)[-1]
        self.refresh_view()
        return loss

    def _node_batch(self, nodes: torch.Tensor) -> torch.Tensor:
        nodes = torch.unique(nodes)
        limit = self.config.infonce_batch_size
        if nodes.shape[0] > limit:
            nodes = nodes[torch.randperm(nodes.shape[0], generator=self.generator)[:limit]]
        return nodes

    def batch_loss(self, users: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor) -> LossBreakdown:
        """Joint loss of one minibatch of (user, positive, negative) triples"""
        cfg = self.config
        main = self.model(self.sparse_operator, self.kg_index)
        user_rows = main.users[users]
        l_r = bpr_loss(predict(user_rows, main.items[positives]), predict(user_rows, main.items[negatives]))

        zero = l_r.new_zeros(())
        l_user, l_item = zero, zero
        if self.contrastive_enabled:
            view = self.model(self.sparse_operator, self.denoised_index)
            batch_users = self._node_batch(users)
            batch_items = self._node_batch(torch.cat([positives, negatives]))
            l_user = infonce_loss(main.users[batch_users], view.users[batch_users], cfg.tau)
            l_item = infonce_loss(main.items[batch_items], view.items[batch_items], cfg.tau)

        decay = squared_norm(self.model.parameters())
        return joint_loss(l_r, l_user, l_item, decay, cfg.theta1, cfg.theta2, cfg.tau)

    def train_epoch(self) -> EpochMetrics:
        """One refresh + one pass over all training interactions"""
        cfg = self.config
        self.epoch += 1
        denoiser_loss = self._maybe_refresh()

        edges = self.graph.edges[self.rng.permutation(self.graph.num_edges)]
        users = np.repeat(edges[:, 0], cfg.negatives_per_positive)
        positives = np.repeat(edges[:, 1], cfg.negatives_per_positive)
        negatives = sample_negatives(self.graph, users, self.rng)

        self.model.train()
        totals: Dict[str, float] = {}
        batches = 0
        for start in range(0, users.shape[0], cfg.batch_size):
            stop = start + cfg.batch_size
            breakdown = self.batch_loss(
                torch.as_tensor(users[start:stop]),
                torch.as_tensor(positives[start:stop]),
                torch.as_tensor(negatives[start:stop]),
            )
            self.optimizer.zero_grad()
            backward(breakdown.total, self.model.named_parameters())
            self.optimizer.step()
            for key, value in breakdown.as_dict().items():
                totals[key] = totals.get(key, 0.0) + value
            batches += 1

        metrics = EpochMetrics(
            epoch=self.epoch,
            denoiser_loss=denoiser_loss,
            top_n=cfg.top_n,
            **{key: value / batches for key, value in totals.items()},
        )
        if cfg.eval_every and (self.epoch % cfg.eval_every == 0 or self.epoch == cfg.epochs):
            result = evaluate(self.scorer(), self.split, cfg.top_n)
            metrics.recall = result.mean_recall
            metrics.ndcg = result.mean_ndcg

        logger.info(
            f"Epoch {self.epoch}: total={metrics.total:.5f} bpr={metrics.bpr_loss:.5f} "
            f"cl_u={metrics.contrastive_user:.5f} cl_i={metrics.contrastive_item:.5f}"
            + (f" recall@{cfg.top_n}={metrics.recall:.4f}" if metrics.recall is not None else '')
        )
        self._write_trace(metrics)
        self.history.append(metrics)
        return metrics

    def _write_trace(self, metrics: EpochMetrics) -> None:
        if not self.metrics_path:
            return
        with open(self.metrics_path, 'a') as f:
            f.write(metrics.model_dump_json() + '\n')

    def fit(self) -> List[EpochMetrics]:
        """
        Train for config.epochs epochs

        In staged mode the denoiser is first trained for
        config.denoiser_epochs epochs on the initial user table.

        Raises:
            DivergenceError: If a loss or gradient becomes non-finite
        """
        if self.config.denoiser_mode == 'staged' and self.contrastive_enabled:
            losses = self.train_denoiser_epochs(self.config.denoiser_epochs)
            if losses:
                logger.info(f"Denoiser pretrained for {len(losses)} epochs: mse={losses[-1]:.6f}")
        for _ in range(self.config.epochs):
            self.train_epoch()
        return self.history

    def final_embeddings(self) -> ViewEmbeddings:
        """Main-view embeddings used for ranking"""
        self.model.eval()
        with torch.no_grad():
            view = self.model(self.sparse_operator, self.kg_index)
        return ViewEmbeddings(users=view.users.detach().clone(), items=view.items.detach().clone())

    def scorer(self) -> Scorer:
        view = self.final_embeddings()
        return embedding_scorer(view.users.numpy(), view.items.numpy())
