"""
Data models for the kgdiffrec system

This module defines the pydantic models used throughout the application for:
- Synthetic dataset parameters
- Random-walk, diffusion and training hyperparameters
- Run configuration (training config plus paths and ablation flags)
- Per-epoch metric records and evaluation reports

Array-holding domain types (graphs, operators, schedules) are frozen
dataclasses in the service packages; everything here is plain configuration
or report data that serializes to JSON.
"""
from typing import Optional, List, Dict, Any, Literal
from pydantic import BaseModel, ConfigDict, Field, model_validator


class SyntheticSpec(BaseModel):
    """
    Parameters of a planted-structure synthetic dataset

    Users, items and entities are split into contiguous cluster blocks; each
    cluster owns one entity pool.

    Attributes:
        num_users: Number of users
        num_items: Number of items
        num_entities: Number of KG entities (split evenly into cluster pools)
        num_clusters: Number of planted clusters
        num_relations: Number of relation types drawn for generated triples
        intra_cluster_prob: Interaction probability for a same-cluster user/item pair
        noise_edge_prob: Interaction probability for a cross-cluster pair
        relevant_relations_per_item: Triples per item into its cluster's entity pool
        noise_relations_per_item: Triples per item into entities outside that pool
        seed: RNG seed
    """
    model_config = ConfigDict(frozen=True)

    num_users: int = Field(default=500, ge=1)
    num_items: int = Field(default=300, ge=1)
    num_entities: int = Field(default=60, ge=1)
    num_clusters: int = Field(default=5, ge=1)
    num_relations: int = Field(default=4, ge=1)
    intra_cluster_prob: float = Field(default=0.08, ge=0.0, le=1.0)
    noise_edge_prob: float = Field(default=0.005, ge=0.0, le=1.0)
    relevant_relations_per_item: int = Field(default=2, ge=1)
    noise_relations_per_item: int = Field(default=2, ge=1)
    seed: int = 2024

    @model_validator(mode='after')
    def _check_pools(self) -> 'SyntheticSpec':
        pool_size = self.num_entities // self.num_clusters
        if pool_size < self.relevant_relations_per_item:
            raise ValueError(
                f"Each cluster pool holds {pool_size} entities; cannot draw "
                f"{self.relevant_relations_per_item} relevant entities per item"
            )
        outside = self.num_entities - pool_size
        if self.num_clusters > 1 and outside < self.noise_relations_per_item:
            raise ValueError(
                f"Only {outside} entities lie outside a cluster pool; cannot draw "
                f"{self.noise_relations_per_item} noise entities per item"
            )
        if self.num_clusters == 1 and self.num_entities < (
                self.relevant_relations_per_item + self.noise_relations_per_item):
            raise ValueError("Not enough entities for relevant plus noise triples per item")
        return self


class WalkConfig(BaseModel):
    """
    Random-walk-with-restart sampling configuration

    Attributes:
        num_paths: Independent walks per start node (R)
        path_length: Steps per walk (M)
        restart_prob: Probability of jumping back to the start node at each step
        seed: Base seed; each node derives its own stream from (seed, node)
    """
    model_config = ConfigDict(frozen=True)

    num_paths: int = Field(default=12, ge=1)
    path_length: int = Field(default=50, ge=1)
    restart_prob: float = Field(default=0.15, ge=0.0, le=1.0)
    seed: int = 2024


class TrainConfig(BaseModel):
    """
    Hyperparameters of one training run

    Defaults follow the reference parameter settings where they exist
    (theta1, theta2, num_paths, path_length, xi, steps, tau, q, top_n) and
    common LightGCN-style choices otherwise.
    """
    model_config = ConfigDict(frozen=True)

    # optimization
    learning_rate: float = Field(default=1e-3, ge=0.0)
    epochs: int = Field(default=100, ge=0)
    batch_size: int = Field(default=2048, ge=1)
    negatives_per_positive: int = Field(default=1, ge=1)
    seed: int = 2024
    init_std: float = Field(default=0.1, gt=0.0)

    # propagation
    embedding_dim: int = Field(default=64, ge=1)
    num_layers: int = Field(default=2, ge=0)
    xi: float = Field(default=0.7, ge=0.0)
    degrees_include_attention: bool = False

    # random walks
    num_paths: int = Field(default=12, ge=1)
    path_length: int = Field(default=50, ge=1)
    restart_prob: float = Field(default=0.15, ge=0.0, le=1.0)

    # diffusion
    steps: int = Field(default=10, ge=1)
    beta_start: float = Field(default=1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(default=0.02, gt=0.0, lt=1.0)
    q: int = Field(default=1, ge=1)
    denoiser_hidden: int = Field(default=256, ge=1)
    step_embedding_dim: int = Field(default=16, ge=1)
    denoiser_learning_rate: float = Field(default=1e-3, ge=0.0)
    denoiser_batch_size: int = Field(default=256, ge=1)
    denoiser_mode: Literal['interleaved', 'staged'] = 'interleaved'
    denoiser_epochs: int = Field(default=20, ge=0)
    denoiser_epochs_per_refresh: int = Field(default=1, ge=1)
    view_refresh_period: int = Field(default=1, ge=1)
    use_guidance: bool = True
    reverse_from_observed: bool = False
    # observed rows are diffused to this step before the chain (None = steps, 0 = clean rows)
    observed_start_step: Optional[int] = Field(default=None, ge=0)
    reverse_noise: bool = True

    # contrastive / joint loss
    tau: float = Field(default=0.5, gt=0.0)
    theta1: float = Field(default=1e-2, ge=0.0)
    theta2: float = Field(default=1e-5, ge=0.0)
    infonce_batch_size: int = Field(default=1024, ge=1)

    # evaluation during training (0 disables)
    eval_every: int = Field(default=10, ge=0)
    top_n: int = Field(default=20, ge=1)

    # execution
    threads: int = Field(default=0, ge=0)
    deterministic: bool = False
    dtype: Literal['float32', 'float64'] = 'float32'

    @model_validator(mode='after')
    def _check_ranges(self) -> 'TrainConfig':
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        if self.observed_start_step is not None and self.observed_start_step > self.steps:
            raise ValueError("observed_start_step must not exceed steps")
        return self

    def walk_config(self) -> WalkConfig:
        """Random-walk settings of this run"""
        return WalkConfig(
            num_paths=self.num_paths,
            path_length=self.path_length,
            restart_prob=self.restart_prob,
            seed=self.seed,
        )


class RunConfig(TrainConfig):
    """
    Everything one CLI run needs: TrainConfig plus data paths, output
    directory, ablation flags and the holdout protocol.

    Ablation flags:
        disable_attention_matrix: xi forced to 0
        disable_guidance: denoiser guidance replaced by the zero vector
        disable_contrastive: theta1 forced to 0
    """
    interactions_path: Optional[str] = None
    kg_path: Optional[str] = None
    labels_path: Optional[str] = None
    output_dir: Optional[str] = None
    holdout_per_user: int = Field(default=1, ge=1)

    disable_attention_matrix: bool = False
    disable_guidance: bool = False
    disable_contrastive: bool = False

    @model_validator(mode='after')
    def _check_ablation(self) -> 'RunConfig':
        flags = [self.disable_attention_matrix, self.disable_guidance, self.disable_contrastive]
        if sum(flags) > 1:
            raise ValueError("Ablation flags are mutually exclusive; pick one variant per run")
        return self

    @property
    def variant(self) -> str:
        """Ablation variant name of this run"""
        if self.disable_attention_matrix:
            return 'no_attention'
        if self.disable_guidance:
            return 'no_guidance'
        if self.disable_contrastive:
            return 'no_contrastive'
        return 'full'

    def train_config(self) -> TrainConfig:
        """Resolve ablation flags into the TrainConfig actually trained"""
        values = {name: getattr(self, name) for name in TrainConfig.model_fields}
        if self.disable_attention_matrix:
            values['xi'] = 0.0
        if self.disable_guidance:
            values['use_guidance'] = False
        if self.disable_contrastive:
            values['theta1'] = 0.0
        return TrainConfig(**values)


class EpochMetrics(BaseModel):
    """
    One line of the metrics trace

    Attributes:
        epoch: 1-based epoch number
        bpr_loss: Mean main (BPR) loss over the epoch's batches
        contrastive_user: Mean user-side InfoNCE term
        contrastive_item: Mean item-side InfoNCE term
        weight_decay: Mean squared parameter norm term (before theta2)
        total: Mean joint loss
        denoiser_loss: Mean denoiser MSE for the epoch (None if not trained this epoch)
        recall: Recall@top_n on the test split (None if not evaluated)
        ndcg: NDCG@top_n on the test split (None if not evaluated)
    """
    epoch: int
    bpr_loss: float
    contrastive_user: float
    contrastive_item: float
    weight_decay: float
    total: float
    denoiser_loss: Optional[float] = None
    recall: Optional[float] = None
    ndcg: Optional[float] = None
    top_n: int = 20


class RankingSummary(BaseModel):
    """
    Aggregate ranking metrics for one scorer

    Attributes:
        name: Scorer or variant name
        top_n: Cutoff N
        recall: Mean Recall@N over evaluated users
        ndcg: Mean NDCG@N over evaluated users
        num_users: Number of users evaluated
    """
    name: str
    top_n: int
    recall: float
    ndcg: float
    num_users: int


class ComparisonReport(BaseModel):
    """
    A table of ranking summaries (ablation grid, baseline comparison, sweep)

    Attributes:
        title: Table heading
        rows: One summary per variant/setting, in display order
        details: Free-form extras (per-seed values, config snapshot)
    """
    title: str
    rows: List[RankingSummary]
    details: Dict[str, Any] = Field(default_factory=dict)

    def to_table(self) -> str:
        """Render as a plain-text table"""
        width = max([len(row.name) for row in self.rows] + [len('Variant')])
        n = self.rows[0].top_n if self.rows else 20
        header = f"{'Variant':<{width}}  {f'Recall@{n}':>10}  {f'NDCG@{n}':>10}  {'Users':>6}"
        lines = [self.title, header, '-' * len(header)]
        for row in self.rows:
            lines.append(f"{row.name:<{width}}  {row.recall:>10.4f}  {row.ndcg:>10.4f}  {row.num_users:>6}")
        return '\n'.join(lines)
