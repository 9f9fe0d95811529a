"""
Diffusion Service
User-guided Gaussian diffusion over item-entity relation rows.

Forward:  q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I)
Reverse:  p(x_{t-1} | x_t, g) = N(mu(x_t, t, g), sigma_t^2 I) where mu is the
          posterior mean evaluated at the predicted x0_hat and
          sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)

The denoiser is an MLP over [x_t || step embedding(t) || guidance] that
predicts x0_hat; it is trained with the x0-prediction MSE (simplified ELBO).
After the reverse chain, the q highest-scored entities of every item form
the denoised knowledge graph used for the contrastive view.

Steps are 1-based throughout: t in 1..T.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Union

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn

from kgdiffrec.errors import DivergenceError, EmptyGraphError, ParameterError
from kgdiffrec.services.graph import InteractionGraph, KnowledgeGraph

logger = logging.getLogger(__name__)

StepLike = Union[int, torch.Tensor]
Predictor = Callable[[torch.Tensor, StepLike, torch.Tensor], torch.Tensor]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """
    Noise schedule

    Fields:
        betas: (T,) float64 beta_t for t = 1..T
        alpha_bar: (T,) float64 running product of (1 - beta)
    """
    betas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, betas: np.ndarray) -> 'NoiseSchedule':
        """
        Schedule from explicit betas in [0, 1)

        Zero betas are accepted here (degenerate, noise-free schedules);
        build_schedule enforces the strict production range.
        """
        betas = np.asarray(betas, dtype=np.float64).ravel()
        if betas.size == 0:
            raise ParameterError("A schedule needs at least one step")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ParameterError("betas must lie in [0, 1)")
        return cls(betas=betas, alpha_bar=np.cumprod(1.0 - betas))

    @property
    def steps(self) -> int:
        return int(self.betas.shape[0])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.steps:
            raise ParameterError(f"Step {t} outside 1..{self.steps}")

    def alpha_bar_prev(self) -> np.ndarray:
        """(T,) abar_{t-1} with abar_0 = 1"""
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    def posterior_variance(self) -> np.ndarray:
        """(T,) sigma_t^2; 0 where the schedule adds no noise"""
        one_minus = 1.0 - self.alpha_bar
        with np.errstate(divide='ignore', invalid='ignore'):
            variance = self.betas * (1.0 - self.alpha_bar_prev()) / one_minus
        return np.where(one_minus > 0, variance, 0.0)

    def posterior_coefficients(self) -> np.ndarray:
        """
        (T, 2) coefficients (c_x0, c_xt) of the posterior mean
        mu = c_x0 * x0_hat + c_xt * x_t; (1, 0) where abar_t == 1
        """
        one_minus = 1.0 - self.alpha_bar
        prev = self.alpha_bar_prev()
        with np.errstate(divide='ignore', invalid='ignore'):
            c_x0 = self.betas * np.sqrt(prev) / one_minus
            c_xt = (1.0 - prev) * np.sqrt(1.0 - self.betas) / one_minus
        noiseless = one_minus <= 0
        return np.stack([np.where(noiseless, 1.0, c_x0), np.where(noiseless, 0.0, c_xt)], axis=1)


def build_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """
    Linear beta schedule from beta_start to beta_end over `steps` steps

    Raises:
        ParameterError: Unless 0 < beta_start <= beta_end < 1 and steps >= 1
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, steps, dtype=np.float64))


def _per_row(values: np.ndarray, t: StepLike, like: torch.Tensor) -> torch.Tensor:
    """values[t-1] broadcast against the rows of `like`"""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor):
        picked = table[t.long() - 1]
        return picked.reshape(-1, *([1] * (like.dim() - 1)))
    return table[int(t) - 1]


def forward_diffuse(
    x0: torch.Tensor,
    t: StepLike,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Sample x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps

    Args:
        x0: Clean rows (any shape; a per-row tensor t indexes the first dimension)
        t: Step in 1..T, or a LongTensor of per-row steps
        schedule: Noise schedule
        generator: torch RNG
        noise: Pre-drawn eps (drawn from `generator` when None)

    Raises:
        ParameterError: If any step is out of range
    """
    if isinstance(t, torch.Tensor):
        schedule.check_step(int(t.min()))
        schedule.check_step(int(t.max()))
    else:
        schedule.check_step(int(t))
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
    signal = _per_row(np.sqrt(schedule.alpha_bar), t, x0)
    spread = _per_row(np.sqrt(1.0 - schedule.alpha_bar), t, x0)
    return signal * x0 + spread * noise


def sinusoidal_table(steps: int, dim: int) -> torch.Tensor:
    """Sinusoidal step features (rows t = 1..T), used to initialise step embeddings"""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    positions = torch.arange(1, steps + 1, dtype=torch.float64)[:, None] * freqs[None]
    table = torch.cat([torch.cos(positions), torch.sin(positions)], dim=-1)
    if dim % 2:
        table = torch.cat([table, torch.zeros(steps, 1, dtype=torch.float64)], dim=-1)
    return table


class GuidedDenoiser(nn.Module):
    """
    MLP predicting x0_hat from [x_t || step embedding(t) || guidance]

    Attributes:
        num_entities: Row width |ε|
        guidance_dim: Width of the guidance embedding (recommender d)
        hidden_dim: Hidden width h
        step_embedding: (T, d_step) learnable table, initialised sinusoidally
    """

    def __init__(
        self,
        num_entities: int,
        guidance_dim: int,
        steps: int,
        hidden_dim: int = 256,
        step_dim: int = 16,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.num_entities = num_entities
        self.guidance_dim = guidance_dim
        self.hidden_dim = hidden_dim
        self.step_embedding = nn.Parameter(sinusoidal_table(steps, step_dim).to(dtype))
        self.hidden = nn.Linear(num_entities + step_dim + guidance_dim, hidden_dim, dtype=dtype)
        self.output = nn.Linear(hidden_dim, num_entities, dtype=dtype)
        self._init_weights(generator)

    def _init_weights(self, generator: Optional[torch.Generator]) -> None:
        with torch.no_grad():
            for layer in (self.hidden, self.output):
                fan_out, fan_in = layer.weight.shape
                std = float(np.sqrt(2.0 / (fan_in + fan_out)))
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator, dtype=layer.weight.dtype) * std)
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=generator, dtype=layer.bias.dtype) * 1e-3)

    @property
    def steps(self) -> int:
        return int(self.step_embedding.shape[0])

    def forward(self, x_t: torch.Tensor, t: StepLike, guidance: torch.Tensor) -> torch.Tensor:
        batch = x_t.shape[0]
        if isinstance(t, torch.Tensor):
            step_features = self.step_embedding[t.long() - 1]
        else:
            step_features = self.step_embedding[int(t) - 1].expand(batch, -1)
        h = torch.cat([x_t, step_features, guidance.expand(batch, -1)], dim=-1)
        return self.output(torch.tanh(self.hidden(h)))


def predict_x0(x_t: torch.Tensor, t: StepLike, guidance: torch.Tensor, params: GuidedDenoiser) -> torch.Tensor:
    """Deterministic denoiser forward pass"""
    return params(x_t, t, guidance)


def guidance_table(graph: InteractionGraph, user_table: torch.Tensor) -> torch.Tensor:
    """
    Guidance embedding of every item: mean embedding of its training users

    The user table is detached; items without users get the zero vector.

    Returns:
        num_items x d tensor
    """
    degrees = graph.item_degrees.astype(np.float64)
    scale = np.where(degrees > 0, 1.0 / np.maximum(degrees, 1.0), 0.0)
    mean_op = sp.coo_matrix(sp.diags(scale) @ graph.item_users_matrix)
    indices = torch.as_tensor(np.vstack([mean_op.row, mean_op.col]).astype(np.int64))
    values = torch.as_tensor(mean_op.data, dtype=user_table.dtype)
    operator = torch.sparse_coo_tensor(
        indices, values, size=(graph.num_items, graph.num_users), device=user_table.device
    ).coalesce()
    return torch.sparse.mm(operator, user_table.detach())


def guidance_embedding(item: int, graph: InteractionGraph, user_table: torch.Tensor) -> torch.Tensor:
    """Mean embedding of the users who interacted with `item`; zero vector if none"""
    users = graph.item_users(item)
    if users.size == 0:
        return torch.zeros(user_table.shape[1], dtype=user_table.dtype, device=user_table.device)
    return user_table.detach()[torch.as_tensor(users)].mean(dim=0)


def reverse_step(
    x_t: torch.Tensor,
    t: int,
    guidance: torch.Tensor,
    predictor: Predictor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    sample_noise: bool = True,
) -> torch.Tensor:
    """
    Draw x_{t-1} ~ N(mu(x_t, t, g), sigma_t^2 I); at t = 1 return mu without noise

    Args:
        predictor: Callable (x_t, t, guidance) -> x0_hat, usually a GuidedDenoiser
        sample_noise: When False every step returns the posterior mean mu
    """
    schedule.check_step(t)
    x0_hat = predictor(x_t, t, guidance)
    c_x0, c_xt = schedule.posterior_coefficients()[t - 1]
    mean = float(c_x0) * x0_hat + float(c_xt) * x_t
    if t == 1 or not sample_noise:
        return mean
    variance = float(schedule.posterior_variance()[t - 1])
    if variance == 0.0:
        return mean
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=x_t.device)
    return mean + math.sqrt(variance) * noise


def reverse_chain(
    x_start: torch.Tensor,
    guidance: torch.Tensor,
    predictor: Predictor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    sample_noise: bool = True,
) -> torch.Tensor:
    """Run reverse_step from t = T down to t = 1; returns the reconstructed rows"""
    x = x_start
    for t in range(schedule.steps, 0, -1):
        x = reverse_step(x, t, guidance, predictor, schedule, generator, sample_noise)
    return x


@dataclass
class DenoiserTrainingResult:
    """
    Outcome of train_denoiser

    Fields:
        denoiser: Trained module (updated in place)
        losses: Mean MSE per epoch
    """
    denoiser: GuidedDenoiser
    losses: List[float] = field(default_factory=list)


class DenoiserTrainer:
    """
    Single optimizer stream for the denoiser

    Keeps the Adam state between calls so interleaved training (one denoiser
    epoch per recommender epoch) continues the same optimization.

    Attributes:
        denoiser: Module being trained
        schedule: Noise schedule
        batch_size: Items per minibatch
        generator: torch RNG for shuffling, steps and noise
    """

    def __init__(
        self,
        denoiser: GuidedDenoiser,
        schedule: NoiseSchedule,
        learning_rate: float = 1e-3,
        batch_size: int = 256,
        generator: Optional[torch.Generator] = None,
    ):
        self.denoiser = denoiser
        self.schedule = schedule
        self.batch_size = batch_size
        self.generator = generator
        self.optimizer = torch.optim.Adam(denoiser.parameters(), lr=learning_rate)

    def train_epoch(self, rows: torch.Tensor, guidance: torch.Tensor) -> float:
        """
        One pass over all item rows in shuffled minibatches

        Returns:
            Mean minibatch MSE

        Raises:
            DivergenceError: If the loss becomes non-finite
        """
        self.denoiser.train()
        num_rows = rows.shape[0]
        order = torch.randperm(num_rows, generator=self.generator)
        losses: List[float] = []
        for start in range(0, num_rows, self.batch_size):
            batch = order[start:start + self.batch_size]
            x0 = rows[batch]
            steps = torch.randint(1, self.schedule.steps + 1, (batch.shape[0],), generator=self.generator)
            x_t = forward_diffuse(x0, steps, self.schedule, self.generator)
            x0_hat = self.denoiser(x_t, steps, guidance[batch])
            loss = ((x0_hat - x0) ** 2).mean(dim=1).mean()
            if not torch.isfinite(loss):
                raise DivergenceError('denoiser_mse', f"loss={loss.item()} at batch starting {start}")
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            losses.append(float(loss.item()))
        return float(np.mean(losses))


def train_denoiser(
    kg: KnowledgeGraph,
    graph: InteractionGraph,
    user_table: torch.Tensor,
    schedule: NoiseSchedule,
    params: GuidedDenoiser,
    epochs: int = 1,
    learning_rate: float = 1e-3,
    batch_size: int = 256,
    use_guidance: bool = True,
    generator: Optional[torch.Generator] = None,
    trainer: Optional[DenoiserTrainer] = None,
) -> DenoiserTrainingResult:
    """
    Minimize the x0-prediction MSE over random (item, t) minibatches

    Guidance comes from the (detached) user table; with use_guidance False
    the zero vector is fed instead.

    Raises:
        EmptyGraphError: If the KG has no triples
        DivergenceError: If the loss becomes non-finite
    """
    if kg.num_triples == 0:
        raise EmptyGraphError("Cannot train the denoiser on an empty knowledge graph")
    dtype = params.hidden.weight.dtype
    rows = torch.as_tensor(kg.relation_rows(), dtype=dtype)
    guidance = guidance_table(graph, user_table).to(dtype)
    if not use_guidance:
        guidance = torch.zeros_like(guidance)
    if trainer is None:
        trainer = DenoiserTrainer(params, schedule, learning_rate, batch_size, generator)

    result = DenoiserTrainingResult(denoiser=params)
    for epoch in range(epochs):
        loss = trainer.train_epoch(rows, guidance)
        result.losses.append(loss)
        logger.debug(f"Denoiser epoch {epoch + 1}/{epochs}: mse={loss:.6f}")
    return result


def select_top_q(kg: KnowledgeGraph, scores: torch.Tensor, q: int) -> KnowledgeGraph:
    """
    Keep the q highest-scored entities per item (ties to the lower entity index)

    A kept (item, entity) pair reuses its original relation when the pair
    exists in `kg`, otherwise the globally most frequent relation.
    """
    if kg.num_entities == 0:
        return kg.with_triples(np.zeros((0, 3), dtype=np.int64))
    if q > kg.num_entities:
        logger.warning(f"q={q} exceeds the {kg.num_entities} entities; clamping")
        q = kg.num_entities
    order = torch.argsort(scores.detach().cpu(), dim=1, descending=True, stable=True)[:, :q].numpy()
    pair_relation = kg.pair_relation()
    fallback = kg.most_frequent_relation()
    triples = [
        (item, pair_relation.get((item, int(entity)), fallback), int(entity))
        for item in range(order.shape[0])
        for entity in order[item]
    ]
    return kg.with_triples(np.array(triples, dtype=np.int64))


def generate_denoised_kg(
    kg: KnowledgeGraph,
    params: Predictor,
    schedule: NoiseSchedule,
    guidance: torch.Tensor,
    q: int,
    generator: Optional[torch.Generator] = None,
    reverse_from_observed: bool = False,
    start_step: Optional[int] = None,
    sample_noise: bool = True,
) -> KnowledgeGraph:
    """
    Reconstruct a task-relevant KG by reverse diffusion and top-q selection

    Args:
        kg: Original knowledge graph (entity/relation vocabulary and fallbacks)
        params: Denoiser (or any predictor with the same signature)
        schedule: Noise schedule
        guidance: num_items x d guidance rows (zeros when guidance is disabled)
        q: Entities kept per item; clamped to |ε| with a warning
        generator: torch RNG
        reverse_from_observed: Start from each item's own row instead of pure noise
        start_step: Step the observed rows are diffused to before the chain
            (None = T, 0 = the rows unchanged); ignored for pure-noise starts
        sample_noise: Add posterior noise between steps; False runs the
            chain on posterior means only

    Raises:
        ParameterError: If q < 1 or start_step is outside 0..T
    """
    if q < 1:
        raise ParameterError(f"q must be >= 1, got {q}")
    if start_step is not None and not 0 <= start_step <= schedule.steps:
        raise ParameterError(f"start_step must be in [0, {schedule.steps}], got {start_step}")
    if kg.num_entities == 0:
        return select_top_q(kg, torch.zeros(kg.num_items, 0), q)

    dtype = guidance.dtype
    shape = (kg.num_items, kg.num_entities)
    with torch.no_grad():
        if isinstance(params, nn.Module):
            params.eval()
        if reverse_from_observed:
            x_start = torch.as_tensor(kg.relation_rows(), dtype=dtype)
            step = schedule.steps if start_step is None else start_step
            if step > 0:
                x_start = forward_diffuse(x_start, step, schedule, generator)
        else:
            x_start = torch.randn(shape, generator=generator, dtype=dtype)
        scores = reverse_chain(x_start, guidance, params, schedule, generator, sample_noise)
    return select_top_q(kg, scores, q)
