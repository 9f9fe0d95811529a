"""
Test suite for Recommender Service
"""
import json
import logging
import math
import os
import sys

import numpy as np
import pytest
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from torch.func import functional_call

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src'))

from kgdiffrec.errors import CheckpointError, DivergenceError, EmptyGraphError  # noqa: E402
from kgdiffrec.models import SyntheticSpec, TrainConfig, WalkConfig  # noqa: E402
from kgdiffrec.services.graph import (  # noqa: E402
    DatasetSplit,
    InteractionGraph,
    KnowledgeGraph,
    generate_synthetic,
    split_train_test,
)
from kgdiffrec.services.kg_embedding import KgIndex  # noqa: E402
from kgdiffrec.services.recommender import (  # noqa: E402
    KnowledgeDiffusionRecommender,
    RecommenderTrainer,
    SparseOperator,
    backward,
    bpr_loss,
    infonce_loss,
    joint_loss,
    load_checkpoint,
    predict,
    propagate,
    sample_negatives,
    save_checkpoint,
    squared_norm,
)
from kgdiffrec.services.rwr_attention import build_attention_matrix, build_propagation_operator  # noqa: E402

SMALL_SPEC = SyntheticSpec(num_users=20, num_items=20, num_entities=8, num_clusters=2,
                           intra_cluster_prob=0.5, noise_edge_prob=0.0,
                           relevant_relations_per_item=2, noise_relations_per_item=1, seed=5)


def _small_config(**overrides) -> TrainConfig:
    values = dict(
        epochs=2, embedding_dim=8, num_layers=2, num_paths=3, path_length=5,
        steps=3, denoiser_hidden=16, step_embedding_dim=4, eval_every=1, top_n=5,
        deterministic=True, dtype='float64', seed=11,
    )
    values.update(overrides)
    return TrainConfig(**values)


def _small_dataset():
    graph, kg, _ = generate_synthetic(SMALL_SPEC)
    return split_train_test(graph, holdout_per_user=1, seed=3), kg


def _graph(num_users: int, num_items: int, edges) -> InteractionGraph:
    return InteractionGraph(num_users=num_users, num_items=num_items,
                            edges=np.array(edges, dtype=np.int64).reshape(-1, 2))


# ============================================================================
# Propagation
# ============================================================================

def test_zero_layers_returns_inputs() -> None:
    operator = SparseOperator.from_csr(sp.csr_matrix(np.eye(3)), torch.float64)
    users = torch.randn(3, 4, dtype=torch.float64)
    items = torch.randn(3, 4, dtype=torch.float64)
    view = propagate(operator, users, items, num_layers=0)
    assert torch.equal(view.users, users)
    assert torch.equal(view.items, items)


def test_single_edge_one_layer() -> None:
    """L(u, v) = c, L = 1: z_u = (z_u0 + c z_v0) / 2"""
    c = 1.7
    operator = SparseOperator.from_csr(sp.csr_matrix(np.array([[c]])), torch.float64)
    users = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    items = torch.tensor([[0.5, 3.0]], dtype=torch.float64)
    view = propagate(operator, users, items, num_layers=1)
    assert torch.allclose(view.users, (users + c * items) / 2)
    assert torch.allclose(view.items, (items + c * users) / 2)


def test_propagation_superposition() -> None:
    generator = torch.Generator().manual_seed(1)
    matrix = sp.random(7, 5, density=0.4, random_state=2, format='csr')
    operator = SparseOperator.from_csr(matrix, torch.float64)
    x_users, y_users = torch.randn(2, 7, 3, generator=generator, dtype=torch.float64)
    x_items, y_items = torch.randn(2, 5, 3, generator=generator, dtype=torch.float64)
    a, b = 0.3, -1.2
    combined = propagate(operator, a * x_users + b * y_users, a * x_items + b * y_items, 3)
    x_view = propagate(operator, x_users, x_items, 3)
    y_view = propagate(operator, y_users, y_items, 3)
    assert torch.allclose(combined.users, a * x_view.users + b * y_view.users, atol=1e-6)
    assert torch.allclose(combined.items, a * x_view.items + b * y_view.items, atol=1e-6)


def test_plain_lightgcn_with_xi_zero_and_empty_kg() -> None:
    """xi = 0 and no KG triples reduce the forward pass to LightGCN over normalized item rows"""
    rng = np.random.default_rng(4)
    pairs = sorted({(int(u), int(i)) for u, i in rng.integers(0, 6, size=(20, 2))})
    graph = _graph(6, 6, pairs)
    attention = build_attention_matrix(graph, WalkConfig(num_paths=2, path_length=3))
    operator = build_propagation_operator(graph, attention, xi=0.0)
    kg = KnowledgeGraph(num_items=6, num_entities=0, num_relations=0, triples=np.zeros((0, 3), dtype=np.int64))
    model = KnowledgeDiffusionRecommender(6, 6, 0, 0, dim=4, num_layers=2,
                                          generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    view = model(SparseOperator.from_operator(operator, torch.float64), KgIndex.from_kg(kg))

    adjacency = graph.adjacency.toarray()
    du, dv = adjacency.sum(axis=1), adjacency.sum(axis=0)
    with np.errstate(divide='ignore'):
        norm = np.where(du > 0, du ** -0.5, 0.0)[:, None] * adjacency * np.where(dv > 0, dv ** -0.5, 0.0)[None, :]
    u0 = model.user_embedding.detach().numpy()
    i0 = F.normalize(model.item_embedding.detach(), dim=1).numpy()
    u1, i1 = norm @ i0, norm.T @ u0
    u2, i2 = norm @ i1, norm.T @ u1
    assert np.allclose(view.users.detach().numpy(), (u0 + u1 + u2) / 3)
    assert np.allclose(view.items.detach().numpy(), (i0 + i1 + i2) / 3)


# ============================================================================
# Losses
# ============================================================================

def test_predict_values() -> None:
    assert predict(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0])).item() == 0.0
    z = torch.tensor([1.5, -2.0, 0.5], dtype=torch.float64)
    assert predict(z, z).item() == pytest.approx(float(z.norm() ** 2))

    generator = torch.Generator().manual_seed(2)
    a, b = torch.randn(2, 8, generator=generator, dtype=torch.float64)
    expected = sum(float(a[k]) * float(b[k]) for k in range(8))
    assert abs(predict(a, b).item() - expected) < 1e-7


def test_bpr_anchors() -> None:
    zero = bpr_loss(torch.tensor([0.3], dtype=torch.float64), torch.tensor([0.3], dtype=torch.float64))
    assert abs(zero.item() - math.log(2)) < 1e-9

    def neg_log_sigmoid(x: float) -> float:
        return -math.log(1 / (1 + math.exp(-x)))

    pos = torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64)
    loss = bpr_loss(pos, torch.zeros(3, dtype=torch.float64))
    expected = (neg_log_sigmoid(1.0) + math.log(2) + neg_log_sigmoid(-1.0)) / 3
    assert abs(loss.item() - expected) < 1e-7

    huge = bpr_loss(torch.tensor([1e4]), torch.tensor([-1e4]))
    assert huge.item() == pytest.approx(0.0, abs=1e-12)
    assert math.isfinite(bpr_loss(torch.tensor([-1e4]), torch.tensor([1e4])).item())

    with pytest.raises(ValueError):
        bpr_loss(torch.zeros(0), torch.zeros(0))


def test_bpr_decreases_with_margin() -> None:
    margins = [-2.0, -0.5, 0.0, 0.7, 3.0]
    losses = [bpr_loss(torch.tensor([m], dtype=torch.float64), torch.zeros(1, dtype=torch.float64)).item()
              for m in margins]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert all(value > 0 for value in losses)


def test_infonce_identical_rows_gives_log_n() -> None:
    rows = torch.ones(7, 3, dtype=torch.float64)
    assert abs(infonce_loss(rows, rows, 0.5).item() - math.log(7)) < 1e-6


def test_infonce_single_node_is_zero() -> None:
    rows = torch.randn(1, 4, dtype=torch.float64)
    assert infonce_loss(rows, 2 * rows, 0.2).item() == pytest.approx(0.0, abs=1e-12)


def test_infonce_matches_scalar_reference() -> None:
    generator = torch.Generator().manual_seed(3)
    main = torch.randn(4, 5, generator=generator, dtype=torch.float64)
    view = torch.randn(4, 5, generator=generator, dtype=torch.float64)
    tau = 0.5

    def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
        return float(a @ b) / (float(a.norm()) * float(b.norm()))

    total = 0.0
    for u in range(4):
        denominator = sum(math.exp(cosine(main[u], view[v]) / tau) for v in range(4))
        total += -math.log(math.exp(cosine(main[u], view[u]) / tau) / denominator)
    assert abs(infonce_loss(main, view, tau).item() - total / 4) < 1e-6


def test_infonce_zero_rows_and_validation() -> None:
    main = torch.tensor([[0.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    view = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
    assert math.isfinite(infonce_loss(main, view, 0.5).item())
    with pytest.raises(ValueError):
        infonce_loss(main, view[:1], 0.5)
    with pytest.raises(ValueError):
        infonce_loss(main, view, 0.0)


def test_infonce_monotone_in_positive_similarity() -> None:
    main = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    losses = []
    for angle in (1.2, 0.8, 0.4, 0.0):
        view = torch.tensor([[math.cos(angle), math.sin(angle)], [0.0, 1.0]], dtype=torch.float64)
        losses.append(infonce_loss(main, view, 0.5).item())
    assert all(a >= b for a, b in zip(losses, losses[1:]))


def test_joint_loss_arithmetic() -> None:
    """L_r=1, L_s=2+2, theta1=0.01, ||Theta||^2=100, theta2=1e-5 -> 1.041"""
    one, two, hundred = (torch.tensor(v, dtype=torch.float64) for v in (1.0, 2.0, 100.0))
    breakdown = joint_loss(one, two, two, hundred, theta1=0.01, theta2=1e-5)
    assert abs(breakdown.total.item() - 1.041) < 1e-6
    assert breakdown.as_dict()['total'] == pytest.approx(1.041)

    plain = joint_loss(one, two, two, hundred, theta1=0.0, theta2=0.0)
    assert plain.total.item() == 1.0

    defaults = joint_loss(one, two, two, hundred)
    assert (defaults.theta1, defaults.theta2) == (1e-2, 1e-5)


def test_squared_norm_sums_tensors() -> None:
    assert squared_norm([torch.tensor([3.0]), torch.tensor([[4.0]])]).item() == 25.0
    assert squared_norm([]).item() == 0.0


def test_backward_quadratic_gradient() -> None:
    z = torch.nn.Parameter(torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64))
    gradients = backward(0.5 * (z ** 2).sum(), [('z', z)])
    assert torch.allclose(gradients['z'], z.detach())


def test_backward_reports_divergence() -> None:
    z = torch.nn.Parameter(torch.tensor([1.0]))
    with pytest.raises(DivergenceError) as excinfo:
        backward(z.sum() * float('nan'), [('z', z)])
    assert excinfo.value.name == 'loss'

    w = torch.nn.Parameter(torch.tensor([0.0]))
    with pytest.raises(DivergenceError) as excinfo:
        backward(torch.sqrt(w).sum() * 0 + 1.0, [('w', w)])
    assert excinfo.value.name == 'w'


def _gradcheck_instance():
    """Random 6-user / 6-item / 8-entity instance with main and denoised KGs"""
    rng = np.random.default_rng(7)
    pairs = sorted({(int(u), int(i)) for u, i in rng.integers(0, 6, size=(18, 2))})
    graph = _graph(6, 6, pairs)
    attention = build_attention_matrix(graph, WalkConfig(num_paths=3, path_length=4))
    operator = SparseOperator.from_operator(build_propagation_operator(graph, attention, xi=0.7), torch.float64)
    triples = np.stack([rng.integers(0, 6, 14), rng.integers(0, 2, 14), rng.integers(0, 8, 14)], axis=1)
    kg = KnowledgeGraph(num_items=6, num_entities=8, num_relations=2, triples=triples)
    denoised = kg.with_triples(kg.triples[::2])
    model = KnowledgeDiffusionRecommender(6, 6, 8, 2, dim=4, num_layers=2,
                                          generator=torch.Generator().manual_seed(8), dtype=torch.float64)
    users = torch.as_tensor(graph.edges[:, 0])
    positives = torch.as_tensor(graph.edges[:, 1])
    negatives = torch.as_tensor(sample_negatives(graph, graph.edges[:, 0], np.random.default_rng(9)))
    return model, operator, KgIndex.from_kg(kg), KgIndex.from_kg(denoised), users, positives, negatives


def test_joint_loss_gradcheck() -> None:
    """Analytic gradients of the joint loss match central differences for every parameter"""
    model, operator, main_index, view_index, users, positives, negatives = _gradcheck_instance()
    names = [name for name, _ in model.named_parameters()]
    values = tuple(p.detach().clone().requires_grad_() for _, p in model.named_parameters())

    def loss(*params: torch.Tensor) -> torch.Tensor:
        state = dict(zip(names, params))
        main = functional_call(model, state, (operator, main_index))
        view = functional_call(model, state, (operator, view_index))
        l_r = bpr_loss(predict(main.users[users], main.items[positives]),
                       predict(main.users[users], main.items[negatives]))
        l_u = infonce_loss(main.users, view.users, 0.5)
        l_i = infonce_loss(main.items, view.items, 0.5)
        return joint_loss(l_r, l_u, l_i, squared_norm(params), theta1=0.1, theta2=1e-3).total

    assert torch.autograd.gradcheck(loss, values)


def test_zero_theta1_leaves_no_contrastive_gradient() -> None:
    model, operator, main_index, view_index, users, positives, negatives = _gradcheck_instance()
    main = model(operator, main_index)
    view = model(operator, view_index)
    l_r = bpr_loss(predict(main.users[users], main.items[positives]),
                   predict(main.users[users], main.items[negatives]))
    decay = squared_norm(model.parameters())
    breakdown = joint_loss(l_r, infonce_loss(main.users, view.users, 0.5),
                           infonce_loss(main.items, view.items, 0.5), decay, theta1=0.0, theta2=1e-3)
    with_terms = {name: g.clone() for name, g in backward(breakdown.total, model.named_parameters()).items()}

    model.zero_grad()
    main = model(operator, main_index)
    l_r = bpr_loss(predict(main.users[users], main.items[positives]),
                   predict(main.users[users], main.items[negatives]))
    reference = backward(l_r + 1e-3 * squared_norm(model.parameters()), model.named_parameters())
    for name, grad in reference.items():
        assert torch.equal(grad, with_terms[name]), name


# ============================================================================
# Training loop
# ============================================================================

def test_sample_negatives_are_unobserved(caplog) -> None:
    graph = _graph(3, 4, [(0, 0), (0, 1), (1, 2), (2, 0), (2, 1), (2, 2), (2, 3)])
    users = np.array([0, 0, 1, 0, 1] * 20)
    negatives = sample_negatives(graph, users, np.random.default_rng(0))
    observed = {tuple(edge) for edge in graph.edges.tolist()}
    assert all((int(u), int(j)) not in observed for u, j in zip(users, negatives))

    with caplog.at_level(logging.WARNING):
        sample_negatives(graph, np.array([2, 0]), np.random.default_rng(0))
    assert 'every item' in caplog.text


def test_empty_train_split_rejected() -> None:
    split = DatasetSplit(train=_graph(2, 2, []), test=np.zeros((0, 2), dtype=np.int64), seed=0)
    kg = KnowledgeGraph(num_items=2, num_entities=0, num_relations=0, triples=np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(EmptyGraphError):
        RecommenderTrainer(split, kg, _small_config())


def test_zero_learning_rate_keeps_parameters() -> None:
    split, kg = _small_dataset()
    trainer = RecommenderTrainer(split, kg, _small_config(epochs=1, learning_rate=0.0, denoiser_learning_rate=0.0))
    before = {name: p.detach().clone() for name, p in trainer.model.named_parameters()}
    denoiser_before = {name: p.detach().clone() for name, p in trainer.denoiser.named_parameters()}
    trainer.fit()
    for name, p in trainer.model.named_parameters():
        assert torch.equal(p.detach(), before[name]), name
    for name, p in trainer.denoiser.named_parameters():
        assert torch.equal(p.detach(), denoiser_before[name]), name


def test_training_is_deterministic() -> None:
    split, kg = _small_dataset()
    first = RecommenderTrainer(split, kg, _small_config(epochs=3)).fit()
    second = RecommenderTrainer(split, kg, _small_config(epochs=3)).fit()
    assert [m.model_dump() for m in first] == [m.model_dump() for m in second]
    assert all(m.recall is not None for m in first)


def test_metrics_trace_written(tmp_path) -> None:
    split, kg = _small_dataset()
    path = tmp_path / 'metrics.jsonl'
    trainer = RecommenderTrainer(split, kg, _small_config(epochs=2, eval_every=2), metrics_path=str(path))
    trainer.fit()
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert [line['epoch'] for line in lines] == [1, 2]
    assert lines[0]['recall'] is None
    assert lines[1]['recall'] is not None
    assert lines[0]['denoiser_loss'] is not None


def test_disabled_contrastive_term_reports_zero() -> None:
    split, kg = _small_dataset()
    trainer = RecommenderTrainer(split, kg, _small_config(theta1=0.0))
    history = trainer.fit()
    assert all(m.contrastive_user == 0.0 and m.contrastive_item == 0.0 for m in history)
    assert all(m.denoiser_loss is None for m in history)
    assert trainer.denoised_kg is kg


def test_staged_mode_and_refresh_period() -> None:
    split, kg = _small_dataset()
    trainer = RecommenderTrainer(split, kg, _small_config(epochs=3, denoiser_mode='staged', denoiser_epochs=2,
                                                          view_refresh_period=2))
    history = trainer.fit()
    assert all(m.denoiser_loss is None for m in history)
    assert np.bincount(trainer.denoised_kg.items, minlength=kg.num_items).tolist() == [1] * kg.num_items


def test_training_without_kg() -> None:
    split, _ = _small_dataset()
    empty = KnowledgeGraph(num_items=split.train.num_items, num_entities=0, num_relations=0,
                           triples=np.zeros((0, 3), dtype=np.int64))
    trainer = RecommenderTrainer(split, empty, _small_config(epochs=1))
    assert trainer.denoiser is None
    metrics = trainer.train_epoch()
    assert math.isfinite(metrics.total)


def test_overfits_small_clusters() -> None:
    """20 users / 20 items, 2 clusters, 200 epochs: training BPR falls below 0.1"""
    split, kg = _small_dataset()
    trainer = RecommenderTrainer(split, kg, _small_config(
        epochs=200, learning_rate=0.05, embedding_dim=32, num_layers=1, eval_every=0, dtype='float32',
    ))
    history = trainer.fit()
    assert history[-1].bpr_loss < 0.1, f"Final BPR {history[-1].bpr_loss:.4f}"
    assert history[-1].bpr_loss < history[0].bpr_loss


# ============================================================================
# Checkpoints
# ============================================================================

def test_checkpoint_round_trip(tmp_path) -> None:
    split, kg = _small_dataset()
    trainer = RecommenderTrainer(split, kg, _small_config(epochs=2))
    trainer.fit()
    path = save_checkpoint(trainer, str(tmp_path / 'run' / 'checkpoint.pt'))
    checkpoint = load_checkpoint(path)

    assert checkpoint.config == trainer.config
    assert checkpoint.epoch == 2
    assert [m.model_dump() for m in checkpoint.history] == [m.model_dump() for m in trainer.history]
    assert np.array_equal(checkpoint.split.train.edges, split.train.edges)
    assert np.array_equal(checkpoint.split.test, split.test)
    assert np.array_equal(checkpoint.kg.triples, kg.triples)
    assert np.array_equal(checkpoint.denoised_kg.triples, trainer.denoised_kg.triples)
    assert np.array_equal(checkpoint.schedule.betas, trainer.schedule.betas)

    model = checkpoint.build_model()
    for name, tensor in trainer.model.state_dict().items():
        assert torch.equal(model.state_dict()[name], tensor), name
    denoiser = checkpoint.build_denoiser()
    assert denoiser is not None
    for name, tensor in trainer.denoiser.state_dict().items():
        assert torch.equal(denoiser.state_dict()[name], tensor), name

    final = trainer.final_embeddings()
    assert torch.equal(checkpoint.final_embeddings.users, final.users)
    assert torch.equal(checkpoint.final_embeddings.items, final.items)
    assert torch.equal(checkpoint.generator().get_state(), trainer.generator.get_state())
    assert checkpoint.rng_state['numpy'] == trainer.rng.bit_generator.state
    resumed = checkpoint.rng()
    assert np.array_equal(resumed.integers(0, 1 << 30, size=8), trainer.rng.integers(0, 1 << 30, size=8))


def test_checkpoint_errors(tmp_path) -> None:
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'missing.pt'))

    foreign = tmp_path / 'foreign.pt'
    torch.save({'weights': torch.zeros(2)}, str(foreign))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(foreign))

    garbage = tmp_path / 'garbage.pt'
    garbage.write_bytes(b'not a checkpoint')
    with pytest.raises(CheckpointError):
        load_checkpoint(str(garbage))
