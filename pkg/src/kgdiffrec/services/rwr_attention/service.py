"""
RWR Attention Service
Builds the attention-aware matrix S from random-walk-with-restart visited sets
and assembles the normalized propagation operator

    L = D_u^{-1/2} (A + xi * S) D_v^{-1/2}

Walks run on the symmetric user+item node graph (see
InteractionGraph.bipartite_csr). Each start node draws from its own RNG
stream seeded by (seed, node), so serial and threaded runs agree exactly.
"""
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import AbstractSet, FrozenSet, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from kgdiffrec.config import Config
from kgdiffrec.errors import EmptyGraphError, ParameterError
from kgdiffrec.models import WalkConfig
from kgdiffrec.services.graph import InteractionGraph

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AttentionMatrix:
    """
    Attention-aware matrix S

    Fields:
        matrix: num_users x num_items CSR matrix with exactly the sparsity pattern of A
            (zero similarities are stored explicitly)
        config: Walk configuration that produced it
    """
    matrix: sp.csr_matrix
    config: WalkConfig


@dataclass(frozen=True, eq=False)
class PropagationOperator:
    """
    Normalized attention-aware operator L

    Fields:
        matrix: num_users x num_items CSR matrix
        xi: Blend weight of S
        degrees_include_attention: Whether D_u, D_v were taken from A + xi*S instead of A
    """
    matrix: sp.csr_matrix
    xi: float
    degrees_include_attention: bool = False


def node_rng(seed: int, node: int) -> np.random.Generator:
    """Independent per-node stream derived from (seed, node)"""
    return np.random.default_rng([seed, node])


def rwr_walk_positions(
    graph: InteractionGraph,
    start: int,
    cfg: WalkConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Positions of R restart walks of M steps from `start`

    At every step a walker returns to `start` with probability
    cfg.restart_prob and otherwise moves to a uniformly drawn neighbor. The
    R walkers advance in lockstep; each step draws the restart coins first
    and the neighbor picks second.

    Args:
        graph: Interaction graph
        start: Node id (users 0..U-1, items U..U+I-1)
        cfg: Walk configuration
        rng: Random generator; defaults to node_rng(cfg.seed, start)

    Returns:
        (path_length, num_paths) int64 array; row k holds every walker's node after step k+1.
        A start node without edges stays in place.
    """
    if not 0 <= start < graph.num_nodes:
        raise ValueError(f"Start node {start} out of range [0, {graph.num_nodes})")
    if rng is None:
        rng = node_rng(cfg.seed, start)

    steps = np.full((cfg.path_length, cfg.num_paths), start, dtype=np.int64)
    indptr, indices = graph.bipartite_csr
    degrees = indptr[1:] - indptr[:-1]
    if degrees[start] == 0:
        return steps

    positions = steps[0].copy()
    for step in range(cfg.path_length):
        restart = rng.random(cfg.num_paths) < cfg.restart_prob
        picks = rng.random(cfg.num_paths)
        # every reachable node has degree >= 1: walks only move along edges
        offsets = np.floor(picks * degrees[positions]).astype(np.int64)
        moved = indices[indptr[positions] + offsets]
        positions = np.where(restart, start, moved)
        steps[step] = positions
    return steps


def rwr_visited_set(
    graph: InteractionGraph,
    start: int,
    cfg: WalkConfig,
    rng: Optional[np.random.Generator] = None,
) -> FrozenSet[int]:
    """
    Distinct nodes visited by R independent restart walks of M steps from `start`

    Args:
        graph: Interaction graph
        start: Node id (users 0..U-1, items U..U+I-1)
        cfg: Walk configuration
        rng: Random generator; defaults to node_rng(cfg.seed, start)

    Returns:
        Frozen set of node ids, always containing `start`
    """
    positions = rwr_walk_positions(graph, start, cfg, rng)
    return frozenset(np.unique(positions).tolist()) | {start}


def jaccard(a: AbstractSet[int], b: AbstractSet[int]) -> float:
    """|a & b| / |a | b|, with 0.0 for two empty sets"""
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def compute_visited_sets(graph: InteractionGraph, cfg: WalkConfig, threads: int = 1) -> List[FrozenSet[int]]:
    """
    Visited set of every node, computed once

    Args:
        threads: Worker threads (0 = all cores, 1 = serial)
    """
    nodes = range(graph.num_nodes)

    def visit(node: int) -> FrozenSet[int]:
        return rwr_visited_set(graph, node, cfg, node_rng(cfg.seed, node))

    if threads == 1:
        return [visit(node) for node in nodes]
    workers = threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(visit, nodes))


def attention_from_visited(
    graph: InteractionGraph,
    visited: Sequence[AbstractSet[int]],
    cfg: WalkConfig,
) -> AttentionMatrix:
    """S(u, v) = jaccard(visited[u], visited[U + v]) on every observed edge"""
    values = np.array(
        [jaccard(visited[u], visited[graph.num_users + v]) for u, v in graph.edges],
        dtype=np.float64,
    )
    structure = graph.adjacency
    # edges are sorted (user, item), which is CSR order of A
    matrix = sp.csr_matrix((values, structure.indices.copy(), structure.indptr.copy()), shape=structure.shape)
    return AttentionMatrix(matrix=matrix, config=cfg)


def build_attention_matrix(
    graph: InteractionGraph,
    cfg: WalkConfig,
    threads: int = 1,
    cache: Optional['AttentionCache'] = None,
) -> AttentionMatrix:
    """
    Attention-aware matrix of a graph

    Args:
        graph: Nonempty interaction graph
        cfg: Walk configuration
        threads: Worker threads for the walks (0 = all cores)
        cache: Optional on-disk cache keyed by (graph hash, cfg)

    Raises:
        EmptyGraphError: If the graph has no edges
    """
    if graph.num_edges == 0:
        raise EmptyGraphError("Cannot build an attention matrix for a graph without edges")

    if cache is not None:
        cached = cache.load(graph, cfg)
        if cached is not None:
            return cached

    logger.info(
        f"Sampling {cfg.num_paths} walks x {cfg.path_length} steps for {graph.num_nodes} nodes "
        f"(restart={cfg.restart_prob})"
    )
    visited = compute_visited_sets(graph, cfg, threads=threads)
    attention = attention_from_visited(graph, visited, cfg)

    if cache is not None:
        cache.store(graph, attention)
    return attention


def build_propagation_operator(
    graph: InteractionGraph,
    attention: AttentionMatrix,
    xi: float,
    degrees_include_attention: bool = False,
) -> PropagationOperator:
    """
    L(u, v) = (A(u, v) + xi * S(u, v)) / sqrt(deg(u) * deg(v))

    Degrees come from the binary adjacency unless degrees_include_attention
    is set, in which case row/column sums of A + xi*S are used. Zero-degree
    rows and columns stay zero.

    Raises:
        ParameterError: If xi is negative
        ValueError: If S has entries outside the support of A
    """
    if xi < 0:
        raise ParameterError(f"xi must be non-negative, got {xi}")

    adjacency = graph.adjacency
    s_matrix = attention.matrix.tocsr()
    outside = s_matrix - s_matrix.multiply(adjacency)
    if outside.count_nonzero():
        raise ValueError("Attention matrix has entries outside the adjacency support")

    blended = (adjacency + xi * s_matrix).tocsr()
    if degrees_include_attention:
        user_deg = np.asarray(blended.sum(axis=1)).ravel()
        item_deg = np.asarray(blended.sum(axis=0)).ravel()
    else:
        user_deg = graph.user_degrees.astype(np.float64)
        item_deg = graph.item_degrees.astype(np.float64)

    with np.errstate(divide='ignore'):
        user_scale = np.where(user_deg > 0, 1.0 / np.sqrt(user_deg), 0.0)
        item_scale = np.where(item_deg > 0, 1.0 / np.sqrt(item_deg), 0.0)

    matrix = sp.diags(user_scale) @ blended @ sp.diags(item_scale)
    matrix = sp.csr_matrix(matrix)
    matrix.sort_indices()
    return PropagationOperator(matrix=matrix, xi=float(xi), degrees_include_attention=degrees_include_attention)


class AttentionCache:
    """
    On-disk cache of attention matrices

    Files are named by sha256(graph hash, walk config) and store the matrix
    together with the seed and config for audit.

    Attributes:
        directory: Cache directory
    """

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory or Config.ATTENTION_CACHE_DIR
        if not self.directory:
            raise ValueError("AttentionCache needs a directory (KGDIFFREC_ATTENTION_CACHE_DIR)")
        os.makedirs(self.directory, exist_ok=True)

    def key(self, graph: InteractionGraph, cfg: WalkConfig) -> str:
        digest = hashlib.sha256()
        digest.update(graph.content_hash().encode())
        digest.update(cfg.model_dump_json().encode())
        return digest.hexdigest()

    def _path(self, graph: InteractionGraph, cfg: WalkConfig) -> str:
        return os.path.join(self.directory, f"attention-{self.key(graph, cfg)[:32]}.npz")

    def load(self, graph: InteractionGraph, cfg: WalkConfig) -> Optional[AttentionMatrix]:
        """Cached matrix for (graph, cfg), or None on a miss or unreadable file"""
        path = self._path(graph, cfg)
        if not os.path.exists(path):
            return None
        try:
            with np.load(path, allow_pickle=False) as payload:
                stored_cfg = WalkConfig(**json.loads(str(payload['config'])))
                if stored_cfg != cfg:
                    return None
                matrix = sp.csr_matrix(
                    (payload['data'], payload['indices'], payload['indptr']),
                    shape=tuple(payload['shape']),
                )
        except Exception as e:
            logger.warning(f"Ignoring unreadable attention cache {path}: {e}")
            return None
        logger.info(f"Attention matrix loaded from cache {path}")
        return AttentionMatrix(matrix=matrix, config=cfg)

    def store(self, graph: InteractionGraph, attention: AttentionMatrix) -> str:
        """Write the matrix; returns the file path"""
        path = self._path(graph, attention.config)
        matrix = attention.matrix
        np.savez(
            path,
            data=matrix.data,
            indices=matrix.indices,
            indptr=matrix.indptr,
            shape=np.array(matrix.shape),
            seed=np.array(attention.config.seed),
            config=np.array(attention.config.model_dump_json()),
        )
        return path
