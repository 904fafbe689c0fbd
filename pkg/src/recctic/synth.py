"""Synthetic cascade corpora with known transmission trees.

A scale-free user graph is grown by preferential attachment, each
undirected edge becomes two directed ones, and episodes are drawn from a
classic continuous-time cascade on that graph.  Two regimes decide the
transmission probabilities:

* ``arti1``: every edge carries a few independent probabilities and each
  episode picks one of these variants uniformly;
* ``arti2``: every episode draws a sparse content vector ``z`` and an edge
  ``(u, v)`` transmits with ``sigmoid(k_scale * <z, feat_v> + k_bias)``,
  where hubs have diffuse features and other nodes sparse ones.

The world node reaches every user with the same small probability.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from os import PathLike

import networkx as nx
import numpy as np
from scipy.special import expit

from .episodes import WORLD, Cascade, Episode, episode_from_events, episode_record
from .generator import simulate
from .models import Simulator

REGIMES = ("arti1", "arti2")


@dataclass
class SyntheticSpec:
    regime: str = "arti1"
    node_count: int = 100
    attach_edges: int = 2
    r_range: tuple[float, float] = (0.5, 2.0)
    k_range: tuple[float, float] = (0.05, 0.5)
    variants: int = 5
    world_sources: float = 1.0
    feature_dim: int = 5
    content_alpha: float = 0.1
    hub_alpha: float = 10.0
    node_alpha: float = 0.1
    hub_degree: int = 30
    k_scale: float = 8.0
    k_bias: float = -5.0
    n_episodes: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.node_count <= self.attach_edges or self.attach_edges < 1:
            raise ValueError("need node_count > attach_edges >= 1")
        if self.variants < 1 or self.feature_dim < 1 or self.n_episodes < 0:
            raise ValueError("counts must be positive")
        if min(self.content_alpha, self.hub_alpha, self.node_alpha) <= 0:
            raise ValueError("Dirichlet parameters must be positive")
        lo, hi = self.r_range
        if not 0 < lo <= hi:
            raise ValueError("delay rates must be positive")
        lo, hi = self.k_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("k_range must lie in [0, 1]")
        if not 0 < self.world_sources < self.node_count:
            raise ValueError("world_sources must be in (0, node_count)")
        self.r_range = tuple(self.r_range)
        self.k_range = tuple(self.k_range)

    @property
    def n_nodes(self) -> int:
        """Graph size including the world node."""
        return self.node_count + 1

    @property
    def world_k(self) -> float:
        return self.world_sources / self.node_count


@dataclass
class SyntheticGraph:
    """Directed user edges (node ids start at 1) plus per-edge parameters.

    ``k_variants`` has shape ``(variants, E)`` for ``arti1``; ``features``
    has shape ``(n_nodes, feature_dim)`` for ``arti2`` (row 0 unused).
    """

    spec: SyntheticSpec
    src: np.ndarray
    dst: np.ndarray
    rate: np.ndarray
    world_rate: np.ndarray
    k_variants: np.ndarray | None = None
    features: np.ndarray | None = None
    degree: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_edges(self) -> int:
        return len(self.src)

    def rate_matrix(self) -> np.ndarray:
        N = self.spec.n_nodes
        R = np.ones((N, N))
        R[self.src, self.dst] = self.rate
        R[WORLD, 1:] = self.world_rate
        return R

    def k_matrix(self, edge_k: np.ndarray) -> np.ndarray:
        N = self.spec.n_nodes
        K = np.zeros((N, N))
        K[self.src, self.dst] = edge_k
        K[WORLD, 1:] = self.spec.world_k
        return K

    def edge_k(self, regime: int | None = None, content: np.ndarray | None = None) -> np.ndarray:
        if self.spec.regime == "arti1":
            return self.k_variants[regime]
        s = self.spec
        return expit(s.k_scale * (self.features[self.dst] @ content) + s.k_bias)

    def to_dict(self) -> dict:
        out = {
            "spec": asdict(self.spec),
            "edges": np.stack([self.src, self.dst], axis=1).tolist(),
            "rate": self.rate.tolist(),
            "world_rate": self.world_rate.tolist(),
            "world_k": self.spec.world_k,
            "degree": self.degree.tolist(),
        }
        if self.k_variants is not None:
            out["k_variants"] = self.k_variants.tolist()
        if self.features is not None:
            out["features"] = self.features.tolist()
        return out


def build_graph(spec: SyntheticSpec) -> SyntheticGraph:
    rng = np.random.default_rng([spec.seed, 0])
    skeleton = nx.barabasi_albert_graph(
        spec.node_count, spec.attach_edges, seed=int(rng.integers(2**31))
    )
    und = np.array(sorted(skeleton.edges()), dtype=np.int64) + 1
    src = np.concatenate([und[:, 0], und[:, 1]])
    dst = np.concatenate([und[:, 1], und[:, 0]])
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    # degree of the directed graph: in- plus out-edges
    degree = np.zeros(spec.n_nodes, dtype=np.int64)
    np.add.at(degree, src, 1)
    np.add.at(degree, dst, 1)

    rate = rng.uniform(*spec.r_range, size=len(src))
    world_rate = rng.uniform(*spec.r_range, size=spec.node_count)
    graph = SyntheticGraph(spec, src, dst, rate, world_rate, degree=degree)
    if spec.regime == "arti1":
        graph.k_variants = rng.uniform(*spec.k_range, size=(spec.variants, len(src)))
    else:
        feats = np.zeros((spec.n_nodes, spec.feature_dim))
        for v in range(1, spec.n_nodes):
            alpha = spec.hub_alpha if degree[v] > spec.hub_degree else spec.node_alpha
            feats[v] = _dirichlet(rng, alpha, spec.feature_dim)
        graph.features = feats
    return graph


def _dirichlet(rng: np.random.Generator, alpha: float, dim: int) -> np.ndarray:
    # small alphas underflow numpy's sampler to all-zero vectors; go through log-gammas
    g = rng.gamma(alpha + 1.0, size=dim)
    logx = np.log(g) + np.log(rng.random(dim)) / alpha
    logx -= logx.max()
    x = np.exp(logx)
    return x / x.sum()


@dataclass
class Corpus:
    episodes: list[Episode]
    cascades: list[Cascade]
    labels: list[dict]


def _sample_one(graph: SyntheticGraph, R: np.ndarray, index: int) -> tuple[Cascade, dict]:
    spec = graph.spec
    rng = np.random.default_rng([spec.seed, 1, index])
    if spec.regime == "arti1":
        regime = int(rng.integers(spec.variants))
        label = {"regime": regime}
        edge_k = graph.edge_k(regime=regime)
    else:
        content = _dirichlet(rng, spec.content_alpha, spec.feature_dim)
        label = {"content": content.tolist()}
        edge_k = graph.edge_k(content=content)
    raw = simulate(Simulator(R, K=graph.k_matrix(edge_k)), rng)
    return _normalize(raw), label


def _normalize(cascade: Cascade) -> Cascade:
    ep = cascade.episode
    norm = episode_from_events(list(zip(ep.nodes[1:].tolist(), ep.times[1:].tolist())))
    if norm is None:
        return cascade
    return Cascade(norm, cascade.ancestors, truncated=cascade.truncated)


def _sample_range(graph: SyntheticGraph, lo: int, hi: int):
    R = graph.rate_matrix()
    return [_sample_one(graph, R, i) for i in range(lo, hi)]


def sample_corpus(graph: SyntheticGraph, n_episodes: int | None = None, workers: int = 1) -> Corpus:
    """Draw episodes with their true ancestors and the regime or content label.

    Each episode has its own random stream, so the corpus does not depend on
    ``workers``.  Episodes reaching no user are kept.
    """
    n = graph.spec.n_episodes if n_episodes is None else n_episodes
    if workers <= 1 or n < 2 * workers:
        results = _sample_range(graph, 0, n)
    else:
        cuts = np.linspace(0, n, workers + 1).astype(int)
        with ProcessPoolExecutor(workers) as pool:
            parts = pool.map(_sample_range, [graph] * workers, cuts[:-1], cuts[1:])
            results = [item for part in parts for item in part]
    cascades = [c for c, _ in results]
    return Corpus([c.episode for c in cascades], cascades, [lab for _, lab in results])


def write_corpus(
    corpus: Corpus,
    graph: SyntheticGraph,
    episodes_path: str | PathLike,
    truth_path: str | PathLike,
    graph_path: str | PathLike,
) -> None:
    with open(episodes_path, "w", encoding="utf-8") as fh:
        for ep in corpus.episodes:
            fh.write(json.dumps(episode_record(ep)) + "\n")
    with open(truth_path, "w", encoding="utf-8") as fh:
        for c, label in zip(corpus.cascades, corpus.labels):
            fh.write(json.dumps(episode_record(c.episode, c.ancestors, **label)) + "\n")
    with open(graph_path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_dict(), fh)

