"""Input-token selection for activation computation.

The adaptive pipeline seeds token contributions from the final query's
attention distribution, spreads contribution mass over each token's
nearest neighbors in output-token space, then greedily picks the highest
contribution while penalizing the picked token's neighbors. Selection
stops once the maximum mean discrepancy between the full token set and
the picked subset falls below a threshold. Full / random / above-mean
attention selection cover the ablation variants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diversity import _unit_rows
from .errors import InsufficientTokensError, ShapeError

SELECTION_KINDS = ("full", "random", "attention", "amia")


def token_contributions(attention: np.ndarray) -> np.ndarray:
    """Attention distribution of the final query over all key positions."""
    attention = np.asarray(attention)
    if attention.ndim != 2 or attention.shape[0] != attention.shape[1]:
        raise ShapeError(f"attention must be square, got {attention.shape}")
    return attention[-1, :].astype(np.float64)


def pairwise_cosine_distances(z: np.ndarray) -> np.ndarray:
    """N x N cosine distances with an exact-zero diagonal."""
    unit = _unit_rows(z)
    d = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    np.fill_diagonal(d, 0.0)
    return d


def kernel_matrix(distances: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * distances)


@dataclass
class NeighborGraph:
    """k nearest neighbors per token (cosine distance, ties to lower index)."""

    neighbors: np.ndarray  # (N, k) int
    distances: np.ndarray  # (N, k)
    gamma: float
    k: int

    def __post_init__(self):
        self.weights = np.exp(-self.gamma * self.distances)

    @property
    def n_tokens(self) -> int:
        return self.neighbors.shape[0]

    def with_gamma(self, gamma: float) -> "NeighborGraph":
        return NeighborGraph(self.neighbors, self.distances, gamma, self.k)


def build_knn(z: np.ndarray, k: int = 3, gamma: float = 1.0,
              distances: np.ndarray | None = None) -> NeighborGraph:
    n = np.asarray(z).shape[0]
    if n <= k:
        raise InsufficientTokensError(f"kNN graph needs more than k={k} tokens, got {n}")
    if distances is None:
        distances = pairwise_cosine_distances(z)
    ranked = distances.copy()
    np.fill_diagonal(ranked, np.inf)  # no self-neighbors
    order = np.argsort(ranked, axis=1, kind="stable")[:, :k]
    rows = np.arange(n)[:, None]
    return NeighborGraph(order, distances[rows, order], gamma, k)


def forward_update(a: np.ndarray, graph: NeighborGraph) -> np.ndarray:
    """One synchronous pass of neighbor reinforcement; reads only the input a."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (graph.n_tokens,):
        raise ShapeError(f"contributions length {a.shape} != token count {graph.n_tokens}")
    return a + (graph.weights * a[graph.neighbors]).sum(axis=1)


def mmd(set_a: np.ndarray, set_b: np.ndarray, kernel: np.ndarray) -> float:
    """A(a,a) + A(b,b) - 2 A(a,b) with kernel means over all pairs of the sets."""
    set_a = np.asarray(set_a, dtype=int)
    set_b = np.asarray(set_b, dtype=int)
    if len(set_a) == 0 or len(set_b) == 0:
        raise InsufficientTokensError("MMD needs two non-empty index sets")
    k_aa = kernel[np.ix_(set_a, set_a)].mean()
    k_bb = kernel[np.ix_(set_b, set_b)].mean()
    k_ab = kernel[np.ix_(set_a, set_b)].mean()
    return max(0.0, float(k_aa + k_bb - 2.0 * k_ab))


@dataclass
class SelectionResult:
    selected: np.ndarray          # pick order
    mmd_trace: list[float]
    threshold: float
    stopped_by: str               # "threshold" | "exhausted" | "max_count"


def reverse_select(contributions: np.ndarray, graph: NeighborGraph, kernel: np.ndarray,
                   threshold: float, min_count: int = 4,
                   max_count: int | None = None) -> SelectionResult:
    """Greedy pick-and-penalize selection with an MMD stopping rule.

    Each step picks the highest remaining contribution (ties to the lowest
    index), subtracts `e_ij * a_i` from the picked token's graph neighbors,
    and recomputes MMD(all tokens, picked) from the full kernel. Stops when
    MMD < threshold (after min_count picks), all tokens are picked, or
    max_count is reached.
    """
    a = np.asarray(contributions, dtype=np.float64).copy()
    n = graph.n_tokens
    if a.shape != (n,):
        raise ShapeError(f"contributions length {a.shape} != token count {n}")
    if kernel.shape != (n, n):
        raise ShapeError(f"kernel shape {kernel.shape} != ({n}, {n})")
    min_count = min(n, max(min_count, 1))
    limit = n if max_count is None else min(n, max(max_count, min_count))

    total_mean = kernel.mean()
    cross_cols = np.zeros(n)      # per-token kernel sum to the picked set
    sum_selected = 0.0            # kernel sum over picked x picked
    sum_cross = 0.0               # kernel sum over all x picked
    picked: list[int] = []
    picked_mask = np.zeros(n, dtype=bool)
    trace: list[float] = []
    stopped_by = "exhausted"

    while True:
        candidate = int(np.where(picked_mask, -np.inf, a).argmax())
        value = a[candidate]
        picked.append(candidate)
        picked_mask[candidate] = True
        neigh = graph.neighbors[candidate]
        a[neigh] -= graph.weights[candidate] * value

        sum_selected += 2.0 * cross_cols[candidate] + kernel[candidate, candidate]
        cross_cols += kernel[:, candidate]
        sum_cross += kernel[:, candidate].sum()
        t = len(picked)
        current = max(0.0, float(total_mean + sum_selected / t**2 - 2.0 * sum_cross / (n * t)))
        trace.append(current)

        if t >= min_count and current < threshold:
            stopped_by = "threshold"
            break
        if t == n:
            stopped_by = "exhausted"
            break
        if t >= limit:
            stopped_by = "max_count"
            break

    return SelectionResult(np.array(picked, dtype=int), trace, threshold, stopped_by)


@dataclass(frozen=True)
class AmiaParams:
    k: int = 3
    gamma_forward: float = 1.0
    gamma_reverse: float = 0.2
    mmd_coefficient: float = 0.1
    max_count: int | None = None

    @property
    def min_count(self) -> int:
        return max(self.k + 1, 4)


def select_amia(a: np.ndarray, z: np.ndarray, threshold: float,
                params: AmiaParams = AmiaParams()) -> SelectionResult:
    """Full adaptive pipeline over one layer's output tokens."""
    distances = pairwise_cosine_distances(z)
    graph_fwd = build_knn(z, params.k, params.gamma_forward, distances=distances)
    boosted = forward_update(a, graph_fwd)
    kernel = kernel_matrix(distances, params.gamma_reverse)
    graph_rev = graph_fwd.with_gamma(params.gamma_reverse)
    return reverse_select(boosted, graph_rev, kernel, threshold,
                          min_count=params.min_count, max_count=params.max_count)


def select_variant(kind: str, a: np.ndarray, z: np.ndarray, *,
                   rng: np.random.Generator | None = None,
                   threshold: float = 0.0,
                   params: AmiaParams = AmiaParams(),
                   random_count: int = 100) -> np.ndarray:
    """Dispatch over the selection strategies; returns selected token indices."""
    n = np.asarray(z).shape[0]
    if kind == "full":
        return np.arange(n)
    if kind == "random":
        if rng is None:
            raise ValueError("random selection requires an rng")
        return np.sort(rng.choice(n, size=min(random_count, n), replace=False))
    if kind == "attention":
        a = np.asarray(a, dtype=np.float64)
        chosen = np.where(a > a.mean())[0]
        # uniform contributions leave nothing above the mean; fall back to all tokens
        return chosen if len(chosen) else np.arange(n)
    if kind == "amia":
        return select_amia(a, z, threshold, params).selected
    raise ValueError(f"unknown selection kind {kind!r}")
