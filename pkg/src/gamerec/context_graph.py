"""Multi-relation game context graph: shared attributes plus co-behavior.

Five undirected relations over the catalog: co-genre, co-developer and
co-publisher from game attributes; co-purchase and co-dwelling from the
training engagements. Behavior relations keep a pair only when its score
strictly exceeds the configured threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import sparse

from .data import Dataset

logger = logging.getLogger(__name__)


class RelationKind(Enum):
    CO_GENRE = "co_genre"
    CO_DEVELOPER = "co_developer"
    CO_PUBLISHER = "co_publisher"
    CO_PURCHASE = "co_purchase"
    CO_DWELLING = "co_dwelling"


RELATION_ORDER: tuple[RelationKind, ...] = tuple(RelationKind)
FEATURE_RELATIONS = (RelationKind.CO_GENRE, RelationKind.CO_DEVELOPER, RelationKind.CO_PUBLISHER)

# (game_i, game_j) with game_i < game_j -> relation score (1.0 for feature relations)
EdgeSet = dict[tuple[int, int], float]


# ----------------------------------------------------------- feature relations


def build_feature_relation(d: Dataset, kind: RelationKind) -> EdgeSet:
    """Pairs of games sharing a genre label, a developer, or a publisher."""
    if kind not in FEATURE_RELATIONS:
        raise ValueError(f"{kind} is not a feature-based relation")
    groups: dict[str, list[int]] = {}
    if kind is RelationKind.CO_GENRE:
        for idx, genres in enumerate(d.catalog_genres):
            for label in genres:
                groups.setdefault(label, []).append(idx)
    elif kind is RelationKind.CO_DEVELOPER:
        for idx, dev in enumerate(d.catalog_developers):
            groups.setdefault(dev, []).append(idx)
    else:
        for idx, pub in enumerate(d.catalog_publishers):
            groups.setdefault(pub, []).append(idx)
    edges: EdgeSet = {}
    games = d.catalog_games
    for members in groups.values():
        for a in range(len(members)):
            gi = int(games[members[a]])
            for b in range(a + 1, len(members)):
                edges[(gi, int(games[members[b]]))] = 1.0
    return edges


# ---------------------------------------------------------- behavior relations


def _merge_key_stats(
    keys: np.ndarray, stats: np.ndarray, new_keys: np.ndarray, new_stats: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Merge two (key, per-key stat rows) accumulators, summing equal keys."""
    all_keys = np.concatenate((keys, new_keys))
    all_stats = np.concatenate((stats, new_stats))
    order = np.argsort(all_keys, kind="stable")
    all_keys, all_stats = all_keys[order], all_stats[order]
    starts = np.flatnonzero(np.concatenate(([True], all_keys[1:] != all_keys[:-1])))
    return all_keys[starts], np.add.reduceat(all_stats, starts, axis=0)


def _pair_stats(train: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared-user statistics per co-engaged game pair.

    Enumerates each user's engaged-game pairs (never all game pairs against
    all users). Returns (pair keys ``i * n_games + j`` with i < j dense
    indices, stats rows [common users, sum minutes on i, sum minutes on j],
    per-game engaged-user counts).
    """
    n = train.n_games
    codes = np.searchsorted(train.catalog_games, train.eng_game).astype(np.int64)
    game_counts = np.bincount(codes, minlength=n)

    keys = np.empty(0, dtype=np.int64)
    stats = np.empty((0, 3), dtype=np.float64)
    chunk_keys: list[np.ndarray] = []
    chunk_stats: list[np.ndarray] = []
    chunk_pairs = 0
    users = train.users
    for u in users:
        rows = train.user_rows(int(u))
        g = codes[rows]
        m = train.eng_minutes[rows]
        k = g.size
        if k < 2:
            continue
        a, b = np.triu_indices(k, 1)
        chunk_keys.append(g[a] * n + g[b])
        chunk_stats.append(np.column_stack((np.ones(a.size), m[a], m[b])))
        chunk_pairs += a.size
        if chunk_pairs >= 2_000_000:
            keys, stats = _merge_key_stats(keys, stats, np.concatenate(chunk_keys), np.concatenate(chunk_stats))
            chunk_keys, chunk_stats, chunk_pairs = [], [], 0
    if chunk_pairs:
        keys, stats = _merge_key_stats(keys, stats, np.concatenate(chunk_keys), np.concatenate(chunk_stats))
    return keys, stats, game_counts


def build_co_purchase(train: Dataset, tau_p: float) -> EdgeSet:
    """Game pairs whose shared-audience ratio strictly exceeds ``tau_p``.

    The pair score is (# users engaged in both) / (# users in i + # users in j).
    """
    if tau_p < 0:
        raise ValueError("tau_p must be >= 0")
    keys, stats, game_counts = _pair_stats(train)
    n = train.n_games
    i = keys // n
    j = keys % n
    common = stats[:, 0]
    score = common / (game_counts[i] + game_counts[j])
    keep = score > tau_p
    games = train.catalog_games
    return {
        (int(games[a]), int(games[b])): float(s)
        for a, b, s in zip(i[keep], j[keep], score[keep])
    }


def mean_dwelling_gap(train: Dataset) -> float:
    """Mean |t_i - t_j| over co-engaged pairs; the default time scale.

    ``t_i``/``t_j`` are per-pair average dwelling times over common users.
    Falls back to 1.0 when there are no candidate pairs or all gaps are zero.
    """
    keys, stats, _ = _pair_stats(train)
    if keys.size == 0:
        return 1.0
    gaps = np.abs(stats[:, 1] - stats[:, 2]) / stats[:, 0]
    mean_gap = float(gaps.mean())
    return mean_gap if mean_gap > 0 else 1.0


def build_co_dwelling(train: Dataset, tau_t: float, time_scale: float) -> EdgeSet:
    """Game pairs whose dwelling-time similarity strictly exceeds ``tau_t``.

    Candidates are pairs with at least one common engaged user; the score is
    exp(-|t_i - t_j| / time_scale) with t_i, t_j averaged over common users.
    """
    if not (0.0 <= tau_t < 1.0):
        raise ValueError("tau_t must be in [0, 1)")
    if time_scale <= 0:
        raise ValueError("time_scale must be > 0")
    keys, stats, _ = _pair_stats(train)
    n = train.n_games
    i = keys // n
    j = keys % n
    t_i = stats[:, 1] / stats[:, 0]
    t_j = stats[:, 2] / stats[:, 0]
    score = np.exp(-np.abs(t_i - t_j) / time_scale)
    keep = score > tau_t
    games = train.catalog_games
    return {
        (int(games[a]), int(games[b])): float(s)
        for a, b, s in zip(i[keep], j[keep], score[keep])
    }


# --------------------------------------------------------------------- graph


@dataclass(frozen=True)
class ContextGraph:
    """Symmetric per-relation adjacency over the catalog with O(1) degrees."""

    game_ids: np.ndarray  # (I,) uint64 sorted, catalog order
    relations: dict[RelationKind, sparse.csr_matrix]  # binary, symmetric, no self-loops
    _operator_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def game_index(self, game_id: int) -> int:
        idx = int(np.searchsorted(self.game_ids, np.uint64(game_id)))
        if idx >= self.game_ids.size or self.game_ids[idx] != np.uint64(game_id):
            raise ValueError(f"unknown game id {game_id}")
        return idx

    def degree(self, kind: RelationKind) -> np.ndarray:
        adj = self.relations[kind]
        return np.diff(adj.indptr)

    def neighbor_count(self, game_id: int, kind: RelationKind) -> int:
        adj = self.relations[kind]
        idx = self.game_index(game_id)
        return int(adj.indptr[idx + 1] - adj.indptr[idx])

    def neighbor_indices(self, idx: int, kind: RelationKind) -> np.ndarray:
        adj = self.relations[kind]
        return adj.indices[adj.indptr[idx] : adj.indptr[idx + 1]]

    def neighbors(self, game_id: int, kind: RelationKind) -> np.ndarray:
        return self.game_ids[self.neighbor_indices(self.game_index(game_id), kind)]

    def operator(self, kind: RelationKind, normalization: str) -> sparse.csr_matrix:
        """Aggregation operator: row-mean or symmetric degree normalization."""
        key = (kind, normalization)
        if key not in self._operator_cache:
            adj = self.relations[kind].astype(np.float64)
            deg = np.diff(adj.indptr).astype(np.float64)
            if normalization == "mean":
                inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
                op = sparse.diags(inv) @ adj
            elif normalization == "symmetric":
                inv_sqrt = np.divide(1.0, np.sqrt(deg), out=np.zeros_like(deg), where=deg > 0)
                op = sparse.diags(inv_sqrt) @ adj @ sparse.diags(inv_sqrt)
            else:
                raise ValueError(f"unknown normalization {normalization!r}")
            self._operator_cache[key] = op.tocsr()
        return self._operator_cache[key]


def assemble(relations: dict[RelationKind, EdgeSet], game_ids: np.ndarray) -> ContextGraph:
    """Build the multi-relation graph; requires all five relation kinds."""
    missing = [k for k in RELATION_ORDER if k not in relations]
    if missing:
        raise ValueError(f"missing relation kinds: {[k.value for k in missing]}")
    game_ids = np.asarray(game_ids, dtype=np.uint64)
    n = game_ids.size
    adjacency: dict[RelationKind, sparse.csr_matrix] = {}
    for kind in RELATION_ORDER:
        edges = relations[kind]
        if edges:
            pairs = np.array(sorted(edges.keys()), dtype=np.uint64)
            i = np.searchsorted(game_ids, pairs[:, 0])
            j = np.searchsorted(game_ids, pairs[:, 1])
            bad = (
                (i >= n)
                | (j >= n)
                | (game_ids[np.minimum(i, n - 1)] != pairs[:, 0])
                | (game_ids[np.minimum(j, n - 1)] != pairs[:, 1])
            )
            if bad.any():
                raise ValueError(f"{kind.value}: edge references a game outside the catalog")
            if np.any(i == j):
                raise ValueError(f"{kind.value}: self-loop edge")
            rows = np.concatenate((i, j))
            cols = np.concatenate((j, i))
            data = np.ones(rows.size)
            adj = sparse.csr_matrix((data, (rows, cols)), shape=(n, n))
            adj.data[:] = 1.0  # duplicates become a single symmetric edge
            adj.sort_indices()
        else:
            adj = sparse.csr_matrix((n, n))
        adjacency[kind] = adj
    return ContextGraph(game_ids=game_ids, relations=adjacency)


def build_context_graph(
    train: Dataset,
    tau_p: float,
    tau_t: float,
    time_scale: float | None = None,
) -> tuple[ContextGraph, dict[RelationKind, EdgeSet], float]:
    """Build all five relations from training data and assemble the graph.

    ``time_scale=None`` resolves to the mean dwelling gap over candidate pairs.
    """
    if time_scale is None:
        time_scale = mean_dwelling_gap(train)
    relations = {
        RelationKind.CO_GENRE: build_feature_relation(train, RelationKind.CO_GENRE),
        RelationKind.CO_DEVELOPER: build_feature_relation(train, RelationKind.CO_DEVELOPER),
        RelationKind.CO_PUBLISHER: build_feature_relation(train, RelationKind.CO_PUBLISHER),
        RelationKind.CO_PURCHASE: build_co_purchase(train, tau_p),
        RelationKind.CO_DWELLING: build_co_dwelling(train, tau_t, time_scale),
    }
    return assemble(relations, train.catalog_games), relations, time_scale


# ----------------------------------------------------------------------- io


def save_relations(
    relations: dict[RelationKind, EdgeSet],
    directory: str | Path,
    *,
    tau_p: float,
    tau_t: float,
    time_scale: float,
    n_games: int,
) -> Path:
    """One edge-list TSV per relation plus a manifest with thresholds/counts."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    counts = {}
    for kind, edges in relations.items():
        path = directory / f"{kind.value}.tsv"
        with path.open("w", encoding="utf-8") as fh:
            fh.writelines(f"{i}\t{j}\t{score!r}\n" for (i, j), score in sorted(edges.items()))
        counts[kind.value] = len(edges)
    manifest = {
        "n_games": n_games,
        "tau_p": tau_p,
        "tau_t": tau_t,
        "time_scale": time_scale,
        "edge_counts": counts,
    }
    manifest_path = directory / "graph_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def load_relations(directory: str | Path) -> dict[RelationKind, EdgeSet]:
    directory = Path(directory)
    relations: dict[RelationKind, EdgeSet] = {}
    for kind in RELATION_ORDER:
        path = directory / f"{kind.value}.tsv"
        edges: EdgeSet = {}
        if path.exists():
            with path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    i, j, score = line.rstrip("\n").split("\t")
                    edges[(int(i), int(j))] = float(score)
        relations[kind] = edges
    return relations
