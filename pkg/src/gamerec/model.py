"""Forward computation of the social/context-aware recommender.

A user's score for a game is the dot product of a fused user embedding with
the game's personalized embedding. The fused embedding mixes three parts:

* personal  -- a free trainable vector;
* context   -- the user's engaged games aggregated over the context graph,
  weighted by per-game dwelling-time percentiles, then fused with the
  personal vector through a linear projection;
* social    -- friends' personal vectors combined with attention weights
  derived from context embeddings, fused through a second projection.

Single-user functions below are the reference semantics; ``ServingForward``
precomputes the shared matrices once so evaluating many users is cheap and
independent of any thread chunking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .context_graph import RELATION_ORDER, ContextGraph
from .data import Dataset


@dataclass(frozen=True)
class FusionWeights:
    """Mixing weights for the final user embedding; self weight is implied."""

    context: float = 0.5
    social: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.context <= 1.0 and 0.0 <= self.social <= 1.0):
            raise ValueError("fusion weights must lie in [0, 1]")
        if self.context + self.social > 1.0 + 1e-12:
            raise ValueError("context + social must not exceed 1")

    @property
    def self_weight(self) -> float:
        return 1.0 - self.context - self.social


@dataclass(frozen=True)
class ForwardConfig:
    """Structural switches and fusion weights for the forward pass.

    ``use_context``/``use_social`` remove a pathway entirely (ablations);
    a zero fusion weight merely silences its contribution to the final sum.
    With the context pathway removed, social attention degenerates to uniform
    weights over friends.
    """

    fusion: FusionWeights = field(default_factory=FusionWeights)
    use_context: bool = True
    use_social: bool = True
    normalization: str = "mean"  # or "symmetric"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.normalization not in ("mean", "symmetric"):
            raise ValueError("normalization must be 'mean' or 'symmetric'")

    @property
    def social_active(self) -> bool:
        return self.use_social and self.fusion.social > 0.0

    @property
    def context_active(self) -> bool:
        # context embeddings feed both the direct term and social attention
        return self.use_context and (self.fusion.context > 0.0 or self.social_active)


@dataclass
class ModelState:
    """All trainable parameters. Conv weights/biases are indexed by the
    canonical relation order."""

    user_personal: np.ndarray  # (U, d)
    game_personal: np.ndarray  # (I, d)
    conv_weight: np.ndarray  # (R, d, d)
    conv_bias: np.ndarray  # (R, d)
    ctx_fuse: np.ndarray  # (d, 2d)
    att_proj: np.ndarray  # (d, d)
    att_vec: np.ndarray  # (2d,)
    soc_fuse: np.ndarray  # (d, 2d)

    @property
    def dim(self) -> int:
        return self.user_personal.shape[1]

    @classmethod
    def init(cls, n_users: int, n_games: int, dim: int, seed: int) -> "ModelState":
        """Uniform [-1/sqrt(d), 1/sqrt(d)] for embeddings and weight matrices,
        zero biases; a fixed parameter order keeps this reproducible."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        u = lambda *shape: rng.uniform(-bound, bound, size=shape)
        n_rel = len(RELATION_ORDER)
        return cls(
            user_personal=u(n_users, dim),
            game_personal=u(n_games, dim),
            conv_weight=u(n_rel, dim, dim),
            conv_bias=np.zeros((n_rel, dim)),
            ctx_fuse=u(dim, 2 * dim),
            att_proj=u(dim, dim),
            att_vec=u(2 * dim),
            soc_fuse=u(dim, 2 * dim),
        )

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("user_personal", self.user_personal),
            ("game_personal", self.game_personal),
            ("conv_weight", self.conv_weight),
            ("conv_bias", self.conv_bias),
            ("ctx_fuse", self.ctx_fuse),
            ("att_proj", self.att_proj),
            ("att_vec", self.att_vec),
            ("soc_fuse", self.soc_fuse),
        ]

    def copy(self) -> "ModelState":
        return ModelState(**{name: arr.copy() for name, arr in self.param_items()})

    def finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for _, arr in self.param_items())


# ----------------------------------------------------------------- percentiles


@dataclass(frozen=True)
class PercentileIndex:
    """Per-game sorted training dwelling times for percentile lookups."""

    game_ids: np.ndarray  # (I,) uint64, catalog order
    indptr: np.ndarray  # (I+1,)
    sorted_minutes: np.ndarray  # (nnz,) ascending within each game block

    @classmethod
    def build(cls, train: Dataset) -> "PercentileIndex":
        games = train.catalog_games
        codes = np.searchsorted(games, train.eng_game)
        order = np.argsort(codes, kind="stable")
        codes_sorted = codes[order]
        minutes = train.eng_minutes[order]
        indptr = np.searchsorted(codes_sorted, np.arange(games.size + 1))
        out = minutes.copy()
        for g in range(games.size):
            lo, hi = indptr[g], indptr[g + 1]
            out[lo:hi] = np.sort(out[lo:hi])
        return cls(game_ids=games, indptr=indptr, sorted_minutes=out)

    def count(self, game_idx: int) -> int:
        return int(self.indptr[game_idx + 1] - self.indptr[game_idx])


def percentile(index: PercentileIndex, game_id: int, t: float) -> float:
    """Fraction of the game's training dwelling times that are <= t."""
    idx = int(np.searchsorted(index.game_ids, np.uint64(game_id)))
    if idx >= index.game_ids.size or index.game_ids[idx] != np.uint64(game_id):
        raise ValueError(f"unknown game id {game_id}")
    lo, hi = int(index.indptr[idx]), int(index.indptr[idx + 1])
    n = hi - lo
    if n == 0:
        raise ValueError(f"game {game_id} has no training dwelling records")
    rank = int(np.searchsorted(index.sorted_minutes[lo:hi], t, side="right"))
    return rank / n


def time_weights(engagements: Sequence[tuple[int, float]], index: PercentileIndex) -> np.ndarray:
    """Per-engagement dwelling percentiles normalized to sum to one."""
    if len(engagements) == 0:
        raise ValueError("time_weights requires at least one engagement")
    p = np.array([percentile(index, g, t) for g, t in engagements], dtype=np.float64)
    total = p.sum()
    if total == 0.0:
        # unreachable for recorded times (a record counts itself); uniform keeps
        # the weights a valid convex combination for arbitrary query times
        return np.full(p.size, 1.0 / p.size)
    return p / total


# ------------------------------------------------------------------- indexing


@dataclass(frozen=True)
class UserItemIndex:
    """Training engagements indexed densely by user with fixed time weights."""

    user_ids: np.ndarray  # (U,) uint64 sorted
    game_ids: np.ndarray  # (I,) uint64 sorted (full catalog)
    indptr: np.ndarray  # (U+1,)
    games: np.ndarray  # (nnz,) dense game indices, ascending within user
    minutes: np.ndarray  # (nnz,)
    gamma: np.ndarray  # (nnz,) per-user normalized percentile weights
    percentiles: PercentileIndex
    gamma_csr: sparse.csr_matrix  # (U, I)
    engaged_keys: np.ndarray  # (nnz,) sorted u * I + g, for negative sampling

    @classmethod
    def build(cls, train: Dataset) -> "UserItemIndex":
        user_ids = train.users
        game_ids = train.catalog_games
        n_users, n_games = user_ids.size, game_ids.size
        ucodes = np.searchsorted(user_ids, train.eng_user).astype(np.int64)
        gcodes = np.searchsorted(game_ids, train.eng_game).astype(np.int64)
        indptr = np.searchsorted(ucodes, np.arange(n_users + 1))
        pindex = PercentileIndex.build(train)

        # percentile of every engagement within its game's time distribution
        pct = np.empty(gcodes.size, dtype=np.float64)
        order = np.argsort(gcodes, kind="stable")
        gsorted = gcodes[order]
        block_starts = np.searchsorted(gsorted, np.arange(n_games + 1))
        for g in range(n_games):
            lo, hi = block_starts[g], block_starts[g + 1]
            if lo == hi:
                continue
            rows = order[lo:hi]
            blk_lo, blk_hi = pindex.indptr[g], pindex.indptr[g + 1]
            blk = pindex.sorted_minutes[blk_lo:blk_hi]
            pct[rows] = np.searchsorted(blk, train.eng_minutes[rows], side="right") / blk.size

        gamma = pct.copy()
        for u in range(n_users):
            lo, hi = indptr[u], indptr[u + 1]
            if lo == hi:
                continue
            s = gamma[lo:hi].sum()
            if s > 0:
                gamma[lo:hi] /= s
            else:
                gamma[lo:hi] = 1.0 / (hi - lo)

        gamma_csr = sparse.csr_matrix(
            (gamma, gcodes, indptr), shape=(n_users, n_games)
        )
        keys = np.sort(ucodes * n_games + gcodes)
        return cls(
            user_ids=user_ids,
            game_ids=game_ids,
            indptr=indptr,
            games=gcodes,
            minutes=train.eng_minutes,
            gamma=gamma,
            percentiles=pindex,
            gamma_csr=gamma_csr,
            engaged_keys=keys,
        )

    @property
    def n_users(self) -> int:
        return int(self.user_ids.size)

    @property
    def n_games(self) -> int:
        return int(self.game_ids.size)

    def user_index(self, user_id: int) -> int:
        idx = int(np.searchsorted(self.user_ids, np.uint64(user_id)))
        if idx >= self.user_ids.size or self.user_ids[idx] != np.uint64(user_id):
            raise ValueError(f"unknown user id {user_id}")
        return idx

    def user_slice(self, uidx: int) -> slice:
        return slice(int(self.indptr[uidx]), int(self.indptr[uidx + 1]))

    def user_engagements(self, uidx: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dense game indices, minutes, gamma) of one user's training rows."""
        sl = self.user_slice(uidx)
        return self.games[sl], self.minutes[sl], self.gamma[sl]


@dataclass(frozen=True)
class SocialGraph:
    """Friendship adjacency over the dense user index."""

    user_ids: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray  # ascending within each row

    @classmethod
    def build(cls, d: Dataset, user_ids: np.ndarray) -> "SocialGraph":
        a = np.searchsorted(user_ids, d.social[:, 0]).astype(np.int64)
        b = np.searchsorted(user_ids, d.social[:, 1]).astype(np.int64)
        rows = np.concatenate((a, b))
        cols = np.concatenate((b, a))
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.searchsorted(rows, np.arange(user_ids.size + 1))
        return cls(user_ids=user_ids, indptr=indptr, indices=cols)

    def friends(self, uidx: int) -> np.ndarray:
        return self.indices[self.indptr[uidx] : self.indptr[uidx + 1]]

    def degree(self, uidx: int) -> int:
        return int(self.indptr[uidx + 1] - self.indptr[uidx])


# --------------------------------------------------------- single-user forward


def leaky_relu(z: np.ndarray | float, slope: float) -> np.ndarray | float:
    return np.where(np.asarray(z) >= 0, z, slope * np.asarray(z))


def game_context_embedding(
    state: ModelState, graph: ContextGraph, game_id: int, config: ForwardConfig | None = None
) -> np.ndarray:
    """Mean over relations of (aggregated neighbor embeddings + bias).

    The average runs over the relations present in the graph; a relation whose
    neighborhood is empty contributes only its bias.
    """
    config = config or ForwardConfig()
    idx = graph.game_index(game_id)
    out = np.zeros(state.dim)
    n_rel = 0
    for slot, kind in enumerate(RELATION_ORDER):
        if kind not in graph.relations:
            continue
        n_rel += 1
        term = state.conv_bias[slot].copy()
        nbrs = graph.neighbor_indices(idx, kind)
        if nbrs.size:
            if config.normalization == "mean":
                agg = state.game_personal[nbrs].mean(axis=0)
            else:
                deg = graph.degree(kind).astype(np.float64)
                agg = (state.game_personal[nbrs] / np.sqrt(deg[nbrs])[:, None]).sum(axis=0)
                agg /= math.sqrt(deg[idx])
            term += state.conv_weight[slot] @ agg
        out += term
    return out / n_rel


def user_context_aggregate(
    state: ModelState, graph: ContextGraph, index: UserItemIndex, uidx: int, config: ForwardConfig | None = None
) -> np.ndarray:
    """Time-weighted sum of engaged games' context embeddings (zero if none)."""
    config = config or ForwardConfig()
    games, _, gamma = index.user_engagements(uidx)
    agg = np.zeros(state.dim)
    for g, w in zip(games, gamma):
        agg += w * game_context_embedding(state, graph, int(index.game_ids[g]), config)
    return agg


def user_context_embedding(
    state: ModelState, graph: ContextGraph, index: UserItemIndex, uidx: int, config: ForwardConfig | None = None
) -> np.ndarray:
    """Projection of (personal ++ time-weighted context aggregate)."""
    agg = user_context_aggregate(state, graph, index, uidx, config)
    x = np.concatenate((state.user_personal[uidx], agg))
    return state.ctx_fuse @ x


def social_attention(
    state: ModelState,
    social: SocialGraph,
    context_embeddings: np.ndarray,
    uidx: int,
    config: ForwardConfig | None = None,
) -> np.ndarray:
    """Softmax attention over friends from projected context embeddings.

    ``context_embeddings`` holds one row per user (dense index order).
    """
    config = config or ForwardConfig()
    friends = social.friends(uidx)
    if friends.size == 0:
        raise ValueError("social_attention requires at least one friend")
    d = state.dim
    a1, a2 = state.att_vec[:d], state.att_vec[d:]
    p_u = state.att_proj @ context_embeddings[uidx]
    logits = np.array(
        [leaky_relu(a1 @ p_u + a2 @ (state.att_proj @ context_embeddings[v]), config.leaky_slope) for v in friends],
        dtype=np.float64,
    )
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def user_social_embedding(
    state: ModelState,
    alpha: np.ndarray | None,
    friends: np.ndarray,
    uidx: int,
) -> np.ndarray:
    """Projection of (personal ++ attention-weighted friends' personal vectors).

    Friendless users (empty ``friends``) use a zero aggregate.
    """
    if friends.size:
        agg = alpha @ state.user_personal[friends]
    else:
        agg = np.zeros(state.dim)
    x = np.concatenate((state.user_personal[uidx], agg))
    return state.soc_fuse @ x


def final_user_embedding(
    state: ModelState,
    weights: FusionWeights,
    uidx: int,
    context_vec: np.ndarray | None = None,
    social_vec: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted sum of context, social and personal embeddings."""
    e = weights.self_weight * state.user_personal[uidx]
    if context_vec is not None:
        e = e + weights.context * context_vec
    if social_vec is not None:
        e = e + weights.social * social_vec
    return e


def score(state: ModelState, user_embedding: np.ndarray, game_idx: int) -> float:
    """Dot product with the game's personalized embedding."""
    return float((user_embedding * state.game_personal[game_idx]).sum())


# --------------------------------------------------------------- batch forward


def all_game_context_embeddings(
    state: ModelState, graph: ContextGraph, config: ForwardConfig
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Context embeddings for every game plus per-relation aggregates.

    Returns (E_ctx, {slot: M_c @ game_personal}) where the cached aggregates
    feed the training backward pass.
    """
    n_games = graph.game_ids.size
    acc = np.zeros((n_games, state.dim))
    mg_cache: dict[int, np.ndarray] = {}
    n_rel = 0
    for slot, kind in enumerate(RELATION_ORDER):
        if kind not in graph.relations:
            continue
        n_rel += 1
        op = graph.operator(kind, config.normalization)
        mg = op @ state.game_personal
        mg_cache[slot] = mg
        acc += mg @ state.conv_weight[slot].T + state.conv_bias[slot]
    return acc / n_rel, mg_cache


def all_user_context_embeddings(
    state: ModelState, index: UserItemIndex, e_ctx_games: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(aggregates, fused context embeddings) for every user."""
    d = state.dim
    agg = index.gamma_csr @ e_ctx_games
    f1, f2 = state.ctx_fuse[:, :d], state.ctx_fuse[:, d:]
    return agg, state.user_personal @ f1.T + agg @ f2.T


@dataclass
class ServingForward:
    """Frozen full forward pass for ranking many users reproducibly.

    All shared matrices are computed once; per-user scores then depend only on
    precomputed rows, so results are identical however users are chunked
    across worker threads.
    """

    state: ModelState
    index: UserItemIndex
    social: SocialGraph
    config: ForwardConfig
    e_ctx_games: np.ndarray | None
    e_ctx_users: np.ndarray | None
    att_s1: np.ndarray | None
    att_s2: np.ndarray | None

    @classmethod
    def compute(
        cls,
        state: ModelState,
        graph: ContextGraph,
        social: SocialGraph,
        index: UserItemIndex,
        config: ForwardConfig,
    ) -> "ServingForward":
        e_ctx_games = e_ctx_users = s1 = s2 = None
        if config.context_active:
            e_ctx_games, _ = all_game_context_embeddings(state, graph, config)
            _, e_ctx_users = all_user_context_embeddings(state, index, e_ctx_games)
            if config.social_active:
                d = state.dim
                p = e_ctx_users @ state.att_proj.T
                s1 = p @ state.att_vec[:d]
                s2 = p @ state.att_vec[d:]
        return cls(
            state=state,
            index=index,
            social=social,
            config=config,
            e_ctx_games=e_ctx_games,
            e_ctx_users=e_ctx_users,
            att_s1=s1,
            att_s2=s2,
        )

    def attention(self, uidx: int, friends: np.ndarray) -> np.ndarray:
        if self.att_s1 is None:
            return np.full(friends.size, 1.0 / friends.size)
        z = leaky_relu(self.att_s1[uidx] + self.att_s2[friends], self.config.leaky_slope)
        z = z - z.max()
        w = np.exp(z)
        return w / w.sum()

    def user_embedding(self, uidx: int) -> np.ndarray:
        state, config = self.state, self.config
        e = config.fusion.self_weight * state.user_personal[uidx]
        if config.context_active and config.fusion.context > 0.0:
            e = e + config.fusion.context * (self.e_ctx_users[uidx])
        if config.social_active:
            friends = self.social.friends(uidx)
            if friends.size:
                alpha = self.attention(uidx, friends)
                agg = alpha @ state.user_personal[friends]
            else:
                agg = np.zeros(state.dim)
            d = state.dim
            e_s = state.soc_fuse[:, :d] @ state.user_personal[uidx] + state.soc_fuse[:, d:] @ agg
            e = e + config.fusion.social * e_s
        return e

    def scores_for(self, uidx: int) -> np.ndarray:
        e = self.user_embedding(uidx)
        return (self.state.game_personal * e).sum(axis=1)


def score_all(
    state: ModelState,
    graph: ContextGraph,
    social: SocialGraph,
    index: UserItemIndex,
    config: ForwardConfig,
    user_id: int,
) -> np.ndarray:
    """Full forward pass: one score per catalog game for ``user_id``."""
    serve = ServingForward.compute(state, graph, social, index, config)
    return serve.scores_for(index.user_index(user_id))
