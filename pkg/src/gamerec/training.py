"""Pairwise ranking optimization with hand-derived gradients and Adam.

The objective for a batch of (user, positive, negative) triplets is

    sum_k log(1 + exp(-(r_uk,ik - r_uk,jk)))  +  lambda * ||theta_batch||^2

where scores come from the full forward pass and ``theta_batch`` spans the
parameters touched by the batch: embeddings of sampled users, their friends,
the sampled games and relation neighbors of engaged games, plus the shared
matrices of every enabled pathway. Gradients are exact for this objective;
``gradcheck`` verifies them against central finite differences.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit

from .context_graph import RELATION_ORDER, ContextGraph
from .data import Split
from .evaluation import ModelRecommender, evaluate
from .model import (
    ForwardConfig,
    FusionWeights,
    ModelState,
    SocialGraph,
    UserItemIndex,
    all_game_context_embeddings,
    all_user_context_embeddings,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Hyperparams:
    dim: int = 32
    learning_rate: float = 0.03
    batch_size: int = 1024
    reg_lambda: float = 1e-4
    fusion: FusionWeights = field(default_factory=FusionWeights)
    patience: int = 10
    seed: int = 0
    max_epochs: int = 100
    negatives_per_positive: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be >= 0")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be >= 1")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")


class Triplet(NamedTuple):
    user: int
    pos: int
    neg: int


class TripletBatch(NamedTuple):
    """Dense-index triplet arrays; supports len() and item access."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return int(self.users.size)

    def triplet(self, k: int) -> Triplet:
        return Triplet(int(self.users[k]), int(self.pos[k]), int(self.neg[k]))

    def slice(self, sl: slice) -> "TripletBatch":
        return TripletBatch(self.users[sl], self.pos[sl], self.neg[sl])


# ------------------------------------------------------------------ sampling


def _is_engaged(index: UserItemIndex, users: np.ndarray, games: np.ndarray) -> np.ndarray:
    if index.engaged_keys.size == 0:
        return np.zeros(users.size, dtype=bool)
    keys = users * index.n_games + games
    pos = np.searchsorted(index.engaged_keys, keys)
    pos_clipped = np.minimum(pos, index.engaged_keys.size - 1)
    return (pos < index.engaged_keys.size) & (index.engaged_keys[pos_clipped] == keys)


def epoch_triplets(
    index: UserItemIndex, rng: np.random.Generator, negatives_per_positive: int = 1
) -> TripletBatch:
    """One shuffled pass over every training interaction with fresh negatives.

    Negatives are uniform over each user's non-engaged games via rejection
    sampling. Users engaged with the entire catalog are skipped with a warning.
    """
    n_games = index.n_games
    deg = np.diff(index.indptr)
    owners = np.repeat(np.arange(index.n_users, dtype=np.int64), deg)
    keep = deg[owners] < n_games
    if not keep.all():
        logger.warning(
            "skipping %d interactions of users engaged with every game", int((~keep).sum())
        )
    pos_u = owners[keep]
    pos_g = index.games[keep]
    if negatives_per_positive > 1:
        pos_u = np.tile(pos_u, negatives_per_positive)
        pos_g = np.tile(pos_g, negatives_per_positive)
    perm = rng.permutation(pos_u.size)
    users = pos_u[perm]
    pos = pos_g[perm]
    neg = rng.integers(n_games, size=users.size, dtype=np.int64)
    bad = _is_engaged(index, users, neg)
    while bad.any():
        neg[bad] = rng.integers(n_games, size=int(bad.sum()), dtype=np.int64)
        bad[bad] = _is_engaged(index, users[bad], neg[bad])
    return TripletBatch(users=users, pos=pos, neg=neg)


def sample_triplets(index: UserItemIndex, batch: int, seed: int) -> TripletBatch:
    """First ``batch`` triplets of a seeded epoch stream."""
    rng = np.random.default_rng(seed)
    epoch = epoch_triplets(index, rng)
    return epoch.slice(slice(0, min(batch, len(epoch))))


# ------------------------------------------------------------ touched params


@dataclass(frozen=True)
class TouchedSets:
    """Embedding rows and shared matrices in a batch's objective."""

    users: np.ndarray  # sorted unique dense user rows
    games: np.ndarray  # sorted unique dense game rows
    active: dict[str, bool]  # shared parameter name -> participates


def touched_sets(
    index: UserItemIndex,
    social: SocialGraph,
    graph: ContextGraph,
    config: ForwardConfig,
    batch: TripletBatch,
) -> TouchedSets:
    users = np.unique(batch.users)
    if config.social_active and users.size:
        friend_parts = [social.friends(int(u)) for u in users]
        friend_parts.append(users)
        users = np.unique(np.concatenate(friend_parts))
    game_parts = [np.unique(batch.pos), np.unique(batch.neg)]
    if config.context_active and users.size:
        eng = np.unique(np.concatenate([index.user_engagements(int(u))[0] for u in users]))
        if eng.size:
            nbr_parts = []
            for kind in RELATION_ORDER:
                if kind not in graph.relations:
                    continue
                adj = graph.relations[kind]
                for g in eng:
                    nbr_parts.append(adj.indices[adj.indptr[g] : adj.indptr[g + 1]])
            if nbr_parts:
                game_parts.append(np.unique(np.concatenate(nbr_parts)))
    games = np.unique(np.concatenate(game_parts)) if game_parts else np.empty(0, dtype=np.int64)
    ctx, soc = config.context_active, config.social_active
    active = {
        "conv_weight": ctx,
        "conv_bias": ctx,
        "ctx_fuse": ctx,
        "att_proj": ctx and soc,
        "att_vec": ctx and soc,
        "soc_fuse": soc,
    }
    return TouchedSets(users=users.astype(np.int64), games=games.astype(np.int64), active=active)


def _regularizer(state: ModelState, touched: TouchedSets) -> float:
    total = float(np.sum(state.user_personal[touched.users] ** 2))
    total += float(np.sum(state.game_personal[touched.games] ** 2))
    for name, arr in state.param_items():
        if name in touched.active and touched.active[name]:
            total += float(np.sum(arr**2))
    return total


# ------------------------------------------------------------------- forward


@dataclass
class _BatchCache:
    """Forward intermediates reused by the backward pass."""

    uu: np.ndarray  # unique batch users
    inv: np.ndarray  # batch row -> position in uu
    e_users: np.ndarray  # (n_uu, d) fused user embeddings
    delta: np.ndarray  # (B,) score margins
    e_ctx_games: np.ndarray | None
    mg_cache: dict[int, np.ndarray] | None
    e_aggc: np.ndarray | None  # (U, d)
    e_uctx: np.ndarray | None  # (U, d)
    att_p: np.ndarray | None  # (U, d) projected context embeddings
    att_s1: np.ndarray | None
    att_s2: np.ndarray | None
    f_owner: np.ndarray | None  # flattened friend -> position in uu
    f_idx: np.ndarray | None  # flattened friend user rows
    f_starts: np.ndarray | None  # reduceat segment starts into flattened arrays
    f_users: np.ndarray | None  # uu positions owning each segment
    z_pre: np.ndarray | None  # pre-activation attention logits
    alpha: np.ndarray | None
    aggp: np.ndarray | None  # (n_uu, d) social aggregates


def _batch_forward(
    state: ModelState,
    index: UserItemIndex,
    graph: ContextGraph,
    social: SocialGraph,
    config: ForwardConfig,
    batch: TripletBatch,
) -> tuple[float, _BatchCache]:
    d = state.dim
    fusion = config.fusion
    uu, inv = np.unique(batch.users, return_inverse=True)
    n_uu = uu.size

    e_ctx_games = mg_cache = e_aggc = e_uctx = att_p = att_s1 = att_s2 = None
    if config.context_active:
        e_ctx_games, mg_cache = all_game_context_embeddings(state, graph, config)
        e_aggc, e_uctx = all_user_context_embeddings(state, index, e_ctx_games)
        if config.social_active:
            att_p = e_uctx @ state.att_proj.T
            att_s1 = att_p @ state.att_vec[:d]
            att_s2 = att_p @ state.att_vec[d:]

    e_users = fusion.self_weight * state.user_personal[uu]
    if config.context_active and fusion.context > 0.0:
        e_users = e_users + fusion.context * e_uctx[uu]

    f_owner = f_idx = f_starts = f_users = z_pre = alpha = aggp = None
    if config.social_active:
        degrees = np.array([social.degree(int(u)) for u in uu], dtype=np.int64)
        with_friends = np.flatnonzero(degrees > 0)
        aggp = np.zeros((n_uu, d))
        if with_friends.size:
            f_users = with_friends
            f_idx = np.concatenate([social.friends(int(uu[t])) for t in with_friends])
            seg_sizes = degrees[with_friends]
            f_starts = np.concatenate(([0], np.cumsum(seg_sizes)[:-1]))
            f_owner = np.repeat(with_friends, seg_sizes)
            if att_s1 is not None:
                z_pre = att_s1[uu[f_owner]] + att_s2[f_idx]
                z = np.where(z_pre >= 0, z_pre, config.leaky_slope * z_pre)
            else:
                z_pre = None
                z = np.zeros(f_idx.size)
            seg_max = np.maximum.reduceat(z, f_starts)
            w = np.exp(z - seg_max[np.repeat(np.arange(with_friends.size), seg_sizes)])
            seg_sum = np.add.reduceat(w, f_starts)
            alpha = w / seg_sum[np.repeat(np.arange(with_friends.size), seg_sizes)]
            weighted = alpha[:, None] * state.user_personal[f_idx]
            aggp[with_friends] = np.add.reduceat(weighted, f_starts, axis=0)
        else:
            f_users = with_friends
        s1m, s2m = state.soc_fuse[:, :d], state.soc_fuse[:, d:]
        e_social = state.user_personal[uu] @ s1m.T + aggp @ s2m.T
        e_users = e_users + fusion.social * e_social

    margins = np.einsum(
        "bd,bd->b", e_users[inv], state.game_personal[batch.pos] - state.game_personal[batch.neg]
    )
    base = float(np.logaddexp(0.0, -margins).sum())
    cache = _BatchCache(
        uu=uu,
        inv=inv,
        e_users=e_users,
        delta=margins,
        e_ctx_games=e_ctx_games,
        mg_cache=mg_cache,
        e_aggc=e_aggc,
        e_uctx=e_uctx,
        att_p=att_p,
        att_s1=att_s1,
        att_s2=att_s2,
        f_owner=f_owner,
        f_idx=f_idx,
        f_starts=f_starts,
        f_users=f_users,
        z_pre=z_pre,
        alpha=alpha,
        aggp=aggp,
    )
    return base, cache


def bpr_loss(
    state: ModelState,
    index: UserItemIndex,
    graph: ContextGraph,
    social: SocialGraph,
    config: ForwardConfig,
    batch: TripletBatch,
    reg_lambda: float,
    reg_scope: str = "batch",
) -> float:
    """Summed pairwise log loss plus L2 regularization.

    ``reg_scope='batch'`` regularizes the parameters touched by the batch (the
    objective the optimizer and :func:`gradients` use); ``'full'`` regularizes
    every trainable parameter.
    """
    base, _ = _batch_forward(state, index, graph, social, config, batch)
    if reg_lambda == 0.0:
        return base
    if reg_scope == "full":
        reg = sum(float(np.sum(arr**2)) for _, arr in state.param_items())
    elif reg_scope == "batch":
        reg = _regularizer(state, touched_sets(index, social, graph, config, batch))
    else:
        raise ValueError("reg_scope must be 'batch' or 'full'")
    return base + reg_lambda * reg


# ------------------------------------------------------------------ backward


@dataclass
class Gradients:
    """Dense gradient arrays (zero rows for untouched embeddings)."""

    user_personal: np.ndarray
    game_personal: np.ndarray
    conv_weight: np.ndarray
    conv_bias: np.ndarray
    ctx_fuse: np.ndarray
    att_proj: np.ndarray
    att_vec: np.ndarray
    soc_fuse: np.ndarray
    touched: TouchedSets

    def by_name(self, name: str) -> np.ndarray:
        return getattr(self, name)


def _loss_and_gradients(
    state: ModelState,
    index: UserItemIndex,
    graph: ContextGraph,
    social: SocialGraph,
    config: ForwardConfig,
    batch: TripletBatch,
    reg_lambda: float,
) -> tuple[float, Gradients]:
    d = state.dim
    fusion = config.fusion
    base, c = _batch_forward(state, index, graph, social, config, batch)
    touched = touched_sets(index, social, graph, config, batch)

    n_users, n_games = index.n_users, index.n_games
    dU = np.zeros((n_users, d))
    dG = np.zeros((n_games, d))
    dConvW = np.zeros_like(state.conv_weight)
    dConvB = np.zeros_like(state.conv_bias)
    dCtxF = np.zeros_like(state.ctx_fuse)
    dAttP = np.zeros_like(state.att_proj)
    dAttV = np.zeros_like(state.att_vec)
    dSocF = np.zeros_like(state.soc_fuse)

    # d/d_margin of log(1 + exp(-margin)) = sigmoid(margin) - 1
    g = expit(c.delta) - 1.0
    ge = g[:, None] * c.e_users[c.inv]
    np.add.at(dG, batch.pos, ge)
    np.add.at(dG, batch.neg, -ge)
    de_u = np.zeros((c.uu.size, d))
    np.add.at(de_u, c.inv, g[:, None] * (state.game_personal[batch.pos] - state.game_personal[batch.neg]))

    dU[c.uu] += fusion.self_weight * de_u
    dE_uctx = np.zeros((n_users, d)) if config.context_active else None
    if config.context_active and fusion.context > 0.0:
        dE_uctx[c.uu] += fusion.context * de_u

    if config.social_active:
        de_s = fusion.social * de_u
        s1m, s2m = state.soc_fuse[:, :d], state.soc_fuse[:, d:]
        dSocF[:, :d] += de_s.T @ state.user_personal[c.uu]
        dSocF[:, d:] += de_s.T @ c.aggp
        dU[c.uu] += de_s @ s1m
        d_aggp = de_s @ s2m
        if c.f_idx is not None and c.f_idx.size:
            d_aggp_rep = d_aggp[c.f_owner]
            dalpha = np.einsum("fd,fd->f", d_aggp_rep, state.user_personal[c.f_idx])
            np.add.at(dU, c.f_idx, c.alpha[:, None] * d_aggp_rep)
            seg_dot = np.add.reduceat(c.alpha * dalpha, c.f_starts)
            seg_sizes = np.diff(np.concatenate((c.f_starts, [c.f_idx.size])))
            dz = c.alpha * (dalpha - seg_dot[np.repeat(np.arange(c.f_users.size), seg_sizes)])
            if c.z_pre is not None:
                dz_pre = dz * np.where(c.z_pre >= 0, 1.0, config.leaky_slope)
                ds1 = np.zeros(n_users)
                ds2 = np.zeros(n_users)
                ds1[c.uu[c.f_users]] = np.add.reduceat(dz_pre, c.f_starts)
                np.add.at(ds2, c.f_idx, dz_pre)
                a1, a2 = state.att_vec[:d], state.att_vec[d:]
                dAttV[:d] += c.att_p.T @ ds1
                dAttV[d:] += c.att_p.T @ ds2
                dP = ds1[:, None] * a1[None, :] + ds2[:, None] * a2[None, :]
                dAttP += dP.T @ c.e_uctx
                dE_uctx += dP @ state.att_proj

    if config.context_active:
        f1, f2 = state.ctx_fuse[:, :d], state.ctx_fuse[:, d:]
        dCtxF[:, :d] += dE_uctx.T @ state.user_personal
        dCtxF[:, d:] += dE_uctx.T @ c.e_aggc
        dU += dE_uctx @ f1
        d_aggc = dE_uctx @ f2
        dE_ctx = index.gamma_csr.T @ d_aggc
        n_rel = len(c.mg_cache)
        dE_ctx_scaled = dE_ctx / n_rel
        for slot, mg in c.mg_cache.items():
            dConvW[slot] += dE_ctx_scaled.T @ mg
            dConvB[slot] += dE_ctx_scaled.sum(axis=0)
            op = graph.operator(RELATION_ORDER[slot], config.normalization)
            dG += op.T @ (dE_ctx_scaled @ state.conv_weight[slot])

    loss = base
    if reg_lambda > 0.0:
        loss += reg_lambda * _regularizer(state, touched)
        two_lam = 2.0 * reg_lambda
        dU[touched.users] += two_lam * state.user_personal[touched.users]
        dG[touched.games] += two_lam * state.game_personal[touched.games]
        for name, grad_arr in (
            ("conv_weight", dConvW),
            ("conv_bias", dConvB),
            ("ctx_fuse", dCtxF),
            ("att_proj", dAttP),
            ("att_vec", dAttV),
            ("soc_fuse", dSocF),
        ):
            if touched.active[name]:
                grad_arr += two_lam * getattr(state, name)

    grads = Gradients(
        user_personal=dU,
        game_personal=dG,
        conv_weight=dConvW,
        conv_bias=dConvB,
        ctx_fuse=dCtxF,
        att_proj=dAttP,
        att_vec=dAttV,
        soc_fuse=dSocF,
        touched=touched,
    )
    return loss, grads


def gradients(
    state: ModelState,
    index: UserItemIndex,
    graph: ContextGraph,
    social: SocialGraph,
    config: ForwardConfig,
    batch: TripletBatch,
    reg_lambda: float,
) -> Gradients:
    """Exact analytic gradients of :func:`bpr_loss` (batch regularization)."""
    _, grads = _loss_and_gradients(state, index, graph, social, config, batch, reg_lambda)
    return grads


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, state: ModelState) -> "AdamState":
        return cls(
            m={name: np.zeros_like(arr) for name, arr in state.param_items()},
            v={name: np.zeros_like(arr) for name, arr in state.param_items()},
        )


def adam_step(state: ModelState, grads: Gradients, adam: AdamState, lr: float) -> None:
    """One Adam update; embedding rows update lazily (touched rows only)."""
    adam.step += 1
    c1 = 1.0 - ADAM_BETA1**adam.step
    c2 = 1.0 - ADAM_BETA2**adam.step
    for name, param in state.param_items():
        grad = grads.by_name(name)
        if name == "user_personal":
            rows = grads.touched.users
        elif name == "game_personal":
            rows = grads.touched.games
        else:
            if not grads.touched.active[name]:
                continue
            rows = None
        m, v = adam.m[name], adam.v[name]
        if rows is None:
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad * grad
            param -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        elif rows.size:
            gr = grad[rows]
            m[rows] = ADAM_BETA1 * m[rows] + (1.0 - ADAM_BETA1) * gr
            v[rows] = ADAM_BETA2 * v[rows] + (1.0 - ADAM_BETA2) * gr * gr
            param[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + ADAM_EPS)


# --------------------------------------------------------------------- train


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_ndcg10: float
    elapsed_seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_ndcg10": self.val_ndcg10,
            "elapsed_seconds": self.elapsed_seconds,
        }


def train(
    split: Split,
    graph: ContextGraph,
    social: SocialGraph,
    index: UserItemIndex,
    hp: Hyperparams,
    *,
    forward: ForwardConfig | None = None,
    threads: int = 1,
    log_sink: Callable[[dict], None] | None = None,
) -> tuple[ModelState, list[EpochRecord]]:
    """Mini-batch Adam with early stopping on validation NDCG@10.

    Stops once the metric fails to improve for ``hp.patience`` consecutive
    epochs (or at ``hp.max_epochs``) and returns the best-validation state.
    """
    config = forward or ForwardConfig(fusion=hp.fusion)
    state = ModelState.init(index.n_users, index.n_games, hp.dim, hp.seed)
    adam = AdamState.init(state)
    rng = np.random.default_rng(hp.seed)

    best_state = state.copy()
    best_metric = -np.inf
    bad_epochs = 0
    log: list[EpochRecord] = []

    for epoch in range(1, hp.max_epochs + 1):
        t0 = time.perf_counter()
        stream = epoch_triplets(index, rng, hp.negatives_per_positive)
        epoch_loss = 0.0
        for step, start in enumerate(range(0, len(stream), hp.batch_size)):
            batch = stream.slice(slice(start, start + hp.batch_size))
            loss, grads = _loss_and_gradients(
                state, index, graph, social, config, batch, hp.reg_lambda
            )
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}, step {step}")
            epoch_loss += loss
            adam_step(state, grads, adam, hp.learning_rate)

        rec = ModelRecommender(state, graph, social, index, config)
        val = evaluate(rec, split, "validation", threads=threads).ndcg[10]
        record = EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss,
            val_ndcg10=val,
            elapsed_seconds=time.perf_counter() - t0,
        )
        log.append(record)
        if log_sink is not None:
            log_sink(record.to_dict())
        if val > best_metric:
            best_metric = val
            best_state = state.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= hp.patience:
                break
    return best_state, log


def fit_recommender(
    split: Split,
    graph: ContextGraph,
    social: SocialGraph,
    index: UserItemIndex,
    hp: Hyperparams,
    *,
    forward: ForwardConfig | None = None,
    threads: int = 1,
    log_sink: Callable[[dict], None] | None = None,
) -> tuple[ModelRecommender, list[EpochRecord]]:
    """Train and wrap the best state, retaining inputs for ablation retraining."""
    config = forward or ForwardConfig(fusion=hp.fusion)
    state, log = train(
        split, graph, social, index, hp, forward=config, threads=threads, log_sink=log_sink
    )
    rec = ModelRecommender(
        state,
        graph,
        social,
        index,
        config,
        training_inputs={"split": split, "hyperparams": hp, "threads": threads},
    )
    return rec, log
