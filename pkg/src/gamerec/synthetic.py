"""Seeded generator of playtime-style datasets with planted structure.

Users get sparse latent genre preferences, games get genres/developer/
publisher plus hidden quality and play-length factors, engagement counts are
long-tailed, log dwelling times are roughly normal, and social edges can be
biased toward preference-similar users (homophily). Because everything is a
pure function of the config, the planted affinities can be recomputed at any
time and used as an oracle in end-to-end tests.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import Dataset

_PREFERENCE_CONCENTRATION = 0.3  # Dirichlet concentration for user genre mixtures
_AFFINITY_FLOOR = 1e-9  # keeps sampling weights strictly positive


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 5000
    n_games: int = 300
    n_genres: int = 8
    n_developers: int = 40
    n_publishers: int = 20
    engagements_per_user: int = 12  # mean of the long-tailed per-user count
    homophily: float = 0.7
    dwell_scale: float = 1.0  # how strongly affinity shifts log dwelling time
    seed: int = 0
    # shape knobs for the planted structure
    base_log_minutes: float = 3.5
    log_minutes_noise: float = 0.8
    game_length_spread: float = 1.3  # per-game log-location spread (play length)
    game_quality_spread: float = 0.6  # per-game popularity multiplier spread
    knn_k: int = 10  # candidate pool size for homophilous edges
    mean_friend_stubs: float = 3.0

    def __post_init__(self):
        for name in ("n_users", "n_games", "n_genres", "n_developers", "n_publishers", "engagements_per_user"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0.0 <= self.homophily <= 1.0):
            raise ValueError("homophily must be in [0, 1]")
        if self.knn_k < 1 or self.mean_friend_stubs <= 0:
            raise ValueError("knn_k must be >= 1 and mean_friend_stubs > 0")


@dataclass(frozen=True)
class Latents:
    """Hidden quantities behind a generated dataset, kept for oracle tests."""

    user_ids: np.ndarray  # (U,)
    game_ids: np.ndarray  # (I,)
    genre_labels: tuple[str, ...]
    user_pref: np.ndarray  # (U, n_genres), rows sum to 1
    game_genre_vec: np.ndarray  # (I, n_genres), rows sum to 1
    game_quality: np.ndarray  # (I,) positive multiplier
    game_length_bias: np.ndarray  # (I,) additive log-minutes offset

    def affinity(self) -> np.ndarray:
        """True user-game sampling weights used during generation."""
        return self.user_pref @ self.game_genre_vec.T * self.game_quality[None, :] + _AFFINITY_FLOOR


def _generate(config: SynthConfig) -> tuple[Dataset, Latents]:
    rng = np.random.default_rng(config.seed)
    n_u, n_i, n_g = config.n_users, config.n_games, config.n_genres

    user_ids = np.arange(1, n_u + 1, dtype=np.uint64)
    game_ids = np.arange(10_001, 10_001 + n_i, dtype=np.uint64)
    genre_labels = tuple(f"genre{g:02d}" for g in range(n_g))

    user_pref = rng.dirichlet(np.full(n_g, _PREFERENCE_CONCENTRATION), size=n_u)

    # games: one or two genres, uniform developer/publisher, hidden factors
    first_genre = rng.integers(n_g, size=n_i)
    two_genres = rng.random(n_i) < 0.5 if n_g > 1 else np.zeros(n_i, dtype=bool)
    second_genre = (first_genre + 1 + rng.integers(max(n_g - 1, 1), size=n_i)) % n_g
    game_genre_vec = np.zeros((n_i, n_g))
    game_genre_vec[np.arange(n_i), first_genre] = 1.0
    game_genre_vec[two_genres, second_genre[two_genres]] = 1.0
    game_genre_vec /= game_genre_vec.sum(axis=1, keepdims=True)
    developer = rng.integers(config.n_developers, size=n_i)
    publisher = rng.integers(config.n_publishers, size=n_i)
    quality = np.exp(rng.normal(0.0, config.game_quality_spread, size=n_i))
    length_bias = rng.normal(0.0, config.game_length_spread, size=n_i)

    latents = Latents(
        user_ids=user_ids,
        game_ids=game_ids,
        genre_labels=genre_labels,
        user_pref=user_pref,
        game_genre_vec=game_genre_vec,
        game_quality=quality,
        game_length_bias=length_bias,
    )

    # engagement counts: geometric with the configured mean (long tail)
    counts = np.minimum(rng.geometric(1.0 / config.engagements_per_user, size=n_u), n_i)

    # pick each user's games without replacement, proportional to affinity
    weights = latents.affinity()
    gumbel = rng.gumbel(size=(n_u, n_i))
    keys = np.log(weights) + gumbel
    eng_user_idx: list[np.ndarray] = []
    eng_game_idx: list[np.ndarray] = []
    for u in range(n_u):
        k = int(counts[u])
        top = np.argpartition(-keys[u], k - 1)[:k] if k < n_i else np.arange(n_i)
        top = np.sort(top)
        eng_user_idx.append(np.full(k, u, dtype=np.int64))
        eng_game_idx.append(top.astype(np.int64))
    u_idx = np.concatenate(eng_user_idx)
    g_idx = np.concatenate(eng_game_idx)

    # dwelling minutes: log-normal, location shifted by standardized affinity
    # and by the per-game play-length bias; standardization runs over the
    # sampled pairs so the log-time distribution stays centered at the base
    aff = weights[u_idx, g_idx]
    sd = float(aff.std())
    z_aff = (aff - float(aff.mean())) / sd if sd > 0 else np.zeros_like(aff)
    loc = config.base_log_minutes + length_bias[g_idx] + config.dwell_scale * z_aff
    minutes = np.exp(loc + config.log_minutes_noise * rng.normal(size=u_idx.size))

    # social edges: homophilous stubs toward preference-nearest users
    norms = np.linalg.norm(user_pref, axis=1, keepdims=True)
    pref_unit = user_pref / norms
    k_nn = min(config.knn_k, n_u - 1)
    knn = np.empty((n_u, k_nn), dtype=np.int64) if k_nn > 0 else np.empty((n_u, 0), dtype=np.int64)
    chunk = 512
    for lo in range(0, n_u, chunk):
        hi = min(lo + chunk, n_u)
        sims = pref_unit[lo:hi] @ pref_unit.T
        sims[np.arange(hi - lo), np.arange(lo, hi)] = -np.inf  # exclude self
        part = np.argpartition(-sims, k_nn - 1, axis=1)[:, :k_nn] if k_nn > 0 else None
        if part is not None:
            knn[lo:hi] = part
    stubs = rng.geometric(1.0 / config.mean_friend_stubs, size=n_u)
    total = int(stubs.sum())
    stub_user = np.repeat(np.arange(n_u, dtype=np.int64), stubs)
    use_knn = rng.random(total) < config.homophily
    knn_pick = knn[stub_user, rng.integers(max(k_nn, 1), size=total)] if k_nn > 0 else stub_user
    rnd_pick = rng.integers(n_u, size=total)
    clash = rnd_pick == stub_user
    rnd_pick[clash] = (rnd_pick[clash] + 1) % n_u
    partner = np.where(use_knn, knn_pick, rnd_pick)
    ok = partner != stub_user
    a = np.minimum(stub_user[ok], partner[ok])
    b = np.maximum(stub_user[ok], partner[ok])
    social = np.unique(np.column_stack((user_ids[a], user_ids[b])), axis=0)

    dataset, _ = Dataset.build(
        eng_user=user_ids[u_idx],
        eng_game=game_ids[g_idx],
        eng_minutes=minutes,
        social=social,
        catalog_games=game_ids,
        catalog_genres=tuple(
            frozenset(genre_labels[g] for g in np.flatnonzero(game_genre_vec[i] > 0)) for i in range(n_i)
        ),
        catalog_developers=tuple(f"dev{d:03d}" for d in developer),
        catalog_publishers=tuple(f"pub{p:03d}" for p in publisher),
    )
    return dataset, latents


@lru_cache(maxsize=8)
def _cached(config: SynthConfig) -> tuple[Dataset, Latents]:
    return _generate(config)


def generate(config: SynthConfig) -> Dataset:
    """Deterministic dataset for the given config."""
    return _cached(config)[0]


def generate_with_latents(config: SynthConfig) -> tuple[Dataset, Latents]:
    return _cached(config)


def planted_relevance(config: SynthConfig, user_id: int) -> np.ndarray:
    """Game ids ordered by true generation-time affinity (ties by game id)."""
    _, latents = _cached(config)
    pos = int(np.searchsorted(latents.user_ids, np.uint64(user_id)))
    if pos >= latents.user_ids.size or latents.user_ids[pos] != np.uint64(user_id):
        raise ValueError(f"unknown user id {user_id}")
    aff = latents.affinity()[pos]
    order = np.lexsort((latents.game_ids, -aff))
    return latents.game_ids[order]


def save_synthetic(
    config: SynthConfig,
    directory: str | Path,
    *,
    engagements_path: str | Path | None = None,
    social_path: str | Path | None = None,
    catalog_path: str | Path | None = None,
) -> dict[str, str]:
    """Write the three TSV files plus latents.json; returns written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dataset, latents = _cached(config)
    eng, soc, cat = dataset.save_files(
        engagements_path or directory / "engagements.tsv",
        social_path or directory / "social.tsv",
        catalog_path or directory / "catalog.tsv",
    )
    latents_path = directory / "latents.json"
    payload = {
        "config": asdict(config),
        "genre_labels": list(latents.genre_labels),
        "user_ids": [int(u) for u in latents.user_ids],
        "game_ids": [int(g) for g in latents.game_ids],
        "user_pref": latents.user_pref.tolist(),
        "game_genre_vec": latents.game_genre_vec.tolist(),
        "game_quality": latents.game_quality.tolist(),
        "game_length_bias": latents.game_length_bias.tolist(),
    }
    latents_path.write_text(json.dumps(payload), encoding="utf-8")
    return {
        "engagements": str(eng),
        "social": str(soc),
        "catalog": str(cat),
        "latents": str(latents_path),
    }
