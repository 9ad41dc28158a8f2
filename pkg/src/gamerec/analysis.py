"""Batch statistical reports over a dataset.

Covers engagement-count and log-dwelling histograms, conditional genre
co-play probabilities, co-purchase / co-dwelling scores, friend-vs-random
dwelling correlations, genre-preference cosine similarity histograms and the
friend-count distribution. Every report serializes to CSV plus a JSON summary
with fixed file names; figures are rendered by external tooling from the CSVs.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .context_graph import mean_dwelling_gap
from .data import Dataset

LOG_TIME_BIN_WIDTH = 0.5
SIMILARITY_BINS = 10


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray  # (n+1,) ascending
    counts: np.ndarray  # (n,) non-negative ints

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class GenreMatrix:
    """Conditional co-play probabilities; NaN marks undefined columns."""

    genres: tuple[str, ...]
    values: np.ndarray  # (k, k), values[a, b] = P(plays a | plays b)


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    if x.size < 2:
        return None
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float((xc**2).sum()) * float((yc**2).sum()))
    if denom == 0.0:
        return None
    return float((xc * yc).sum() / denom)


# ------------------------------------------------------------------ histograms


def engagement_histograms(d: Dataset) -> tuple[Histogram, Histogram]:
    """(users by number of engaged games, records by ln dwelling minutes).

    The first histogram uses unit-width integer bins; the second uses
    0.5-wide bins starting at 0, with ln values below 0 (dwelling under one
    minute) clamped into the first bin so counts always sum to the number of
    records.
    """
    if d.n_engagements == 0:
        return (
            Histogram(np.array([1.0, 2.0]), np.zeros(1, dtype=np.int64)),
            Histogram(np.array([0.0, LOG_TIME_BIN_WIDTH]), np.zeros(1, dtype=np.int64)),
        )
    _, counts = np.unique(d.eng_user, return_counts=True)
    max_c = int(counts.max())
    edges_games = np.arange(1, max_c + 2, dtype=np.float64)
    counts_games = np.bincount(counts, minlength=max_c + 1)[1:]

    with np.errstate(divide="ignore"):
        logs = np.log(d.eng_minutes)
    logs = np.where(np.isfinite(logs), logs, -np.inf)
    max_log = float(logs.max()) if np.isfinite(logs.max()) else 0.0
    n_bins = max(1, math.ceil(max(max_log, 0.0) / LOG_TIME_BIN_WIDTH))
    if max_log >= n_bins * LOG_TIME_BIN_WIDTH:  # value exactly on the top edge
        n_bins += 1
    idx = np.clip(np.floor(logs / LOG_TIME_BIN_WIDTH), 0, n_bins - 1).astype(np.int64)
    counts_time = np.bincount(idx, minlength=n_bins)
    edges_time = np.arange(n_bins + 1, dtype=np.float64) * LOG_TIME_BIN_WIDTH
    return (
        Histogram(edges_games, counts_games.astype(np.int64)),
        Histogram(edges_time, counts_time.astype(np.int64)),
    )


def friend_count_distribution(d: Dataset) -> Histogram:
    """Users per social degree, including degree zero."""
    users = d.users
    degrees = np.zeros(users.size, dtype=np.int64)
    if d.n_social:
        a = np.searchsorted(users, d.social[:, 0])
        b = np.searchsorted(users, d.social[:, 1])
        np.add.at(degrees, a, 1)
        np.add.at(degrees, b, 1)
    max_deg = int(degrees.max()) if degrees.size else 0
    counts = np.bincount(degrees, minlength=max_deg + 1)
    edges = np.arange(max_deg + 2, dtype=np.float64)
    return Histogram(edges, counts.astype(np.int64))


# ----------------------------------------------------------------- genre stats


def _genre_user_sets(d: Dataset, genres: tuple[str, ...]) -> list[np.ndarray]:
    """Sorted unique engaged-user arrays per genre label."""
    label_to_pos = {g: k for k, g in enumerate(genres)}
    membership = np.zeros((d.n_games, len(genres)), dtype=bool)
    for idx, game_genres in enumerate(d.catalog_genres):
        for label in game_genres:
            pos = label_to_pos.get(label)
            if pos is not None:
                membership[idx, pos] = True
    codes = np.searchsorted(d.catalog_games, d.eng_game)
    return [np.unique(d.eng_user[membership[codes, k]]) for k in range(len(genres))]


def genre_conditional(d: Dataset, genres: list[str] | tuple[str, ...]) -> GenreMatrix:
    """P(user plays genre A | user plays genre B) for the given labels."""
    if not genres:
        raise ValueError("genres must be non-empty")
    known = set(d.genre_labels)
    for g in genres:
        if g not in known:
            raise ValueError(f"unknown genre label {g!r}")
    genres = tuple(genres)
    user_sets = _genre_user_sets(d, genres)
    k = len(genres)
    values = np.full((k, k), np.nan)
    for b in range(k):
        nb = user_sets[b].size
        if nb == 0:
            continue  # column stays undefined
        for a in range(k):
            inter = np.intersect1d(user_sets[a], user_sets[b], assume_unique=True).size
            values[a, b] = inter / nb
    return GenreMatrix(genres=genres, values=values)


def top_genres(d: Dataset, k: int) -> tuple[str, ...]:
    """The k genres engaged by the most users (ties by label)."""
    labels = d.genre_labels
    sets = _genre_user_sets(d, labels)
    order = sorted(range(len(labels)), key=lambda i: (-sets[i].size, labels[i]))
    return tuple(labels[i] for i in order[:k])


# --------------------------------------------------------------- pair scores


def co_purchase_score(d: Dataset, i: int, j: int) -> float:
    """Shared audience ratio: |users of both| / (|users of i| + |users of j|)."""
    for g in (i, j):
        if not d.has_game(g):
            raise ValueError(f"unknown game id {g}")
    users_i, _ = d.game_users(i)
    users_j, _ = d.game_users(j)
    denom = users_i.size + users_j.size
    if denom == 0:
        return 0.0
    shared = np.intersect1d(users_i, users_j, assume_unique=True).size
    return shared / denom


def co_dwelling_score(d: Dataset, i: int, j: int, time_scale: float) -> float | None:
    """exp(-|t_i - t_j| / time_scale) over common players; None if no overlap.

    t_i and t_j are the average dwelling times of the users engaged in both
    games, measured on game i and game j respectively.
    """
    if time_scale <= 0:
        raise ValueError("time_scale must be > 0")
    for g in (i, j):
        if not d.has_game(g):
            raise ValueError(f"unknown game id {g}")
    users_i, minutes_i = d.game_users(i)
    users_j, minutes_j = d.game_users(j)
    common, idx_i, idx_j = np.intersect1d(users_i, users_j, assume_unique=True, return_indices=True)
    if common.size == 0:
        return None
    t_i = float(minutes_i[idx_i].mean())
    t_j = float(minutes_j[idx_j].mean())
    return math.exp(-abs(t_i - t_j) / time_scale)


# --------------------------------------------------------- social correlations


def _adjacency(d: Dataset) -> dict[int, np.ndarray]:
    adj: dict[int, list[int]] = {}
    for a, b in d.social:
        adj.setdefault(int(a), []).append(int(b))
        adj.setdefault(int(b), []).append(int(a))
    return {u: np.array(sorted(vs), dtype=np.uint64) for u, vs in adj.items()}


def social_dwelling_correlation(d: Dataset, game: int, seed: int) -> tuple[float | None, float | None]:
    """Pearson r of user dwelling vs friends' mean dwelling on one game.

    The second value repeats the computation with each user's engaged friends
    replaced by an equal-size seeded sample of engaged non-friends. Either
    value is None when fewer than two valid pairs exist (or variance is zero).
    """
    users_g, minutes_g = d.game_users(game)
    if users_g.size == 0:
        return None, None
    minute_of = dict(zip((int(u) for u in users_g), (float(m) for m in minutes_g)))
    adj = _adjacency(d)
    rng = np.random.default_rng(seed)

    xs: list[float] = []
    ys_friend: list[float] = []
    ys_random: list[float] = []
    engaged_sorted = users_g  # sorted by user id already
    for u in (int(v) for v in engaged_sorted):
        friends = adj.get(u)
        if friends is None:
            continue
        engaged_friends = friends[np.isin(friends, engaged_sorted)]
        if engaged_friends.size == 0:
            continue
        xs.append(minute_of[u])
        ys_friend.append(float(np.mean([minute_of[int(f)] for f in engaged_friends])))
        pool = engaged_sorted[~np.isin(engaged_sorted, friends)]
        pool = pool[pool != np.uint64(u)]
        take = min(engaged_friends.size, pool.size)
        if take:
            picked = rng.choice(pool, size=take, replace=False)
            ys_random.append(float(np.mean([minute_of[int(p)] for p in picked])))
        else:
            ys_random.append(np.nan)

    x = np.array(xs)
    friend_r = _pearson(x, np.array(ys_friend))
    rand = np.array(ys_random)
    ok = ~np.isnan(rand)
    random_r = _pearson(x[ok], rand[ok])
    return friend_r, random_r


def genre_similarity_histogram(
    d: Dataset, top_k_genres: int, seed: int
) -> tuple[Histogram, Histogram]:
    """Cosine-similarity histograms of genre preference vectors.

    Per user, the vector holds ln(1 + total minutes) in each of the top-k
    most-engaged genres. The first histogram bins friend edges, the second an
    equal-size seeded sample of non-friend pairs; both use 10 bins over [0,1]
    with negative similarities clamped into the first bin. Zero vectors get
    similarity 0.
    """
    if top_k_genres < 1:
        raise ValueError("top_k_genres must be >= 1")
    genres = top_genres(d, top_k_genres)
    users = d.users
    label_to_pos = {g: k for k, g in enumerate(genres)}
    vectors = np.zeros((users.size, len(genres)))
    codes_game = np.searchsorted(d.catalog_games, d.eng_game)
    codes_user = np.searchsorted(users, d.eng_user)
    for idx, game_genres in enumerate(d.catalog_genres):
        cols = [label_to_pos[g] for g in game_genres if g in label_to_pos]
        if not cols:
            continue
        rows = codes_game == idx
        for col in cols:
            np.add.at(vectors[:, col], codes_user[rows], d.eng_minutes[rows])
    vectors = np.log1p(vectors)
    norms = np.linalg.norm(vectors, axis=1)

    def cosine(a: int, b: int) -> float:
        if norms[a] == 0.0 or norms[b] == 0.0:
            return 0.0
        return float(vectors[a] @ vectors[b] / (norms[a] * norms[b]))

    edge_a = np.searchsorted(users, d.social[:, 0])
    edge_b = np.searchsorted(users, d.social[:, 1])
    friend_sims = np.array([cosine(a, b) for a, b in zip(edge_a, edge_b)])

    # equal-size sample of distinct non-adjacent pairs, drawn by rejection
    rng = np.random.default_rng(seed)
    n_users = users.size
    existing = set(zip(edge_a.tolist(), edge_b.tolist()))
    target = friend_sims.size
    picked: set[tuple[int, int]] = set()
    attempts = 0
    max_attempts = max(1000, 200 * target)
    while len(picked) < target and attempts < max_attempts and n_users >= 2:
        attempts += 1
        a = int(rng.integers(n_users))
        b = int(rng.integers(n_users))
        if a == b:
            continue
        pair = (min(a, b), max(a, b))
        if pair in existing or pair in picked:
            continue
        picked.add(pair)
    random_sims = np.array([cosine(a, b) for a, b in sorted(picked)])

    def to_hist(sims: np.ndarray) -> Histogram:
        edges = np.linspace(0.0, 1.0, SIMILARITY_BINS + 1)
        if sims.size == 0:
            return Histogram(edges, np.zeros(SIMILARITY_BINS, dtype=np.int64))
        idx = np.clip(np.floor(sims * SIMILARITY_BINS), 0, SIMILARITY_BINS - 1).astype(np.int64)
        return Histogram(edges, np.bincount(idx, minlength=SIMILARITY_BINS).astype(np.int64))

    return to_hist(friend_sims), to_hist(random_sims)


# ------------------------------------------------------------------- reports


def _write_histogram(path: Path, hist: Histogram) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)}\n")


def _write_paired_histogram(path: Path, friend: Histogram, other: Histogram) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,friend_count,nonfriend_count\n")
        for lo, hi, cf, co in zip(friend.bin_edges[:-1], friend.bin_edges[1:], friend.counts, other.counts):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(cf)},{int(co)}\n")


def _write_matrix(path: Path, row_labels: list[str], col_labels: list[str], values: np.ndarray) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write("," + ",".join(col_labels) + "\n")
        for label, row in zip(row_labels, values):
            cells = ["" if (isinstance(v, float) and math.isnan(v)) or v is None else repr(float(v)) for v in row]
            fh.write(label + "," + ",".join(cells) + "\n")


def write_analysis_reports(
    d: Dataset,
    directory: str | Path,
    *,
    top_genres_k: int = 5,
    matrix_games: int = 20,
    correlation_games: int = 10,
    time_scale: float | None = None,
    seed: int = 0,
    threads: int = 1,
) -> dict:
    """Run every analysis and write the fixed-name CSV reports plus a summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    games_hist, time_hist = engagement_histograms(d)
    _write_histogram(directory / "engagement_count_hist.csv", games_hist)
    _write_histogram(directory / "dwelling_time_hist.csv", time_hist)

    _write_histogram(directory / "friend_count_hist.csv", friend_count_distribution(d))

    genres = top_genres(d, top_genres_k)
    if genres:
        matrix = genre_conditional(d, genres)
        _write_matrix(directory / "genre_conditional.csv", list(matrix.genres), list(matrix.genres), matrix.values)

    # most-engaged games for the pairwise score matrices and correlations
    codes = np.searchsorted(d.catalog_games, d.eng_game)
    engaged_counts = np.bincount(codes, minlength=d.n_games)
    order = np.lexsort((d.catalog_games, -engaged_counts))
    top_games = [int(d.catalog_games[i]) for i in order[: max(matrix_games, correlation_games)]]

    mat_games = top_games[:matrix_games]
    labels = [str(g) for g in mat_games]
    cop = np.array([[co_purchase_score(d, a, b) for b in mat_games] for a in mat_games])
    _write_matrix(directory / "copurchase_matrix.csv", labels, labels, cop)

    scale = time_scale if time_scale is not None else mean_dwelling_gap(d)
    cod = np.array(
        [
            [np.nan if (v := co_dwelling_score(d, a, b, scale)) is None else v for b in mat_games]
            for a in mat_games
        ]
    )
    _write_matrix(directory / "codwelling_matrix.csv", labels, labels, cod)

    corr_games = top_games[:correlation_games]

    def corr_row(g: int) -> tuple[int, float | None, float | None]:
        fr, rr = social_dwelling_correlation(d, g, seed)
        return g, fr, rr

    if threads > 1 and len(corr_games) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            corr_rows = list(pool.map(corr_row, corr_games))
    else:
        corr_rows = [corr_row(g) for g in corr_games]
    with (directory / "social_correlation.csv").open("w", encoding="utf-8") as fh:
        fh.write("game_id,friend_r,random_r\n")
        for g, fr, rr in corr_rows:
            fh.write(f"{g},{'' if fr is None else repr(fr)},{'' if rr is None else repr(rr)}\n")

    friend_hist, random_hist = genre_similarity_histogram(d, top_genres_k, seed)
    _write_paired_histogram(directory / "genre_similarity_hist.csv", friend_hist, random_hist)

    summary = {
        "users": d.n_users,
        "games": d.n_games,
        "engagements": d.n_engagements,
        "social_edges": d.n_social,
        "genres": len(d.genre_labels),
        "developers": len(set(d.catalog_developers)),
        "publishers": len(set(d.catalog_publishers)),
        "top_genres": list(genres),
        "time_scale": scale,
        "reports": [
            "engagement_count_hist.csv",
            "dwelling_time_hist.csv",
            "friend_count_hist.csv",
            "genre_conditional.csv",
            "copurchase_matrix.csv",
            "codwelling_matrix.csv",
            "social_correlation.csv",
            "genre_similarity_hist.csv",
        ],
    }
    (directory / "analysis_summary.json").write_text(
        json.dumps(summary, indent=2) + "\n", encoding="utf-8"
    )
    return summary
