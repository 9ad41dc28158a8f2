"""Core dataset types plus TSV ingestion, filtering, sampling and holdout splitting.

The on-disk formats are three UTF-8 tab-separated files without headers:

* ``engagements.tsv`` -- ``user_id<TAB>game_id<TAB>dwelling_minutes``
* ``social.tsv``      -- ``user_a<TAB>user_b``
* ``catalog.tsv``     -- ``game_id<TAB>genre1,genre2,...<TAB>developer<TAB>publisher``

Identifiers are unsigned 64-bit decimal integers; minutes are non-negative
decimals. A :class:`Dataset` is immutable once built and safe to share across
threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

_UINT64_MAX = 2**64 - 1


class ParseError(ValueError):
    """A malformed input row; carries the file path and 1-based line number."""

    def __init__(self, path: str | Path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class Engagement(NamedTuple):
    user_id: int
    game_id: int
    dwelling_minutes: float


class SocialEdge(NamedTuple):
    user_a: int
    user_b: int


class GameRecord(NamedTuple):
    game_id: int
    genres: frozenset[str]
    developer: str
    publisher: str


@dataclass(frozen=True)
class LoadReport:
    """Counters for rows that were merged or dropped while building a Dataset."""

    merged_engagements: int = 0
    dropped_engagements_unknown_game: int = 0
    dropped_social_unknown_user: int = 0
    dropped_social_self_loops: int = 0


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable engagement table plus social edges and game catalog.

    Engagement rows are stored columnar, sorted by (user, game) with at most
    one row per pair. Social edges are stored once with ``user_a < user_b``,
    lexicographically sorted. Catalog arrays are sorted by game id.
    """

    eng_user: np.ndarray  # (N,) uint64
    eng_game: np.ndarray  # (N,) uint64
    eng_minutes: np.ndarray  # (N,) float64
    social: np.ndarray  # (M, 2) uint64, a < b
    catalog_games: np.ndarray  # (G,) uint64 sorted unique
    catalog_genres: tuple[frozenset[str], ...]
    catalog_developers: tuple[str, ...]
    catalog_publishers: tuple[str, ...]

    # ------------------------------------------------------------------ build

    @classmethod
    def build(
        cls,
        eng_user: np.ndarray,
        eng_game: np.ndarray,
        eng_minutes: np.ndarray,
        social: np.ndarray,
        catalog_games: np.ndarray,
        catalog_genres: tuple[frozenset[str], ...],
        catalog_developers: tuple[str, ...],
        catalog_publishers: tuple[str, ...],
    ) -> tuple["Dataset", LoadReport]:
        """Canonicalize raw arrays and enforce referential integrity.

        Duplicate (user, game) rows are merged by summing minutes. Engagements
        whose game is absent from the catalog, social self-loops and social
        edges touching users without engagements are dropped; all four events
        are counted in the returned :class:`LoadReport`.
        """
        eng_user = np.asarray(eng_user, dtype=np.uint64)
        eng_game = np.asarray(eng_game, dtype=np.uint64)
        eng_minutes = np.asarray(eng_minutes, dtype=np.float64)
        if np.any(eng_minutes < 0) or not np.all(np.isfinite(eng_minutes)):
            raise ValueError("dwelling_minutes must be finite and >= 0")

        # catalog: sorted by id, ids unique
        cat_order = np.argsort(catalog_games, kind="stable")
        catalog_games = np.asarray(catalog_games, dtype=np.uint64)[cat_order]
        if catalog_games.size and np.any(catalog_games[1:] == catalog_games[:-1]):
            raise ValueError("duplicate game_id in catalog")
        catalog_genres = tuple(frozenset(catalog_genres[k]) for k in cat_order)
        if any(len(g) == 0 for g in catalog_genres):
            raise ValueError("every catalog game needs at least one genre")
        catalog_developers = tuple(catalog_developers[k] for k in cat_order)
        catalog_publishers = tuple(catalog_publishers[k] for k in cat_order)

        # engagements: sort, merge duplicates, drop rows with unknown games
        order = np.lexsort((eng_game, eng_user))
        eng_user, eng_game, eng_minutes = eng_user[order], eng_game[order], eng_minutes[order]
        merged = 0
        if eng_user.size:
            same = (eng_user[1:] == eng_user[:-1]) & (eng_game[1:] == eng_game[:-1])
            if same.any():
                starts = np.flatnonzero(np.concatenate(([True], ~same)))
                merged = eng_user.size - starts.size
                eng_minutes = np.add.reduceat(eng_minutes, starts)
                eng_user, eng_game = eng_user[starts], eng_game[starts]
        known = np.isin(eng_game, catalog_games)
        dropped_eng = int(eng_game.size - known.sum())
        if dropped_eng:
            eng_user, eng_game, eng_minutes = eng_user[known], eng_game[known], eng_minutes[known]

        users = np.unique(eng_user)

        # social: undirected canonical form, drop self-loops and unknown users
        social = np.asarray(social, dtype=np.uint64).reshape(-1, 2)
        self_loops = 0
        dropped_social = 0
        if social.size:
            lo = np.minimum(social[:, 0], social[:, 1])
            hi = np.maximum(social[:, 0], social[:, 1])
            keep = lo != hi
            self_loops = int((~keep).sum())
            lo, hi = lo[keep], hi[keep]
            known_edge = np.isin(lo, users) & np.isin(hi, users)
            dropped_social = int(lo.size - known_edge.sum())
            lo, hi = lo[known_edge], hi[known_edge]
            social = np.unique(np.column_stack((lo, hi)), axis=0) if lo.size else np.empty((0, 2), dtype=np.uint64)
        else:
            social = np.empty((0, 2), dtype=np.uint64)

        ds = cls(
            eng_user=_readonly(eng_user),
            eng_game=_readonly(eng_game),
            eng_minutes=_readonly(eng_minutes),
            social=_readonly(social),
            catalog_games=_readonly(catalog_games),
            catalog_genres=catalog_genres,
            catalog_developers=catalog_developers,
            catalog_publishers=catalog_publishers,
        )
        report = LoadReport(
            merged_engagements=merged,
            dropped_engagements_unknown_game=dropped_eng,
            dropped_social_unknown_user=dropped_social,
            dropped_social_self_loops=self_loops,
        )
        return ds, report

    @classmethod
    def from_rows(
        cls,
        engagements: Iterable[tuple[int, int, float]],
        social: Iterable[tuple[int, int]] = (),
        catalog: Iterable[GameRecord | tuple] = (),
    ) -> "Dataset":
        """Build a Dataset from row tuples; convenient for tests and toy data."""
        eng = list(engagements)
        soc = list(social)
        cat = [GameRecord(*row) if not isinstance(row, GameRecord) else row for row in catalog]
        ds, report = cls.build(
            np.array([e[0] for e in eng], dtype=np.uint64),
            np.array([e[1] for e in eng], dtype=np.uint64),
            np.array([e[2] for e in eng], dtype=np.float64),
            np.array(soc, dtype=np.uint64).reshape(-1, 2),
            np.array([r.game_id for r in cat], dtype=np.uint64),
            tuple(frozenset(r.genres) for r in cat),
            tuple(r.developer for r in cat),
            tuple(r.publisher for r in cat),
        )
        if report.merged_engagements:
            logger.warning("merged %d duplicate engagement rows", report.merged_engagements)
        return ds

    # ------------------------------------------------------------- properties

    @cached_property
    def users(self) -> np.ndarray:
        """Sorted unique user ids (users are defined by having engagements)."""
        return _readonly(np.unique(self.eng_user))

    @property
    def n_users(self) -> int:
        return int(self.users.size)

    @property
    def n_games(self) -> int:
        return int(self.catalog_games.size)

    @property
    def n_engagements(self) -> int:
        return int(self.eng_user.size)

    @property
    def n_social(self) -> int:
        return int(self.social.shape[0])

    @cached_property
    def genre_labels(self) -> tuple[str, ...]:
        labels: set[str] = set()
        for gs in self.catalog_genres:
            labels |= gs
        return tuple(sorted(labels))

    @cached_property
    def _game_order(self) -> np.ndarray:
        # engagement row permutation sorted by (game, user), for by-game lookup
        return _readonly(np.lexsort((self.eng_user, self.eng_game)))

    # ---------------------------------------------------------------- lookups

    def user_rows(self, user_id: int) -> slice:
        """Engagement row range of one user (rows are sorted by user)."""
        lo = int(np.searchsorted(self.eng_user, np.uint64(user_id), side="left"))
        hi = int(np.searchsorted(self.eng_user, np.uint64(user_id), side="right"))
        return slice(lo, hi)

    def user_games(self, user_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(game ids, minutes) engaged by ``user_id``, sorted by game id."""
        rows = self.user_rows(user_id)
        return self.eng_game[rows], self.eng_minutes[rows]

    def game_users(self, game_id: int) -> tuple[np.ndarray, np.ndarray]:
        """(user ids, minutes) of engagements on ``game_id``, sorted by user id."""
        order = self._game_order
        games_sorted = self.eng_game[order]
        lo = int(np.searchsorted(games_sorted, np.uint64(game_id), side="left"))
        hi = int(np.searchsorted(games_sorted, np.uint64(game_id), side="right"))
        rows = order[lo:hi]
        return self.eng_user[rows], self.eng_minutes[rows]

    def game_index(self, game_id: int) -> int:
        idx = int(np.searchsorted(self.catalog_games, np.uint64(game_id)))
        if idx >= self.catalog_games.size or self.catalog_games[idx] != np.uint64(game_id):
            raise ValueError(f"unknown game id {game_id}")
        return idx

    def has_game(self, game_id: int) -> bool:
        idx = np.searchsorted(self.catalog_games, np.uint64(game_id))
        return bool(idx < self.catalog_games.size and self.catalog_games[idx] == np.uint64(game_id))

    # -------------------------------------------------------------- iteration

    def engagement_rows(self) -> Iterator[Engagement]:
        for u, g, m in zip(self.eng_user, self.eng_game, self.eng_minutes):
            yield Engagement(int(u), int(g), float(m))

    def social_rows(self) -> Iterator[SocialEdge]:
        for a, b in self.social:
            yield SocialEdge(int(a), int(b))

    def catalog_rows(self) -> Iterator[GameRecord]:
        for k, gid in enumerate(self.catalog_games):
            yield GameRecord(int(gid), self.catalog_genres[k], self.catalog_developers[k], self.catalog_publishers[k])

    # --------------------------------------------------------------- equality

    def equals(self, other: "Dataset") -> bool:
        return (
            np.array_equal(self.eng_user, other.eng_user)
            and np.array_equal(self.eng_game, other.eng_game)
            and np.array_equal(self.eng_minutes, other.eng_minutes)
            and np.array_equal(self.social, other.social)
            and np.array_equal(self.catalog_games, other.catalog_games)
            and self.catalog_genres == other.catalog_genres
            and self.catalog_developers == other.catalog_developers
            and self.catalog_publishers == other.catalog_publishers
        )

    # ------------------------------------------------------------ restriction

    def _restrict_users(self, kept: np.ndarray) -> "Dataset":
        """New Dataset keeping only engagements/social among ``kept`` users."""
        kept = np.asarray(kept, dtype=np.uint64)
        mask = np.isin(self.eng_user, kept)
        soc_mask = np.isin(self.social[:, 0], kept) & np.isin(self.social[:, 1], kept)
        return Dataset(
            eng_user=_readonly(self.eng_user[mask]),
            eng_game=_readonly(self.eng_game[mask]),
            eng_minutes=_readonly(self.eng_minutes[mask]),
            social=_readonly(self.social[soc_mask]),
            catalog_games=self.catalog_games,
            catalog_genres=self.catalog_genres,
            catalog_developers=self.catalog_developers,
            catalog_publishers=self.catalog_publishers,
        )

    # ------------------------------------------------------------------- save

    def save(self, directory: str | Path) -> tuple[Path, Path, Path]:
        """Write the three canonical TSV files into ``directory``."""
        directory = Path(directory)
        return self.save_files(
            directory / "engagements.tsv",
            directory / "social.tsv",
            directory / "catalog.tsv",
        )

    def save_files(
        self,
        engagements_path: str | Path,
        social_path: str | Path,
        catalog_path: str | Path,
    ) -> tuple[Path, Path, Path]:
        """Write the three TSV files to explicit paths, creating parent dirs."""
        eng_path, soc_path, cat_path = Path(engagements_path), Path(social_path), Path(catalog_path)
        for p in (eng_path, soc_path, cat_path):
            p.parent.mkdir(parents=True, exist_ok=True)
        with eng_path.open("w", encoding="utf-8") as fh:
            fh.writelines(
                f"{int(u)}\t{int(g)}\t{float(m)!r}\n"
                for u, g, m in zip(self.eng_user, self.eng_game, self.eng_minutes)
            )
        with soc_path.open("w", encoding="utf-8") as fh:
            fh.writelines(f"{int(a)}\t{int(b)}\n" for a, b in self.social)
        with cat_path.open("w", encoding="utf-8") as fh:
            for rec in self.catalog_rows():
                genres = ",".join(sorted(rec.genres))
                fh.write(f"{rec.game_id}\t{genres}\t{rec.developer}\t{rec.publisher}\n")
        return eng_path, soc_path, cat_path


@dataclass(frozen=True)
class Split:
    """Train dataset plus per-user held-out validation/test engagement sets."""

    train: Dataset
    validation: dict[int, tuple[np.ndarray, np.ndarray]]  # user -> (game ids, minutes)
    test: dict[int, tuple[np.ndarray, np.ndarray]]
    eval_users: np.ndarray  # sorted uint64

    def relevant_games(self, phase: str, user_id: int) -> np.ndarray:
        held = self.validation if phase == "validation" else self.test
        entry = held.get(int(user_id))
        return entry[0] if entry is not None else np.empty(0, dtype=np.uint64)


# ---------------------------------------------------------------------- load


def _scan_engagements(path: Path) -> None:
    """Slow line-by-line validation; raises ParseError at the first bad row."""
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            row = line.rstrip("\n")
            parts = row.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
            for name, tok in (("user_id", parts[0]), ("game_id", parts[1])):
                try:
                    v = int(tok)
                except ValueError:
                    raise ParseError(path, lineno, f"non-integer {name}: {tok!r}") from None
                if not (0 <= v <= _UINT64_MAX):
                    raise ParseError(path, lineno, f"{name} out of unsigned 64-bit range: {tok!r}")
            try:
                minutes = float(parts[2])
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric dwelling_minutes: {parts[2]!r}") from None
            if not math.isfinite(minutes):
                raise ParseError(path, lineno, f"non-finite dwelling_minutes: {parts[2]!r}")
            if minutes < 0:
                raise ParseError(path, lineno, f"negative dwelling_minutes: {parts[2]!r}")


def _scan_pairs(path: Path) -> None:
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 2 fields, got {len(parts)}")
            for name, tok in (("user_a", parts[0]), ("user_b", parts[1])):
                try:
                    v = int(tok)
                except ValueError:
                    raise ParseError(path, lineno, f"non-integer {name}: {tok!r}") from None
                if not (0 <= v <= _UINT64_MAX):
                    raise ParseError(path, lineno, f"{name} out of unsigned 64-bit range: {tok!r}")


def _read_engagement_file(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        df = pd.read_csv(
            path,
            sep="\t",
            header=None,
            names=("user", "game", "minutes"),
            dtype={"user": np.uint64, "game": np.uint64, "minutes": np.float64},
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError:
        return (np.empty(0, np.uint64), np.empty(0, np.uint64), np.empty(0, np.float64))
    except (ValueError, OverflowError, pd.errors.ParserError):
        _scan_engagements(path)  # locate the offending line for the error message
        raise ParseError(path, 0, "malformed engagement file")
    minutes = df["minutes"].to_numpy()
    if np.any(~np.isfinite(minutes)) or np.any(minutes < 0):
        _scan_engagements(path)
        raise ParseError(path, 0, "malformed engagement file")
    return df["user"].to_numpy(), df["game"].to_numpy(), minutes


def _read_social_file(path: Path) -> np.ndarray:
    try:
        df = pd.read_csv(
            path,
            sep="\t",
            header=None,
            names=("a", "b"),
            dtype={"a": np.uint64, "b": np.uint64},
            skip_blank_lines=False,
        )
    except pd.errors.EmptyDataError:
        return np.empty((0, 2), dtype=np.uint64)
    except (ValueError, OverflowError, pd.errors.ParserError):
        _scan_pairs(path)
        raise ParseError(path, 0, "malformed social file")
    return df.to_numpy()


def _read_catalog_file(path: Path) -> tuple[np.ndarray, tuple, tuple, tuple]:
    games: list[int] = []
    genres: list[frozenset[str]] = []
    devs: list[str] = []
    pubs: list[str] = []
    seen: set[int] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ParseError(path, lineno, f"expected 4 fields, got {len(parts)}")
            try:
                gid = int(parts[0])
            except ValueError:
                raise ParseError(path, lineno, f"non-integer game_id: {parts[0]!r}") from None
            if not (0 <= gid <= _UINT64_MAX):
                raise ParseError(path, lineno, f"game_id out of unsigned 64-bit range: {parts[0]!r}")
            if gid in seen:
                raise ParseError(path, lineno, f"duplicate game_id {gid}")
            seen.add(gid)
            labels = parts[1].split(",")
            if any(lbl == "" for lbl in labels):
                raise ParseError(path, lineno, "empty genre label")
            games.append(gid)
            genres.append(frozenset(labels))
            devs.append(parts[2])
            pubs.append(parts[3])
    return (np.array(games, dtype=np.uint64), tuple(genres), tuple(devs), tuple(pubs))


def load_dataset_with_report(
    engagements_path: str | Path,
    social_path: str | Path,
    catalog_path: str | Path,
) -> tuple[Dataset, LoadReport]:
    """Load the three TSV files, returning the Dataset plus drop/merge counters."""
    eng_u, eng_g, eng_m = _read_engagement_file(Path(engagements_path))
    social = _read_social_file(Path(social_path))
    games, genres, devs, pubs = _read_catalog_file(Path(catalog_path))
    ds, report = Dataset.build(eng_u, eng_g, eng_m, social, games, genres, devs, pubs)
    if report.merged_engagements:
        logger.warning("merged %d duplicate engagement rows", report.merged_engagements)
    if report.dropped_engagements_unknown_game:
        logger.warning("dropped %d engagements with games missing from the catalog", report.dropped_engagements_unknown_game)
    if report.dropped_social_unknown_user:
        logger.warning("dropped %d social edges referencing unknown users", report.dropped_social_unknown_user)
    if report.dropped_social_self_loops:
        logger.warning("dropped %d social self-loops", report.dropped_social_self_loops)
    return ds, report


def load_dataset(
    engagements_path: str | Path,
    social_path: str | Path,
    catalog_path: str | Path,
) -> Dataset:
    ds, _ = load_dataset_with_report(engagements_path, social_path, catalog_path)
    return ds


# -------------------------------------------------------------------- filter


def filter_users(d: Dataset, min_games: int, min_total_minutes: float) -> Dataset:
    """Keep users with >= min_games engagements and total minutes >= threshold.

    Single pass: removing users never triggers game-side refiltering. Social
    edges touching removed users are dropped.
    """
    if min_games < 1:
        raise ValueError("min_games must be >= 1")
    if min_total_minutes < 0:
        raise ValueError("min_total_minutes must be >= 0")
    users, counts = np.unique(d.eng_user, return_counts=True)
    codes = np.searchsorted(users, d.eng_user)
    totals = np.bincount(codes, weights=d.eng_minutes, minlength=users.size)
    keep = (counts >= min_games) & (totals >= min_total_minutes)
    return d._restrict_users(users[keep])


def sample_users(d: Dataset, fraction: float, seed: int) -> Dataset:
    """Uniform user sample without replacement, keeping floor(fraction * |U|)."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return d
    users = d.users
    k = int(math.floor(fraction * users.size))
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(users, size=k, replace=False))
    return d._restrict_users(kept)


# --------------------------------------------------------------------- split


def split_holdout(d: Dataset, num_eval_users: int, holdout_fraction: float, seed: int) -> Split:
    """Hold out two disjoint per-user engagement sets for validation and test.

    For each selected user, ceil(holdout_fraction * |E_u|) engagements (at
    least 1) go to validation and as many again to test; the rest stay in
    train. Users too sparse to keep one training engagement are skipped and
    another user is drawn in their place.
    """
    if num_eval_users < 0 or num_eval_users > d.n_users:
        raise ValueError("num_eval_users must be in [0, number of users]")
    if num_eval_users == 0:
        return Split(train=d, validation={}, test={}, eval_users=np.empty(0, dtype=np.uint64))
    if not (0.0 < holdout_fraction < 0.5):
        raise ValueError("holdout_fraction must be in (0, 0.5)")

    users = d.users
    rng = np.random.default_rng(seed)
    order = rng.permutation(users.size)

    chosen: list[tuple[int, int]] = []  # (user position, holdout count)
    for pos in order:
        u = users[pos]
        rows = d.user_rows(int(u))
        n = rows.stop - rows.start
        h = max(1, math.ceil(holdout_fraction * n))
        if 2 * h <= n - 1:  # one engagement must stay in train
            chosen.append((int(pos), h))
            if len(chosen) == num_eval_users:
                break
    if len(chosen) < num_eval_users:
        raise ValueError(
            f"only {len(chosen)} of {num_eval_users} requested evaluation users "
            "have enough engagements to hold out"
        )

    remove = np.zeros(d.n_engagements, dtype=bool)
    validation: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    test: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for pos, h in chosen:
        u = int(users[pos])
        rows = d.user_rows(u)
        idx = np.arange(rows.start, rows.stop)
        perm = rng.permutation(idx.size)
        val_idx = np.sort(idx[perm[:h]])
        test_idx = np.sort(idx[perm[h : 2 * h]])
        validation[u] = (d.eng_game[val_idx].copy(), d.eng_minutes[val_idx].copy())
        test[u] = (d.eng_game[test_idx].copy(), d.eng_minutes[test_idx].copy())
        remove[val_idx] = True
        remove[test_idx] = True

    keep = ~remove
    train = Dataset(
        eng_user=_readonly(d.eng_user[keep]),
        eng_game=_readonly(d.eng_game[keep]),
        eng_minutes=_readonly(d.eng_minutes[keep]),
        social=d.social,
        catalog_games=d.catalog_games,
        catalog_genres=d.catalog_genres,
        catalog_developers=d.catalog_developers,
        catalog_publishers=d.catalog_publishers,
    )
    eval_users = np.sort(np.array([users[pos] for pos, _ in chosen], dtype=np.uint64))
    return Split(train=train, validation=validation, test=test, eval_users=_readonly(eval_users))
