import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gamerec.analysis import (
    co_dwelling_score,
    co_purchase_score,
    engagement_histograms,
    friend_count_distribution,
    genre_conditional,
    genre_similarity_histogram,
    social_dwelling_correlation,
    top_genres,
    write_analysis_reports,
)
from gamerec.data import Dataset

from conftest import random_toy_dataset


def simple_dataset(engagements, social=(), games=(10, 11, 12, 13, 14)):
    return Dataset.from_rows(engagements, social, [(g, {"x"}, "d", "p") for g in games])


class TestEngagementHistograms:
    def test_user_with_three_games_lands_in_bin(self):
        d = simple_dataset([(1, 10, 5.0), (1, 11, 5.0), (1, 12, 5.0)])
        games_hist, _ = engagement_histograms(d)
        bin_idx = int(np.searchsorted(games_hist.bin_edges, 3.0, side="right")) - 1
        assert games_hist.bin_edges[bin_idx] == 3.0
        assert games_hist.counts[bin_idx] == 1

    def test_empty_dataset_all_zero(self):
        d = Dataset.from_rows([], [], [(10, {"x"}, "d", "p")])
        games_hist, time_hist = engagement_histograms(d)
        assert games_hist.counts.sum() == 0
        assert time_hist.counts.sum() == 0

    def test_sixty_minutes_in_ln_bin(self):
        d = simple_dataset([(1, 10, 60.0)])
        _, time_hist = engagement_histograms(d)
        # ln(60) = 4.094..., lands in [4.0, 4.5)
        idx = int(np.flatnonzero(time_hist.counts)[0])
        assert time_hist.bin_edges[idx] == 4.0
        assert time_hist.bin_edges[idx + 1] == 4.5

    @given(seed=st.integers(0, 10_000))
    def test_counts_sum_to_observations(self, seed):
        d = random_toy_dataset(np.random.default_rng(seed))
        games_hist, time_hist = engagement_histograms(d)
        assert games_hist.total == d.n_users
        assert time_hist.total == d.n_engagements


class TestGenreConditional:
    def make(self):
        catalog = [
            (10, {"action"}, "d", "p"),
            (11, {"rpg"}, "d", "p"),
            (12, {"sim"}, "d", "p"),
        ]
        engagements = [(1, 10, 5.0), (2, 10, 5.0), (2, 11, 5.0)]
        return Dataset.from_rows(engagements, [], catalog)

    def test_self_conditional_is_one(self):
        m = genre_conditional(self.make(), ["action", "rpg"])
        assert m.values[0, 0] == 1.0
        assert m.values[1, 1] == 1.0

    def test_hand_counted_probability(self):
        # users {1: action only; 2: action and rpg} -> P(rpg | action) = 0.5
        m = genre_conditional(self.make(), ["action", "rpg"])
        a, r = m.genres.index("action"), m.genres.index("rpg")
        assert m.values[r, a] == 0.5
        assert m.values[a, r] == 1.0

    def test_empty_genre_column_missing(self):
        m = genre_conditional(self.make(), ["action", "sim"])
        s = m.genres.index("sim")
        assert np.isnan(m.values[0, s]) and np.isnan(m.values[s, s])

    def test_unknown_genre_rejected(self):
        with pytest.raises(ValueError):
            genre_conditional(self.make(), ["nope"])

    @given(seed=st.integers(0, 10_000))
    def test_probabilities_in_unit_interval(self, seed):
        d = random_toy_dataset(np.random.default_rng(seed))
        m = genre_conditional(d, list(d.genre_labels))
        vals = m.values[~np.isnan(m.values)]
        assert np.all(vals >= 0.0) and np.all(vals <= 1.0)


class TestCoPurchase:
    def test_no_shared_users_zero(self):
        d = simple_dataset([(1, 10, 5.0), (2, 11, 5.0)])
        assert co_purchase_score(d, 10, 11) == 0.0

    def test_hand_evaluated_ratio(self):
        engagements = [(u, 10, 5.0) for u in (1, 2, 3)] + [(u, 11, 5.0) for u in (2, 3, 4, 5)]
        d = simple_dataset(engagements)
        assert co_purchase_score(d, 10, 11) == pytest.approx(2 / 7)

    def test_same_game_half(self):
        d = simple_dataset([(1, 10, 5.0), (2, 10, 5.0)])
        assert co_purchase_score(d, 10, 10) == 0.5

    def test_unknown_game_rejected(self):
        d = simple_dataset([(1, 10, 5.0)])
        with pytest.raises(ValueError):
            co_purchase_score(d, 10, 999)

    @given(seed=st.integers(0, 10_000))
    def test_symmetry(self, seed):
        d = random_toy_dataset(np.random.default_rng(seed))
        games = [int(g) for g in d.catalog_games[:4]]
        for a in games:
            for b in games:
                assert co_purchase_score(d, a, b) == co_purchase_score(d, b, a)


class TestCoDwelling:
    def test_equal_times_score_one(self):
        d = simple_dataset([(1, 10, 50.0), (1, 11, 50.0)])
        assert co_dwelling_score(d, 10, 11, 10.0) == pytest.approx(1.0)

    def test_gap_equal_to_scale(self):
        d = simple_dataset([(1, 10, 50.0), (1, 11, 60.0)])
        assert co_dwelling_score(d, 10, 11, 10.0) == pytest.approx(math.exp(-1))

    def test_disjoint_audiences_undefined(self):
        d = simple_dataset([(1, 10, 50.0), (2, 11, 60.0)])
        assert co_dwelling_score(d, 10, 11, 10.0) is None

    def test_common_users_only(self):
        # user 3 plays game 10 but not 11; averages use users 1 and 2 only
        d = simple_dataset(
            [(1, 10, 10.0), (1, 11, 20.0), (2, 10, 30.0), (2, 11, 40.0), (3, 10, 9999.0)]
        )
        expected = math.exp(-abs(20.0 - 30.0) / 10.0)
        assert co_dwelling_score(d, 10, 11, 10.0) == pytest.approx(expected)


class TestSocialCorrelation:
    def test_perfect_positive(self):
        # two disconnected friend pairs with identical dwelling within pair
        engagements = [(u, 10, float(t)) for u, t in ((1, 10), (2, 10), (3, 40), (4, 40))]
        d = simple_dataset(engagements, social=[(1, 2), (3, 4)])
        friend_r, _ = social_dwelling_correlation(d, 10, seed=0)
        assert friend_r == pytest.approx(1.0)

    def test_perfect_negative(self):
        engagements = [(1, 10, 0.0), (2, 10, 100.0), (3, 10, 100.0), (4, 10, 0.0)]
        d = simple_dataset(engagements, social=[(1, 2), (3, 4)])
        friend_r, _ = social_dwelling_correlation(d, 10, seed=0)
        assert friend_r == pytest.approx(-1.0)

    def test_undefined_with_too_few_pairs(self):
        d = simple_dataset([(1, 10, 5.0), (2, 10, 6.0)], social=[(1, 2)])
        friend_r, random_r = social_dwelling_correlation(d, 10, seed=0)
        # only 2 pairs exist and both are valid; degenerate single-pair case:
        d2 = simple_dataset([(1, 10, 5.0), (2, 11, 6.0)], social=[(1, 2)])
        assert social_dwelling_correlation(d2, 10, seed=0) == (None, None)

    def test_affine_invariance_of_pearson(self):
        rng = np.random.default_rng(0)
        engagements = [(u, 10, float(rng.integers(1, 500))) for u in range(1, 9)]
        social = [(1, 2), (3, 4), (5, 6), (7, 8), (2, 3)]
        d = simple_dataset(engagements, social)
        base_friend, _ = social_dwelling_correlation(d, 10, seed=1)
        scaled = [(u, 10, 3.0 * m + 7.0) for u, _, m in engagements]
        d2 = simple_dataset(scaled, social)
        scaled_friend, _ = social_dwelling_correlation(d2, 10, seed=1)
        assert scaled_friend == pytest.approx(base_friend, abs=1e-12)
        assert -1.0 <= base_friend <= 1.0


class TestGenreSimilarity:
    def make(self, engagements, social):
        catalog = [
            (10, {"a"}, "d", "p"),
            (11, {"b"}, "d", "p"),
            (12, {"c"}, "d", "p"),
        ]
        return Dataset.from_rows(engagements, social, catalog)

    def test_identical_vectors_bin_top(self):
        d = self.make(
            [(1, 10, 50.0), (1, 11, 20.0), (2, 10, 50.0), (2, 11, 20.0)], [(1, 2)]
        )
        friend_hist, _ = genre_similarity_histogram(d, 3, seed=0)
        assert friend_hist.counts[-1] == 1  # cosine 1.0 in [0.9, 1.0]

    def test_orthogonal_vectors_bin_zero(self):
        d = self.make([(1, 10, 50.0), (2, 11, 20.0)], [(1, 2)])
        friend_hist, _ = genre_similarity_histogram(d, 3, seed=0)
        assert friend_hist.counts[0] == 1

    def test_hand_cosine_value(self):
        # ln(1+x) vectors proportional to (1,0) and (1,1) -> cos = 1/sqrt(2)
        t = math.e - 1  # ln(1+t) = 1
        d = self.make([(1, 10, t), (2, 10, t), (2, 11, t)], [(1, 2)])
        friend_hist, _ = genre_similarity_histogram(d, 2, seed=0)
        idx = int(np.flatnonzero(friend_hist.counts)[0])
        lo, hi = friend_hist.bin_edges[idx], friend_hist.bin_edges[idx + 1]
        assert lo <= 1 / math.sqrt(2) < hi

    def test_histogram_totals_match_edge_counts(self):
        rng = np.random.default_rng(7)
        d = random_toy_dataset(rng)
        friend_hist, random_hist = genre_similarity_histogram(d, 3, seed=5)
        assert friend_hist.total == d.n_social
        assert random_hist.total <= d.n_social  # may fall short only on tiny graphs


class TestFriendCounts:
    def test_star_graph(self):
        engagements = [(u, 10, 5.0) for u in range(1, 6)]
        d = simple_dataset(engagements, social=[(1, u) for u in range(2, 6)])
        hist = friend_count_distribution(d)
        assert hist.counts[4] == 1  # center
        assert hist.counts[1] == 4  # spokes

    def test_empty_social_graph(self):
        d = simple_dataset([(1, 10, 5.0), (2, 11, 5.0)])
        hist = friend_count_distribution(d)
        assert hist.counts[0] == 2

    def test_handshake_identity_on_random_graph(self):
        rng = np.random.default_rng(3)
        users = list(range(1, 201))
        engagements = [(u, 10, 5.0) for u in users]
        edges = set()
        while len(edges) < 1000:
            a, b = rng.choice(users, size=2, replace=False)
            edges.add((min(int(a), int(b)), max(int(a), int(b))))
        d = simple_dataset(engagements, social=sorted(edges))
        hist = friend_count_distribution(d)
        degrees = (hist.bin_edges[:-1] * hist.counts).sum()
        assert degrees == 2 * d.n_social


def test_write_reports_fixed_names(tmp_path, toy_dataset):
    summary = write_analysis_reports(toy_dataset, tmp_path, top_genres_k=3, seed=0)
    for name in summary["reports"]:
        assert (tmp_path / name).is_file(), name
    assert (tmp_path / "genre_conditional.csv").is_file()
    assert (tmp_path / "copurchase_matrix.csv").is_file()
    assert summary["users"] == 4


def test_top_genres_by_user_count(toy_dataset):
    # action: users {1,2,3}; rpg: {1,2,3}; strategy: {3,4} -> action before rpg by label
    assert top_genres(toy_dataset, 2) == ("action", "rpg")
