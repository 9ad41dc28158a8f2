import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gamerec.context_graph import (
    RELATION_ORDER,
    RelationKind,
    assemble,
    build_co_dwelling,
    build_co_purchase,
    build_context_graph,
    build_feature_relation,
    load_relations,
    mean_dwelling_gap,
    save_relations,
)
from gamerec.data import Dataset
from gamerec.synthetic import SynthConfig, generate

from conftest import random_toy_dataset
from oracles import (
    brute_force_co_dwelling,
    brute_force_co_purchase,
    brute_force_feature_edges,
    brute_force_mean_gap,
)


def catalog_dataset(catalog, engagements=()):
    return Dataset.from_rows(engagements, [], catalog)


class TestFeatureRelations:
    def test_shared_developer_edge(self):
        d = catalog_dataset(
            [(1, {"a"}, "valve", "p1"), (2, {"b"}, "valve", "p2"), (3, {"c"}, "other", "p3")]
        )
        edges = build_feature_relation(d, RelationKind.CO_DEVELOPER)
        assert set(edges) == {(1, 2)}

    def test_isolated_game(self):
        d = catalog_dataset(
            [(1, {"a"}, "x", "p1"), (2, {"b"}, "y", "p2"), (3, {"c"}, "z", "p3")]
        )
        for kind in (RelationKind.CO_GENRE, RelationKind.CO_DEVELOPER, RelationKind.CO_PUBLISHER):
            assert build_feature_relation(d, kind) == {}

    def test_publisher_triangle(self):
        d = catalog_dataset([(g, {str(g)}, f"d{g}", "same") for g in (1, 2, 3)])
        edges = build_feature_relation(d, RelationKind.CO_PUBLISHER)
        assert set(edges) == {(1, 2), (1, 3), (2, 3)}

    def test_non_feature_kind_rejected(self):
        d = catalog_dataset([(1, {"a"}, "x", "p")])
        with pytest.raises(ValueError):
            build_feature_relation(d, RelationKind.CO_PURCHASE)


def two_game_dataset():
    engagements = [(u, 10, 5.0) for u in (1, 2, 3)] + [(u, 11, 5.0) for u in (2, 3, 4, 5)]
    return Dataset.from_rows(engagements, [], [(10, {"x"}, "d", "p"), (11, {"x"}, "d", "p")])


class TestCoPurchase:
    def test_edge_above_threshold(self):
        edges = build_co_purchase(two_game_dataset(), tau_p=0.2)
        assert (10, 11) in edges
        assert edges[(10, 11)] == pytest.approx(2 / 7)

    def test_edge_below_threshold(self):
        assert build_co_purchase(two_game_dataset(), tau_p=0.5) == {}

    def test_zero_threshold_equals_shared_user_pairs(self):
        rng = np.random.default_rng(8)
        d = random_toy_dataset(rng)
        edges = build_co_purchase(d, tau_p=0.0)
        user_games: dict[int, set[int]] = {}
        for u, g in zip(d.eng_user, d.eng_game):
            user_games.setdefault(int(u), set()).add(int(g))
        expected = set()
        for games in user_games.values():
            ordered = sorted(games)
            for a in range(len(ordered)):
                for b in range(a + 1, len(ordered)):
                    expected.add((ordered[a], ordered[b]))
        assert set(edges) == expected

    @given(seed=st.integers(0, 5_000))
    def test_threshold_monotone(self, seed):
        d = random_toy_dataset(np.random.default_rng(seed))
        low = set(build_co_purchase(d, tau_p=0.05))
        high = set(build_co_purchase(d, tau_p=0.2))
        assert high <= low


class TestCoDwelling:
    def test_equal_averages_always_edge(self):
        d = Dataset.from_rows(
            [(1, 10, 42.0), (1, 11, 42.0)], [], [(10, {"x"}, "d", "p"), (11, {"x"}, "d", "p")]
        )
        edges = build_co_dwelling(d, tau_t=0.99, time_scale=5.0)
        assert edges[(10, 11)] == pytest.approx(1.0)

    def test_gap_equal_scale_below_half(self):
        d = Dataset.from_rows(
            [(1, 10, 40.0), (1, 11, 50.0)], [], [(10, {"x"}, "d", "p"), (11, {"x"}, "d", "p")]
        )
        assert build_co_dwelling(d, tau_t=0.5, time_scale=10.0) == {}
        edges = build_co_dwelling(d, tau_t=0.3, time_scale=10.0)
        assert edges[(10, 11)] == pytest.approx(math.exp(-1))

    def test_no_common_users_never_edge(self):
        d = Dataset.from_rows(
            [(1, 10, 40.0), (2, 11, 40.0)], [], [(10, {"x"}, "d", "p"), (11, {"x"}, "d", "p")]
        )
        assert build_co_dwelling(d, tau_t=0.0, time_scale=10.0) == {}


@pytest.fixture(scope="module")
def synthetic_200():
    return generate(
        SynthConfig(n_users=500, n_games=200, n_genres=6, n_developers=12, n_publishers=8, seed=42)
    )


class TestBruteForceOracles:
    def test_co_purchase_matches_all_pairs(self, synthetic_200):
        for tau in (0.0, 0.01, 0.05):
            fast = build_co_purchase(synthetic_200, tau)
            slow = brute_force_co_purchase(synthetic_200, tau)
            assert set(fast) == set(slow)
            for pair in fast:
                assert fast[pair] == pytest.approx(slow[pair], abs=1e-12)

    def test_co_dwelling_matches_all_pairs(self, synthetic_200):
        scale = mean_dwelling_gap(synthetic_200)
        assert scale == pytest.approx(brute_force_mean_gap(synthetic_200), rel=1e-9)
        for tau in (0.2, 0.5):
            fast = build_co_dwelling(synthetic_200, tau, scale)
            slow = brute_force_co_dwelling(synthetic_200, tau, scale)
            assert set(fast) == set(slow)

    def test_feature_relations_match_attribute_scan(self, synthetic_200):
        for kind, attr in (
            (RelationKind.CO_GENRE, "genre"),
            (RelationKind.CO_DEVELOPER, "developer"),
            (RelationKind.CO_PUBLISHER, "publisher"),
        ):
            fast = set(build_feature_relation(synthetic_200, kind))
            assert fast == brute_force_feature_edges(synthetic_200, attr)


class TestAssemble:
    def empty_relations(self):
        return {kind: {} for kind in RELATION_ORDER}

    def test_empty_edge_sets_valid(self):
        graph = assemble(self.empty_relations(), np.array([1, 2, 3], dtype=np.uint64))
        for kind in RELATION_ORDER:
            assert graph.neighbor_count(1, kind) == 0

    def test_missing_relation_rejected(self):
        rels = self.empty_relations()
        del rels[RelationKind.CO_DWELLING]
        with pytest.raises(ValueError):
            assemble(rels, np.array([1, 2], dtype=np.uint64))

    def test_reversed_duplicate_stored_once(self):
        rels = self.empty_relations()
        rels[RelationKind.CO_GENRE] = {(1, 2): 1.0, (2, 1): 1.0}
        graph = assemble(rels, np.array([1, 2], dtype=np.uint64))
        assert graph.neighbor_count(1, RelationKind.CO_GENRE) == 1
        assert graph.neighbor_count(2, RelationKind.CO_GENRE) == 1

    def test_self_loop_rejected(self):
        rels = self.empty_relations()
        rels[RelationKind.CO_GENRE] = {(1, 1): 1.0}
        with pytest.raises(ValueError):
            assemble(rels, np.array([1, 2], dtype=np.uint64))

    def test_neighbor_counts_match_adjacency_scan(self, synthetic_200):
        graph, relations, _ = build_context_graph(synthetic_200, tau_p=0.01, tau_t=0.5)
        # brute-force degree: count edges touching each game
        for kind in RELATION_ORDER:
            degree: dict[int, int] = {}
            for i, j in relations[kind]:
                degree[i] = degree.get(i, 0) + 1
                degree[j] = degree.get(j, 0) + 1
            for g in (int(x) for x in synthetic_200.catalog_games):
                assert graph.neighbor_count(g, kind) == degree.get(g, 0)

    def test_symmetry_and_no_self_loops(self, synthetic_200):
        graph, _, _ = build_context_graph(synthetic_200, tau_p=0.01, tau_t=0.5)
        for kind in RELATION_ORDER:
            adj = graph.relations[kind]
            assert (adj != adj.T).nnz == 0
            assert adj.diagonal().sum() == 0


def test_save_and_load_round_trip(tmp_path, synthetic_200):
    _, relations, scale = build_context_graph(synthetic_200, tau_p=0.02, tau_t=0.4)
    save_relations(relations, tmp_path, tau_p=0.02, tau_t=0.4, time_scale=scale, n_games=200)
    loaded = load_relations(tmp_path)
    for kind in RELATION_ORDER:
        assert set(loaded[kind]) == set(relations[kind])
        for pair, score in relations[kind].items():
            assert loaded[kind][pair] == pytest.approx(score, abs=1e-15)
