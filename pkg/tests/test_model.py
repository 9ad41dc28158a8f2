import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gamerec.context_graph import RELATION_ORDER, ContextGraph, RelationKind, assemble, build_context_graph
from gamerec.data import Dataset
from gamerec.gradcheck import build_check_dataset, build_check_instance
from gamerec.model import (
    ForwardConfig,
    FusionWeights,
    ModelState,
    PercentileIndex,
    ServingForward,
    SocialGraph,
    UserItemIndex,
    final_user_embedding,
    game_context_embedding,
    percentile,
    score,
    score_all,
    social_attention,
    time_weights,
    user_context_embedding,
)

from oracles import straight_line_forward


def single_relation_graph(edges, game_ids):
    """Graph carrying only the co-genre relation (test config with one context)."""
    rels = {RelationKind.CO_GENRE: edges}
    graph = assemble({k: rels.get(k, {}) for k in RELATION_ORDER}, game_ids)
    only = {RelationKind.CO_GENRE: graph.relations[RelationKind.CO_GENRE]}
    return ContextGraph(game_ids=graph.game_ids, relations=only)


def blank_state(n_users, n_games, dim):
    n_rel = len(RELATION_ORDER)
    return ModelState(
        user_personal=np.zeros((n_users, dim)),
        game_personal=np.zeros((n_games, dim)),
        conv_weight=np.zeros((n_rel, dim, dim)),
        conv_bias=np.zeros((n_rel, dim)),
        ctx_fuse=np.zeros((dim, 2 * dim)),
        att_proj=np.zeros((dim, dim)),
        att_vec=np.zeros(2 * dim),
        soc_fuse=np.zeros((dim, 2 * dim)),
    )


class TestFusionWeights:
    def test_self_weight_complement(self):
        w = FusionWeights(context=0.5, social=0.1)
        assert w.self_weight == pytest.approx(0.4)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            FusionWeights(context=0.7, social=0.5)
        with pytest.raises(ValueError):
            FusionWeights(context=-0.1, social=0.0)


class TestGameContextEmbedding:
    def test_all_empty_neighborhoods_zero_bias_gives_zero(self):
        ids = np.array([1, 2], dtype=np.uint64)
        graph = assemble({k: {} for k in RELATION_ORDER}, ids)
        state = blank_state(1, 2, 3)
        state.game_personal[:] = np.random.default_rng(0).normal(size=(2, 3))
        out = game_context_embedding(state, graph, 1)
        assert np.array_equal(out, np.zeros(3))

    def test_single_relation_identity_returns_neighbor(self):
        ids = np.array([1, 2], dtype=np.uint64)
        graph = single_relation_graph({(1, 2): 1.0}, ids)
        state = blank_state(1, 2, 3)
        state.game_personal[1] = [1.0, 2.0, 3.0]
        state.conv_weight[0] = np.eye(3)
        out = game_context_embedding(state, graph, 1)
        assert np.allclose(out, [1.0, 2.0, 3.0])

    def test_mean_of_identical_neighbors(self):
        ids = np.array([1, 2, 3], dtype=np.uint64)
        graph = single_relation_graph({(1, 2): 1.0, (1, 3): 1.0}, ids)
        state = blank_state(1, 3, 2)
        state.game_personal[1] = [4.0, -1.0]
        state.game_personal[2] = [4.0, -1.0]
        state.conv_weight[0] = np.eye(2)
        out = game_context_embedding(state, graph, 1)
        assert np.allclose(out, [4.0, -1.0])

    def test_bias_included_for_empty_neighborhood(self):
        ids = np.array([1, 2], dtype=np.uint64)
        graph = assemble({k: {} for k in RELATION_ORDER}, ids)
        state = blank_state(1, 2, 2)
        state.conv_bias[:, 0] = 1.0  # every relation contributes bias
        out = game_context_embedding(state, graph, 1)
        assert np.allclose(out, [1.0, 0.0])


def percentile_index_from(rows):
    d = Dataset.from_rows(rows, [], [(10, {"x"}, "d", "p"), (11, {"x"}, "d", "p")])
    return PercentileIndex.build(d)


class TestPercentile:
    def test_maximum_time_is_one(self):
        idx = percentile_index_from([(u, 10, float(t)) for u, t in ((1, 10), (2, 20), (3, 30))])
        assert percentile(idx, 10, 30.0) == 1.0

    def test_hand_counts(self):
        idx = percentile_index_from([(u, 10, float(t)) for u, t in ((1, 10), (2, 20), (3, 30), (4, 40))])
        assert percentile(idx, 10, 30.0) == 0.75
        assert percentile(idx, 10, 35.0) == 0.75  # step function between records

    def test_zero_records_error(self):
        idx = percentile_index_from([(1, 10, 5.0)])
        with pytest.raises(ValueError):
            percentile(idx, 11, 5.0)

    @given(
        times=st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=30),
        probes=st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=2, max_size=10),
    )
    def test_monotone_and_unit_range(self, times, probes):
        idx = percentile_index_from([(u + 1, 10, t) for u, t in enumerate(times)])
        values = [percentile(idx, 10, t) for t in sorted(probes)]
        assert all(a <= b for a, b in zip(values, values[1:]))
        for t in times:
            p = percentile(idx, 10, t)
            assert 0.0 < p <= 1.0


class TestTimeWeights:
    def test_single_engagement(self):
        idx = percentile_index_from([(1, 10, 42.0)])
        assert np.array_equal(time_weights([(10, 42.0)], idx), [1.0])

    def test_hand_percentiles_already_normalized(self):
        idx = percentile_index_from(
            [(1, 10, 10.0), (2, 10, 20.0), (3, 10, 30.0), (4, 10, 40.0), (1, 11, 5.0)]
        )
        w = time_weights([(10, 30.0), (10, 10.0)], idx)
        assert np.allclose(w, [0.75, 0.25])

    def test_equal_percentiles_uniform(self):
        idx = percentile_index_from([(1, 10, 10.0), (2, 11, 10.0)])
        w = time_weights([(10, 10.0), (11, 10.0)], idx)
        assert np.allclose(w, [0.5, 0.5])

    def test_empty_rejected(self):
        idx = percentile_index_from([(1, 10, 5.0)])
        with pytest.raises(ValueError):
            time_weights([], idx)


def tiny_instance():
    return build_check_instance()


class TestUserContextEmbedding:
    def test_identity_blocks_sum(self):
        inst = tiny_instance()
        d = inst.state.dim
        inst.state.ctx_fuse[:] = np.hstack((np.eye(d), np.eye(d)))
        u = 0
        from gamerec.model import user_context_aggregate

        agg = user_context_aggregate(inst.state, inst.graph, inst.index, u)
        out = user_context_embedding(inst.state, inst.graph, inst.index, u)
        assert np.allclose(out, inst.state.user_personal[u] + agg, atol=1e-12)

    def test_zero_aggregate_identity_gives_personal(self):
        inst = tiny_instance()
        d = inst.state.dim
        inst.state.ctx_fuse[:] = np.hstack((np.eye(d), np.eye(d)))
        inst.state.game_personal[:] = 0.0
        inst.state.conv_weight[:] = 0.0
        inst.state.conv_bias[:] = 0.0
        out = user_context_embedding(inst.state, inst.graph, inst.index, 2)
        assert np.allclose(out, inst.state.user_personal[2], atol=1e-12)

    def test_single_engagement_aggregate_is_game_embedding(self):
        # user 4 (id 5) has 3 games; craft an index slice via a fresh dataset
        d = Dataset.from_rows(
            [(1, 10, 30.0)], [], [(10, {"x"}, "d", "p"), (11, {"x"}, "d", "p")]
        )
        index = UserItemIndex.build(d)
        graph = assemble({k: {} for k in RELATION_ORDER}, d.catalog_games)
        state = blank_state(1, 2, 2)
        state.conv_bias[:, 0] = 2.0
        from gamerec.model import user_context_aggregate

        agg = user_context_aggregate(state, graph, index, 0)
        expected = game_context_embedding(state, graph, 10)
        assert np.allclose(agg, expected)


class TestSocialAttention:
    def test_uniform_when_logits_equal(self):
        inst = tiny_instance()
        ctx = np.zeros((inst.index.n_users, inst.state.dim))
        alpha = social_attention(inst.state, inst.social, ctx, 0)
        friends = inst.social.friends(0)
        assert np.allclose(alpha, np.full(friends.size, 1.0 / friends.size))

    def test_singleton_softmax(self):
        inst = tiny_instance()
        ctx = np.random.default_rng(0).normal(size=(inst.index.n_users, inst.state.dim))
        # user index 2 (id 3) has exactly one friend (id 2)
        alpha = social_attention(inst.state, inst.social, ctx, 2)
        assert np.allclose(alpha, [1.0])

    def test_hand_softmax_of_ln2(self):
        # logits [ln 2, 0] -> weights [2/3, 1/3]
        inst = tiny_instance()
        d = inst.state.dim
        state = inst.state
        state.att_proj[:] = np.eye(d)
        state.att_vec[:] = 0.0
        state.att_vec[d] = 1.0  # logit = first component of friend context
        ctx = np.zeros((inst.index.n_users, d))
        friends = inst.social.friends(0)
        assert friends.size == 2
        ctx[friends[0], 0] = math.log(2.0)
        ctx[friends[1], 0] = 0.0
        alpha = social_attention(state, inst.social, ctx, 0)
        assert np.allclose(alpha, [2 / 3, 1 / 3])

    def test_friendless_rejected(self):
        inst = tiny_instance()
        ctx = np.zeros((inst.index.n_users, inst.state.dim))
        with pytest.raises(ValueError):
            social_attention(inst.state, inst.social, ctx, 4)  # user id 5


class TestSocialEmbedding:
    def test_single_friend_aggregate(self):
        from gamerec.model import user_social_embedding

        inst = tiny_instance()
        d = inst.state.dim
        inst.state.soc_fuse[:] = np.hstack((np.zeros((d, d)), np.eye(d)))
        friends = inst.social.friends(2)
        out = user_social_embedding(inst.state, np.array([1.0]), friends, 2)
        assert np.allclose(out, inst.state.user_personal[friends[0]])

    def test_friendless_identity_gives_personal(self):
        from gamerec.model import user_social_embedding

        inst = tiny_instance()
        d = inst.state.dim
        inst.state.soc_fuse[:] = np.hstack((np.eye(d), np.eye(d)))
        out = user_social_embedding(inst.state, None, np.empty(0, dtype=np.int64), 4)
        assert np.allclose(out, inst.state.user_personal[4])

    def test_equal_friends_convexity(self):
        from gamerec.model import user_social_embedding

        inst = tiny_instance()
        d = inst.state.dim
        v = np.arange(d, dtype=float)
        friends = inst.social.friends(0)
        inst.state.user_personal[friends] = v
        inst.state.soc_fuse[:] = np.hstack((np.zeros((d, d)), np.eye(d)))
        out = user_social_embedding(inst.state, np.array([0.5, 0.5]), friends, 0)
        assert np.allclose(out, v)


class TestFinalEmbeddingAndScore:
    def test_pure_personal(self):
        inst = tiny_instance()
        w = FusionWeights(context=0.0, social=0.0)
        e = final_user_embedding(inst.state, w, 1)
        assert np.allclose(e, inst.state.user_personal[1])

    def test_hand_arithmetic_d1(self):
        state = blank_state(1, 1, 1)
        state.user_personal[0] = 3.0
        w = FusionWeights(context=0.5, social=0.1)
        e = final_user_embedding(state, w, 0, context_vec=np.array([2.0]), social_vec=np.array([-1.0]))
        assert e[0] == pytest.approx(0.5 * 2.0 + 0.1 * (-1.0) + 0.4 * 3.0)  # = 2.1

    def test_score_orthogonal_zero(self):
        state = blank_state(1, 2, 2)
        state.game_personal[0] = [1.0, 0.0]
        assert score(state, np.array([0.0, 1.0]), 0) == 0.0

    def test_score_unit_identity(self):
        state = blank_state(1, 1, 2)
        state.game_personal[0] = [1.0, 0.0]
        assert score(state, np.array([1.0, 0.0]), 0) == 1.0

    def test_score_hand_dot(self):
        state = blank_state(1, 1, 2)
        state.game_personal[0] = [3.0, -1.0]
        assert score(state, np.array([1.0, 2.0]), 0) == 1.0


class TestScoreAll:
    def test_matches_per_item_score_exactly(self):
        inst = tiny_instance()
        serve = ServingForward.compute(inst.state, inst.graph, inst.social, inst.index, inst.config)
        for u in range(inst.index.n_users):
            s_all = serve.scores_for(u)
            e_u = serve.user_embedding(u)
            per_item = np.array([score(inst.state, e_u, g) for g in range(inst.index.n_games)])
            assert np.max(np.abs(s_all - per_item)) == 0.0

    def test_straight_line_reimplementation_agrees(self):
        inst = tiny_instance()
        for u in range(inst.index.n_users):
            fast = score_all(inst.state, inst.graph, inst.social, inst.index, inst.config, int(inst.index.user_ids[u]))
            slow = straight_line_forward(
                inst.state, inst.graph, inst.social, inst.index, inst.config.fusion, inst.config.leaky_slope, u
            )
            assert np.max(np.abs(fast - slow)) < 1e-12

    def test_catalog_permutation_equivariance(self):
        base = build_check_dataset()
        inst = tiny_instance()
        scores = score_all(inst.state, inst.graph, inst.social, inst.index, inst.config, 1)
        # permuting catalog order (ids stay attached to the same games) must
        # permute the output identically; ids are sorted internally, so remap
        # game ids with an order-reversing transformation and compare
        remap = {int(g): int(2000 - g) for g in base.catalog_games}
        permuted = Dataset.from_rows(
            [(int(u), remap[int(g)], float(m)) for u, g, m in zip(base.eng_user, base.eng_game, base.eng_minutes)],
            [(int(a), int(b)) for a, b in base.social],
            [
                (remap[int(g)], set(base.catalog_genres[k]), base.catalog_developers[k], base.catalog_publishers[k])
                for k, g in enumerate(base.catalog_games)
            ],
        )
        graph2, _, _ = build_context_graph(permuted, tau_p=0.1, tau_t=0.3)
        index2 = UserItemIndex.build(permuted)
        social2 = SocialGraph.build(permuted, index2.user_ids)
        # same parameters, rows permuted to match the new game order
        perm = np.array(
            [inst.index.game_ids.tolist().index(2000 - int(g)) for g in index2.game_ids]
        )
        state2 = ModelState(
            user_personal=inst.state.user_personal.copy(),
            game_personal=inst.state.game_personal[perm].copy(),
            conv_weight=inst.state.conv_weight.copy(),
            conv_bias=inst.state.conv_bias.copy(),
            ctx_fuse=inst.state.ctx_fuse.copy(),
            att_proj=inst.state.att_proj.copy(),
            att_vec=inst.state.att_vec.copy(),
            soc_fuse=inst.state.soc_fuse.copy(),
        )
        scores2 = score_all(state2, graph2, social2, index2, inst.config, 1)
        for k, g in enumerate(index2.game_ids):
            orig_pos = inst.index.game_ids.tolist().index(2000 - int(g))
            assert scores2[k] == pytest.approx(scores[orig_pos], abs=1e-9)

    def test_zero_weights_invariant_to_side_information(self):
        inst = tiny_instance()
        config = ForwardConfig(fusion=FusionWeights(context=0.0, social=0.0))
        base = score_all(inst.state, inst.graph, inst.social, inst.index, config, 2)
        # different context graph: drop all behavior edges
        graph2 = assemble(
            {
                k: ({} if k in (RelationKind.CO_PURCHASE, RelationKind.CO_DWELLING) else {(101, 105): 1.0})
                for k in RELATION_ORDER
            },
            inst.index.game_ids,
        )
        # different social graph: no edges
        empty_social = SocialGraph.build(
            Dataset.from_rows([(1, 101, 5.0)], [], [(101, {"a"}, "d", "p")]),
            inst.index.user_ids,
        )
        alt = score_all(inst.state, graph2, empty_social, inst.index, config, 2)
        assert np.array_equal(base, alt)

    def test_duplicated_identical_friends_preserve_aggregate(self):
        # all friends share embeddings; adding one more identical friend must
        # leave the aggregate (a convex combination of equals) unchanged
        def build(with_extra):
            social = [(1, 2), (1, 3)] + ([(1, 4)] if with_extra else [])
            rows = [(u, 10, 30.0) for u in (1, 2, 3, 4)]
            d = Dataset.from_rows(rows, social, [(10, {"x"}, "d", "p")])
            index = UserItemIndex.build(d)
            graph = assemble({k: {} for k in RELATION_ORDER}, d.catalog_games)
            social_g = SocialGraph.build(d, index.user_ids)
            state = ModelState.init(index.n_users, index.n_games, 4, seed=3)
            shared = np.array([0.3, -0.2, 0.9, 0.1])
            state.user_personal[1:] = shared  # friends 2, 3, 4 identical
            return state, graph, social_g, index

        config = ForwardConfig(fusion=FusionWeights(context=0.2, social=0.5))
        state_a, graph_a, social_a, index_a = build(False)
        state_b, graph_b, social_b, index_b = build(True)
        serve_a = ServingForward.compute(state_a, graph_a, social_a, index_a, config)
        serve_b = ServingForward.compute(state_b, graph_b, social_b, index_b, config)
        friends_a = social_a.friends(0)
        friends_b = social_b.friends(0)
        agg_a = serve_a.attention(0, friends_a) @ state_a.user_personal[friends_a]
        agg_b = serve_b.attention(0, friends_b) @ state_b.user_personal[friends_b]
        assert np.allclose(agg_a, agg_b, atol=1e-12)

    def test_outputs_finite(self):
        inst = tiny_instance()
        serve = ServingForward.compute(inst.state, inst.graph, inst.social, inst.index, inst.config)
        for u in range(inst.index.n_users):
            assert np.all(np.isfinite(serve.scores_for(u)))
