import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kprn import diffmath as dm
from kprn import grounder as gr
from kprn.errors import ContractViolation
from kprn.grounder import AttentionScores, GroundingConfig
from kprn.scene import BBox, ProposalRecord, SceneRecord
from kprn.wordvec import KnowledgePriors

import oracles
from helpers import check_store_gradients, fixture_table, query, random_scene, tiny_model


def scores(values):
    v = dm.constant(np.asarray(values, dtype=float))
    return AttentionScores(v, v)


def numpy_params(model):
    return {n: t.data for n, t in model.params.items()}


def table_dict(table):
    return {w: table.lookup(w) for w in table.words}


class TestAttention:
    def test_zero_mlp_is_uniform(self):
        model = tiny_model()
        model.params.zero_()
        s = gr.subject_scores(np.ones((4, 7)), np.ones(16), model.params)
        np.testing.assert_allclose(s.normalized.data, 0.25, rtol=0, atol=1e-15)
        o = gr.object_scores(np.ones((3, 4)), np.ones(16), model.params)
        np.testing.assert_allclose(o.normalized.data, 1 / 3, rtol=0, atol=1e-15)

    def test_single_proposal(self):
        s = gr.subject_scores(np.ones((1, 7)), np.ones(16), tiny_model().params)
        np.testing.assert_array_equal(s.normalized.data, [1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            gr.subject_scores(np.ones((2, 5)), np.ones(16), tiny_model().params)

    @pytest.mark.parametrize("seed", range(5))
    def test_subject_and_object_match_oracle(self, seed):
        rng = np.random.default_rng(seed)
        model = tiny_model(seed=seed)
        P = numpy_params(model)
        cnn, c4 = rng.normal(size=(3, 7)), rng.normal(size=(3, 4))
        emb_s, emb_o = rng.normal(size=16), rng.normal(size=16)
        s = gr.subject_scores(cnn, emb_s, model.params)
        o = gr.object_scores(c4, emb_o, model.params)
        raw_s = [oracles.mlp(list(cnn[i]) + list(emb_s), P["att_sub.W1"], P["att_sub.b1"], P["att_sub.W2"],
                             P["att_sub.b2"]) for i in range(3)]
        raw_o = [oracles.mlp(list(c4[i]) + list(emb_o), P["att_obj.W1"], P["att_obj.b1"], P["att_obj.W2"],
                             P["att_obj.b2"]) for i in range(3)]
        np.testing.assert_allclose(s.raw.data, raw_s, rtol=0, atol=1e-9)
        np.testing.assert_allclose(s.normalized.data, oracles.softmax(raw_s), rtol=0, atol=1e-9)
        np.testing.assert_allclose(o.normalized.data, oracles.softmax(raw_o), rtol=0, atol=1e-9)
        assert np.argmax(s.raw.data) == np.argmax(s.normalized.data)

    def test_pair_scores_match_oracle(self):
        rng = np.random.default_rng(3)
        model = tiny_model(seed=3)
        P = numpy_params(model)
        h = rng.normal(size=(1, 6))
        vs, vo = rng.normal(size=(3, 37)), rng.normal(size=(3, 9))
        got = gr.pair_scores(dm.constant(h), vs, vo, model.params).data
        want = [oracles.mlp(list(h[0]) + list(vs[k]) + list(vo[k]), P["att_pair.W1"], P["att_pair.b1"],
                            P["att_pair.W2"], P["att_pair.b2"]) for k in range(3)]
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)

    def test_zero_pair_mlp(self):
        model = tiny_model()
        model.params.zero_()
        got = gr.pair_scores(dm.constant(np.ones((1, 6))), np.ones((3, 37)), np.ones((3, 9)), model.params)
        np.testing.assert_array_equal(got.data, 0.0)


class TestKnowledgeLosses:
    def test_examples(self):
        pri = KnowledgePriors(np.array([0.2, 0.8]), np.array([0.0, 1.0]))
        ls, lo = gr.knowledge_losses(scores([0.2, 0.8]), scores([0.0, 1.0]), pri)
        assert ls.item() == 0.0 and lo.item() == 0.0
        ls, _ = gr.knowledge_losses(scores([1.0, 0.0]), None, KnowledgePriors(np.array([0.0, 1.0]), np.zeros(2)))
        assert ls.item() == 1.0

    def test_random_against_hand_mean(self):
        rng = np.random.default_rng(0)
        a, b, c, d = rng.uniform(-1, 1, size=(4, 5))
        ls, lo = gr.knowledge_losses(scores(a), scores(c), KnowledgePriors(b, d))
        assert ls.item() == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)) / 5, abs=1e-15)
        assert lo.item() == pytest.approx(sum((x - y) ** 2 for x, y in zip(c, d)) / 5, abs=1e-15)

    def test_no_object_gives_zero(self):
        _, lo = gr.knowledge_losses(scores([0.5, 0.5]), None, KnowledgePriors(np.zeros(2), np.zeros(2)))
        assert lo.item() == 0.0 and not lo.requires_grad

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            gr.knowledge_losses(scores([0.5, 0.5]), None, KnowledgePriors(np.zeros(3), np.zeros(3)))


class TestSelectAndFilter:
    def test_select_object(self):
        assert gr.select_object(scores([0.1, 0.7, 0.2])) == 1
        assert gr.select_object(scores([0.5, 0.5])) == 0
        assert gr.select_object(None) == gr.NULL_OBJECT

    def test_hard_zero_threshold_keeps_all(self):
        keep, w = gr.apply_filter("hard", 0.0, scores([0.2, 0.3, 0.5]))
        assert keep == [0, 1, 2]
        np.testing.assert_array_equal(w, 1.0)

    def test_hard_fallback(self):
        keep, _ = gr.apply_filter("hard", 1.1, scores([0.2, 0.5, 0.3]))
        assert keep == [1]

    def test_hard_threshold_selects(self):
        keep, _ = gr.apply_filter("hard", 0.25, scores([0.2, 0.5, 0.3]))
        assert keep == [1, 2]

    def test_soft_weights_are_normalized_scores(self):
        s = gr.subject_scores(np.random.default_rng(1).normal(size=(4, 7)), np.ones(16), tiny_model().params)
        keep, w = gr.apply_filter("soft", 0.5, s)
        assert keep == [0, 1, 2, 3]
        np.testing.assert_array_equal(w, s.normalized.data)


class TestDistanceWeight:
    def test_examples(self):
        assert gr.distance_weight(0) == 1.0
        assert gr.distance_weight(100) == 0.5
        assert gr.distance_weight(300) == 0.25

    def test_negative(self):
        with pytest.raises(ContractViolation):
            gr.distance_weight(-1.0)

    @given(st.floats(0, 1e6), st.floats(1e-3, 1e6))
    def test_strictly_decreasing(self, d, step):
        assert 0 < gr.distance_weight(d + step) < gr.distance_weight(d) <= 1


class TestFinalScores:
    def test_single_pair(self):
        out = gr.final_scores("hard", [0.3], dm.constant([2.0]))
        np.testing.assert_array_equal(out.data, [1.0])

    def test_equal_products_uniform(self):
        out = gr.final_scores("soft", [1.0, 0.5], dm.constant([1.0, 2.0]), dm.constant([0.5, 0.5]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_soft_requires_weights(self):
        with pytest.raises(ContractViolation):
            gr.final_scores("soft", [1.0], dm.constant([1.0]))

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 8), elements=st.floats(-5, 5)),
        st.floats(0.01, 100),
        st.floats(-50, 50),
    )
    def test_sums_to_one_and_argmax_invariant(self, raw, k, shift):
        omega = np.linspace(1.0, 0.3, raw.size)
        base = gr.final_scores("hard", omega, dm.constant(raw)).data
        assert abs(base.sum() - 1) < 1e-9 and (base > 0).all()
        prods = raw * omega
        # Products closer than float resolution may tie after exponentiation.
        top = np.flatnonzero(prods >= prods.max() - 1e-9)
        scaled = gr.final_scores("hard", omega, dm.constant(raw * k)).data
        assert np.argmax(scaled) in top
        shifted = dm.softmax(dm.constant(prods + shift)).data
        assert np.argmax(shifted) in top


class TestPairActivation:
    def test_zero_scores(self):
        zero = dm.constant(np.zeros(3))
        np.testing.assert_allclose(gr.pair_strength(zero, "softplus").data, [math.log(2)] * 3, rtol=1e-15)
        np.testing.assert_array_equal(gr.pair_strength(zero, "linear").data, 0.0)

    def test_unknown_activation(self):
        with pytest.raises(ContractViolation):
            GroundingConfig(pair_activation="tanh")
        with pytest.raises(ContractViolation):
            gr.pair_strength(dm.constant([1.0]), "tanh")

    @settings(max_examples=100, deadline=None)
    # Integer distances and scores above -20 keep the products distinguishable
    # after exponentiation.
    @given(st.floats(-20, 50), st.lists(st.integers(0, 500), min_size=4, max_size=4, unique=True))
    def test_closer_subject_wins_for_either_sign(self, score, dist):
        """With equal pair scores, the distance weight decides. Softplus keeps
        the nearest subject on top whatever the sign; the literal product
        flips to the farthest one when the score is negative."""
        dist = np.array(dist, dtype=float)
        omega = gr.distance_weight(dist)
        raw = dm.constant(np.full(4, score))
        soft = gr.final_scores("hard", omega, gr.pair_strength(raw, "softplus")).data
        assert np.argmax(soft) == np.argmin(dist)
        if score < -1e-3:
            literal = gr.final_scores("hard", omega, gr.pair_strength(raw, "linear")).data
            assert np.argmax(literal) == np.argmax(dist)


def hand_scene(target_first=True):
    a = ProposalRecord(0, BBox(10, 10, 40, 40), "car", np.array([1.0, 0.0]), np.zeros(2))
    b = ProposalRecord(1, BBox(100, 10, 130, 40), "dog", np.array([0.0, 1.0]), np.zeros(2))
    if not target_first:
        a.feat_c3, b.feat_c3 = b.feat_c3, a.feat_c3
    return SceneRecord("hand", 200, 200, [a, b])


class TestGround:
    def test_single_proposal(self):
        model = tiny_model()
        scene = random_scene(np.random.default_rng(0), 1)
        for text in ("red car", "red car left of dog"):
            res = gr.ground(model, scene, query(text), GroundingConfig())
            assert res.subject_index == 0
            np.testing.assert_array_equal(res.scores, [1.0])

    @pytest.mark.parametrize("target_first", [True, False])
    def test_hand_built_soft(self, target_first):
        # Subject attention fires on the first c3 unit, which belongs to the
        # proposal whose category matches the query; the pair scorer is a
        # constant, so only the subject score separates the two pairs.
        model = tiny_model(c3_dim=2, c4_dim=2)
        model.params.zero_()
        W1 = np.zeros(model.params["att_sub.W1"].shape)
        W1[0, 0] = 5.0
        model.params.assign("att_sub.W1", W1)
        W2 = np.zeros(model.params["att_sub.W2"].shape)
        W2[0, 0] = 1.0
        model.params.assign("att_sub.W2", W2)
        model.params.assign("att_pair.b2", [1.0])
        scene = hand_scene(target_first)
        q = model.prepare_query(query("red car"), gr.SceneFeatures(scene))
        np.testing.assert_allclose(q.priors.sim_subject, [1.0, oracles.cos(
            model.table.lookup("dog"), model.table.lookup("car"))])
        res = gr.ground(model, scene, query("red car"), GroundingConfig(mode="soft"))
        assert res.subject_index == (0 if target_first else 1)

    @pytest.mark.parametrize("mode", ["soft", "hard", "none"])
    def test_matches_brute_force(self, mode):
        table = fixture_table()
        rng = np.random.default_rng({"soft": 1, "hard": 2, "none": 3}[mode])
        texts = ["red car", "big person left of dog", "car left of red dog", "dog", "person left of car"]
        for trial in range(30):
            n = int(rng.integers(1, 6))
            model = tiny_model(seed=trial)
            scene = random_scene(rng, n)
            text = texts[trial % len(texts)]
            flags = dict(use_loc=bool(rng.random() < 0.8), use_obj=bool(rng.random() < 0.8),
                         use_dist=bool(rng.random() < 0.8))
            activation = ("softplus", "linear")[trial % 2]
            cfg = GroundingConfig(mode=mode, threshold=float(rng.uniform(0, 0.6)), pair_activation=activation,
                                  **flags)
            q = query(text)
            res = gr.ground(model, scene, q, cfg)
            want = oracles.ground(
                numpy_params(model), scene, q.tokens, model.vocab.index, q.parsed["category"],
                q.parsed["rel_obj"], table_dict(table), mode, cfg.threshold, **flags,
                pair_activation=activation,
            )
            assert res.subject_index == want[0]
            assert res.object_index == want[1]
            assert res.pair_subjects == want[2]
            np.testing.assert_allclose(res.scores, want[3], rtol=0, atol=1e-9)
            assert abs(res.scores.sum() - 1) < 1e-9
            if n > 1:
                assert res.subject_index != res.object_index

    def test_deterministic(self):
        model = tiny_model(seed=4)
        scene = random_scene(np.random.default_rng(4), 5)
        a = gr.ground(model, scene, query("red car left of dog"), GroundingConfig())
        b = gr.ground(model, scene, query("red car left of dog"), GroundingConfig())
        np.testing.assert_array_equal(a.scores, b.scores)


class TestFilterSemantics:
    def _pass(self, model, feats, q, cfg):
        h = model.encode(q.tokens).pooled
        return gr.forward_query(feats, q, h, model.params, cfg)

    @pytest.mark.parametrize("seed", range(6))
    def test_low_threshold_equals_unfiltered(self, seed):
        rng = np.random.default_rng(seed)
        model = tiny_model(seed=seed)
        feats = gr.SceneFeatures(random_scene(rng, 5))
        q = model.prepare_query(query("big person left of dog"), feats)
        s_min = self._pass(model, feats, q, GroundingConfig(mode="none")).subject.normalized.data.min()
        hard = self._pass(model, feats, q, GroundingConfig(mode="hard", threshold=s_min))
        zero = self._pass(model, feats, q, GroundingConfig(mode="hard", threshold=0.0))
        none = self._pass(model, feats, q, GroundingConfig(mode="none"))
        assert hard.pair_subjects == zero.pair_subjects == none.pair_subjects
        np.testing.assert_array_equal(hard.final.data, none.final.data)
        np.testing.assert_array_equal(np.argsort(-hard.final.data), np.argsort(-zero.final.data))

    @pytest.mark.parametrize("seed", range(6))
    def test_high_threshold_keeps_argmax(self, seed):
        rng = np.random.default_rng(seed)
        model = tiny_model(seed=seed)
        feats = gr.SceneFeatures(random_scene(rng, 5))
        q = model.prepare_query(query("red car"), feats)
        s = self._pass(model, feats, q, GroundingConfig(mode="none")).subject.normalized.data
        hard = self._pass(model, feats, q, GroundingConfig(mode="hard", threshold=s.max() + 1e-6))
        assert hard.pair_subjects == [int(np.argmax(s))]

    def test_soft_weights_enter_final_scores(self):
        rng = np.random.default_rng(9)
        model = tiny_model(seed=9)
        feats = gr.SceneFeatures(random_scene(rng, 4))
        q = model.prepare_query(query("red car"), feats)
        gp = self._pass(model, feats, q, GroundingConfig(mode="soft"))
        want = oracles.softmax(list(gp.pair.data * gp.subject.normalized.data))
        np.testing.assert_allclose(gp.final.data, want, rtol=0, atol=1e-12)


class TestGradients:
    def test_attention_paths(self):
        """Knowledge losses reach both attention MLPs; the final scores reach
        the pair MLP, the subject MLP (soft weights) and the null sentinel."""
        rng = np.random.default_rng(5)
        model = tiny_model(seed=5, scale=1.0)
        feats = gr.SceneFeatures(random_scene(rng, 4))
        proj = dm.constant(rng.normal(size=4))
        names = [n for n in model.params.names() if n.startswith(("att_", "null_object", "enc."))]

        for text, mode in (("red car left of dog", "soft"), ("big person", "soft"), ("car left of dog", "hard")):
            q = model.prepare_query(query(text), feats)

            def loss_fn():
                h = model.encode(q.tokens).pooled
                gp = gr.forward_query(feats, q, h, model.params, GroundingConfig(mode=mode, threshold=0.0))
                p = gp.final.shape[0]
                mix = dm.total(dm.mul(gp.final, dm.constant(proj.data[:p])))
                return dm.add(dm.add(gp.loss_sub, gp.loss_obj), mix)

            assert check_store_gradients(loss_fn, model.params, names=names) < 1e-4
