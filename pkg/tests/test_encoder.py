import numpy as np
import pytest

from pairsupcon import diffcore as dc
from pairsupcon import encoder as enc
from pairsupcon.encoder import (ModelForward, Vocabulary, encode_corpus,
                                init_params, tokenize)


@pytest.fixture
def vocab():
    return Vocabulary.from_tokens(["a", "dog", "runs"])


class TestTokenize:
    def test_known_tokens(self, vocab):
        assert tokenize("A dog runs.", vocab) == [vocab.token_to_id["a"],
                                                  vocab.token_to_id["dog"],
                                                  vocab.token_to_id["runs"]]

    def test_empty_text_maps_to_unk(self, vocab):
        assert tokenize("", vocab) == [enc.UNK_ID]
        assert tokenize("  ...  ", vocab) == [enc.UNK_ID]

    def test_unknown_token_maps_to_unk(self, vocab):
        assert tokenize("Zyzzyva runs", vocab) == [enc.UNK_ID, vocab.token_to_id["runs"]]

    def test_punctuation_is_dropped(self, vocab):
        assert tokenize("dog, dog! (dog)", vocab) == [vocab.token_to_id["dog"]] * 3


class TestVocabulary:
    def test_build_sorts_and_reserves_specials(self):
        v = Vocabulary.build(["b a", "a c"])
        assert v.id_to_token[:2] == ["<pad>", "<unk>"]
        assert v.id_to_token[2:] == ["a", "b", "c"]
        assert v.size == 5

    def test_min_count_filters(self):
        v = Vocabulary.build(["a a b"], min_count=2)
        assert v.id_to_token[2:] == ["a"]

    def test_file_round_trip(self, tmp_path):
        v = Vocabulary.build(["walk the dog"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        # one token per line, line number = id - 2
        lines = path.read_text().splitlines()
        assert lines == v.id_to_token[2:]
        loaded = Vocabulary.load(path)
        assert loaded.id_to_token == v.id_to_token
        assert loaded.token_to_id == v.token_to_id

    def test_duplicate_token_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary.from_tokens(["x", "x"])


class TestEncode:
    def test_single_token_sentence_equals_embedding_row(self):
        params = init_params(5, 4, seed=0)
        fw = ModelForward(params)
        u = fw.encode([[3]])
        assert np.allclose(u.data, params.embedding[3], atol=1e-15)

    def test_two_tokens_average(self):
        params = init_params(5, 4, seed=0)
        fw = ModelForward(params)
        u = fw.encode([[2, 4]])
        assert np.allclose(u.data, (params.embedding[2] + params.embedding[4]) / 2)

    def test_random_batch_matches_scalar_averaging(self, rng):
        params = init_params(9, 6, seed=1)
        fw = ModelForward(params)
        batches = [[2, 3, 5], [7], [8, 8, 2, 4]]
        u = fw.encode(batches).data
        for s, ids in enumerate(batches):
            expected = np.zeros(6)
            for i in ids:
                expected += params.embedding[i]
            assert np.max(np.abs(u[s] - expected / len(ids))) < 1e-12

    def test_pad_excluded_from_mean(self):
        params = init_params(5, 4, seed=0)
        fw = ModelForward(params)
        with_pad = fw.encode([[enc.PAD_ID, 3, enc.PAD_ID]])
        assert np.allclose(with_pad.data, params.embedding[3])

    def test_out_of_range_token_rejected(self):
        params = init_params(5, 4, seed=0)
        with pytest.raises(ValueError, match="out of range"):
            ModelForward(params).encode([[7]])

    def test_token_order_permutation_invariance(self, rng):
        params = init_params(12, 8, seed=2)
        ids = [2, 5, 7, 9, 11, 3]
        fw = ModelForward(params)
        u1 = fw.encode([ids]).data
        u2 = ModelForward(params).encode([list(reversed(ids))]).data
        assert np.max(np.abs(u1 - u2)) <= 1e-12


class TestProject:
    def test_rows_unit_norm(self, rng):
        params = init_params(6, 5, seed=3)
        fw = ModelForward(params)
        z = fw.project(fw.encode([[2, 3], [4], [5, 2, 3]]))
        norms = np.linalg.norm(z.data, axis=1)
        assert np.max(np.abs(norms - 1.0)) < 1e-9

    def test_matches_scalar_mlp_oracle(self, rng):
        d = 4
        params = init_params(6, d, seed=4, proj_dim=3)
        u = rng.normal(size=(2, d))
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        z = fw.project(g.leaf(u)).data
        for r in range(2):
            hidden = [max(0.0, sum(u[r][i] * params.proj_w1[i][j] for i in range(d))
                          + params.proj_b1[0][j]) for j in range(d)]
            out = [sum(hidden[i] * params.proj_w2[i][j] for i in range(d))
                   + params.proj_b2[0][j] for j in range(3)]
            norm = sum(v * v for v in out) ** 0.5
            expected = [v / norm for v in out]
            assert np.max(np.abs(z[r] - expected)) < 1e-12

    def test_identity_activation(self, rng):
        params = init_params(6, 4, seed=5, proj_dim=3, activation="identity")
        u = rng.normal(size=(1, 4))
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        z = fw.project(g.leaf(u)).data
        hidden = u @ params.proj_w1 + params.proj_b1
        raw = hidden @ params.proj_w2 + params.proj_b2
        assert np.allclose(z, raw / np.linalg.norm(raw))

    def test_width_mismatch_rejected(self, rng):
        params = init_params(6, 4, seed=0)
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        with pytest.raises(ValueError, match="width"):
            fw.project(g.leaf(rng.normal(size=(2, 5))))


class TestClassifyPair:
    def test_equal_inputs_zero_difference_segment(self, rng):
        params = init_params(6, 3, seed=6)
        u = rng.normal(size=(1, 3))
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        v = g.leaf(u)
        feats = dc.concat_cols([v, v, (v - v).abs()])
        assert np.array_equal(feats.data[0, 6:], np.zeros(3))

    def test_zero_weights_give_bias(self):
        params = init_params(6, 3, seed=7)
        params.cls_w[:] = 0.0
        params.cls_b[:] = [[0.4, -0.2]]
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        logits = fw.classify_pair(g.leaf([[1.0, 2.0, 3.0]]), g.leaf([[0.0, 1.0, 5.0]]))
        assert np.allclose(logits.data, [[0.4, -0.2]])

    def test_matches_scalar_oracle(self, rng):
        import oracles
        params = init_params(6, 3, seed=8)
        a = rng.normal(size=(1, 3))
        b = rng.normal(size=(1, 3))
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        got = fw.classify_pair(g.leaf(a), g.leaf(b)).data[0]
        expected = oracles.classifier_logits(a[0], b[0], params.cls_w, params.cls_b)
        assert np.max(np.abs(got - expected)) < 1e-12

    def test_length_mismatch_rejected(self, rng):
        params = init_params(6, 3, seed=0)
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        with pytest.raises(ValueError, match="mismatch"):
            fw.classify_pair(g.leaf(rng.normal(size=(1, 3))),
                             g.leaf(rng.normal(size=(1, 4))))

    def test_batched_classify_matches_single(self, rng):
        params = init_params(6, 3, seed=9)
        u = rng.normal(size=(4, 3))
        g = dc.Graph()
        fw = ModelForward(params, graph=g)
        batched = fw.classify_pairs(g.leaf(u)).data
        for j in range(2):
            single = fw.classify_pair(g.leaf(u[2 * j:2 * j + 1]),
                                      g.leaf(u[2 * j + 1:2 * j + 2])).data
            assert np.max(np.abs(batched[j] - single[0])) < 1e-12


class TestGradients:
    def test_encode_project_classify_pass_grad_check(self, rng):
        params = init_params(6, 4, seed=10, proj_dim=5)
        tokens = [[2, 3], [4, 5, 2], [3], [5, 4]]

        def loss_via(name):
            def fn(x):
                fw = ModelForward(params.replace(name, x.data), graph=x.graph,
                                  leaf_overrides={name: x})
                u = fw.encode(tokens)
                z = fw.project(u)
                logits = fw.classify_pairs(u)
                return (z * z.graph.leaf(rng_fixed)).sum() + dc.softmax_cross_entropy(logits, [0, 1])
            return fn

        rng_fixed = np.random.default_rng(0).normal(size=(4, 5))
        for name in ("embedding", "proj_w1", "proj_b1", "proj_w2", "proj_b2",
                     "cls_w", "cls_b"):
            report = dc.grad_check(loss_via(name), dict(params.named())[name])
            assert report.max_rel_err <= 1e-4, name


class TestModelParams:
    def test_init_is_seeded_and_bounded(self):
        a = init_params(7, 4, seed=11)
        b = init_params(7, 4, seed=11)
        for (_, x), (_, y) in zip(a.named(), b.named()):
            assert np.array_equal(x, y)
        assert np.max(np.abs(a.proj_w1)) <= 1.0 / np.sqrt(4)
        assert np.max(np.abs(a.cls_w)) <= 1.0 / np.sqrt(12)

    def test_default_projection_width(self):
        assert init_params(7, 4, seed=0).proj_dim == 128

    def test_validate_catches_bad_shapes(self):
        params = init_params(7, 4, seed=0)
        params.proj_w1 = np.zeros((4, 5))
        with pytest.raises(ValueError, match="proj_w1"):
            params.validate()

    def test_validate_catches_non_finite(self):
        params = init_params(7, 4, seed=0)
        params.embedding[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            params.validate()


def test_encode_corpus_matches_forward(rng):
    params = init_params(20, 6, seed=12)
    vocab = Vocabulary.build(["red green blue", "green blue yellow"])
    texts = ["red blue", "yellow unknownword", ""]
    fast = encode_corpus(texts, vocab, params)
    fw = ModelForward(params)
    slow = fw.encode([tokenize(t, vocab) for t in texts]).data
    assert np.max(np.abs(fast - slow)) < 1e-15
