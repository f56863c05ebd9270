import json

import numpy as np
import pytest

from pairsupcon import data
from pairsupcon.data import (PairBatch, SentencePair, load_labeled, load_nli,
                             load_scored, make_batches, parse_nli_record,
                             synth_cross_fraction, synth_generate)


class TestParseNliRecord:
    def test_entailment_maps_to_plus_one(self):
        pair = parse_nli_record('{"premise":"p","hypothesis":"h","label":"entailment"}')
        assert pair == SentencePair("p", "h", 1)

    def test_contradiction_maps_to_minus_one(self):
        pair = parse_nli_record('{"premise":"p","hypothesis":"h","label":"contradiction"}')
        assert pair.label == -1

    def test_neutral_is_skipped_not_error(self):
        assert parse_nli_record('{"premise":"p","hypothesis":"h","label":"neutral"}') is None

    def test_labels_match_case_insensitively(self):
        assert parse_nli_record('{"premise":"p","hypothesis":"h","label":"ENTAILMENT"}').label == 1
        assert parse_nli_record('{"premise":"p","hypothesis":"h","label":"Neutral"}') is None

    def test_malformed_json_reports_line_number(self):
        with pytest.raises(ValueError, match="line 7"):
            parse_nli_record("{not json", lineno=7)

    def test_missing_field_reports_line_number(self):
        with pytest.raises(ValueError, match="line 3.*hypothesis"):
            parse_nli_record('{"premise":"p","label":"entailment"}', lineno=3)

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError, match="unknown label"):
            parse_nli_record('{"premise":"p","hypothesis":"h","label":"maybe"}')

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            parse_nli_record('{"premise":"  ","hypothesis":"h","label":"entailment"}')


def test_load_nli_counts_skipped(tmp_path):
    path = tmp_path / "pairs.jsonl"
    rows = [
        {"premise": "a", "hypothesis": "b", "label": "entailment"},
        {"premise": "c", "hypothesis": "d", "label": "neutral"},
        {"premise": "e", "hypothesis": "f", "label": "contradiction"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    pairs, skipped = load_nli(path)
    assert [p.label for p in pairs] == [1, -1]
    assert skipped == 1


def make_pairs(labels):
    return [SentencePair(f"premise {i}", f"hypothesis {i}", y)
            for i, y in enumerate(labels)]


class TestMakeBatches:
    def test_deterministic_given_seed(self):
        pairs = make_pairs([1, -1, 1, -1])
        a = make_batches(pairs, 2, seed=7)
        b = make_batches(pairs, 2, seed=7)
        assert len(a) == 2
        for x, y in zip(a, b):
            assert x.sentences == y.sentences
            assert np.array_equal(x.labels, y.labels)

    def test_different_seed_shuffles_differently(self):
        pairs = make_pairs([1, -1, 1, -1, 1, -1, 1, -1])
        a = make_batches(pairs, 4, seed=0)
        b = make_batches(pairs, 4, seed=1)
        assert any(x.sentences != y.sentences for x, y in zip(a, b))

    def test_epoch_partitions_dataset(self):
        pairs = make_pairs([1] * 9)
        batches = make_batches(pairs, 3, seed=3)
        seen = [s for b in batches for s in b.sentences[::2]]
        assert sorted(seen) == sorted(p.premise for p in pairs)

    def test_short_final_batch_kept_if_positive(self):
        pairs = make_pairs([1, 1, 1, 1, 1])
        batches = make_batches(pairs, 2, seed=0)
        assert [b.m for b in batches] == [2, 2, 1]

    def test_short_final_batch_dropped_if_negative(self):
        # find a seed that leaves the lone contradiction pair last
        pairs = make_pairs([1, 1, 1, 1, -1])
        for seed in range(50):
            order = np.random.default_rng(seed).permutation(5)
            if pairs[order[-1]].label == -1:
                batches = make_batches(pairs, 2, seed=seed)
                assert [b.m for b in batches] == [2, 2]
                return
        pytest.fail("no seed placed the negative pair last")

    def test_interleaved_layout(self):
        pairs = make_pairs([1, -1])
        batch = make_batches(pairs, 2, seed=0)[0]
        assert batch.sentences[0].startswith("premise")
        assert batch.sentences[1].startswith("hypothesis")
        assert batch.pairs == ((0, 1), (2, 3))

    def test_rejects_degenerate_inputs(self):
        with pytest.raises(ValueError, match="batch size"):
            make_batches(make_pairs([1, 1]), 1, seed=0)
        with pytest.raises(ValueError, match="at least"):
            make_batches(make_pairs([1]), 2, seed=0)
        with pytest.raises(ValueError, match="no positive"):
            make_batches(make_pairs([-1, -1, -1]), 2, seed=0)


class TestSynthGenerate:
    def test_deterministic(self):
        a_pairs, a_held = synth_generate(4, 30, 0.5, seed=9)
        b_pairs, b_held = synth_generate(4, 30, 0.5, seed=9)
        assert a_pairs == b_pairs
        assert a_held == b_held

    def test_cross_rate_zero_keeps_contradictions_same_topic(self):
        pairs, _ = synth_generate(4, 100, 0.0, seed=1)
        assert synth_cross_fraction(pairs) == 0.0

    def test_entailment_pairs_always_share_topic(self):
        pairs, _ = synth_generate(5, 80, 0.7, seed=2)
        for p in pairs:
            if p.label == 1:
                assert data.sentence_topic(p.premise) == data.sentence_topic(p.hypothesis)

    def test_cross_fraction_close_to_rate(self):
        pairs, _ = synth_generate(8, 300, 0.5, seed=3)
        # >= 1000 contradiction pairs; binomial noise well under 3 points
        assert abs(synth_cross_fraction(pairs) - 0.5) < 0.03

    def test_heldout_labels_cover_classes(self):
        _, held = synth_generate(6, 20, 0.5, seed=4, heldout_per_class=10)
        counts = np.bincount([h.class_id for h in held])
        assert np.array_equal(counts, np.full(6, 10))

    def test_full_overlap_rejected(self):
        with pytest.raises(ValueError, match="degenerate"):
            synth_generate(3, 10, 0.5, seed=0, overlap=1.0)

    def test_invalid_rates_rejected(self):
        with pytest.raises(ValueError, match="cross-rate"):
            synth_generate(3, 10, 1.5, seed=0)
        with pytest.raises(ValueError, match="classes"):
            synth_generate(1, 10, 0.5, seed=0)

    def test_overlap_shares_tokens_between_first_two_topics(self):
        pairs, _ = synth_generate(4, 200, 0.0, seed=5, overlap=0.5)
        topic1_tokens = set()
        for p in pairs:
            if data.sentence_topic(p.premise) == 1:
                topic1_tokens.update(p.premise.split())
        assert any(t.startswith("t00") for t in topic1_tokens)


class TestLoaders:
    def test_labeled_interning(self, tmp_path):
        path = tmp_path / "labeled.jsonl"
        path.write_text('{"text":"t","label":"sports"}\n'
                        '{"text":"u","label":"sports"}\n'
                        '{"text":"v","label":"news"}\n')
        records = load_labeled(path)
        assert [r.class_id for r in records] == [0, 0, 1]

    def test_labeled_missing_field(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"text":"t"}\n')
        with pytest.raises(ValueError, match="line 1"):
            load_labeled(path)

    def test_scored_parse(self, tmp_path):
        path = tmp_path / "scored.tsv"
        path.write_text("a\tb\t2.5\nc\td\t0\n")
        records = load_scored(path)
        assert records[0].score == 2.5
        assert records[1].score == 0.0

    def test_scored_range_enforced(self, tmp_path):
        path = tmp_path / "scored.tsv"
        path.write_text("a\tb\t7.0\n")
        with pytest.raises(ValueError, match=r"outside \[0, 5\]"):
            load_scored(path)

    def test_scored_bad_field_count(self, tmp_path):
        path = tmp_path / "scored.tsv"
        path.write_text("a\tb\n")
        with pytest.raises(ValueError, match="3 tab-separated"):
            load_scored(path)

    def test_nli_round_trip(self, tmp_path):
        pairs, _ = synth_generate(3, 10, 0.5, seed=6)
        path = tmp_path / "pairs.jsonl"
        data.save_nli(pairs, path)
        loaded, skipped = load_nli(path)
        assert loaded == pairs
        assert skipped == 0

    def test_labeled_round_trip(self, tmp_path):
        _, held = synth_generate(3, 10, 0.5, seed=6, heldout_per_class=4)
        path = tmp_path / "labeled.jsonl"
        data.save_labeled(held, path)
        loaded = load_labeled(path)
        assert [(r.text, r.class_id) for r in loaded] == \
            [(r.text, r.class_id) for r in held]
