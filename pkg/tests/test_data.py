"""Instance-construction tests: selection, permutation, targets, serialization."""

import json

import numpy as np
import pytest

from perlm.data import (GenerationStats, MaskingConfig, PerLMInstance,
                        SelectionSpan, apply_granularity, assemble_instance,
                        build_pair_instance, deserialize_instance,
                        expand_prediction_scope, generate_instances,
                        permute_selected, read_instances, sample_gram_length,
                        select_spans, serialize_instance, write_instances)
from perlm.errors import ConfigurationError, InstanceParseError
from perlm.seeding import derive_rng
from perlm.tokenizer import SPECIAL_TOKENS, TokenizedSequence, build_vocab

from helpers import reconstruct_original


def make_vocab(tokens):
    return build_vocab(list(SPECIAL_TOKENS) + list(tokens))


def make_seq(tokens, vocab, sentence_ids=None):
    """One single-token word per entry."""
    return TokenizedSequence(
        token_ids=[vocab.index[t] for t in tokens],
        word_ids=list(range(len(tokens))),
        sentence_ids=sentence_ids or [0] * len(tokens),
        is_special=[False] * len(tokens),
    )


LETTERS = [f"w{i}" for i in range(200)]
VOCAB = make_vocab(LETTERS)


class TestSelectSpans:
    def test_hundred_words_defaults(self):
        cfg = MaskingConfig()
        seq = make_seq(LETTERS[:100], VOCAB)
        for seed in range(50):
            spans = select_spans(seq, cfg, derive_rng(seed, "t"))
            selected = sum(s.word_end - s.word_start for s in spans)
            assert 14 <= selected <= 16

    def test_select_ratio_zero(self):
        cfg = MaskingConfig(select_ratio=0.0)
        seq = make_seq(LETTERS[:30], VOCAB)
        assert select_spans(seq, cfg, derive_rng(0, "t")) == []

    def test_spans_disjoint_and_whole_word(self):
        cfg = MaskingConfig(select_ratio=0.4)
        seq = make_seq(LETTERS[:40], VOCAB)
        for seed in range(30):
            spans = select_spans(seq, cfg, derive_rng(seed, "t"))
            covered = [w for s in spans for w in range(s.word_start, s.word_end)]
            assert len(covered) == len(set(covered))
            for s in spans:
                assert s.word_start < s.word_end
                assert len(s.token_positions) == s.word_end - s.word_start

    def test_sampled_gram_distribution(self):
        cfg = MaskingConfig()
        rng = derive_rng(7, "grams")
        stats = GenerationStats()
        for _ in range(100_000):
            sample_gram_length(cfg, rng, stats)
        hist = stats.gram_histogram
        for got, want in zip(hist, cfg.ngram_weights):
            assert abs(got - want) < 0.01

    def test_accepted_span_distribution_matches_weights(self):
        # The selector must not bias the stored gram lengths relative to
        # the configured weights even under budget pressure.
        cfg = MaskingConfig()
        seq = make_seq(LETTERS[:120], VOCAB)
        stats = GenerationStats()
        for seed in range(3000):
            select_spans(seq, cfg, derive_rng(seed, "dist"), stats)
        for got, want in zip(stats.gram_histogram, cfg.ngram_weights):
            assert abs(got - want) < 0.015


class TestPermuteSelected:
    def test_shuffle_ratio_zero_all_negatives(self):
        cfg = MaskingConfig(shuffle_ratio=0.0)
        seq = make_seq(LETTERS[:20], VOCAB)
        spans = select_spans(seq, cfg, derive_rng(1, "s"))
        instance = permute_selected(seq, spans, cfg, derive_rng(1, "p"), VOCAB)
        assert instance.input_ids == instance.original_ids
        assert instance.position_targets == instance.pred_positions

    def test_table_swap_semantics(self):
        # Two 2-token spans, each independently swapped: targets point both
        # ways of each swap.
        chars = list("研究表明这一句话的顺序并不影响阅读。")
        vocab = make_vocab(chars)
        seq = make_seq(chars, vocab)
        spans = [
            SelectionSpan(2, 4, [2, 3], n=2),
            SelectionSpan(13, 15, [13, 14], n=2),
        ]
        cfg = MaskingConfig(shuffle_ratio=1.0, granularity="ngram")
        instance = None
        for seed in range(200):
            candidate = permute_selected(seq, spans, cfg,
                                         derive_rng(seed, "tbl"), vocab)
            arrows = dict(zip(candidate.pred_positions,
                              candidate.position_targets))
            if arrows == {3: 4, 4: 3, 14: 15, 15: 14}:
                instance = candidate
                break
        assert instance is not None, "no seed produced the double swap"
        # The permuted surface has each pair exchanged around [CLS] offset 1.
        assert instance.input_ids[3] == vocab.index["明"]
        assert instance.input_ids[4] == vocab.index["表"]
        assert instance.input_ids[14] == vocab.index["响"]
        assert instance.input_ids[15] == vocab.index["影"]

    def test_three_cycle_brute_force_oracle(self):
        tokens = LETTERS[:10]
        seq = make_seq(tokens, VOCAB)
        spans = [SelectionSpan(w, w + 1, [w], n=1) for w in (4, 7, 9)]
        cfg = MaskingConfig(shuffle_ratio=1.0)
        found = None
        for seed in range(500):
            instance = permute_selected(seq, spans, cfg,
                                        derive_rng(seed, "cyc"), VOCAB)
            arrows = dict(zip(instance.pred_positions, instance.position_targets))
            if arrows == {5: 8, 8: 10, 10: 5}:  # +1 for [CLS]
                found = instance
                break
        assert found is not None, "no seed produced the 3-cycle"
        # Brute force: look up where each original token actually landed.
        for p, t in zip(found.pred_positions, found.position_targets):
            landed = found.input_ids.index(found.original_ids[p])
            assert landed == t

    def test_sigma_inverse_semantics(self):
        tokens = LETTERS[:12]
        seq = make_seq(tokens, VOCAB)
        spans = [SelectionSpan(2, 6, [2, 3, 4, 5], n=4)]
        for seed in range(10):
            base = dict(shuffle_ratio=1.0)
            fwd = permute_selected(seq, spans, MaskingConfig(**base),
                                   derive_rng(seed, "sem"), VOCAB)
            inv = permute_selected(seq, spans,
                                   MaskingConfig(target_semantics="sigma_inverse",
                                                 **base),
                                   derive_rng(seed, "sem"), VOCAB)
            assert fwd.input_ids == inv.input_ids
            fwd_map = dict(zip(fwd.pred_positions, fwd.position_targets))
            inv_map = dict(zip(inv.pred_positions, inv.position_targets))
            assert inv_map == {d: s for s, d in fwd_map.items()}
            # Under sigma_inverse the target names where the current token
            # came from.
            for p, t in inv_map.items():
                assert inv.input_ids[p] == inv.original_ids[t]


class TestGranularity:
    def test_word_mode_singletons_identity(self):
        cfg = MaskingConfig(granularity="word", shuffle_ratio=1.0)
        seq = make_seq(LETTERS[:30], VOCAB)
        spans = select_spans(seq, cfg, derive_rng(3, "g"))
        instance = permute_selected(seq, spans, cfg, derive_rng(3, "g2"), VOCAB)
        assert instance.input_ids == instance.original_ids
        assert instance.position_targets == instance.pred_positions

    def test_ngram_mode_support_within_span(self):
        cfg = MaskingConfig(granularity="ngram", shuffle_ratio=1.0)
        seq = make_seq(LETTERS[:9], VOCAB)
        spans = [SelectionSpan(3, 6, [3, 4, 5], n=3)]
        seen = set()
        for seed in range(120):
            cells = apply_granularity([3, 4, 5], spans, cfg, seq)
            assert cells == [[3, 4, 5]]
            instance = permute_selected(seq, spans, cfg,
                                        derive_rng(seed, "ng"), VOCAB)
            arrows = dict(zip(instance.pred_positions, instance.position_targets))
            assert set(arrows) == {4, 5, 6}
            assert set(arrows.values()) <= {4, 5, 6}
            seen.add(tuple(arrows[p] for p in (4, 5, 6)))
        assert len(seen) == 6  # all 3! permutations reachable

    def test_sentence_mode_no_cross_boundary(self):
        cfg = MaskingConfig(granularity="sentence", shuffle_ratio=1.0,
                            select_ratio=0.5)
        sentence_ids = [0] * 10 + [1] * 10
        seq = make_seq(LETTERS[:20], VOCAB, sentence_ids=sentence_ids)
        for seed in range(40):
            spans = select_spans(seq, cfg, derive_rng(seed, "sent"))
            instance = permute_selected(seq, spans, cfg,
                                        derive_rng(seed, "sent2"), VOCAB)
            for p, t in zip(instance.pred_positions, instance.position_targets):
                # +1 for [CLS]; both ends of an arrow share a sentence.
                assert (p - 1 < 10) == (t - 1 < 10)


class TestPairAssembly:
    def test_layout_arithmetic(self):
        a = make_seq(LETTERS[:5], VOCAB)
        b = make_seq(LETTERS[5:8], VOCAB)
        instance = build_pair_instance(a, b, 16, MaskingConfig(),
                                       derive_rng(0, "pair"), VOCAB)
        assert instance.real_length == 11  # 1+5+1+3+1
        assert sum(instance.pad_mask) == 5
        assert instance.input_ids[0] == VOCAB.cls_id
        assert instance.input_ids[6] == VOCAB.sep_id
        assert instance.input_ids[10] == VOCAB.sep_id
        assert instance.segment_ids[:7] == [0] * 7
        assert instance.segment_ids[7:11] == [1] * 4

    def test_full_length_prediction_budget(self):
        tokens = [f"w{i % 200}" for i in range(600)]
        a = make_seq(tokens[:300], VOCAB)
        b = make_seq(tokens[300:600], VOCAB)
        instance = build_pair_instance(a, b, 512, MaskingConfig(),
                                       derive_rng(1, "cap"), VOCAB)
        assert instance.real_length == 512
        assert len(instance.pred_positions) == 76  # floor(512 * 0.15)

    def test_empty_b_single_segment(self):
        a = make_seq(LETTERS[:4], VOCAB)
        b = make_seq([], VOCAB)
        instance = build_pair_instance(a, b, 12, MaskingConfig(),
                                       derive_rng(2, "sb"), VOCAB)
        assert instance.real_length == 6
        assert all(s == 0 for s in instance.segment_ids)

    def test_both_empty_skipped(self):
        a = make_seq([], VOCAB)
        assert build_pair_instance(a, None, 8, MaskingConfig(),
                                   derive_rng(0, "e"), VOCAB) is None

    def test_truncation_trims_longer_side(self):
        a = make_seq(LETTERS[:20], VOCAB)
        b = make_seq(LETTERS[20:25], VOCAB)
        instance = build_pair_instance(a, b, 16, MaskingConfig(),
                                       derive_rng(3, "tr"), VOCAB)
        assert instance.real_length == 16
        # B kept intact (5 tokens), A trimmed to 8.
        assert instance.segment_ids[:10] == [0] * 10
        assert sum(instance.segment_ids) == 6


class TestPredictionScope:
    def test_partial_row_count(self):
        a = make_seq(LETTERS[:40], VOCAB)
        instance = build_pair_instance(a, None, 44, MaskingConfig(),
                                       derive_rng(5, "sc"), VOCAB)
        assert len(instance.pred_positions) == 6  # floor(42 * 0.15)

    def test_full_covers_all_real_positions(self):
        a = make_seq(LETTERS[:38], VOCAB)
        cfg = MaskingConfig(prediction_scope="full")
        instance = build_pair_instance(a, None, 40, cfg,
                                       derive_rng(5, "fp"), VOCAB)
        assert instance.real_length == 40
        assert len(instance.pred_positions) == 40
        self_targets = sum(1 for p, t in zip(instance.pred_positions,
                                             instance.position_targets) if p == t)
        assert self_targets >= 34

    def test_partial_and_full_agree_on_selected(self):
        a = make_seq(LETTERS[:30], VOCAB)
        partial = build_pair_instance(a, None, 34, MaskingConfig(),
                                      derive_rng(9, "ag"), VOCAB)
        full = expand_prediction_scope(partial,
                                       MaskingConfig(prediction_scope="full"))
        full_map = dict(zip(full.pred_positions, full.position_targets))
        for p, t in zip(partial.pred_positions, partial.position_targets):
            assert full_map[p] == t
        assert full.input_ids == partial.input_ids


class TestInvariants:
    @pytest.mark.parametrize("granularity", ["none", "word", "ngram", "sentence"])
    def test_conservation_locality_inversion(self, granularity):
        cfg = MaskingConfig(granularity=granularity)
        for seed in range(100):
            rng = derive_rng(seed, "inv", hash(granularity) % 1000)
            size = int(rng.integers(4, 60))
            sentence_ids = sorted(int(rng.integers(0, 3)) for _ in range(size))
            seq = make_seq([f"w{int(rng.integers(0, 200))}" for _ in range(size)],
                           VOCAB, sentence_ids=sentence_ids)
            instance = build_pair_instance(seq, None, 64, cfg, rng, VOCAB)
            check_core_invariants(instance, VOCAB)

    def test_special_positions_untouched(self):
        for seed in range(50):
            a = make_seq(LETTERS[:25], VOCAB)
            b = make_seq(LETTERS[25:40], VOCAB)
            instance = build_pair_instance(a, b, 48, MaskingConfig(),
                                           derive_rng(seed, "spec"), VOCAB)
            specials = {0, 26, 42}
            assert instance.input_ids[0] == VOCAB.cls_id
            assert instance.input_ids[26] == VOCAB.sep_id
            assert instance.input_ids[42] == VOCAB.sep_id
            for p, t in zip(instance.pred_positions, instance.position_targets):
                assert p not in specials
                assert t not in specials

    def test_deterministic_stream(self):
        docs = ["w1 w2 w3 w4 w5 w6 w7 w8. w9 w10 w11 w12.",
                "w13 w14 w15 w16 w17."]

        def stream():
            return [serialize_instance(i) for i in
                    generate_instances(docs, VOCAB, MaskingConfig(), 24, seed=42)]

        assert stream() == stream()


def check_core_invariants(instance, vocab):
    real = [i for i, pad in enumerate(instance.pad_mask) if not pad]
    assert sorted(instance.input_ids[i] for i in real) == \
        sorted(instance.original_ids[i] for i in real)
    moved = {p for p, t in zip(instance.pred_positions,
                               instance.position_targets) if p != t}
    for i in real:
        if i not in moved:
            assert instance.input_ids[i] == instance.original_ids[i]
    assert reconstruct_original(instance) == instance.original_ids
    for p in instance.pred_positions:
        assert not instance.pad_mask[p]


class TestSerialization:
    def make_instance(self, seed=0):
        a = make_seq(LETTERS[:15], VOCAB)
        b = make_seq(LETTERS[15:22], VOCAB)
        return build_pair_instance(a, b, 32, MaskingConfig(),
                                   derive_rng(seed, "ser"), VOCAB)

    def test_roundtrip_field_by_field(self):
        instance = self.make_instance()
        again = deserialize_instance(serialize_instance(instance))
        assert again == instance

    def test_truncated_line_errors_with_offset(self):
        line = serialize_instance(self.make_instance())
        with pytest.raises(InstanceParseError, match="byte offset"):
            deserialize_instance(line[: len(line) // 2], byte_offset=100)

    def test_missing_field_rejected(self):
        record = json.loads(serialize_instance(self.make_instance()))
        del record["original_ids"]
        with pytest.raises(InstanceParseError, match="original_ids"):
            deserialize_instance(json.dumps(record))

    def test_file_roundtrip_preserves_statistics(self, tmp_path):
        instances = [self.make_instance(seed) for seed in range(200)]
        path = tmp_path / "instances.jsonl"
        write_instances(path, instances)
        again = read_instances(path)

        def file_stats(items):
            rows = sum(len(i.pred_positions) for i in items)
            moved = sum(1 for i in items
                        for p, t in zip(i.pred_positions, i.position_targets)
                        if p != t)
            pads = sum(sum(i.pad_mask) for i in items)
            return (len(items), rows, moved, pads)

        assert file_stats(again) == file_stats(instances)
        assert [serialize_instance(i) for i in again] == \
            [serialize_instance(i) for i in instances]


class TestConfigValidation:
    def test_bad_ratio(self):
        with pytest.raises(ConfigurationError):
            MaskingConfig(select_ratio=1.5)

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            MaskingConfig(ngram_weights=(0.5, 0.5, 0.5, 0.5))

    def test_unknown_granularity(self):
        with pytest.raises(ConfigurationError):
            MaskingConfig(granularity="paragraph")
