"""Guided decoding, future discriminators, fine-tune dataset and trainer."""

from __future__ import annotations

import re

import numpy as np
import pytest
from fixtures import (
    PSEUDO_SKILL_REGEXES,
    SKILL_SUPERLATIVE,
    SKILL_WOULD,
    make_corpus,
    make_dialogues,
    regex_training_set,
)
from hypothesis import given, settings
from hypothesis import strategies as st

from grammarctl.corpus import label_corpus, sample_snippets
from grammarctl.detector import TrainConfig
from grammarctl.egp import ConstraintSet
from grammarctl.gateway import BOS, EOS, GatewayError, StubChatClient, render_chat_prefix
from grammarctl.records import Strategy
from grammarctl.strategies import (
    DECODING_PRESETS,
    DecodingParams,
    FinetuneConfig,
    blend_logits,
    build_finetune_dataset,
    build_prefix_instances,
    finetune,
    generate_decode,
    generate_hybrid,
    generate_prompted,
    guided_decode_ids,
    load_finetune_dataset,
    save_finetune_dataset,
    select_candidates,
    train_future_discriminator,
)


class OracleWordDiscriminator:
    """Scores high as soon as the target word is in the (extended) prefix."""

    def __init__(self, skill_id: int, word: str, hi: float = 0.9, lo: float = 0.1):
        self.skill_id = skill_id
        self.word = word
        self.hi = hi
        self.lo = lo

    def prefix_score(self, tokens, encoder) -> float:
        return self.hi if self.word in tokens else self.lo

    def extension_scores(self, tokens, candidates, encoder) -> np.ndarray:
        if self.word in tokens:
            return np.full(len(candidates), self.hi)
        return np.where([c == self.word for c in candidates], self.hi, self.lo)


@pytest.fixture(scope="module")
def snippets():
    return sample_snippets(make_dialogues(30, seed=4), 25, seed=4)


class TestBlend:
    def test_three_token_hand_oracle(self):
        blended = blend_logits(
            np.array([2.0, 1.0, 0.5]), np.array([0.1, 0.9, 0.2]), g_bar=0.4, alpha=0.5
        )
        np.testing.assert_allclose(blended, [0.85, 0.75, 0.15], atol=1e-9)
        assert int(np.argmax(blended)) == 0

    def test_alpha_zero_is_base_logits(self):
        logits = np.array([0.3, -1.2, 2.2])
        blended = blend_logits(logits, np.array([0.9, 0.9, 0.1]), 0.5, 0.0)
        np.testing.assert_array_equal(blended, logits)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=30),
        st.lists(st.floats(0.001, 0.999), min_size=2, max_size=30),
        st.floats(0.0, 1.0),
        st.floats(0.0, 1.0),
    )
    def test_alpha_monotone_rank_of_best_advantage_token(self, logits, scores, a1, a2):
        n = min(len(logits), len(scores))
        logits = np.array(logits[:n])
        scores = np.array(scores[:n])
        lo, hi = min(a1, a2), max(a1, a2)
        best = int(np.argmax(scores))

        def strict_rank(alpha: float) -> int:
            blended = blend_logits(logits, scores, float(scores.mean()), alpha)
            return int((blended > blended[best]).sum())

        assert strict_rank(hi) <= strict_rank(lo)


class TestSelectCandidates:
    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-20, 20), min_size=1, max_size=60),
        st.floats(0, 0.5),
        st.integers(1, 60),
    )
    def test_masking_respects_top_k_and_eta(self, logits, eta, k):
        logits = np.array(logits)
        chosen = select_candidates(logits, eta, k)
        assert len(chosen) <= k
        shifted = logits - logits.max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        kth = sorted(logits, reverse=True)[: len(logits)][:k]
        for token in chosen:
            assert probs[token] >= eta
            assert logits[token] >= min(kth)

    def test_eta_one_filters_everything_but_certainty(self):
        logits = np.array([5.0, 0.0, 0.0])
        assert len(select_candidates(logits, 0.9999, 3)) == 0


class ToyLM:
    """Three-token model with constant logits, for exercising one step."""

    class _Vocab:
        id_to_token = ["a", "b", "c"]

        def decode(self, ids):
            return " ".join(self.id_to_token[i] for i in ids)

    def __init__(self, logits=(2.0, 1.0, 0.5)):
        self.vocab = self._Vocab()
        self.max_context = 64
        self.logits = np.array(logits, dtype=float)

    def next_token_logits(self, prefix):
        return self.logits.copy()


class _ToyDiscriminator:
    skill_id = 1

    def prefix_score(self, tokens, encoder):
        return 0.5

    def extension_scores(self, tokens, candidates, encoder):
        table = {"a": 0.1, "b": 0.9, "c": 0.2}
        return np.array([table[c] for c in candidates])


class TestGuidedDecodeStep:
    def test_equation_worked_example_end_to_end(self, shared_encoder):
        lm = ToyLM()
        params = DecodingParams(
            alpha=0.5, eta=0.0, top_k=3, max_tokens=1, baseline="constant", baseline_value=0.4
        )
        trace = guided_decode_ids(
            lm, [0], [1], params, {1: _ToyDiscriminator()}, shared_encoder
        )
        assert trace.token_ids == [0]  # blended (0.85, 0.75, 0.15) -> first token

    def test_high_alpha_flips_choice_to_discriminated_token(self, shared_encoder):
        lm = ToyLM()
        params = DecodingParams(
            alpha=0.95, eta=0.0, top_k=3, max_tokens=1, baseline="constant", baseline_value=0.4
        )
        trace = guided_decode_ids(lm, [0], [1], params, {1: _ToyDiscriminator()}, shared_encoder)
        assert trace.token_ids == [1]

    def test_eta_starvation_falls_back_to_top1(self, shared_encoder, caplog):
        lm = ToyLM(logits=(0.1, 0.0, -0.1))
        params = DecodingParams(alpha=0.95, eta=0.9999, top_k=3, max_tokens=1)
        trace = guided_decode_ids(lm, [0], [1], params, {1: _ToyDiscriminator()}, shared_encoder)
        assert trace.fallback_steps == 1
        assert trace.token_ids == [0]

    def test_missing_discriminator_is_a_precondition_error(self, shared_encoder):
        with pytest.raises(ValueError, match="no future discriminator"):
            guided_decode_ids(ToyLM(), [0], [7], DecodingParams(), {}, shared_encoder)


class TestGuidedDecodeIdentity:
    def test_alpha_zero_matches_plain_greedy(self, tiny_lm, shared_encoder, snippets):
        disc = {SKILL_WOULD: OracleWordDiscriminator(SKILL_WOULD, "would")}
        params = DecodingParams(alpha=0.0, top_k=20, max_tokens=24)
        for snippet in snippets[:5]:
            prefix = render_chat_prefix(
                [{"role": "user", "content": "Dialog:\n" + snippet.context[0].text}],
                tiny_lm.vocab,
            )
            trace = guided_decode_ids(
                tiny_lm, prefix, [SKILL_WOULD], params, disc, shared_encoder
            )
            assert trace.token_ids == tiny_lm.greedy_generate(prefix, 24)

    def test_empty_constraints_match_greedy_for_any_alpha(self, tiny_lm, shared_encoder):
        prefix = [BOS] + tiny_lm.vocab.encode("the small garden near the river")
        for alpha in (0.0, 0.5, 0.95, 1.0):
            trace = guided_decode_ids(
                tiny_lm, prefix, [], DecodingParams(alpha=alpha, max_tokens=16), {}, shared_encoder
            )
            assert trace.token_ids == tiny_lm.greedy_generate(prefix, 16)


class TestGuidedDecodeEfficacy:
    def test_oracle_discriminator_beats_alpha_zero(
        self, tiny_lm, shared_encoder, fixture_repo, oracle_bundle, snippets
    ):
        disc = {SKILL_WOULD: OracleWordDiscriminator(SKILL_WOULD, "would")}
        constraints = ConstraintSet.explicit([SKILL_WOULD])
        base_hits = 0
        guided_hits = 0
        for snippet in snippets[:8]:
            base = generate_decode(
                tiny_lm, snippet, constraints, fixture_repo,
                DecodingParams(alpha=0.0, max_tokens=24),
                disc, shared_encoder, oracle_bundle,
            )
            guided = generate_decode(
                tiny_lm, snippet, constraints, fixture_repo,
                DecodingParams(alpha=0.95, max_tokens=24),
                disc, shared_encoder, oracle_bundle,
            )
            base_hits += bool(re.search(r"\bwould\b", base.response))
            guided_hits += bool(re.search(r"\bwould\b", guided.response))
        assert guided_hits > base_hits

    def test_retirement_is_single_shot(self, tiny_lm, shared_encoder, fixture_repo, oracle_bundle, snippets):
        disc = {SKILL_WOULD: OracleWordDiscriminator(SKILL_WOULD, "would")}
        record_params = DecodingParams(alpha=0.95, top_k=20, max_tokens=24, retire_satisfied=True)
        prompt_prefix = render_chat_prefix(
            [{"role": "user", "content": "Dialog:\nA: hello"}], tiny_lm.vocab
        )
        trace = guided_decode_ids(
            tiny_lm, prompt_prefix, [SKILL_WOULD], record_params, disc, shared_encoder, oracle_bundle
        )
        assert len(trace.retired) == len(set(trace.retired))
        if trace.retired:
            assert trace.retired == [SKILL_WOULD]
            assert "would" in trace.response_tokens


@pytest.fixture(scope="module")
def would_fd(shared_encoder):
    sentences = make_corpus(220, seed=31)
    ts = regex_training_set(SKILL_WOULD, sentences)
    return train_future_discriminator(ts, shared_encoder, TrainConfig(max_epochs=6, seed=1))


class TestFutureDiscriminator:
    def test_prefix_instance_counting(self, shared_encoder):
        from grammarctl.detector import SkillTrainingSet

        ts = SkillTrainingSet(
            1, ("one two three", "four"), ("five six",), "manual"
        )
        instances = build_prefix_instances(ts, shared_encoder)
        assert len(instances) == 3 + 1 + 2
        lengths = sorted(emb.shape[0] for emb, _ in instances)
        assert lengths == [1, 1, 1, 2, 2, 3]

    def test_score_rises_after_target_word(self, would_fd, shared_encoder):
        held_out = [s for s in make_corpus(400, seed=99) if " would " in f" {s.lower()} "]
        assert len(held_out) >= 30
        improved = 0
        for sentence in held_out:
            tokens = [t.lower() for t in shared_encoder.tokenize(sentence)]
            idx = tokens.index("would")
            if idx == 0:
                improved += 1
                continue
            before = would_fd.prefix_score(tokens[:idx], shared_encoder)
            after = would_fd.prefix_score(tokens[: idx + 1], shared_encoder)
            improved += after > before
        assert improved / len(held_out) >= 0.90

    def test_empty_positives_error(self, shared_encoder):
        from grammarctl.detector import SkillTrainingSet, TrainingDataError

        with pytest.raises(TrainingDataError):
            SkillTrainingSet(1, (), ("neg",), "manual")


class TestPrompted:
    def test_stub_echo_gives_full_satisfaction(self, fixture_repo, oracle_bundle, snippets):
        client = StubChatClient(default="I would visit the biggest garden in town.")
        record = generate_prompted(
            client,
            snippets[0],
            ConstraintSet.explicit([SKILL_WOULD]),
            fixture_repo,
            oracle_bundle,
            strategy=Strategy.PROMPT_REMOTE,
        )
        assert record.strategy is Strategy.PROMPT_REMOTE
        assert SKILL_WOULD in record.detections
        assert record.word_count == 8
        assert record.latency_seconds > 0

    def test_gateway_failure_marks_record_failed(self, fixture_repo, oracle_bundle, snippets):
        client = StubChatClient(fail_after=0)
        record = generate_prompted(
            client, snippets[0], ConstraintSet.explicit([SKILL_WOULD]), fixture_repo, oracle_bundle
        )
        assert record.failed
        assert record.response == ""
        assert record.error

    def test_zero_skill_constraint_rejected_at_construction(self):
        with pytest.raises(ValueError):
            ConstraintSet.explicit([])


class TestFinetuneDataset:
    @pytest.fixture(scope="class")
    def labeled(self, oracle_bundle):
        return label_corpus(make_dialogues(40, seed=8), oracle_bundle)

    def test_cap_enforced(self, labeled, fixture_repo, oracle_bundle):
        examples = build_finetune_dataset(labeled, fixture_repo, oracle_bundle, cap=5)
        counts: dict[int, int] = {}
        for ex in examples:
            for sid in ex.skill_ids:
                counts[sid] = counts.get(sid, 0) + 1
        assert counts
        assert all(v <= 5 for v in counts.values())

    def test_below_cap_skills_fully_included(self, labeled, fixture_repo, oracle_bundle):
        capped = build_finetune_dataset(labeled, fixture_repo, oracle_bundle, cap=500)
        counts: dict[int, int] = {}
        for ex in capped:
            for sid in ex.skill_ids:
                counts[sid] = counts.get(sid, 0) + 1
        # every usable (context, next-turn) pair for a below-cap skill is kept
        available: dict[int, int] = {}
        for dialogue in labeled:
            for start in range(len(dialogue.turns) - 4):
                nxt = dialogue.turns[start + 4]
                for sid in nxt.detected_skills or ():
                    if oracle_bundle.detect(sid, nxt.text):
                        available[sid] = available.get(sid, 0) + 1
        for sid, n_available in available.items():
            if n_available <= 500:
                assert counts.get(sid, 0) == n_available

    def test_completions_repass_detection(self, labeled, fixture_repo, oracle_bundle):
        examples = build_finetune_dataset(labeled, fixture_repo, oracle_bundle, cap=100)
        assert examples
        for ex in examples:
            detected = oracle_bundle.detect_all(ex.completion, skill_ids=ex.skill_ids)
            assert detected >= ex.skill_ids

    def test_jsonl_roundtrip(self, labeled, fixture_repo, oracle_bundle, tmp_path):
        examples = build_finetune_dataset(labeled, fixture_repo, oracle_bundle, cap=10)
        path = tmp_path / "sft.jsonl"
        save_finetune_dataset(examples, path)
        assert load_finetune_dataset(path) == examples


class TestFinetune:
    def test_empty_dataset_rejected(self, tiny_lm, oracle_bundle):
        with pytest.raises(ValueError):
            finetune(tiny_lm, [], oracle_bundle)

    def test_checkpoint_cadence_for_450_steps(
        self, lm_vocab, oracle_bundle, fixture_repo
    ):
        from grammarctl.gateway import TinyCausalLM

        labeled = label_corpus(make_dialogues(25, seed=12), oracle_bundle)
        dataset = build_finetune_dataset(labeled, fixture_repo, oracle_bundle, cap=40)
        assert len(dataset) >= 10
        lm = TinyCausalLM(lm_vocab, max_context=384, seed=2)
        config = FinetuneConfig(
            max_steps=450, eval_every=200, lora_r=4, batch_size=4, max_generate_tokens=12, seed=0
        )
        result = finetune(lm, dataset, oracle_bundle, config)
        assert result.checkpoint_steps == [200, 400]
        assert not result.aborted


class TestHybrid:
    def test_alpha_zero_hybrid_equals_finetuned_greedy(
        self, tiny_lm, shared_encoder, fixture_repo, oracle_bundle, snippets
    ):
        disc = {SKILL_WOULD: OracleWordDiscriminator(SKILL_WOULD, "would")}
        record = generate_hybrid(
            tiny_lm, snippets[0], ConstraintSet.explicit([SKILL_WOULD]), fixture_repo,
            DecodingParams(alpha=0.0, top_k=20, max_tokens=16),
            disc, shared_encoder, oracle_bundle,
        )
        assert record.strategy is Strategy.HYBRID
        decode_record = generate_decode(
            tiny_lm, snippets[0], ConstraintSet.explicit([SKILL_WOULD]), fixture_repo,
            DecodingParams(alpha=0.0, top_k=20, max_tokens=16),
            disc, shared_encoder, oracle_bundle,
        )
        assert record.response == decode_record.response


def test_presets_expose_both_operating_points():
    assert DECODING_PRESETS["default"].alpha == 0.95
    assert DECODING_PRESETS["default"].eta == 1e-3
    assert DECODING_PRESETS["default"].top_k == 200
    assert DECODING_PRESETS["high_control"].alpha == 0.99
