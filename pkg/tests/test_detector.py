"""Detector heads, training, curation loops, and test-precision evaluation."""

from __future__ import annotations

import hashlib
import json
import logging

import numpy as np
import pytest
from fixtures import (
    PSEUDO_SKILL_REGEXES,
    SKILL_SUPERLATIVE,
    SKILL_WOULD,
    make_corpus,
    pseudo_skill_repository,
    regex_training_set,
)

from grammarctl.detector import (
    CallbackAnnotationStore,
    CurationResult,
    CurationSuspended,
    DetectionHead,
    DetectorBundle,
    DetectorMetrics,
    DetectorModel,
    JsonlAnnotationStore,
    SkillTrainingSet,
    TrainConfig,
    TrainingDataError,
    _stratified_folds,
    augment_negatives,
    curate_automatized,
    curate_manual,
    curate_synthetic,
    detect,
    evaluate_test_precision,
    score_tokens,
    train_detector,
)
from grammarctl.gateway import StubChatClient

FAST = TrainConfig(max_epochs=6, seed=0)


def _encoder_weights_hash(encoder) -> str:
    digest = hashlib.sha256()
    digest.update(encoder._projection.tobytes())
    for k in sorted(encoder._mix):
        digest.update(encoder._mix[k].tobytes())
    digest.update(encoder._bias.tobytes())
    return digest.hexdigest()


class TestScoring:
    def test_zero_head_scores_exactly_half(self, shared_encoder):
        detector = DetectorModel(
            skill_id=1,
            head=DetectionHead.zeros(shared_encoder.dim),
            encoder_id=shared_encoder.encoder_id,
        )
        scored = score_tokens("any sentence at all", detector, shared_encoder)
        assert [p for _, p in scored] == [0.5] * 4
        assert detect("any sentence at all", detector, shared_encoder) is False

    def test_scores_are_deterministic(self, oracle_bundle):
        first = oracle_bundle.score_tokens(SKILL_SUPERLATIVE, "the biggest room in the house")
        second = oracle_bundle.score_tokens(SKILL_SUPERLATIVE, "the biggest room in the house")
        assert first == second

    def test_detect_equals_max_pool_rule(self, oracle_bundle, oracle_corpus):
        for sentence in oracle_corpus["test"][:50]:
            for sid in oracle_bundle.detectors:
                scored = oracle_bundle.score_tokens(sid, sentence)
                assert oracle_bundle.detect(sid, sentence) == (max(p for _, p in scored) > 0.5)

    def test_probabilities_in_open_interval(self, oracle_bundle):
        scored = oracle_bundle.score_tokens(SKILL_WOULD, "I would visit the garden tomorrow.")
        assert all(0.0 < p < 1.0 for _, p in scored)

    def test_trained_superlative_fires_on_table_sentence(self, oracle_bundle):
        scored = oracle_bundle.score_tokens(
            SKILL_SUPERLATIVE, "It's the biggest room in the house."
        )
        assert max(p for _, p in scored) > 0.5

    def test_detection_survives_concatenation_with_other_text(self, oracle_bundle):
        base = "It's the biggest room in the house."
        combined = base + " We met and talked near the river."
        base_scores = oracle_bundle.score_tokens(SKILL_SUPERLATIVE, base)
        central = max(range(len(base_scores)), key=lambda i: base_scores[i][1])
        assert base_scores[central][1] > 0.5
        # the base tokens are a prefix of the combined tokens, so the central
        # token's score is directly comparable by position
        combined_scores = oracle_bundle.score_tokens(SKILL_SUPERLATIVE, combined)
        assert combined_scores[central][0] == base_scores[central][0]
        assert combined_scores[central][1] > 0.5
        assert oracle_bundle.detect(SKILL_SUPERLATIVE, combined)


class TestTrainingSetValidation:
    def test_positive_negative_overlap_rejected(self):
        with pytest.raises(TrainingDataError, match="both"):
            SkillTrainingSet(1, ("same sentence",), ("same sentence",), "manual")

    def test_empty_positives_rejected(self):
        with pytest.raises(TrainingDataError):
            SkillTrainingSet(1, (), ("a negative",), "manual")


class TestTrainDetector:
    def test_too_few_positives_rejected(self, shared_encoder):
        ts = SkillTrainingSet(1, tuple(f"pos {i}" for i in range(5)), ("neg",), "manual")
        with pytest.raises(TrainingDataError, match=">=10"):
            train_detector(ts, shared_encoder, config=FAST)

    def test_single_class_rejected(self, shared_encoder):
        ts = SkillTrainingSet(1, tuple(f"pos number {i}" for i in range(12)), (), "manual")
        with pytest.raises(TrainingDataError):
            train_detector(ts, shared_encoder, config=FAST)

    def test_folds_partition_indices(self):
        rng = np.random.default_rng(0)
        folds = _stratified_folds(23, 41, 5, rng)
        assert len(folds) == 5
        all_pos = [i for fold, _ in folds for i in fold]
        all_neg = [i for _, fold in folds for i in fold]
        assert sorted(all_pos) == list(range(23))
        assert sorted(all_neg) == list(range(41))

    def test_training_never_touches_encoder_weights(self, shared_encoder):
        sentences = make_corpus(120, seed=3)
        ts = regex_training_set(SKILL_WOULD, sentences)
        before = _encoder_weights_hash(shared_encoder)
        train_detector(ts, shared_encoder, config=FAST)
        assert _encoder_weights_hash(shared_encoder) == before

    def test_oracle_trained_detector_has_high_validation_precision(self, oracle_bundle):
        det = oracle_bundle.detectors[SKILL_SUPERLATIVE]
        assert det.metrics.validation_precision is not None
        assert det.metrics.validation_precision >= 0.90

    def test_head_parameter_count_near_spec_for_reference_width(self):
        head = DetectionHead(768)
        assert 240_000 <= head.parameter_count() <= 340_000


class TestBundle:
    def test_deployability_gate(self, shared_encoder):
        deployable = DetectorModel(
            1, DetectionHead.zeros(shared_encoder.dim), shared_encoder.encoder_id,
            metrics=DetectorMetrics(test_precision=0.80),
        )
        not_deployable = DetectorModel(
            2, DetectionHead.zeros(shared_encoder.dim), shared_encoder.encoder_id,
            metrics=DetectorMetrics(test_precision=0.79),
        )
        unevaluated = DetectorModel(
            3, DetectionHead.zeros(shared_encoder.dim), shared_encoder.encoder_id
        )
        bundle = DetectorBundle(shared_encoder, [deployable, not_deployable, unevaluated])
        assert set(bundle.deployable()) == {1}

    def test_save_load_roundtrip(self, oracle_bundle, tmp_path, oracle_corpus):
        oracle_bundle.save(tmp_path / "bundle")
        loaded = DetectorBundle.load(tmp_path / "bundle")
        assert set(loaded.detectors) == set(oracle_bundle.detectors)
        for sentence in oracle_corpus["test"][:20]:
            assert loaded.detect_all(sentence) == oracle_bundle.detect_all(sentence)
        manifest = json.loads((tmp_path / "bundle" / "manifest.json").read_text())
        assert manifest["encoder_id"] == oracle_bundle.encoder.encoder_id
        entry = manifest["detectors"][0]
        assert {"skill_id", "encoder_id", "metrics", "provenance", "weights_file"} <= set(entry)

    def test_encoder_mismatch_rejected(self, shared_encoder):
        model = DetectorModel(1, DetectionHead.zeros(4), "other-encoder")
        with pytest.raises(ValueError, match="encoder"):
            DetectorBundle(shared_encoder, [model])


class TestCurateSynthetic:
    def _skill(self):
        return pseudo_skill_repository().get(SKILL_WOULD)

    def _stub(self, n_lines=30):
        counter = {"i": 0}

        def reply(messages):
            counter["i"] += 1
            base = counter["i"] * 1000
            pos = [f"POS: I would visit place {base + j}." for j in range(n_lines)]
            neg = [f"NEG: I visited place {base + j}." for j in range(n_lines)]
            return "\n".join(pos + neg)

        return StubChatClient(reply_fn=reply)

    def test_returns_exactly_750_examples(self):
        ts = curate_synthetic(self._skill(), self._stub(), count=750)
        assert len(ts.positives) + len(ts.negatives) == 750
        assert ts.provenance == "synthetic"

    def test_client_failure_persists_resume_token(self, tmp_path):
        resume = tmp_path / "resume.json"
        client = StubChatClient(
            reply_fn=self._stub().reply_fn, fail_after=2
        )
        with pytest.raises(CurationSuspended) as exc:
            curate_synthetic(self._skill(), client, count=750, resume_path=resume)
        assert exc.value.state_path == str(resume)
        saved = json.loads(resume.read_text())
        assert saved["positives"]

        fresh = self._stub()
        ts = curate_synthetic(self._skill(), fresh, count=750, resume_path=resume)
        assert len(ts.positives) + len(ts.negatives) == 750

    def test_augmentation_keeps_original_negatives(self):
        ts = SkillTrainingSet(1, ("p one", "p two"), ("n one",), "synthetic")
        other = SkillTrainingSet(2, ("other pos a", "other pos b", "other pos c"), ("n x",), "synthetic")
        augmented = augment_negatives(ts, [other], seed=0)
        assert set(ts.negatives) <= set(augmented.negatives)
        assert set(augmented.negatives) - set(ts.negatives) <= set(other.positives)

    def test_augmentation_with_no_other_skills_warns(self, caplog):
        ts = SkillTrainingSet(1, ("p one",), ("n one",), "synthetic")
        with caplog.at_level(logging.WARNING):
            unchanged = augment_negatives(ts, [], seed=0)
        assert unchanged == ts
        assert any("no other-skill positives" in r.message for r in caplog.records)


class TestCurateManual:
    def _oracle_store(self, budget=None):
        return CallbackAnnotationStore(
            lambda s, sid: bool(PSEUDO_SKILL_REGEXES[sid].search(s)),
            annotator="oracle",
            budget=budget,
        )

    def test_oracle_loop_completes_with_target_precision(self, shared_encoder, tmp_path):
        skill = pseudo_skill_repository().get(SKILL_WOULD)
        corpus = make_corpus(1500, seed=21)
        result = curate_manual(
            skill,
            corpus,
            [r"\bwould\b"],
            self._oracle_store(),
            shared_encoder,
            state_path=tmp_path / "state.json",
            train_config=FAST,
        )
        assert result.status == "completed"
        assert result.iterations <= 5
        assert result.precision_history[-1] >= 0.80
        assert result.training_set.provenance == "manual"
        assert len(result.training_set.positives) >= 50

    def test_zero_match_regex_suspends_for_new_regex(self, shared_encoder, tmp_path):
        skill = pseudo_skill_repository().get(SKILL_WOULD)
        with pytest.raises(CurationSuspended, match="new expressions"):
            curate_manual(
                skill,
                make_corpus(100, seed=2),
                [r"zzzznomatch"],
                self._oracle_store(),
                shared_encoder,
                state_path=tmp_path / "state.json",
            )

    def test_exhausted_store_suspends_with_state_file(self, shared_encoder, tmp_path):
        skill = pseudo_skill_repository().get(SKILL_WOULD)
        state_path = tmp_path / "state.json"
        with pytest.raises(CurationSuspended, match="exhausted") as exc:
            curate_manual(
                skill,
                make_corpus(1500, seed=21),
                [r"\bwould\b"],
                self._oracle_store(budget=10),
                shared_encoder,
                state_path=state_path,
            )
        assert exc.value.state_path == str(state_path)
        assert state_path.exists()
        assert json.loads(state_path.read_text())["skill_id"] == SKILL_WOULD

    def test_five_non_improving_iterations_flag_stalled(self, shared_encoder, tmp_path):
        skill = pseudo_skill_repository().get(SKILL_WOULD)
        result = curate_manual(
            skill,
            make_corpus(400, seed=5),
            [r"\bwould\b"],
            self._oracle_store(),
            shared_encoder,
            precision_target=1.01,  # unreachable: force the stall path
            state_path=tmp_path / "state.json",
            train_config=FAST,
        )
        assert result.status == "stalled"
        non_improving = 0
        best = 0.0
        for p in result.precision_history:
            if p > best + 1e-9:
                best = p
                non_improving = 0
            else:
                non_improving += 1
        assert non_improving == 5


class TestCurateAutomatized:
    def test_oracle_stub_equals_manual_curation(self, shared_encoder, tmp_path):
        skill = pseudo_skill_repository().get(SKILL_WOULD)
        corpus = make_corpus(1500, seed=21)

        def llm_reply(messages):
            content = messages[-1]["content"]
            if "regular expression" in content:
                return r"\bwould\b"
            sentence = content.split("Sentence:", 1)[1].strip()
            return "yes" if PSEUDO_SKILL_REGEXES[SKILL_WOULD].search(sentence) else "no"

        auto = curate_automatized(
            skill,
            StubChatClient(reply_fn=llm_reply),
            corpus,
            shared_encoder,
            state_path=tmp_path / "auto.json",
            train_config=FAST,
        )
        manual = curate_manual(
            skill,
            corpus,
            [r"\bwould\b"],
            CallbackAnnotationStore(
                lambda s, sid: bool(PSEUDO_SKILL_REGEXES[sid].search(s)), annotator="oracle"
            ),
            shared_encoder,
            state_path=tmp_path / "manual.json",
            train_config=FAST,
        )
        assert auto.training_set.positives == manual.training_set.positives
        assert auto.training_set.negatives == manual.training_set.negatives
        assert auto.training_set.provenance == "automatized"
        assert auto.status == manual.status

    def test_invalid_regex_retried_with_warning(self, shared_encoder, tmp_path, caplog):
        skill = pseudo_skill_repository().get(SKILL_WOULD)
        replies = {"count": 0}

        def llm_reply(messages):
            content = messages[-1]["content"]
            if "regular expression" in content:
                replies["count"] += 1
                return "[invalid(" if replies["count"] == 1 else r"\bwould\b"
            sentence = content.split("Sentence:", 1)[1].strip()
            return "yes" if PSEUDO_SKILL_REGEXES[SKILL_WOULD].search(sentence) else "no"

        with caplog.at_level(logging.WARNING):
            result = curate_automatized(
                skill,
                StubChatClient(reply_fn=llm_reply),
                make_corpus(400, seed=3),
                shared_encoder,
                state_path=tmp_path / "auto.json",
                train_config=FAST,
            )
        assert result.regex_retries == 1
        assert any("invalid regex" in r.message for r in caplog.records)


class TestEvaluateTestPrecision:
    def test_ratio_of_18_true_out_of_20(self, oracle_bundle, shared_encoder, oracle_corpus):
        detector = oracle_bundle.detectors[SKILL_WOULD]
        answers = iter([True] * 18 + [False] * 2)
        store = CallbackAnnotationStore(lambda s, sid: next(answers), annotator="scripted")
        result = evaluate_test_precision(
            detector, shared_encoder, oracle_corpus["test"], store, sample=20, seed=1
        )
        assert result.n_sampled == 20
        assert result.precision == pytest.approx(0.90)
        assert detector.metrics.test_precision == pytest.approx(0.90)

    def test_no_detections_flags_no_support(self, shared_encoder):
        detector = DetectorModel(
            99, DetectionHead.zeros(shared_encoder.dim), shared_encoder.encoder_id
        )
        store = CallbackAnnotationStore(lambda s, sid: True)
        result = evaluate_test_precision(
            detector, shared_encoder, ["a few sentences", "to scan through"], store
        )
        assert result.flag == "no-support"
        assert result.precision is None

    def test_precision_close_to_oracle_sweep(self, oracle_bundle, shared_encoder):
        corpus = make_corpus(400, seed=77)
        detector = oracle_bundle.detectors[SKILL_SUPERLATIVE]
        rx = PSEUDO_SKILL_REGEXES[SKILL_SUPERLATIVE]
        store = CallbackAnnotationStore(lambda s, sid: bool(rx.search(s)), annotator="oracle")
        result = evaluate_test_precision(detector, shared_encoder, corpus, store, sample=20, seed=3)
        detected = [s for s in corpus if detect(s, detector, shared_encoder)]
        full_precision = sum(bool(rx.search(s)) for s in detected) / len(detected)
        assert result.precision == pytest.approx(full_precision, abs=0.05)


class TestAnnotationStores:
    def test_jsonl_store_persists_and_reloads(self, tmp_path):
        path = tmp_path / "annotations.jsonl"
        store = JsonlAnnotationStore(path, answer=lambda s, sid: "would" in s, annotator="h1")
        assert store.request_label("I would go.", 1) is True
        assert store.request_label("I went.", 1) is False
        reloaded = JsonlAnnotationStore(path, annotator="h1")
        assert reloaded.request_label("I would go.", 1) is True
        assert len(reloaded.records()) == 2
        assert reloaded.request_label("brand new sentence", 1) is None

    def test_one_label_per_sentence_skill_annotator(self, tmp_path):
        path = tmp_path / "annotations.jsonl"
        calls = {"n": 0}

        def answer(s, sid):
            calls["n"] += 1
            return True

        store = JsonlAnnotationStore(path, answer=answer)
        store.request_label("same", 1)
        store.request_label("same", 1)
        assert calls["n"] == 1
        assert len(path.read_text().strip().splitlines()) == 1
