"""Session-scoped fixtures shared across the suite. The expensive pieces
(detector training on the oracle corpus, language-model pretraining) run once
and are reused by unit, integration, and acceptance tests."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixtures import (  # noqa: E402
    PSEUDO_SKILL_REGEXES,
    SKILL_NEGATION,
    SKILL_SUPERLATIVE,
    SKILL_WOULD,
    make_corpus,
    pseudo_skill_repository,
    regex_training_set,
)
from grammarctl.detector import (  # noqa: E402
    CallbackAnnotationStore,
    DetectorBundle,
    TrainConfig,
    evaluate_test_precision,
    train_detector,
)
from grammarctl.encoder import HashedWindowEncoder  # noqa: E402
from grammarctl.gateway import TinyCausalLM, WordVocab, train_language_model  # noqa: E402

DATA_DIR = Path(__file__).parent / "data"

ORACLE_CORPUS_SIZE = 2000
ORACLE_SEED = 7
PSEUDO_SKILLS = (SKILL_SUPERLATIVE, SKILL_WOULD, SKILL_NEGATION)


@pytest.fixture(scope="session")
def shared_encoder() -> HashedWindowEncoder:
    return HashedWindowEncoder()


@pytest.fixture(scope="session")
def oracle_corpus() -> dict:
    sentences = make_corpus(ORACLE_CORPUS_SIZE, seed=ORACLE_SEED)
    split = int(len(sentences) * 0.8)
    return {"all": sentences, "train": sentences[:split], "test": sentences[split:]}


@pytest.fixture(scope="session")
def fixture_repo():
    return pseudo_skill_repository()


@pytest.fixture(scope="session")
def skills_tsv() -> Path:
    return DATA_DIR / "skills.tsv"


@pytest.fixture(scope="session")
def oracle_bundle(shared_encoder, oracle_corpus) -> DetectorBundle:
    """Detectors for the three regex pseudo-skills, trained on the oracle
    corpus train split and test-evaluated with regex-oracle annotations so
    they count as deployable. Wall-clock training time is recorded for the
    runtime acceptance bound."""
    import time

    started = time.perf_counter()
    bundle = DetectorBundle(shared_encoder)
    for sid in PSEUDO_SKILLS:
        training_set = regex_training_set(sid, oracle_corpus["train"])
        detector = train_detector(training_set, shared_encoder, config=TrainConfig(seed=sid))
        store = CallbackAnnotationStore(
            lambda s, skill_id: bool(PSEUDO_SKILL_REGEXES[skill_id].search(s)),
            annotator="regex-oracle",
        )
        evaluate_test_precision(detector, shared_encoder, oracle_corpus["test"], store, seed=sid)
        bundle.add(detector)
    bundle.training_seconds = time.perf_counter() - started
    return bundle


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" in nodeid and "::" in nodeid:
                lines.append((nodeid.split("::")[-1], label))
    if lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for name, label in sorted(lines):
            terminalreporter.write_line(f"  [{label}] {name}")


@pytest.fixture(scope="session")
def lm_vocab(oracle_corpus, fixture_repo) -> WordVocab:
    from grammarctl.egp import verbalize_explicit

    texts = list(oracle_corpus["all"])
    # make sure template words are in-vocabulary for prompt rendering
    sample_prompt = verbalize_explicit(
        [next(iter(fixture_repo))], "A", [("A", "hello there"), ("B", "hi")]
    )
    texts += [sample_prompt.system, sample_prompt.user]
    return WordVocab.fit(texts)


@pytest.fixture(scope="session")
def tiny_lm(lm_vocab, oracle_corpus) -> TinyCausalLM:
    lm = TinyCausalLM(lm_vocab, max_context=384, seed=11)
    train_language_model(lm, oracle_corpus["train"][:600], epochs=2, seed=11)
    return lm
