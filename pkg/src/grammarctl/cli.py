"""Batch command-line entry points for every pipeline stage.

Every command is re-runnable: with the same inputs, config, and --seed it
produces byte-identical primary outputs. Timestamps and durations live in a
run_meta.json sidecar, never in primary artifacts. Artifacts land under
<output-dir>/<run-id>/, with the run id derived from the command and its
arguments unless given explicitly.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import functools
import hashlib
import json
import sys
import time
from pathlib import Path

import click

click.UsageError.exit_code = 1  # usage/validation errors exit 1, runtime failures 2

from . import corpus as corpus_mod
from .analysis import (
    count_adjacency,
    render_intervention_grid,
    run_intervention,
    simulate_learner_turn,
    test_all_pairs,
    write_intervention_csv,
    write_pairs_csv,
)
from .config import Config
from .detector import (
    CallbackAnnotationStore,
    CurationSuspended,
    DetectorBundle,
    JsonlAnnotationStore,
    SkillTrainingSet,
    TrainConfig,
    TrainingDataError,
    curate_automatized,
    curate_manual,
    curate_synthetic,
    evaluate_test_precision,
    train_detector,
)
from .egp import ConstraintSet, Level, SkillFileError, SkillValidationError, load_repository, save_repository
from .encoder import get_encoder
from .evaluation import (
    build_task1_suite,
    build_task2_suite,
    evaluate_task1,
    evaluate_task2,
    render_report_table,
    write_per_skill_csv,
)
from .gateway import (
    HttpChatClient,
    LocalChatClient,
    StubChatClient,
    TinyCausalLM,
    WordVocab,
    load_language_model,
    save_language_model,
    train_language_model,
)
from .records import Strategy, load_records, save_records
from .strategies import (
    DecodingParams,
    FinetuneConfig,
    build_finetune_dataset,
    finetune,
    generate_decode,
    generate_hybrid,
    generate_prompted,
    load_discriminators,
    load_finetune_dataset,
    save_discriminators,
    save_finetune_dataset,
    train_future_discriminator,
)

VALIDATION_ERRORS = (
    click.UsageError,
    SkillFileError,
    SkillValidationError,
    TrainingDataError,
    corpus_mod.IngestError,
    corpus_mod.SamplingError,
    FileNotFoundError,
    ValueError,
    KeyError,
)


class RunContext:
    def __init__(self, config: Config, seed: int, output_dir: Path, run_id: str | None):
        self.config = config
        self.seed = seed
        self.output_dir = output_dir
        self._run_id = run_id
        self._started = time.time()

    def run_dir(self, command: str, args: dict) -> Path:
        if self._run_id:
            run_id = self._run_id
        else:
            digest = hashlib.sha256(
                json.dumps({"command": command, "args": args, "seed": self.seed}, sort_keys=True).encode()
            ).hexdigest()[:12]
            run_id = f"{command.replace(' ', '-')}-{digest}"
        path = self.output_dir / run_id
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_meta(self, run_dir: Path, command: str, args: dict, outputs: list[str]) -> None:
        meta = {
            "command": command,
            "args": args,
            "seed": self.seed,
            "outputs": outputs,
            "started_at": self._started,
            "finished_at": time.time(),
        }
        (run_dir / "run_meta.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except VALIDATION_ERRORS as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        except CurationSuspended as exc:
            click.echo(f"suspended: {exc} (state: {exc.state_path})", err=True)
            sys.exit(2)
        except Exception as exc:  # runtime failure
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(2)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON config file; flags override config values.")
@click.option("--seed", type=int, default=None, help="Seed for all sampling in this run.")
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--run-id", default=None, help="Explicit run directory name.")
@click.pass_context
def main(ctx, config_path, seed, output_dir, run_id):
    """Grammar-skill controlled dialogue generation toolkit."""
    config = Config.load(config_path)
    ctx.obj = RunContext(
        config=config,
        seed=seed if seed is not None else int(config.get("run", "seed", 0)),
        output_dir=Path(output_dir or config.get("run", "output_dir", "runs")),
        run_id=run_id,
    )


def _load_repo(ctx: RunContext, skill_file: str | None):
    path = skill_file or ctx.config.get("egp", "skill_file")
    if not path:
        raise click.UsageError("a skill file is required (--skill-file or config egp.skill_file)")
    return load_repository(path)


def _load_bundle(ctx: RunContext, detectors: str | None) -> DetectorBundle:
    path = detectors or ctx.config.get("detector", "bundle_dir")
    if not path:
        raise click.UsageError("a detector bundle is required (--detectors or config detector.bundle_dir)")
    return DetectorBundle.load(path)


def _chat_client(ctx: RunContext, stub_reply: str | None, lm_dir: str | None = None):
    if stub_reply is not None:
        return StubChatClient(default=stub_reply)
    if lm_dir:
        return LocalChatClient(load_language_model(lm_dir))
    base_url = ctx.config.get("gateway", "chat_base_url")
    model = ctx.config.get("gateway", "chat_model")
    if base_url and model:
        return HttpChatClient(base_url, model, api_key_env=ctx.config.get("gateway", "api_key_env"))
    raise click.UsageError(
        "no chat model configured: set gateway.chat_base_url/chat_model, or use --stub-reply"
    )


# ---------------------------------------------------------------------------
# egp
# ---------------------------------------------------------------------------


@main.group()
def egp():
    """Skill repository commands."""


@egp.command("import")
@click.argument("skill_file", type=click.Path(exists=True))
@click.pass_obj
@handle_errors
def egp_import(ctx: RunContext, skill_file):
    """Validate a skill file and write a normalized copy plus a summary."""
    repo = load_repository(skill_file)
    run_dir = ctx.run_dir("egp-import", {"skill_file": str(skill_file)})
    normalized = run_dir / "skills.tsv"
    save_repository(repo, normalized)
    levels: dict[str, int] = {}
    for skill in repo:
        levels[skill.level.name] = levels.get(skill.level.name, 0) + 1
    summary = {
        "skills": len(repo),
        "subcategories": len(repo.subcategories()),
        "levels": dict(sorted(levels.items())),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ctx.write_meta(run_dir, "egp import", {"skill_file": str(skill_file)}, ["skills.tsv", "summary.json"])
    click.echo(f"imported {summary['skills']} skills in {summary['subcategories']} subcategories")
    click.echo(f"artifacts: {run_dir}")


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@main.group()
def corpus():
    """Dialogue corpus commands."""


@corpus.command("ingest")
@click.option("--source", required=True, type=click.Choice(sorted(corpus_mod.ADAPTERS)))
@click.option("--path", "path_", required=True, type=click.Path(exists=True))
@click.pass_obj
@handle_errors
def corpus_ingest(ctx: RunContext, source, path_):
    """Normalize a dataset file into the JSON-lines interchange format."""
    dialogues, stats = corpus_mod.ingest(source, path_)
    run_dir = ctx.run_dir("corpus-ingest", {"source": source, "path": str(path_)})
    out = run_dir / "corpus.jsonl"
    corpus_mod.save_jsonl(dialogues, out)
    summary = {
        "source": source,
        "dialogues": stats.dialogue_count,
        "skipped": stats.skipped,
        "mean_turns": round(stats.mean_turns, 4),
        "mean_words_per_turn": round(stats.mean_words_per_turn, 4),
    }
    (run_dir / "stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    ctx.write_meta(run_dir, "corpus ingest", summary, ["corpus.jsonl", "stats.json"])
    click.echo(
        f"{stats.dialogue_count} dialogues ({stats.skipped} skipped), "
        f"mean {stats.mean_turns:.1f} turns, {stats.mean_words_per_turn:.1f} words/turn"
    )
    click.echo(f"artifacts: {run_dir}")


@corpus.command("label")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.pass_obj
@handle_errors
def corpus_label(ctx: RunContext, corpus_path, detectors):
    """Run all deployable detectors over every turn."""
    dialogues = corpus_mod.load_jsonl(corpus_path)
    bundle = _load_bundle(ctx, detectors)
    labeled = corpus_mod.label_corpus(dialogues, bundle)
    run_dir = ctx.run_dir("corpus-label", {"corpus": str(corpus_path)})
    out = run_dir / "labeled.jsonl"
    corpus_mod.save_jsonl(labeled, out)
    ctx.write_meta(run_dir, "corpus label", {"corpus": str(corpus_path)}, ["labeled.jsonl"])
    click.echo(f"labeled {len(labeled)} dialogues with {len(bundle.deployable())} detectors")
    click.echo(f"artifacts: {run_dir}")


@corpus.command("stats")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@handle_errors
def corpus_stats(corpus_path):
    """Descriptive statistics of a normalized corpus."""
    dialogues = corpus_mod.load_jsonl(corpus_path)
    by_source: dict[str, list] = {}
    for d in dialogues:
        by_source.setdefault(d.source, []).append(d)
    click.echo(f"{'source':>20}  {'dialogs':>8}  {'turns':>6}  {'words':>6}")
    for source, group in sorted(by_source.items()):
        turns = [len(d.turns) for d in group]
        words = [len(t.text.split()) for d in group for t in d.turns]
        click.echo(
            f"{source:>20}  {len(group):>8}  {sum(turns) / len(turns):>6.1f}  "
            f"{sum(words) / len(words):>6.1f}"
        )


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------


def _load_training_set(path: Path, skill_id: int) -> SkillTrainingSet:
    positives, negatives = [], []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            (positives if record["label"] else negatives).append(record["sentence"])
    return SkillTrainingSet(
        skill_id=skill_id,
        positives=tuple(dict.fromkeys(positives)),
        negatives=tuple(dict.fromkeys(negatives)),
        provenance="manual",
    )


@main.group()
def detector():
    """Grammar detector commands."""


@detector.command("train")
@click.option("--skill-id", required=True, type=int)
@click.option("--data", required=True, type=click.Path(exists=True),
              help="JSONL of {sentence, label} rows.")
@click.option("--encoder", "encoder_id", default="hashwin-256-v1")
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(),
              help="Detector bundle directory to create or extend.")
@click.option("--folds", type=int, default=5)
@click.pass_obj
@handle_errors
def detector_train(ctx: RunContext, skill_id, data, encoder_id, bundle_dir, folds):
    """Train one skill detector with k-fold validation."""
    encoder = get_encoder(encoder_id)
    training_set = _load_training_set(Path(data), skill_id)
    model = train_detector(
        training_set, encoder, folds=folds, config=TrainConfig(seed=ctx.seed)
    )
    bundle_path = Path(bundle_dir)
    if (bundle_path / "manifest.json").exists():
        bundle = DetectorBundle.load(bundle_path)
    else:
        bundle = DetectorBundle(encoder)
    bundle.add(model)
    bundle.save(bundle_path)
    click.echo(
        f"skill {skill_id}: validation precision "
        f"{model.metrics.validation_precision:.3f}, recall {model.metrics.validation_recall:.3f}"
    )


@detector.command("curate")
@click.option("--strategy", required=True, type=click.Choice(["synthetic", "manual", "automatized"]))
@click.option("--skill-file", type=click.Path(exists=True), default=None)
@click.option("--skill-id", required=True, type=int)
@click.option("--corpus", "corpus_path", type=click.Path(exists=True), default=None,
              help="Normalized corpus supplying candidate sentences (manual/automatized).")
@click.option("--regex", "regexes", multiple=True, help="Candidate regex (manual).")
@click.option("--annotations", type=click.Path(), default=None,
              help="JSONL annotation store; pre-recorded labels answer requests.")
@click.option("--stub-reply", default=None, help="Offline stub reply for LLM-backed strategies.")
@click.pass_obj
@handle_errors
def detector_curate(ctx: RunContext, strategy, skill_file, skill_id, corpus_path, regexes,
                    annotations, stub_reply):
    """Build a training set with one of the three curation strategies."""
    repo = _load_repo(ctx, skill_file)
    skill = repo.get(skill_id)
    run_dir = ctx.run_dir("detector-curate", {"strategy": strategy, "skill_id": skill_id})
    out = run_dir / "training_set.jsonl"

    if strategy == "synthetic":
        client = _chat_client(ctx, stub_reply)
        training_set = curate_synthetic(skill, client, resume_path=run_dir / "resume.json")
        status = "completed"
    else:
        if not corpus_path:
            raise click.UsageError("--corpus is required for manual/automatized curation")
        sentences = [
            sentence
            for d in corpus_mod.load_jsonl(corpus_path)
            for t in d.turns
            for sentence in corpus_mod.split_sentences(t.text)
        ]
        encoder = get_encoder("hashwin-256-v1")
        if strategy == "manual":
            if not regexes:
                raise click.UsageError("--regex is required for manual curation")
            if not annotations:
                raise click.UsageError("--annotations is required for manual curation")
            store = JsonlAnnotationStore(annotations)
            result = curate_manual(
                skill, sentences, list(regexes), store, encoder,
                state_path=run_dir / "state.json",
            )
        else:
            client = _chat_client(ctx, stub_reply)
            result = curate_automatized(
                skill, client, sentences, encoder, state_path=run_dir / "state.json"
            )
        training_set = result.training_set
        status = result.status
    with out.open("w", encoding="utf-8") as fh:
        for sentence in training_set.positives:
            fh.write(json.dumps({"sentence": sentence, "label": True}) + "\n")
        for sentence in training_set.negatives:
            fh.write(json.dumps({"sentence": sentence, "label": False}) + "\n")
    ctx.write_meta(run_dir, "detector curate", {"strategy": strategy, "skill_id": skill_id},
                   ["training_set.jsonl"])
    click.echo(
        f"{status}: {len(training_set.positives)} positives, "
        f"{len(training_set.negatives)} negatives ({training_set.provenance})"
    )
    click.echo(f"artifacts: {run_dir}")


@detector.command("eval")
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.option("--skill-id", required=True, type=int)
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--annotations", type=click.Path(), required=True)
@click.option("--sample", type=int, default=20)
@click.pass_obj
@handle_errors
def detector_eval(ctx: RunContext, detectors, skill_id, corpus_path, annotations, sample):
    """Estimate test precision on annotated detections from a test corpus."""
    bundle = _load_bundle(ctx, detectors)
    if skill_id not in bundle.detectors:
        raise click.UsageError(f"skill {skill_id} not in bundle")
    sentences = [
        sentence
        for d in corpus_mod.load_jsonl(corpus_path)
        for t in d.turns
        for sentence in corpus_mod.split_sentences(t.text)
    ]
    store = JsonlAnnotationStore(annotations)
    result = evaluate_test_precision(
        bundle.detectors[skill_id], bundle.encoder, sentences, store,
        sample=sample, seed=ctx.seed,
    )
    run_dir = ctx.run_dir("detector-eval", {"skill_id": skill_id, "corpus": str(corpus_path)})
    payload = {
        "skill_id": skill_id,
        "precision": result.precision,
        "n_sampled": result.n_sampled,
        "n_true": result.n_true,
        "flag": result.flag,
    }
    (run_dir / "test_precision.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    ctx.write_meta(run_dir, "detector eval", {"skill_id": skill_id}, ["test_precision.json"])
    if result.flag:
        click.echo(f"skill {skill_id}: flag={result.flag}")
    else:
        click.echo(f"skill {skill_id}: test precision {result.precision:.3f} on {result.n_sampled} samples")
    click.echo(f"artifacts: {run_dir}")


# ---------------------------------------------------------------------------
# model (local language model lifecycle)
# ---------------------------------------------------------------------------


@main.group()
def model():
    """Local language model commands."""


@model.command("pretrain")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", type=int, default=3)
@click.option("--dim", type=int, default=128)
@click.option("--max-context", type=int, default=384)
@click.pass_obj
@handle_errors
def model_pretrain(ctx: RunContext, corpus_path, out, epochs, dim, max_context):
    """Train a small local model on a normalized corpus."""
    dialogues = corpus_mod.load_jsonl(corpus_path)
    texts = [t.text for d in dialogues for t in d.turns]
    vocab = WordVocab.fit(texts)
    lm = TinyCausalLM(vocab, dim=dim, max_context=max_context, seed=ctx.seed)
    loss = train_language_model(lm, texts, epochs=epochs, seed=ctx.seed)
    save_language_model(lm, out)
    click.echo(f"pretrained on {len(texts)} turns, final loss {loss:.3f}; saved to {out}")


@model.command("finetune")
@click.option("--lm", "lm_dir", required=True, type=click.Path(exists=True))
@click.option("--dataset", required=True, type=click.Path(exists=True))
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--max-steps", type=int, default=None)
@click.pass_obj
@handle_errors
def model_finetune(ctx: RunContext, lm_dir, dataset, detectors, out, max_steps):
    """Adapt a local model on a fine-tune dataset with low-rank updates."""
    lm = load_language_model(lm_dir)
    examples = load_finetune_dataset(dataset)
    bundle = _load_bundle(ctx, detectors)
    section = ctx.config.section("finetune")
    config = FinetuneConfig(
        learning_rate=float(section["learning_rate"]),
        lora_r=int(section["lora_r"]),
        lora_alpha=float(section["lora_alpha"]),
        lora_dropout=float(section["lora_dropout"]),
        eval_every=int(section["eval_every"]),
        max_steps=int(max_steps if max_steps is not None else section["max_steps"]),
        seed=ctx.seed,
    )
    result = finetune(lm, examples, bundle, config)
    save_language_model(result.lm, out)
    click.echo(
        f"fine-tuned {config.max_steps} steps; best checkpoint at step {result.best_step} "
        f"(validation satisfaction {result.best_satisfaction:.3f}); saved to {out}"
    )


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@main.group()
def dataset():
    """Fine-tune dataset commands."""


@dataset.command("build-sft")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True),
              help="Labeled normalized corpus.")
@click.option("--skill-file", type=click.Path(exists=True), default=None)
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.option("--cap", type=int, default=500)
@click.pass_obj
@handle_errors
def dataset_build_sft(ctx: RunContext, corpus_path, skill_file, detectors, cap):
    """Emit prompt/completion demonstrations from a labeled corpus."""
    repo = _load_repo(ctx, skill_file)
    bundle = _load_bundle(ctx, detectors)
    dialogues = corpus_mod.load_jsonl(corpus_path)
    examples = build_finetune_dataset(dialogues, repo, bundle, cap=cap)
    run_dir = ctx.run_dir("dataset-build-sft", {"corpus": str(corpus_path), "cap": cap})
    out = run_dir / "sft.jsonl"
    save_finetune_dataset(examples, out)
    counts: dict[int, int] = {}
    for example in examples:
        for sid in example.skill_ids:
            counts[sid] = counts.get(sid, 0) + 1
    (run_dir / "per_skill_counts.json").write_text(
        json.dumps({str(k): v for k, v in sorted(counts.items())}, indent=2) + "\n",
        encoding="utf-8",
    )
    ctx.write_meta(run_dir, "dataset build-sft", {"cap": cap}, ["sft.jsonl", "per_skill_counts.json"])
    click.echo(f"{len(examples)} demonstrations across {len(counts)} skills (cap {cap})")
    click.echo(f"artifacts: {run_dir}")


# ---------------------------------------------------------------------------
# generate / eval
# ---------------------------------------------------------------------------


def _build_suite(ctx, task, corpus_path, repo, bundle, n_snippets):
    dialogues = corpus_mod.load_jsonl(corpus_path)
    eligible = sorted(bundle.deployable()) if bundle else None
    if task == "task1":
        return build_task1_suite(
            dialogues, repo, seed=ctx.seed, n_snippets=n_snippets,
            sizes=_feasible_sizes(repo, eligible), eligible_skills=eligible,
        )
    return build_task2_suite(
        dialogues, repo, seed=ctx.seed, n_snippets=n_snippets, eligible_skills=eligible
    )


def _feasible_sizes(repo, eligible):
    groups: dict[str, int] = {}
    for skill in repo:
        if eligible is not None and skill.skill_id not in eligible:
            continue
        groups[skill.subcategory.lower()] = groups.get(skill.subcategory.lower(), 0) + 1
    n_single = len(groups)
    n_double = sum(1 for v in groups.values() if v >= 2)
    sizes = []
    for size, needs in ((1, (1, 1)), (2, (2, 1)), (3, (3, 1)), (4, (2, 2)), (6, (3, 2))):
        cats, per = needs
        pool = n_double if per == 2 else n_single
        if pool >= cats or (size == 2 and n_double >= 1):
            sizes.append(size)
    return tuple(sizes)


@main.command("generate")
@click.option("--strategy", required=True, type=click.Choice(["prompt", "decode", "finetune", "hybrid"]))
@click.option("--task", type=click.Choice(["task1", "task2"]), default="task1")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True),
              help="Labeled normalized corpus for snippets.")
@click.option("--skill-file", type=click.Path(exists=True), default=None)
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.option("--n-snippets", type=int, default=20)
@click.option("--lm", "lm_dir", type=click.Path(exists=True), default=None,
              help="Local model directory (decode/finetune/hybrid, or prompt without remote).")
@click.option("--discriminators", "disc_dir", type=click.Path(exists=True), default=None)
@click.option("--stub-reply", default=None, help="Offline stub chat reply (prompt strategy).")
@click.pass_obj
@handle_errors
def generate(ctx: RunContext, strategy, task, corpus_path, skill_file, detectors, n_snippets,
             lm_dir, disc_dir, stub_reply):
    """Generate responses for a sampled constraint suite."""
    repo = _load_repo(ctx, skill_file)
    bundle = _load_bundle(ctx, detectors)
    suite = _build_suite(ctx, task, corpus_path, repo, bundle, n_snippets)
    decoding = ctx.config.section("decoding")
    params = DecodingParams(
        alpha=float(decoding["alpha"]),
        eta=float(decoding["eta"]),
        top_k=int(decoding["top_k"]),
        retire_satisfied=bool(decoding["retire_satisfied"]),
        max_tokens=int(decoding["max_tokens"]),
    )

    records = []
    if strategy == "prompt":
        client = _chat_client(ctx, stub_reply, lm_dir)
        strat = Strategy.PROMPT_LOCAL if (lm_dir and stub_reply is None) else Strategy.PROMPT_REMOTE
        for case in suite:
            records.append(
                generate_prompted(client, case.snippet, case.constraints, repo, bundle, strategy=strat)
            )
    elif strategy == "finetune":
        if not lm_dir:
            raise click.UsageError("--lm is required for finetune")
        client = LocalChatClient(load_language_model(lm_dir))
        for case in suite:
            records.append(
                generate_prompted(client, case.snippet, case.constraints, repo, bundle,
                                  strategy=Strategy.FINETUNE)
            )
    else:
        if not lm_dir or not disc_dir:
            raise click.UsageError(f"--lm and --discriminators are required for {strategy}")
        lm = load_language_model(lm_dir)
        discriminators = load_discriminators(disc_dir)
        generate_fn = generate_hybrid if strategy == "hybrid" else generate_decode
        for case in suite:
            records.append(
                generate_fn(lm, case.snippet, case.constraints, repo, params,
                            discriminators, bundle.encoder, bundle)
            )
    run_dir = ctx.run_dir("generate", {"strategy": strategy, "task": task, "n": n_snippets})
    out = run_dir / "records.jsonl"
    save_records(records, out)
    ctx.write_meta(run_dir, "generate", {"strategy": strategy, "task": task}, ["records.jsonl"])
    click.echo(f"{len(records)} records written")
    click.echo(f"artifacts: {run_dir}")


@main.group("eval")
def eval_group():
    """Evaluation commands."""


def _eval_common(ctx, records_path, skill_file, detectors, task):
    repo = _load_repo(ctx, skill_file)
    bundle = _load_bundle(ctx, detectors) if detectors or ctx.config.get("detector", "bundle_dir") else None
    records = load_records(records_path)
    if task == "task1":
        report = evaluate_task1(records, bundle)
    else:
        report = evaluate_task2(records, repo, bundle)
    run_dir = ctx.run_dir(f"eval-{task}", {"records": str(records_path)})
    (run_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    table = render_report_table(report)
    (run_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    write_per_skill_csv(report, repo, run_dir / "per_skill.csv")
    ctx.write_meta(run_dir, f"eval {task}", {"records": str(records_path)},
                   ["report.json", "report.txt", "per_skill.csv"])
    click.echo(table)
    click.echo(f"artifacts: {run_dir}")


@eval_group.command("task1")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--skill-file", type=click.Path(exists=True), default=None)
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.pass_obj
@handle_errors
def eval_task1(ctx: RunContext, records_path, skill_file, detectors):
    """Aggregate explicit-constraint records into a report."""
    _eval_common(ctx, records_path, skill_file, detectors, "task1")


@eval_group.command("task2")
@click.option("--records", "records_path", required=True, type=click.Path(exists=True))
@click.option("--skill-file", type=click.Path(exists=True), default=None)
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.pass_obj
@handle_errors
def eval_task2(ctx: RunContext, records_path, skill_file, detectors):
    """Aggregate categorical-constraint records into a report."""
    _eval_common(ctx, records_path, skill_file, detectors, "task2")


# ---------------------------------------------------------------------------
# cooccur / simulate
# ---------------------------------------------------------------------------


@main.group()
def cooccur():
    """Skill co-occurrence analysis."""


@cooccur.command("run")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True),
              help="Labeled normalized corpus.")
@click.option("--alpha", type=float, default=0.05)
@click.pass_obj
@handle_errors
def cooccur_run(ctx: RunContext, corpus_path, alpha):
    """Count adjacency pairs, Fisher-test them, and write the summary."""
    dialogues = corpus_mod.load_jsonl(corpus_path)
    pairs = count_adjacency(dialogues)
    summary = test_all_pairs(pairs, alpha=alpha)
    run_dir = ctx.run_dir("cooccur-run", {"corpus": str(corpus_path), "alpha": alpha})
    write_pairs_csv(pairs, run_dir / "pairs.csv")
    (run_dir / "summary.json").write_text(
        json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    ctx.write_meta(run_dir, "cooccur run", {"alpha": alpha}, ["pairs.csv", "summary.json"])
    click.echo(
        f"{summary.n_tests} tests, {summary.n_significant} significant at "
        f"threshold {summary.bonferroni_threshold:.2e}"
    )
    for pair in pairs:
        if pair.significant:
            click.echo(
                f"  {pair.g_pre} -> {pair.g_post}: p={pair.p_value:.3e} OR={pair.odds_ratio:.2f}"
            )
    click.echo(f"artifacts: {run_dir}")


@main.group()
def simulate():
    """Learner simulation commands."""


@simulate.command("intervention")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--skill-file", type=click.Path(exists=True), default=None)
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.option("--pairs", "pairs_csv", required=True, type=click.Path(exists=True),
              help="pairs.csv from `cooccur run`; significant rows are simulated.")
@click.option("--n", type=int, default=100)
@click.option("--levels", default="unconditional",
              help="Comma-separated CEFR levels and/or 'unconditional'.")
@click.option("--stub-reply", default=None, help="Offline stub bot reply.")
@click.option("--stub-learner-reply", default=None, help="Offline stub learner reply.")
@click.option("--lm", "lm_dir", type=click.Path(exists=True), default=None)
@click.pass_obj
@handle_errors
def simulate_intervention(ctx: RunContext, corpus_path, skill_file, detectors, pairs_csv, n,
                          levels, stub_reply, stub_learner_reply, lm_dir):
    """Estimate the causal effect of controlled bot grammar on learner output."""
    import csv as csv_mod

    from .analysis import CoOccurrencePair

    repo = _load_repo(ctx, skill_file)
    bundle = _load_bundle(ctx, detectors)
    dialogues = corpus_mod.load_jsonl(corpus_path)

    pairs = []
    with Path(pairs_csv).open("r", encoding="utf-8") as fh:
        for row in csv_mod.DictReader(fh):
            if row.get("significant") == "True":
                pair = CoOccurrencePair(g_pre=int(row["g_pre"]), g_post=int(row["g_post"]))
                pair.significant = True
                pairs.append(pair)
    if not pairs:
        raise click.UsageError("no significant pairs in the input CSV")

    level_values = []
    for token in levels.split(","):
        token = token.strip()
        level_values.append(None if token == "unconditional" else Level.parse(token))

    bot_client = _chat_client(ctx, stub_reply, lm_dir)
    learner_client = _chat_client(ctx, stub_learner_reply, lm_dir)

    def generate_fn(snippet, constraints):
        if constraints is None:
            from .egp import SYSTEM_MESSAGE_TEMPLATE, format_dialog
            from .records import GenerationRecord
            messages = [
                {"role": "system",
                 "content": SYSTEM_MESSAGE_TEMPLATE.format(next_speaker=snippet.next_speaker)},
                {"role": "user",
                 "content": (
                     f"Given the dialog, write a possible next turn of {snippet.next_speaker}:\n"
                     + format_dialog(snippet.context_pairs())
                 )},
            ]
            started = time.perf_counter()
            text = bot_client.chat_complete(messages)
            return GenerationRecord(
                snippet=snippet,
                constraints=ConstraintSet.explicit([pairs[0].g_pre]),
                strategy=Strategy.PROMPT_REMOTE,
                response=text,
                detections=frozenset(bundle.detect_all(text)),
                latency_seconds=time.perf_counter() - started,
                word_count=len(text.split()),
            )
        return generate_prompted(bot_client, snippet, constraints, repo, bundle)

    results = run_intervention(
        pairs, dialogues, repo, bundle, generate_fn, learner_client,
        levels=level_values, n=n, seed=ctx.seed,
    )
    run_dir = ctx.run_dir("simulate-intervention", {"pairs": str(pairs_csv), "n": n})
    write_intervention_csv(results, run_dir / "results.csv")
    grid = render_intervention_grid(results)
    (run_dir / "grid.txt").write_text(grid + "\n", encoding="utf-8")
    ctx.write_meta(run_dir, "simulate intervention", {"n": n}, ["results.csv", "grid.txt"])
    click.echo(grid)
    click.echo(f"artifacts: {run_dir}")


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


@main.command("serve")
@click.option("--skill-file", type=click.Path(exists=True), default=None)
@click.option("--detectors", type=click.Path(exists=True), default=None)
@click.option("--lm", "lm_dir", type=click.Path(exists=True), default=None)
@click.option("--discriminators", "disc_dir", type=click.Path(exists=True), default=None)
@click.option("--stub-reply", default=None, help="Serve with a stub generator only.")
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.pass_obj
@handle_errors
def serve(ctx: RunContext, skill_file, detectors, lm_dir, disc_dir, stub_reply, host, port):
    """Run the conversation-practice HTTP service."""
    import uvicorn

    from .service import (
        DecodeGenerator,
        PromptedGenerator,
        ServiceState,
        SessionStore,
        StubGenerator,
        create_app,
    )

    repo = _load_repo(ctx, skill_file)
    bundle = _load_bundle(ctx, detectors)
    generators: dict = {"stub": StubGenerator(default=stub_reply or "Let's keep practicing.")}
    base_url = ctx.config.get("gateway", "chat_base_url")
    if base_url and ctx.config.get("gateway", "chat_model"):
        generators["prompt"] = PromptedGenerator(_chat_client(ctx, None), repo)
    if lm_dir:
        lm = load_language_model(lm_dir)
        generators["prompt_local"] = PromptedGenerator(LocalChatClient(lm), repo)
        if disc_dir:
            decoding = ctx.config.section("decoding")
            generators["decode"] = DecodeGenerator(
                lm, repo, load_discriminators(disc_dir), bundle.encoder, bundle,
                DecodingParams(
                    alpha=float(decoding["alpha"]),
                    eta=float(decoding["eta"]),
                    top_k=int(decoding["top_k"]),
                    retire_satisfied=bool(decoding["retire_satisfied"]),
                    max_tokens=int(decoding["max_tokens"]),
                ),
            )
    state = ServiceState(
        repo=repo,
        bundle=bundle,
        generators=generators,
        store=SessionStore(ctx.config.get("service", "persist_dir", "sessions")),
    )
    app = create_app(state)
    uvicorn.run(
        app,
        host=host or ctx.config.get("service", "host", "127.0.0.1"),
        port=port or int(ctx.config.get("service", "port", 8000)),
    )


# ---------------------------------------------------------------------------
# discriminators (guided decoding support artifacts)
# ---------------------------------------------------------------------------


@detector.command("train-discriminators")
@click.option("--data", required=True, type=click.Path(exists=True),
              help="JSONL of {sentence, label} rows.")
@click.option("--skill-id", required=True, type=int)
@click.option("--encoder", "encoder_id", default="hashwin-256-v1")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
@handle_errors
def detector_train_discriminators(ctx: RunContext, data, skill_id, encoder_id, out):
    """Train a future discriminator (prefix classifier) for guided decoding."""
    encoder = get_encoder(encoder_id)
    training_set = _load_training_set(Path(data), skill_id)
    disc = train_future_discriminator(training_set, encoder, TrainConfig(seed=ctx.seed))
    out_path = Path(out)
    existing = load_discriminators(out_path) if (out_path / "manifest.json").exists() else {}
    existing[skill_id] = disc
    save_discriminators(existing, out_path)
    click.echo(f"discriminator for skill {skill_id} saved to {out}")


if __name__ == "__main__":
    main()
