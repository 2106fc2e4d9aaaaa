"""
Experiment orchestrator.

Drives every command of the pipeline (corpus generation, training,
certification, attacks and the trade-off / ablation sweeps) and owns the
artifact layout of a run directory: each run writes exactly one manifest.json
next to its outputs, and a failed run removes whatever it had written.
"""

import json
import logging
import shutil
import time
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from pydantic import BaseModel, Field

from semantic_smoothing import __version__
from semantic_smoothing.agents.attack_agent import ATTACK_DRAWS, EXHAUSTIVE_CAP, AttackAgent
from semantic_smoothing.agents.certifier_agent import CertifierAgent, write_report, write_summary_csv
from semantic_smoothing.agents.trainer_agent import TrainerAgent, init_model
from semantic_smoothing.config import config, derive_seed
from semantic_smoothing.errors import DataError
from semantic_smoothing.models.schemas import (
    AttackOutcome,
    AttackSummary,
    CertificationRecord,
    CertificationSummary,
    LabeledExample,
    HingeDominanceReport,
    RunManifest,
    SoundnessReport,
    SweepRow,
    SyntheticSpec,
    TrainConfig,
)
from semantic_smoothing.models.state import (
    EmbeddingMatrix,
    ModelCheckpoint,
    SubstitutionTable,
    SyntheticCorpus,
    TrainingResult,
)
from semantic_smoothing.netcore.checkpoint import load_checkpoint, save_checkpoint
from semantic_smoothing.services.corpus import (
    generate_synthetic,
    load_dataset,
    load_embeddings,
    load_substitution_table,
    save_dataset,
    save_embeddings,
    save_substitution_table,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
EMBEDDINGS = "embeddings.txt"
SUBSTITUTIONS = "substitutions.json"
SPLITS = ("train", "test", "intervened")
CHECKPOINT = "checkpoint.json"
PHASE1_CHECKPOINT = "checkpoint-phase1.json"
TRAINING_LOG = "training_log.csv"
CERTIFICATION_REPORT = "certification.jsonl"
CERTIFICATION_SUMMARY = "summary.csv"
SOUNDNESS_REPORT = "soundness.json"
ATTACK_REPORT = "attack.jsonl"
HINGE_BOUND_REPORT = "hinge_bound.json"


class CorpusFiles(BaseModel):
    """A generated corpus as read back from its run directory."""

    model_config = {"arbitrary_types_allowed": True}

    embeddings: EmbeddingMatrix
    table: SubstitutionTable
    splits: dict[str, list[LabeledExample]] = Field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        labels = [example.label for examples in self.splits.values() for example in examples]
        return max(2, max(labels, default=0) + 1)


class CertificationOptions(BaseModel):
    """Sampling budget of a certification run."""

    t1: int = Field(50, ge=1, description="Selection draws")
    t2: int = Field(2000, ge=1, description="Estimation draws")
    alpha: float = Field(0.01, gt=0.0, lt=1.0, description="Failure probability of each certificate")
    limit: int | None = Field(None, ge=0, description="Certify only the first `limit` examples")


class RunRecorder:
    """Collects the outputs of one command so they can be rolled back or listed in the manifest."""

    def __init__(self, command: str, out_dir: Path) -> None:
        self.command = command
        self.out_dir = out_dir
        self.outputs: list[Path] = []
        self.config: dict[str, Any] = {}
        self.seeds: dict[str, int] = {}
        self.inputs: dict[str, str] = {}

    def output(self, name: str) -> Path:
        path = self.out_dir / name
        self.outputs.append(path)
        return path

    def rollback(self, remove_dir: bool) -> None:
        for path in self.outputs:
            path.unlink(missing_ok=True)
        (self.out_dir / MANIFEST).unlink(missing_ok=True)
        if remove_dir and self.out_dir.exists():
            shutil.rmtree(self.out_dir, ignore_errors=True)
        logger.warning("Removed partial outputs of %s in %s", self.command, self.out_dir)


class ExperimentOrchestrator(BaseModel):
    """Runs pipeline commands under one root seed and job count."""

    seed: int = Field(0, ge=0, description="Root seed every component seed derives from")
    jobs: int = Field(1, ge=1, description="Per-example parallelism for certify and attack")
    dry_run: bool = Field(False, description="Validate inputs and configuration without writing anything")

    # Run bookkeeping

    @contextmanager
    def _recording(self, command: str, out_dir: Path | str) -> Iterator[RunRecorder]:
        out_dir = Path(out_dir)
        created = not out_dir.exists()
        recorder = RunRecorder(command, out_dir)
        started_at = datetime.now(timezone.utc)
        started = time.perf_counter()
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            yield recorder
        except BaseException:
            recorder.rollback(remove_dir=created)
            raise
        manifest = RunManifest(
            command=command,
            config=recorder.config,
            seeds={"root": self.seed, **recorder.seeds},
            inputs=recorder.inputs,
            outputs=[path.name for path in recorder.outputs],
            tool_version=__version__,
            started_at=started_at,
            duration_seconds=time.perf_counter() - started,
        )
        (out_dir / MANIFEST).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info("%s finished in %.1fs; outputs in %s", command, manifest.duration_seconds, out_dir)

    @staticmethod
    def _require(path: Path | str, what: str) -> Path:
        path = Path(path)
        if not path.exists():
            raise DataError(f"{what} not found: {path}")
        return path

    def _check_corpus(self, data_dir: Path | str, splits: Sequence[str]) -> Path:
        data_dir = self._require(data_dir, "data directory")
        self._require(data_dir / EMBEDDINGS, "embeddings file")
        self._require(data_dir / SUBSTITUTIONS, "substitution table")
        for split in splits:
            if split not in SPLITS:
                raise DataError(f"unknown split {split!r}; choose one of {', '.join(SPLITS)}")
            self._require(data_dir / f"{split}.tsv", f"{split} split")
        return data_dir

    def load_corpus(self, data_dir: Path | str, splits: Sequence[str]) -> CorpusFiles:
        data_dir = self._check_corpus(data_dir, splits)
        embeddings = load_embeddings(data_dir / EMBEDDINGS)
        table = load_substitution_table(data_dir / SUBSTITUTIONS, vocabulary=embeddings.words)
        loaded = {split: load_dataset(data_dir / f"{split}.tsv", vocabulary=embeddings.words) for split in splits}
        return CorpusFiles(embeddings=embeddings, table=table, splits=loaded)

    # Commands

    def generate_data(self, spec: SyntheticSpec, out_dir: Path | str) -> SyntheticCorpus | None:
        """Generate the synthetic confounded corpus and write its splits, embeddings and table."""
        spec = spec.model_copy(update={"seed": derive_seed(self.seed, "gen-data")})
        if self.dry_run:
            logger.info("Dry run: would generate %d train / %d test examples into %s", spec.num_train, spec.num_test, out_dir)
            return None
        corpus = generate_synthetic(spec)
        with self._recording("gen-data", out_dir) as run:
            run.config = spec.model_dump()
            run.seeds["gen-data"] = spec.seed
            save_dataset(corpus.train, run.output("train.tsv"))
            save_dataset(corpus.test, run.output("test.tsv"))
            save_dataset(corpus.intervened, run.output("intervened.tsv"))
            save_embeddings(corpus.embeddings, run.output(EMBEDDINGS))
            save_substitution_table(corpus.table, run.output(SUBSTITUTIONS))
        return corpus

    def _train(self, corpus: CorpusFiles, train_config: TrainConfig) -> TrainingResult:
        model = init_model(corpus.embeddings, corpus.num_classes, train_config)
        return TrainerAgent(train_config, corpus.table).train(model, corpus.splits["train"])

    def train(self, data_dir: Path | str, train_config: TrainConfig, out_dir: Path | str) -> TrainingResult | None:
        """Train on the train split and write checkpoints and the per-epoch training log."""
        train_config = train_config.model_copy(update={"seed": self.seed})
        if self.dry_run:
            self._check_corpus(data_dir, ["train"])
            logger.info("Dry run: configuration valid, would train into %s", out_dir)
            return None
        corpus = self.load_corpus(data_dir, ["train"])
        with self._recording("train", out_dir) as run:
            run.config = train_config.model_dump()
            run.inputs["data"] = str(data_dir)
            run.seeds.update(
                {tag: derive_seed(self.seed, tag) for tag in ("train-init", "train-noise")}
            )
            result = self._train(corpus, train_config)
            save_checkpoint(result.checkpoint, run.output(CHECKPOINT))
            if result.phase1_checkpoint is not None:
                save_checkpoint(result.phase1_checkpoint, run.output(PHASE1_CHECKPOINT))
            write_summary_csv(result.epochs, run.output(TRAINING_LOG))
            violations = sum(epoch.hinge_violations for epoch in result.epochs)
            if violations:
                logger.warning("%d training batches violated hinge dominance", violations)
        return result

    def _certifier(self, model: ModelCheckpoint, table: SubstitutionTable, options: CertificationOptions) -> CertifierAgent:
        return CertifierAgent(model, table, options.t1, options.t2, options.alpha, seed=self.seed, jobs=self.jobs)

    @staticmethod
    def _limited(examples: list[LabeledExample], limit: int | None) -> list[LabeledExample]:
        return examples if limit is None else examples[:limit]

    def certify(
        self,
        checkpoint_path: Path | str,
        data_dir: Path | str,
        options: CertificationOptions,
        out_dir: Path | str,
        split: str = "test",
        soundness: bool = False,
        soundness_cap: int = EXHAUSTIVE_CAP,
    ) -> tuple[list[CertificationRecord], CertificationSummary] | None:
        """Certify one split with a trained checkpoint; optionally re-check certificates exhaustively."""
        if self.dry_run:
            self._require(checkpoint_path, "checkpoint")
            self._check_corpus(data_dir, [split])
            logger.info("Dry run: would certify %s split with t1=%d t2=%d alpha=%g", split, options.t1, options.t2, options.alpha)
            return None
        model = load_checkpoint(checkpoint_path)
        corpus = self.load_corpus(data_dir, [split])
        dataset = self._limited(corpus.splits[split], options.limit)
        with self._recording("certify", out_dir) as run:
            run.config = {**options.model_dump(), "split": split, "sigma": model.sigma, "soundness": soundness}
            run.inputs.update({"checkpoint": str(checkpoint_path), "data": str(data_dir)})
            run.seeds["certify"] = derive_seed(self.seed, "certify")
            certifier = self._certifier(model, corpus.table, options)
            records, summary = certifier.certify_dataset(dataset)
            write_report(records, summary, run.output(CERTIFICATION_REPORT))
            write_summary_csv([summary], run.output(CERTIFICATION_SUMMARY))
            if soundness:
                report = certifier.soundness_check(records, dataset, cap=soundness_cap)
                self._write_json(report, run.output(SOUNDNESS_REPORT))
        return records, summary

    def soundness(
        self,
        checkpoint_path: Path | str,
        data_dir: Path | str,
        options: CertificationOptions,
        split: str = "test",
        cap: int = EXHAUSTIVE_CAP,
    ) -> SoundnessReport:
        """Certify then exhaustively re-check, without writing a run directory."""
        model = load_checkpoint(checkpoint_path)
        corpus = self.load_corpus(data_dir, [split])
        dataset = self._limited(corpus.splits[split], options.limit)
        certifier = self._certifier(model, corpus.table, options)
        records, _ = certifier.certify_dataset(dataset)
        return certifier.soundness_check(records, dataset, cap=cap)

    def attack(
        self,
        checkpoint_path: Path | str,
        data_dir: Path | str,
        attack: str,
        out_dir: Path | str,
        split: str = "test",
        draws: int = ATTACK_DRAWS,
        limit: int | None = None,
        **options: int,
    ) -> tuple[list[AttackOutcome], AttackSummary] | None:
        """Run one named attack over a split and write the per-example outcomes."""
        if self.dry_run:
            self._require(checkpoint_path, "checkpoint")
            self._check_corpus(data_dir, [split])
            logger.info("Dry run: would run the %s attack on the %s split", attack, split)
            return None
        model = load_checkpoint(checkpoint_path)
        corpus = self.load_corpus(data_dir, [split])
        dataset = self._limited(corpus.splits[split], limit)
        with self._recording("attack", out_dir) as run:
            run.config = {"attack": attack, "split": split, "draws": draws, "limit": limit, **options}
            run.inputs.update({"checkpoint": str(checkpoint_path), "data": str(data_dir)})
            run.seeds.update({tag: derive_seed(self.seed, tag) for tag in ("attack", "attack-scorer")})
            agent = AttackAgent(model, corpus.table, seed=self.seed, draws=draws, jobs=self.jobs)
            outcomes, summary = agent.run(attack, dataset, **options)
            with run.output(ATTACK_REPORT).open("w", encoding="utf-8") as handle:
                for outcome in outcomes:
                    handle.write(outcome.model_dump_json() + "\n")
                handle.write(json.dumps({"summary": summary.model_dump()}) + "\n")
        return outcomes, summary

    def hinge_bound(
        self,
        checkpoint_path: Path | str,
        data_dir: Path | str,
        train_config: TrainConfig,
        out_dir: Path | str,
        split: str = "train",
        high_draws: int = 10_000,
        limit: int | None = 100,
    ) -> HingeDominanceReport | None:
        """Check that gamma * hinge dominates the certification-error indicator on a sample."""
        train_config = train_config.model_copy(update={"seed": self.seed})
        if self.dry_run:
            self._require(checkpoint_path, "checkpoint")
            self._check_corpus(data_dir, [split])
            logger.info("Dry run: would check hinge dominance with %d draws", high_draws)
            return None
        model = load_checkpoint(checkpoint_path)
        corpus = self.load_corpus(data_dir, [split])
        sample = self._limited(corpus.splits[split], limit)
        with self._recording("hinge-bound", out_dir) as run:
            run.config = {"gamma": train_config.gamma, "margin": train_config.margin, "high_draws": high_draws, "split": split}
            run.inputs.update({"checkpoint": str(checkpoint_path), "data": str(data_dir)})
            run.seeds["hinge-bound"] = derive_seed(self.seed, "hinge-bound")
            report = TrainerAgent(train_config, corpus.table).remark3_check(model, sample, high_draws)
            self._write_json(report, run.output(HINGE_BOUND_REPORT))
        return report

    # Experiments

    def _sweep_row(self, experiment: str, parameter: str, value: float, summary: CertificationSummary) -> SweepRow:
        return SweepRow(
            experiment=experiment,
            parameter=parameter,
            value=value,
            t2=summary.t2 or 0,
            alpha=summary.alpha or 0.0,
            clean_accuracy=summary.clean_accuracy,
            certified_accuracy=summary.certified_accuracy,
            abstention_rate=summary.abstention_rate,
        )

    def _training_sweep(
        self,
        experiment: str,
        parameter: str,
        values: Sequence[float],
        data_dir: Path | str,
        train_config: TrainConfig,
        options: CertificationOptions,
        out_dir: Path | str,
    ) -> list[SweepRow] | None:
        """Train one model per parameter value, certify each on the test split, write one CSV row per value."""
        if not values:
            raise DataError(f"{experiment} needs at least one {parameter} value")
        train_config = train_config.model_copy(update={"seed": self.seed})
        configs = [train_config.model_copy(update={parameter: value}) for value in values]
        for candidate in configs:
            TrainConfig.model_validate(candidate.model_dump())
        if self.dry_run:
            self._check_corpus(data_dir, ["train", "test"])
            logger.info("Dry run: would train and certify %d models for %s", len(configs), experiment)
            return None
        corpus = self.load_corpus(data_dir, ["train", "test"])
        test = self._limited(corpus.splits["test"], options.limit)
        rows: list[SweepRow] = []
        with self._recording(experiment, out_dir) as run:
            run.config = {**train_config.model_dump(), **options.model_dump(), parameter: list(values)}
            run.inputs["data"] = str(data_dir)
            for value, candidate in zip(values, configs, strict=True):
                logger.info("%s: training with %s = %g", experiment, parameter, value)
                result = self._train(corpus, candidate)
                _, summary = self._certifier(result.checkpoint, corpus.table, options).certify_dataset(test)
                rows.append(self._sweep_row(experiment, parameter, value, summary))
            write_summary_csv(rows, run.output(f"{experiment.replace('-', '_')}.csv"))
        return rows

    def tradeoff(self, data_dir: Path | str, train_config: TrainConfig, gammas: Sequence[float], options: CertificationOptions, out_dir: Path | str) -> list[SweepRow] | None:
        """Clean versus certified accuracy along a gamma grid."""
        return self._training_sweep("tradeoff", "gamma", gammas, data_dir, train_config, options, out_dir)

    def sigma_sweep(self, data_dir: Path | str, train_config: TrainConfig, sigmas: Sequence[float], options: CertificationOptions, out_dir: Path | str) -> list[SweepRow] | None:
        return self._training_sweep("sigma-sweep", "sigma", sigmas, data_dir, train_config, options, out_dir)

    def margin_sweep(self, data_dir: Path | str, train_config: TrainConfig, margins: Sequence[float], options: CertificationOptions, out_dir: Path | str) -> list[SweepRow] | None:
        return self._training_sweep("margin-sweep", "margin", margins, data_dir, train_config, options, out_dir)

    def alpha_sweep(
        self,
        checkpoint_path: Path | str,
        data_dir: Path | str,
        pairs: Sequence[tuple[int, float]],
        out_dir: Path | str,
        t1: int = 50,
        limit: int | None = None,
    ) -> list[SweepRow] | None:
        """Certify one checkpoint under several (t2, alpha) budgets."""
        if not pairs:
            raise DataError("alpha-sweep needs at least one (t2, alpha) pair")
        budgets = [CertificationOptions(t1=t1, t2=t2, alpha=alpha, limit=limit) for t2, alpha in pairs]
        if self.dry_run:
            self._require(checkpoint_path, "checkpoint")
            self._check_corpus(data_dir, ["test"])
            logger.info("Dry run: would certify under %d (t2, alpha) pairs", len(budgets))
            return None
        model = load_checkpoint(checkpoint_path)
        corpus = self.load_corpus(data_dir, ["test"])
        test = self._limited(corpus.splits["test"], limit)
        rows: list[SweepRow] = []
        with self._recording("alpha-sweep", out_dir) as run:
            run.config = {"t1": t1, "pairs": [list(pair) for pair in pairs], "limit": limit}
            run.inputs.update({"checkpoint": str(checkpoint_path), "data": str(data_dir)})
            for budget in budgets:
                _, summary = self._certifier(model, corpus.table, budget).certify_dataset(test)
                rows.append(self._sweep_row("alpha-sweep", "alpha", budget.alpha, summary))
            write_summary_csv(rows, run.output("alpha_sweep.csv"))
        return rows

    @staticmethod
    def _write_json(model: BaseModel, path: Path) -> None:
        path.write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")


# Global orchestrator instance
_orchestrator_instance: ExperimentOrchestrator | None = None


def get_orchestrator(seed: int | None = None, jobs: int | None = None, dry_run: bool = False) -> ExperimentOrchestrator:
    """Get or create the global orchestrator, rebuilding it when the run settings change."""
    global _orchestrator_instance
    settings = {
        "seed": config.SMOOTHING_SEED if seed is None else seed,
        "jobs": config.SMOOTHING_JOBS if jobs is None else jobs,
        "dry_run": dry_run,
    }
    if _orchestrator_instance is None or _orchestrator_instance.model_dump() != settings:
        _orchestrator_instance = ExperimentOrchestrator(**settings)
    return _orchestrator_instance


def run_pipeline(
    spec: SyntheticSpec,
    train_config: TrainConfig,
    options: CertificationOptions,
    out_dir: Path | str,
    seed: int | None = None,
) -> CertificationSummary:
    """
    Convenience function for gen-data, train and certify in one go.

    Artifacts land in out_dir/data, out_dir/train and out_dir/certify.
    """
    orchestrator = get_orchestrator(seed=seed)
    out_dir = Path(out_dir)
    orchestrator.generate_data(spec, out_dir / "data")
    orchestrator.train(out_dir / "data", train_config, out_dir / "train")
    certified = orchestrator.certify(out_dir / "train" / CHECKPOINT, out_dir / "data", options, out_dir / "certify")
    if certified is None:
        raise DataError("run_pipeline cannot run in dry-run mode")
    return certified[1]
