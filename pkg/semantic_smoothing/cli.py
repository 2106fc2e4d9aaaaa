#!/usr/bin/env python3
"""
CLI interface for semantic smoothing: generate data, train, certify, attack
and run the trade-off and ablation sweeps.
"""
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import typer
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from semantic_smoothing.agents.attack_agent import ATTACK_DRAWS, ATTACKS, EXHAUSTIVE_CAP
from semantic_smoothing.config import config, configure_logging, load_config_file
from semantic_smoothing.errors import ConfigurationError, SmoothingError
from semantic_smoothing.models.schemas import (
    AttackSummary,
    CertificationSummary,
    HingeDominanceReport,
    SweepRow,
    SyntheticSpec,
    TrainConfig,
)
from semantic_smoothing.orchestrator.experiment_orchestrator import (
    CHECKPOINT,
    CertificationOptions,
    ExperimentOrchestrator,
    get_orchestrator,
)

app = typer.Typer(help="Semantic smoothing - certify text classifiers against word substitutions")
console = Console()

T = TypeVar("T")
M = TypeVar("M", bound=BaseModel)

GLOBAL_KEYS = {"seed", "jobs", "log_level", "out", "dry_run"}
PATH_KEYS = {"data", "checkpoint"}
CERTIFY_KEYS = set(CertificationOptions.model_fields)
ATTACK_KEYS = {"attack", "split", "draws", "trials", "max_passes", "edit_budget", "soundness", "cap", "high_draws"}
SWEEP_KEYS = {"gammas", "sigmas", "margins", "pairs"}
CONFIG_KEYS = (
    GLOBAL_KEYS
    | PATH_KEYS
    | CERTIFY_KEYS
    | ATTACK_KEYS
    | SWEEP_KEYS
    | set(TrainConfig.model_fields)
    | set(SyntheticSpec.model_fields)
)
TRUE_WORDS = {"1", "true", "yes", "on"}


class CliSettings(BaseModel):
    """Options shared by every command, resolved as flag > config file > environment > default."""

    seed: int
    jobs: int
    dry_run: bool
    out: Path | None
    file_values: dict[str, str]


def _fail(error: Exception) -> typer.Exit:
    console.print(Panel(f"[red]{error}[/red]", title="Error", border_style="red"))
    return typer.Exit(1)


def _guard(action: Callable[[], T]) -> T:
    """Run a command body, turning domain errors into a red panel and exit code 1."""
    try:
        return action()
    except SmoothingError as e:
        raise _fail(e) from e


def _settings(ctx: typer.Context) -> CliSettings:
    return ctx.obj


def _overrides(ctx: typer.Context, flags: dict[str, Any]) -> dict[str, Any]:
    """Explicit flags, falling back to config-file values for flags left unset."""
    file_values = _settings(ctx).file_values
    resolved: dict[str, Any] = {}
    for name, value in flags.items():
        if value is not None:
            resolved[name] = value
        elif name in file_values:
            resolved[name] = file_values[name]
    return resolved


def _build(model: type[M], values: dict[str, Any]) -> M:
    try:
        return model.model_validate(values)
    except ValidationError as e:
        error = e.errors()[0]
        field = ".".join(str(part) for part in error["loc"])
        raise ConfigurationError(f"invalid {field}: {error['msg']}") from e


def _path(ctx: typer.Context, name: str, flag: Path | None) -> Path:
    value = _overrides(ctx, {name: flag}).get(name)
    if value is None:
        raise ConfigurationError(f"--{name} is required (as a flag or in the config file)")
    return Path(value)


def _value(ctx: typer.Context, name: str, flag: Any, default: T, cast: Callable[[Any], T]) -> T:
    value = _overrides(ctx, {name: flag}).get(name)
    if value is None:
        return default
    try:
        return cast(value)
    except ValueError as e:
        raise ConfigurationError(f"invalid {name}: {value!r}") from e


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigurationError(f"{name} must be comma-separated numbers, got {text!r}") from e


def _pairs(text: str) -> list[tuple[int, float]]:
    pairs = []
    for part in text.split(","):
        if not part.strip():
            continue
        try:
            t2, alpha = part.split(":")
            pairs.append((int(t2), float(alpha)))
        except ValueError as e:
            raise ConfigurationError(f"pairs must look like '2000:0.001,300:0.05', got {part!r}") from e
    return pairs


def _orchestrator(ctx: typer.Context) -> ExperimentOrchestrator:
    settings = _settings(ctx)
    return get_orchestrator(seed=settings.seed, jobs=settings.jobs, dry_run=settings.dry_run)


def _out_dir(ctx: typer.Context, command: str) -> Path:
    return _settings(ctx).out or config.SMOOTHING_OUTPUT_DIR / command


def _train_config(ctx: typer.Context, **flags: Any) -> TrainConfig:
    names = set(TrainConfig.model_fields) - {"seed"}
    file_flags = {name: None for name in names}
    return _build(TrainConfig, _overrides(ctx, {**file_flags, **flags}))


def _certification_options(ctx: typer.Context, t1: int | None, t2: int | None, alpha: float | None, limit: int | None) -> CertificationOptions:
    return _build(CertificationOptions, _overrides(ctx, {"t1": t1, "t2": t2, "alpha": alpha, "limit": limit}))


def display_certification(summary: CertificationSummary) -> None:
    table = Table(title="Certification Summary")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="white")
    table.add_row("Examples", str(summary.total))
    table.add_row("Certified", str(summary.certified))
    table.add_row("Certified accuracy", f"{summary.certified_accuracy:.4f}")
    table.add_row("Clean accuracy", f"{summary.clean_accuracy:.4f}")
    table.add_row("Abstention rate", f"{summary.abstention_rate:.4f}")
    table.add_row("sigma / alpha", f"{summary.sigma} / {summary.alpha}")
    table.add_row("t1 / t2", f"{summary.t1} / {summary.t2}")
    console.print(table)


def display_sweep(title: str, rows: list[SweepRow]) -> None:
    table = Table(title=title)
    for column in ("parameter", "value", "t2", "alpha", "clean", "certified", "abstained"):
        table.add_column(column, style="cyan" if column == "value" else "white")
    for row in rows:
        table.add_row(
            row.parameter,
            f"{row.value:g}",
            str(row.t2),
            f"{row.alpha:g}",
            f"{row.clean_accuracy:.4f}",
            f"{row.certified_accuracy:.4f}",
            f"{row.abstention_rate:.4f}",
        )
    console.print(table)


def _dry_run_notice(out: Path) -> None:
    console.print(f"[yellow]Dry run: configuration is valid; nothing written to {out}[/yellow]")


@app.callback()
def main(
    ctx: typer.Context,
    seed: int | None = typer.Option(None, "--seed", help="Root seed; every component seed derives from it"),
    jobs: int | None = typer.Option(None, "--jobs", help="Per-example parallelism for certify and attack"),
    config_path: Path | None = typer.Option(None, "--config", help="key=value file mirroring the flags; flags win"),
    dry_run: bool = typer.Option(False, "--dry-run", help="Validate configuration without writing anything"),
    log_level: str | None = typer.Option(None, "--log-level", help="DEBUG, INFO, WARNING or ERROR"),
    out: Path | None = typer.Option(None, "--out", help="Run directory (default: $SMOOTHING_OUTPUT_DIR/<command>)"),
) -> None:
    """Semantic smoothing pipeline."""
    try:
        config.validate()
        file_values = load_config_file(config_path, CONFIG_KEYS) if config_path else {}
        level = (log_level or file_values.get("log_level") or config.LOG_LEVEL).upper()
        configure_logging(level)
        ctx.obj = CliSettings(
            seed=int(seed if seed is not None else file_values.get("seed", config.SMOOTHING_SEED)),
            jobs=int(jobs if jobs is not None else file_values.get("jobs", config.SMOOTHING_JOBS)),
            dry_run=dry_run or file_values.get("dry_run", "").lower() in TRUE_WORDS,
            out=out if out is not None else (Path(file_values["out"]) if "out" in file_values else None),
            file_values=file_values,
        )
    except ValueError as e:
        raise _fail(e) from e
    if ctx.obj.seed < 0 or ctx.obj.jobs < 1:
        raise _fail(ConfigurationError("--seed must be nonnegative and --jobs at least 1"))


@app.command("gen-data")
def gen_data(
    ctx: typer.Context,
    vocabulary_size: int | None = typer.Option(None, help="Total number of words"),
    num_clusters: int | None = typer.Option(None, help="Substitution clusters"),
    cluster_size: int | None = typer.Option(None, help="Words per cluster"),
    content_tokens: int | None = typer.Option(None, help="Content tokens per sequence"),
    sequence_length: int | None = typer.Option(None),
    num_classes: int | None = typer.Option(None),
    embedding_dim: int | None = typer.Option(None),
    num_train: int | None = typer.Option(None),
    num_test: int | None = typer.Option(None),
    content_strength: float | None = typer.Option(None),
    confounder_strength: float | None = typer.Option(None, help="Train-time style/label agreement"),
) -> None:
    """Generate the synthetic confounded corpus."""

    def run() -> None:
        spec = _build(
            SyntheticSpec,
            _overrides(
                ctx,
                {
                    "vocabulary_size": vocabulary_size,
                    "num_clusters": num_clusters,
                    "cluster_size": cluster_size,
                    "content_tokens": content_tokens,
                    "sequence_length": sequence_length,
                    "num_classes": num_classes,
                    "embedding_dim": embedding_dim,
                    "num_train": num_train,
                    "num_test": num_test,
                    "content_strength": content_strength,
                    "confounder_strength": confounder_strength,
                },
            ),
        )
        out = _out_dir(ctx, "gen-data")
        corpus = _orchestrator(ctx).generate_data(spec, out)
        if corpus is None:
            _dry_run_notice(out)
            return
        console.print(
            f"[green]Wrote {len(corpus.train)} train, {len(corpus.test)} test and "
            f"{len(corpus.intervened)} intervened examples to {out}[/green]"
        )

    _guard(run)


@app.command()
def train(
    ctx: typer.Context,
    data: Path | None = typer.Option(None, "--data", help="gen-data output directory"),
    sigma: float | None = typer.Option(None, "--sigma", help="Latent noise standard deviation"),
    gamma: float | None = typer.Option(None, "--gamma", help="Weight of the robustness loss"),
    margin: float | None = typer.Option(None, "--margin", help="Target margin m"),
    noise_samples: int | None = typer.Option(None, help="Noise draws per example per step"),
    learning_rate: float | None = typer.Option(None),
    warmup_steps: int | None = typer.Option(None),
    cls_epochs: int | None = typer.Option(None, help="Cross-entropy-only epochs"),
    robust_epochs: int | None = typer.Option(None, help="Epochs of the combined objective"),
    batch_size: int | None = typer.Option(None),
    latent_dim: int | None = typer.Option(None),
) -> None:
    """Train encoder and classifier with the two-phase objective."""

    def run() -> None:
        train_config = _train_config(
            ctx,
            sigma=sigma,
            gamma=gamma,
            margin=margin,
            noise_samples=noise_samples,
            learning_rate=learning_rate,
            warmup_steps=warmup_steps,
            cls_epochs=cls_epochs,
            robust_epochs=robust_epochs,
            batch_size=batch_size,
            latent_dim=latent_dim,
        )
        out = _out_dir(ctx, "train")
        result = _orchestrator(ctx).train(_path(ctx, "data", data), train_config, out)
        if result is None:
            _dry_run_notice(out)
            return
        table = Table(title="Training Log")
        for column in ("epoch", "phase", "gamma", "loss", "R", "R_hat", "accuracy"):
            table.add_column(column)
        for epoch in result.epochs:
            table.add_row(
                str(epoch.epoch),
                str(epoch.phase),
                f"{epoch.gamma_effective:.3f}",
                f"{epoch.total_loss:.4f}",
                f"{epoch.mean_r:.3f}",
                f"{epoch.mean_r_hat:.3f}",
                f"{epoch.clean_accuracy:.3f}",
            )
        console.print(table)
        console.print(f"[green]Checkpoint written to {out / CHECKPOINT}[/green]")

    _guard(run)


@app.command()
def certify(
    ctx: typer.Context,
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Trained checkpoint.json"),
    data: Path | None = typer.Option(None, "--data", help="gen-data output directory"),
    split: str | None = typer.Option(None, "--split", help="train, test or intervened"),
    t1: int | None = typer.Option(None, "--t1", help="Selection draws (default 50)"),
    t2: int | None = typer.Option(None, "--t2", help="Estimation draws (default 2000)"),
    alpha: float | None = typer.Option(None, "--alpha", help="Failure probability (default 0.01)"),
    limit: int | None = typer.Option(None, "--limit", help="Certify only the first N examples"),
    soundness: bool = typer.Option(False, "--soundness", help="Exhaustively re-check certified examples"),
    cap: int | None = typer.Option(None, "--cap", help="Largest neighborhood the soundness check enumerates"),
) -> None:
    """Certify a split with a trained checkpoint."""

    def run() -> None:
        options = _certification_options(ctx, t1, t2, alpha, limit)
        out = _out_dir(ctx, "certify")
        result = _orchestrator(ctx).certify(
            _path(ctx, "checkpoint", checkpoint),
            _path(ctx, "data", data),
            options,
            out,
            split=_value(ctx, "split", split, "test", str),
            soundness=soundness or _value(ctx, "soundness", None, "", str).lower() in TRUE_WORDS,
            soundness_cap=_value(ctx, "cap", cap, EXHAUSTIVE_CAP, int),
        )
        if result is None:
            _dry_run_notice(out)
            return
        display_certification(result[1])

    _guard(run)


@app.command()
def attack(
    ctx: typer.Context,
    checkpoint: Path | None = typer.Option(None, "--checkpoint", help="Trained checkpoint.json"),
    data: Path | None = typer.Option(None, "--data", help="gen-data output directory"),
    name: str | None = typer.Option(None, "--attack", help=f"One of: {', '.join(ATTACKS)}"),
    split: str | None = typer.Option(None, "--split"),
    draws: int | None = typer.Option(None, "--draws", help="Fixed noise draws of the smoothed scorer"),
    trials: int | None = typer.Option(None, "--trials", help="Random attack budget"),
    max_passes: int | None = typer.Option(None, "--max-passes", help="Greedy attack passes"),
    edit_budget: int | None = typer.Option(None, "--edit-budget", help="Editing attack budget"),
    limit: int | None = typer.Option(None, "--limit"),
) -> None:
    """Run an empirical attack against the smoothed classifier."""

    def run() -> None:
        out = _out_dir(ctx, "attack")
        result = _orchestrator(ctx).attack(
            _path(ctx, "checkpoint", checkpoint),
            _path(ctx, "data", data),
            _value(ctx, "attack", name, "greedy", str),
            out,
            split=_value(ctx, "split", split, "test", str),
            draws=_value(ctx, "draws", draws, ATTACK_DRAWS, int),
            limit=_value(ctx, "limit", limit, None, int),
            trials=_value(ctx, "trials", trials, 50, int),
            max_passes=_value(ctx, "max_passes", max_passes, 3, int),
            edit_budget=_value(ctx, "edit_budget", edit_budget, 10, int),
        )
        if result is None:
            _dry_run_notice(out)
            return
        summary: AttackSummary = result[1]
        console.print(
            Panel(
                f"{summary.successes}/{summary.total} successful attacks\n"
                f"Empirical robust accuracy: {summary.empirical_robust_accuracy:.4f}\n"
                f"Mean queries: {summary.mean_queries:.1f}",
                title=f"{summary.attack} attack",
                border_style="blue",
            )
        )

    _guard(run)


def _sweep_command(ctx: typer.Context, experiment: str, values_key: str, values: str | None, default: str, train_flags: dict[str, Any], options: CertificationOptions) -> None:
    grid = _floats(_value(ctx, values_key, values, default, str), values_key)
    out = _out_dir(ctx, experiment)
    orchestrator = _orchestrator(ctx)
    runner = {
        "tradeoff": orchestrator.tradeoff,
        "sigma-sweep": orchestrator.sigma_sweep,
        "margin-sweep": orchestrator.margin_sweep,
    }[experiment]
    rows = runner(_path(ctx, "data", train_flags.pop("data")), _train_config(ctx, **train_flags), grid, options, out)
    if rows is None:
        _dry_run_notice(out)
        return
    display_sweep(experiment, rows)


@app.command()
def tradeoff(
    ctx: typer.Context,
    data: Path | None = typer.Option(None, "--data"),
    gammas: str | None = typer.Option(None, "--gammas", help="Comma-separated gamma grid"),
    sigma: float | None = typer.Option(None, "--sigma"),
    margin: float | None = typer.Option(None, "--margin"),
    cls_epochs: int | None = typer.Option(None),
    robust_epochs: int | None = typer.Option(None),
    t1: int | None = typer.Option(None, "--t1"),
    t2: int | None = typer.Option(None, "--t2"),
    alpha: float | None = typer.Option(None, "--alpha"),
    limit: int | None = typer.Option(None, "--limit"),
) -> None:
    """Train and certify along a gamma grid (clean versus certified accuracy)."""
    _guard(
        lambda: _sweep_command(
            ctx,
            "tradeoff",
            "gammas",
            gammas,
            "0.25,1,4,8",
            {"data": data, "sigma": sigma, "margin": margin, "cls_epochs": cls_epochs, "robust_epochs": robust_epochs},
            _certification_options(ctx, t1, t2, alpha, limit),
        )
    )


@app.command("sigma-sweep")
def sigma_sweep(
    ctx: typer.Context,
    data: Path | None = typer.Option(None, "--data"),
    sigmas: str | None = typer.Option(None, "--sigmas", help="Comma-separated sigma grid"),
    gamma: float | None = typer.Option(None, "--gamma"),
    margin: float | None = typer.Option(None, "--margin"),
    cls_epochs: int | None = typer.Option(None),
    robust_epochs: int | None = typer.Option(None),
    t1: int | None = typer.Option(None, "--t1"),
    t2: int | None = typer.Option(None, "--t2"),
    alpha: float | None = typer.Option(None, "--alpha"),
    limit: int | None = typer.Option(None, "--limit"),
) -> None:
    """Train and certify along a sigma grid."""
    _guard(
        lambda: _sweep_command(
            ctx,
            "sigma-sweep",
            "sigmas",
            sigmas,
            "0.5,1,2",
            {"data": data, "gamma": gamma, "margin": margin, "cls_epochs": cls_epochs, "robust_epochs": robust_epochs},
            _certification_options(ctx, t1, t2, alpha, limit),
        )
    )


@app.command("margin-sweep")
def margin_sweep(
    ctx: typer.Context,
    data: Path | None = typer.Option(None, "--data"),
    margins: str | None = typer.Option(None, "--margins", help="Comma-separated margin grid"),
    sigma: float | None = typer.Option(None, "--sigma"),
    gamma: float | None = typer.Option(None, "--gamma"),
    cls_epochs: int | None = typer.Option(None),
    robust_epochs: int | None = typer.Option(None),
    t1: int | None = typer.Option(None, "--t1"),
    t2: int | None = typer.Option(None, "--t2"),
    alpha: float | None = typer.Option(None, "--alpha"),
    limit: int | None = typer.Option(None, "--limit"),
) -> None:
    """Train and certify along a margin grid with fixed gamma."""
    _guard(
        lambda: _sweep_command(
            ctx,
            "margin-sweep",
            "margins",
            margins,
            "0.5,1,2",
            {"data": data, "sigma": sigma, "gamma": gamma, "cls_epochs": cls_epochs, "robust_epochs": robust_epochs},
            _certification_options(ctx, t1, t2, alpha, limit),
        )
    )


@app.command("alpha-sweep")
def alpha_sweep(
    ctx: typer.Context,
    checkpoint: Path | None = typer.Option(None, "--checkpoint"),
    data: Path | None = typer.Option(None, "--data"),
    pairs: str | None = typer.Option(None, "--pairs", help="Comma-separated t2:alpha pairs"),
    t1: int | None = typer.Option(None, "--t1"),
    limit: int | None = typer.Option(None, "--limit"),
) -> None:
    """Certify one checkpoint under several (t2, alpha) budgets."""

    def run() -> None:
        out = _out_dir(ctx, "alpha-sweep")
        rows = _orchestrator(ctx).alpha_sweep(
            _path(ctx, "checkpoint", checkpoint),
            _path(ctx, "data", data),
            _pairs(_value(ctx, "pairs", pairs, "2000:0.001,300:0.05", str)),
            out,
            t1=_value(ctx, "t1", t1, 50, int),
            limit=_value(ctx, "limit", limit, None, int),
        )
        if rows is None:
            _dry_run_notice(out)
            return
        display_sweep("alpha-sweep", rows)

    _guard(run)


@app.command("hinge-bound")
def hinge_bound(
    ctx: typer.Context,
    checkpoint: Path | None = typer.Option(None, "--checkpoint"),
    data: Path | None = typer.Option(None, "--data"),
    split: str | None = typer.Option(None, "--split"),
    gamma: float | None = typer.Option(None, "--gamma"),
    margin: float | None = typer.Option(None, "--margin"),
    high_draws: int | None = typer.Option(None, "--high-draws", help="Draws per soft expectation"),
    limit: int | None = typer.Option(None, "--limit", help="Sample size (default 100)"),
) -> None:
    """Check that gamma * hinge bounds the certification error on a sample."""

    def run() -> None:
        out = _out_dir(ctx, "hinge-bound")
        report: HingeDominanceReport | None = _orchestrator(ctx).hinge_bound(
            _path(ctx, "checkpoint", checkpoint),
            _path(ctx, "data", data),
            _train_config(ctx, gamma=gamma, margin=margin),
            out,
            split=_value(ctx, "split", split, "train", str),
            high_draws=_value(ctx, "high_draws", high_draws, 10_000, int),
            limit=_value(ctx, "limit", limit, 100, int),
        )
        if report is None:
            _dry_run_notice(out)
            return
        style = "green" if report.violations == 0 else "red"
        console.print(
            Panel(
                f"Examples: {len(report.rows)}\n"
                f"Violations: {report.violations}\n"
                f"Mean cross-entropy: {report.mean_cross_entropy:.4f}\n"
                f"Objective: {report.objective:.4f}\n"
                f"Certification error: {report.certification_error:.4f}\n"
                f"Bound gap: {report.bound_gap:.4f}",
                title=f"Hinge dominance (gamma={report.gamma}, m={report.margin})",
                border_style=style,
            )
        )

    _guard(run)


@app.command("config-info")
def config_info(ctx: typer.Context) -> None:
    """Show current configuration information."""
    settings = config.get_all_settings()
    resolved = _settings(ctx)
    settings.update({"seed": resolved.seed, "jobs": resolved.jobs, "dry_run": resolved.dry_run})
    settings.update({f"file:{key}": value for key, value in resolved.file_values.items()})

    config_table = Table(title="Configuration Settings")
    config_table.add_column("Setting", style="cyan")
    config_table.add_column("Value", style="white")

    for key, value in settings.items():
        config_table.add_row(key, str(value))

    console.print(config_table)


if __name__ == "__main__":
    app()
