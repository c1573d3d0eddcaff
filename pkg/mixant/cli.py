"""Command-line entry point: `python -m mixant <command>`."""
import functools
import json
import logging
from pathlib import Path
from typing import List, Optional

import click
import pandas as pd
from sqlalchemy.exc import SQLAlchemyError

from mixant import settings
from mixant.ablation import DEFAULT_VALUES, ablation_drivers, parse_values
from mixant.config import EvalConfig, ModelConfig, build_model_config, load_model_config
from mixant.corpus import default_grammar, generate_corpus, load_corpus, load_grammar, save_corpus, split_corpus
from mixant.errors import ConfigError, EvaluationError, MixAntError
from mixant.metrics import collect_selections, evaluate, probe_selections
from mixant.model import DiffusionAnticipator
from mixant.training import check_gradients, load_checkpoint, read_manifest, save_checkpoint, train

logger = logging.getLogger(__name__)


def _floats(raw: str) -> List[float]:
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of numbers, got {raw!r}") from e


def _ints(raw: str) -> List[int]:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of integers, got {raw!r}") from e


def _model_config(path: Optional[str]) -> ModelConfig:
    return load_model_config(path) if path else build_model_config()


def _eval_config(alpha: str, beta: str, samples: int, seed: int, ddim_steps: Optional[int], n_jobs: int) -> EvalConfig:
    try:
        return EvalConfig(
            alphas=_floats(alpha),
            betas=_floats(beta),
            samples=samples,
            ddim_steps=ddim_steps,
            seed=seed,
            n_jobs=n_jobs,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _should_register(no_register: bool) -> bool:
    return settings.REGISTER_RUNS and not no_register


def _registry():
    from mixant.crud import RunManager
    from mixant.database import SessionLocal, init_db

    init_db()
    return RunManager(SessionLocal())


def _test_split(data_dir: str, config: ModelConfig):
    _, videos = load_corpus(data_dir)
    return split_corpus(videos, config.test_fraction, config.split_seed)[1]


def _corpus_of(ckpt: str, data: Optional[str]) -> str:
    data_dir = data or read_manifest(ckpt).get("metadata", {}).get("data_dir")
    if not data_dir:
        raise ConfigError("no --data given and the checkpoint does not record its corpus")
    return data_dir


def reports_errors(command):
    """Turns a MixAntError into an ERROR log line and exit status 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except MixAntError as e:
            logger.error(f"{click.get_current_context().info_name} failed: {e}")
            raise click.ClickException(str(e)) from e

    return wrapper


def eval_options(alpha: str = "0.2,0.3", beta: str = "0.1,0.2,0.3,0.5"):
    options = [
        click.option("--alpha", default=alpha, show_default=True, help="Observation ratio(s), comma separated"),
        click.option("--beta", default=beta, show_default=True, help="Anticipation ratio(s), comma separated"),
        click.option("--samples", type=int, default=25, show_default=True, help="Samples S per video"),
        click.option("--seed", type=int, default=0, show_default=True, help="Base seed of the sampling streams"),
        click.option("--ddim-steps", type=int, default=None, help="Override the checkpoint's DDIM step count"),
        click.option("--n-jobs", type=int, default=settings.N_JOBS, show_default=True, help="Parallel workers over videos"),
    ]

    def decorate(command):
        for option in reversed(options):
            command = option(command)
        return command

    return decorate


@click.group()
def main():
    """MixANT dense action anticipation."""
    logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--grammar", default=None, help="Grammar JSON (default: built-in kitchen grammar)")
@click.option("--n", "n_videos", type=int, default=200, show_default=True, help="Number of videos")
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", required=True, help="Corpus directory")
@reports_errors
def gen_data(grammar: Optional[str], n_videos: int, seed: int, out: str):
    """Generate a synthetic procedural-activity corpus."""
    activity_grammar = load_grammar(grammar) if grammar else default_grammar()
    save_corpus(generate_corpus(activity_grammar, n_videos, seed), activity_grammar, out)


@main.command("train")
@click.option("--config", "config_path", default=None, help="ModelConfig JSON (default: built-in defaults)")
@click.option("--data", required=True, help="Corpus directory")
@click.option("--out", required=True, help="Checkpoint directory")
@click.option("--seed", type=int, default=None, help="Override the config seed")
@click.option("--name", default=None, help="Registry name (default: checkpoint directory name)")
@click.option("--no-register", is_flag=True, default=False, help="Do not record the run in the registry")
@reports_errors
def train_command(config_path: Optional[str], data: str, out: str, seed: Optional[int], name: Optional[str], no_register: bool):
    """Train a model on the training split of a corpus."""
    config = _model_config(config_path)
    seed = config.seed if seed is None else seed
    _, videos = load_corpus(data)
    train_videos, _ = split_corpus(videos, config.test_fraction, config.split_seed)
    result = train(config, train_videos, seed=seed)
    name = name or Path(out).name
    save_checkpoint(
        result.model,
        out,
        history=result.history,
        metadata={"data_dir": str(data), "run_name": name, "seed": seed},
    )
    if _should_register(no_register):
        try:
            registry = _registry()
            registry.record_run(name, str(out), config, seed, result.final_rec_loss, result.final_lb_loss)
            registry.db.close()
        except SQLAlchemyError as e:
            logger.warning(f"Run registry unavailable, run not recorded: {e}")


@main.command("eval")
@click.option("--ckpt", required=True, help="Checkpoint directory")
@click.option("--data", default=None, help="Corpus directory (default: the one the checkpoint was trained on)")
@click.option("--out", required=True, help="Report JSON")
@click.option("--no-register", is_flag=True, default=False, help="Do not record the evaluation in the registry")
@eval_options()
@reports_errors
def eval_command(ckpt, data, out, no_register, alpha, beta, samples, seed, ddim_steps, n_jobs):
    """Mean/Top-1 MoC of a checkpoint on the held-out split."""
    model = load_checkpoint(ckpt)
    metadata = read_manifest(ckpt).get("metadata", {})
    data_dir = _corpus_of(ckpt, data)
    eval_config = _eval_config(alpha, beta, samples, seed, ddim_steps, n_jobs)
    videos = _test_split(data_dir, model.config)
    anticipator = DiffusionAnticipator(model, ddim_steps=eval_config.ddim_steps)
    report = evaluate(anticipator, videos, eval_config, n_experts=model.config.n_experts)
    Path(out).write_text(report.model_dump_json(indent=2))
    logger.info(f"Wrote report to {out}")
    if _should_register(no_register):
        try:
            registry = _registry()
            run = registry.get_run_by_name(metadata.get("run_name", Path(ckpt).name))
            if run:
                registry.record_report(run.id, report)
            else:
                logger.warning("Checkpoint is not registered; evaluation not recorded.")
            registry.db.close()
        except SQLAlchemyError as e:
            logger.warning(f"Run registry unavailable, evaluation not recorded: {e}")


@main.command("gradcheck")
@click.option("--config", "config_path", default=None, help="ModelConfig JSON")
@click.option("--frames", type=int, default=8, show_default=True)
@click.option("--observed", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--step", type=float, default=1e-5, show_default=True)
@click.option("--max-entries", type=int, default=None, help="Entries checked per parameter (default: all)")
@click.option("--tolerance", type=float, default=1e-4, show_default=True)
@reports_errors
def gradcheck(config_path, frames, observed, seed, step, max_entries, tolerance):
    """Finite-difference check of the full training loss."""
    error = check_gradients(
        _model_config(config_path),
        frames=frames,
        observed=observed,
        seed=seed,
        step=step,
        max_entries=max_entries,
    )
    passed = error <= tolerance
    if not passed:
        logger.error(f"Gradient check failed: {error:.3e} > {tolerance:.1e}")
    click.echo(json.dumps({"max_relative_error": error, "tolerance": tolerance, "passed": passed}))
    if not passed:
        click.get_current_context().exit(1)


@main.command("ablate")
@click.option("--axis", required=True, type=click.Choice(sorted(DEFAULT_VALUES)))
@click.option("--values", default=None, help="Comma-separated values (default: the axis' standard sweep)")
@click.option("--config", "config_path", default=None, help="ModelConfig JSON")
@click.option("--data", required=True, help="Corpus directory")
@click.option("--seeds", default="0", show_default=True, help="Training seeds averaged per value")
@click.option("--out", default="ablation.csv", show_default=True)
@eval_options(alpha="0.2", beta="0.1")
@reports_errors
def ablate(axis, values, config_path, data, seeds, out, alpha, beta, samples, seed, ddim_steps, n_jobs):
    """Train and evaluate one configuration per axis value."""
    config = _model_config(config_path)
    parsed = parse_values(axis, values or DEFAULT_VALUES.get(axis, ""))
    _, videos = load_corpus(data)
    train_videos, test_videos = split_corpus(videos, config.test_fraction, config.split_seed)
    eval_config = _eval_config(alpha, beta, samples, seed, ddim_steps, n_jobs)
    table = ablation_drivers(axis, parsed, config, train_videos, test_videos, eval_config, seeds=_ints(seeds))
    table.to_csv(out, index=False)
    logger.info(f"Wrote {len(table)} ablation rows to {out}")


@main.command("inspect-experts")
@click.option("--ckpt", required=True, help="Checkpoint directory")
@click.option("--data", default=None, help="Corpus directory (default: the one the checkpoint was trained on)")
@click.option("--out", required=True, help="Selections CSV")
@click.option("--alpha", type=float, default=0.2, show_default=True)
@click.option("--beta", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ddim-steps", type=int, default=None)
@reports_errors
def inspect_experts(ckpt, data, out, alpha, beta, seed, ddim_steps):
    """Export per-sequence expert selections as CSV."""
    model = load_checkpoint(ckpt)
    if model.config.n_mixture_blocks == 0:
        raise EvaluationError("checkpoint has no mixture blocks (K0 = K)")
    videos = _test_split(_corpus_of(ckpt, data), model.config)
    anticipator = DiffusionAnticipator(model, ddim_steps=ddim_steps)
    table = collect_selections(anticipator, videos, model.config.n_experts, alpha, beta, seed)
    table.to_csv(out, index=False)
    logger.info(f"Wrote {len(table)} selection rows to {out}")


@main.command("probe-selections")
@click.option("--selections", required=True, help="CSV written by inspect-experts")
@click.option("--test-fraction", type=float, default=0.3, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@reports_errors
def probe_selections_command(selections, test_fraction, seed):
    """Nearest-centroid activity classifier on exported selections."""
    outcome = probe_selections(pd.read_csv(selections), test_fraction, seed)
    click.echo(json.dumps(outcome))


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int):
    """Serve the results API."""
    import uvicorn

    uvicorn.run("mixant.main:app", host=host, port=port)


if __name__ == "__main__":
    main()
