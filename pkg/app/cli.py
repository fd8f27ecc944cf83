"""Interfaz de línea de comandos: fases de entrenamiento, evaluación, informes y servicio HTTP"""
import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np
import yaml

from .config import configure_logging, dump_run_config, load_run_config
from .harness import (DemoLapError, build_layout, capture_observation, evaluate_policy, laps_frame,
                      record_demo_lap, report, run_training, save_course, summarize_laps)
from .learner import CheckpointError
from .link import LinkError
from .models import RunConfig
from .networks import ParamSetError
from .predictor import dump_critic_slice
from .pretrain import (IqlTrainer, freeze_encoder, generate_prior_dataset, load_prior_dataset, prior_map_seeds,
                       save_prior_dataset)
from .tracks import MapGenerationError

logger = logging.getLogger(__name__)

HANDLED = (CheckpointError, DemoLapError, LinkError, MapGenerationError, ParamSetError, FileNotFoundError,
           ValueError)


def _config(ctx: click.Context, **overrides) -> RunConfig:
    return load_run_config(ctx.obj["config_path"], **overrides)


def _guarded(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except HANDLED as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        raise click.ClickException(str(exc)) from exc


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Archivo YAML de corrida")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING...")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[str], log_level: Optional[str]):
    """Práctica autónoma de carreras: preentrenamiento, demostración, entrenamiento y evaluación."""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


@cli.command("gen-prior")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-maps", type=int, default=None)
@click.option("--steps-per-map", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
def gen_prior(ctx, seed: int, n_maps: Optional[int], steps_per_map: Optional[int], out_dir: str):
    """Genera el conjunto de datos previo sobre mapas aleatorios."""
    config = _config(ctx, seed=seed)
    n_maps = n_maps or config.prior.n_maps
    steps = steps_per_map or config.prior.steps_per_map
    dataset = _guarded(generate_prior_dataset, seed, n_maps, steps, config.prior, config.world)
    save_prior_dataset(dataset, out_dir, config.world, prior_map_seeds(seed, n_maps))
    click.echo(f"✅ {len(dataset)} transiciones en {n_maps} mapas -> {out_dir}")


@cli.command()
@click.option("--prior", "prior_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--steps", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def pretrain(ctx, prior_dir: str, steps: Optional[int], out_path: str):
    """Preentrena con IQL condicionado a metas y guarda el codificador congelado."""
    config = _config(ctx)
    dataset = _guarded(load_prior_dataset, prior_dir)
    trainer = IqlTrainer(config.iql, config.encoder, config.network, config.world.raster_size, config.seed)
    history = trainer.train(dataset, steps or config.iql.steps, config.seed, config.reward)
    freeze_encoder(trainer, out_path)
    click.echo(f"✅ Codificador ({trainer.encoder.output_dim} características) -> {out_path}")
    if history:
        click.echo(f"   pérdida final del crítico: {history[-1]['critic_loss']:.4f}")


@cli.command("demo-lap")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
def demo_lap(ctx, out_dir: str):
    """Graba la vuelta lenta de demostración y guarda el circuito."""
    config = _config(ctx, output_dir=out_dir)
    result = _guarded(record_demo_lap, config, build_layout(config))
    save_course(result.course, result.lap_time, Path(out_dir) / "course.yaml")
    result.buffer.save(Path(out_dir) / "demo.npz")
    click.echo(f"✅ Demostración: {result.lap_time:.1f} s, {len(result.course)} checkpoints")


@cli.command()
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None,
              help="Presupuesto total de pasos de entorno (incluye los ya corridos al reanudar)")
@click.option("--encoder", "encoder_checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--resume", is_flag=True, help="Continuar aprendiz y robot desde checkpoints/ del directorio de salida")
@click.option("--ablation", "ablations", multiple=True,
              type=click.Choice(["no_demo", "no_pretrain", "no_pseudo_resets", "state_based", "blind"]))
@click.pass_context
def train(ctx, out_dir, seed, steps, encoder_checkpoint, resume: bool, ablations):
    """Entrenamiento en línea en el circuito con la máquina de práctica."""
    config = _config(ctx, output_dir=out_dir, seed=seed, step_budget=steps, encoder_checkpoint=encoder_checkpoint)
    if ablations:
        flags = config.ablations.model_dump()
        flags.update({name: True for name in ablations})
        config = RunConfig.model_validate({**config.model_dump(), "ablations": flags})
    result = _guarded(run_training, config, resume)
    best = result.summary["best_lap"]
    click.echo(f"✅ {len(result.laps)} vueltas en {result.output_dir}; mejor: "
               f"{'-' if best is None else f'{best:.2f} s'} (v{result.param_version}, "
               f"{result.learner_updates} actualizaciones)")


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--laps", "n_laps", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.pass_context
def eval_cmd(ctx, checkpoint: str, n_laps: Optional[int], out_dir: Optional[str]):
    """Evalúa la política determinista sin aprendizaje."""
    config = _config(ctx, output_dir=out_dir)
    records = _guarded(evaluate_policy, checkpoint, config, n_laps or config.eval_laps)
    summary = summarize_laps(laps_frame(records))
    click.echo(yaml.safe_dump(summary, sort_keys=False))


@cli.command("critic-slice")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--observation", type=click.Path(dir_okay=False), required=True,
              help="Archivo .npz de observación (se crea con --capture)")
@click.option("--capture", is_flag=True, help="Capturar la observación en la salida del circuito antes del corte")
@click.option("--n-steering", type=int, default=21, show_default=True)
@click.option("--velocity", type=float, default=2.0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def critic_slice(ctx, checkpoint: str, observation: str, capture: bool, n_steering: int, velocity: float,
                 out_path: str):
    """Q del crítico frente a la dirección para una observación capturada."""
    config = _config(ctx) if ctx.obj["config_path"] else None
    if capture:
        _guarded(capture_observation, config or RunConfig(), observation)
    lo, hi = (config or RunConfig()).world.steering_range
    table = _guarded(dump_critic_slice, checkpoint, observation, np.linspace(lo, hi, n_steering), out_path,
                     velocity, config)
    best = table.loc[table["q_mean"].idxmax()]
    click.echo(f"✅ {len(table)} filas -> {out_path}; mejor dirección {best['steering']:+.3f} rad")


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def report_cmd(run_dirs, out_dir: str):
    """Tabla comparativa y curvas de mínimo acumulado de varias corridas."""
    table = _guarded(report, list(run_dirs), out_dir)
    click.echo(table.to_string())


@cli.command("dump-config")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True)
@click.pass_context
def dump_config(ctx, out_path: str):
    """Escribe la configuración efectiva (valores por defecto + archivo)."""
    dump_run_config(_config(ctx), out_path)
    click.echo(f"✅ Configuración -> {out_path}")


@cli.command()
@click.option("--host", default="0.0.0.0", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int):
    """Levanta la API de inspección."""
    import uvicorn

    uvicorn.run("app.main:app", host=host, port=port)


if __name__ == "__main__":
    cli()
