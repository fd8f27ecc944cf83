# tests/test_cli.py
"""
Pruebas de la interfaz de línea de comandos con CliRunner
"""
import pytest
import yaml
from pydantic import ValidationError
from click.testing import CliRunner

from app.cli import cli
from app.config import dump_run_config, load_run_config
from app.harness import laps_frame
from app.models import LapRecord, RunConfig

from .conftest import tiny_config


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    return dump_run_config(tiny_config(tmp_path / "run"), tmp_path / "tiny.yaml")


@pytest.mark.unit
class TestConfigCommands:
    """Configuración efectiva y errores de uso"""

    def test_dump_config_defaults(self, runner, tmp_path):
        """TEST 1: dump-config escribe la configuración por defecto"""
        out = tmp_path / "defaults.yaml"
        result = runner.invoke(cli, ["dump-config", "--out", str(out)])
        assert result.exit_code == 0, result.output
        data = yaml.safe_load(out.read_text())
        assert data["learner"]["ensemble_size"] == 10
        assert data["learner"]["utd"] == 8
        assert data["world"]["raster_size"] == 64

    def test_dump_config_roundtrip(self, runner, config_file, tmp_path):
        """TEST 2: La configuración de un archivo se conserva al volcarla"""
        out = tmp_path / "again.yaml"
        result = runner.invoke(cli, ["--config", str(config_file), "dump-config", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert load_run_config(out) == load_run_config(config_file)

    def test_missing_checkpoint_is_usage_error(self, runner, tmp_path):
        """TEST 3: Un checkpoint inexistente es un error de uso"""
        result = runner.invoke(cli, ["eval", "--checkpoint", str(tmp_path / "nada.flpw")])
        assert result.exit_code == 2

    def test_unknown_ablation_rejected(self, runner):
        """TEST 4: Solo se aceptan ablaciones conocidas"""
        result = runner.invoke(cli, ["train", "--ablation", "sin_frenos"])
        assert result.exit_code == 2


@pytest.mark.integration
class TestPhaseCommands:
    """Fases de la corrida desde la terminal"""

    def test_demo_lap_command(self, runner, config_file, tmp_path):
        """TEST 5: demo-lap guarda el circuito y el buffer de demostración"""
        out = tmp_path / "demo"
        result = runner.invoke(cli, ["--config", str(config_file), "demo-lap", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "course.yaml").exists() and (out / "demo.npz").exists()
        assert "4 checkpoints" in result.output

    def test_gen_prior_command(self, runner, config_file, tmp_path):
        """TEST 6: gen-prior escribe manifiesto y registros"""
        out = tmp_path / "prior"
        result = runner.invoke(cli, ["--config", str(config_file), "gen-prior", "--n-maps", "1",
                                     "--steps-per-map", "10", "--out", str(out)])
        assert result.exit_code == 0, result.output
        manifest = yaml.safe_load((out / "manifest.yaml").read_text())
        assert manifest["maps"][0]["steps"] == 10

    def test_train_without_encoder_fails_cleanly(self, runner, tmp_path):
        """TEST 7: Sin codificador preentrenado el modo visual falla con un mensaje"""
        config = tiny_config(tmp_path / "visual", ablations={"state_based": False})
        path = dump_run_config(config, tmp_path / "visual.yaml")
        result = runner.invoke(cli, ["--config", str(path), "train", "--steps", "5"])
        assert result.exit_code == 1
        assert "codificador" in result.output

    @pytest.mark.slow
    def test_train_command(self, runner, config_file, tmp_path):
        """TEST 8: train corre el presupuesto y reporta el resumen"""
        out = tmp_path / "cli-run"
        result = runner.invoke(cli, ["--config", str(config_file), "train", "--out", str(out), "--steps", "30"])
        assert result.exit_code == 0, result.output
        assert "actualizaciones" in result.output
        assert (out / "laps.csv").exists()

    def test_report_command(self, runner, tmp_path):
        """TEST 9: report compara varias corridas"""
        run = tmp_path / "a"
        run.mkdir()
        laps_frame([LapRecord(lap_index=0, lap_time=31.5, sim_time=90.0, env_step=900)]).to_csv(
            run / "laps.csv", index=False)
        result = runner.invoke(cli, ["report", str(run), "--out", str(tmp_path / "report")])
        assert result.exit_code == 0, result.output
        assert "31.5" in result.output
        assert (tmp_path / "report" / "report.csv").exists()


# ============================================================================
# UMBRAL DE COLISIÓN COMPARTIDO
# ============================================================================

@pytest.mark.unit
class TestCollisionThreshold:
    """El simulador y la recompensa usan el mismo A"""

    def test_reward_threshold_drives_world(self):
        """TEST 10: Un A fijado en la recompensa llega al simulador"""
        config = RunConfig(reward={"accel_threshold": 3.0})
        assert config.world.collision_accel == 3.0
        print(f"\n✅ A = {config.world.collision_accel} m/s² en ambos bloques")

    def test_world_threshold_drives_reward(self):
        """TEST 11: Un A fijado solo en el simulador no se pisa con el valor por defecto"""
        config = RunConfig(world={"collision_accel": 4.5})
        assert config.world.collision_accel == 4.5
        assert config.reward.accel_threshold == 4.5

    def test_zero_threshold_rejected(self):
        """TEST 12: A = 0 es un error de validación, no se reemplaza en silencio"""
        with pytest.raises(ValidationError):
            RunConfig(reward={"accel_threshold": 0.0})
        print("\n✅ A = 0 rechazado")
