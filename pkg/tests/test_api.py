# tests/test_api.py
"""
Pruebas de la API de inspección de corridas y del corte del crítico
Diseñadas para generar reportes técnicos ordenados y detallados
"""
import time
from datetime import datetime

import numpy as np
import pytest
from fastapi.testclient import TestClient

from app import main
from app.config import dump_run_config
from app.harness import laps_frame
from app.learner import STATE, STATE_FEATURE_DIM, CheckpointError, RlpdLearner
from app.main import app
from app.models import LapRecord
from app.predictor import CriticInspector, dump_critic_slice

from .conftest import tiny_config

client = TestClient(app)


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    """Directorio de corridas con una corrida de tres vueltas"""
    run = tmp_path / "runs" / "full"
    run.mkdir(parents=True)
    laps = [LapRecord(lap_index=i, lap_time=t, collisions=c, sim_time=100.0 * (i + 1), env_step=1000 * (i + 1))
            for i, (t, c) in enumerate([(31.0, 2), (27.5, 1), (25.0, 0)])]
    laps_frame(laps).to_csv(run / "laps.csv", index=False)
    (run / "summary.yaml").write_text("stuck_time: 12.5\n")
    (tmp_path / "runs" / "empty").mkdir()
    monkeypatch.setattr(main, "RUNS_DIR", tmp_path / "runs")
    return tmp_path / "runs"


@pytest.fixture
def checkpoint(tmp_path, runs_dir):
    """Checkpoint de un aprendiz sin entrenar con su config.yaml y una observación de la corrida"""
    config = tiny_config(tmp_path / "run")
    learner = RlpdLearner(config.learner, config.network, STATE_FEATURE_DIM, seed=0, feature_mode=STATE)
    path = learner.save_checkpoint(tmp_path / "run" / "checkpoints" / "learner.flpw")
    dump_run_config(config, tmp_path / "run" / "config.yaml")
    obs = runs_dir / "full" / "obs.npz"
    np.savez(obs, features=np.array([0.5, 0.3, 1.0, 0.0], dtype=np.float32), proprio=np.zeros(9, np.float32),
             goal=np.array([1.0, 0.0, 6.0], dtype=np.float32), prev_action=np.array([-1.0, 0.0], dtype=np.float32))
    return path, obs


# ============================================================================
# PRUEBAS DE ENDPOINTS PRINCIPALES
# ============================================================================

@pytest.mark.unit
class TestEndpoints:
    """Pruebas de endpoints básicos de la API"""

    def test_root_endpoint_info(self):
        """TEST 1: Endpoint raíz - Información general de la API"""
        response = client.get("/")

        assert response.status_code == 200
        data = response.json()

        assert "message" in data
        assert "version" in data
        assert "environment" in data

        assert data["message"] == "API de inspección de práctica autónoma de carreras"
        assert data["version"] == "1.0.0"
        assert "/critic-slice" in data["endpoints"]

        print(f"\n✅ ENDPOINT RAÍZ - INFORMACIÓN DE LA API")
        print(f"   Status Code: {response.status_code}")
        print(f"   Mensaje: {data['message']}")
        print(f"   Entorno: {data.get('environment', 'N/A')}")

    def test_health_check_status(self):
        """TEST 2: Health check - Sin checkpoint configurado no hay crítico cargado"""
        response = client.get("/health")

        assert response.status_code == 200
        data = response.json()
        assert data["status"] == "healthy"
        assert data["models_loaded"] is False
        assert data["param_version"] is None
        assert "timestamp" in data

        print(f"\n✅ HEALTH CHECK - ESTADO DEL SISTEMA")
        print(f"   Crítico cargado: {data['models_loaded']}")

    def test_docs_endpoint_availability(self):
        """TEST 3: Documentación automática disponible"""
        response = client.get("/docs")
        assert response.status_code == 200


# ============================================================================
# PRUEBAS DE CORRIDAS
# ============================================================================

@pytest.mark.integration
class TestRuns:
    """Listado y resúmenes de corridas"""

    def test_list_runs(self, runs_dir):
        """TEST 4: Solo se listan corridas con laps.csv"""
        response = client.get("/runs")
        assert response.status_code == 200
        assert response.json() == {"runs": ["full"]}

    def test_run_summary(self, runs_dir):
        """TEST 5: Resumen recalculado desde laps.csv"""
        response = client.get("/runs/full/summary")
        assert response.status_code == 200
        data = response.json()
        assert data["run"] == "full" and data["laps"] == 3
        assert data["summary"]["best_lap"] == 25.0
        assert data["summary"]["first_lap"] == 31.0
        assert data["summary"]["t2f"] == 100.0
        assert data["summary"]["collisions_total"] == 3.0
        assert data["summary"]["stuck_time"] == 12.5

        print(f"\n✅ RESUMEN DE CORRIDA")
        print(f"   Vueltas: {data['laps']}")
        print(f"   Mejor vuelta: {data['summary']['best_lap']} s")

    def test_missing_run(self, runs_dir):
        """TEST 6: Una corrida inexistente o sin vueltas responde 404"""
        assert client.get("/runs/nada/summary").status_code == 404
        assert client.get("/runs/empty/summary").status_code == 404

    def test_invalid_run_name(self, runs_dir):
        """TEST 7: Nombres con recorridos de directorio se rechazan"""
        assert client.get("/runs/..full/summary").status_code == 400


# ============================================================================
# PRUEBAS DEL CORTE DEL CRÍTICO
# ============================================================================

@pytest.mark.integration
class TestCriticSlice:
    """Inspector del ensamble de críticos"""

    def test_unloaded_returns_503(self, checkpoint):
        """TEST 8: Sin checkpoint cargado el servicio no está disponible"""
        _, obs = checkpoint
        response = client.post("/critic-slice", json={"observation_path": str(obs)})
        assert response.status_code == 503

    def test_request_validation(self):
        """TEST 9: Rango de dirección invertido o fuera de límites"""
        assert client.post("/critic-slice", json={"observation_path": "x.npz", "steering_min": 0.3,
                                                  "steering_max": -0.3}).status_code == 422
        assert client.post("/critic-slice", json={"observation_path": "x.npz", "n_steering": 1}).status_code == 422
        assert client.post("/critic-slice", json={"observation_path": "x.npz",
                                                  "velocity_target": 9.0}).status_code == 422

    def test_loaded_slice(self, checkpoint, monkeypatch):
        """TEST 10: Con checkpoint cargado se devuelve una fila por dirección"""
        path, obs = checkpoint
        monkeypatch.setattr(main, "inspector", CriticInspector(path))
        start_time = time.time()
        response = client.post("/critic-slice", json={"observation_path": "full/obs.npz", "n_steering": 11})
        response_time = time.time() - start_time
        assert response.status_code == 200
        data = response.json()
        assert len(data["rows"]) == 11
        assert data["rows"][0]["steering"] == pytest.approx(-0.5)
        assert data["best_steering"] in [r["steering"] for r in data["rows"]]
        assert all(r["q_min"] <= r["q_mean"] for r in data["rows"])
        assert client.get("/health").json()["models_loaded"] is True

        print(f"\n⚡ CORTE DEL CRÍTICO")
        print(f"   Filas: {len(data['rows'])}")
        print(f"   Mejor dirección: {data['best_steering']:+.3f} rad")
        print(f"   Tiempo: {response_time:.3f} segundos")

    def test_missing_observation(self, checkpoint, monkeypatch):
        """TEST 11: Observación inexistente responde 404"""
        path, _ = checkpoint
        monkeypatch.setattr(main, "inspector", CriticInspector(path))
        response = client.post("/critic-slice", json={"observation_path": "full/no_existe.npz"})
        assert response.status_code == 404

    def test_dump_critic_slice_csv(self, checkpoint, tmp_path):
        """TEST 12: El corte se escribe como CSV"""
        path, obs = checkpoint
        table = dump_critic_slice(path, obs, np.linspace(-0.5, 0.5, 5), tmp_path / "slice.csv")
        assert list(table.columns) == ["steering", "q_mean", "q_min", "q_std"]
        assert len(table) == 5
        assert (tmp_path / "slice.csv").exists()

    def test_inspector_rejects_non_learner_file(self, tmp_path):
        """TEST 13: Un archivo que no es checkpoint del aprendiz se rechaza"""
        bogus = tmp_path / "bogus.flpw"
        bogus.write_bytes(b"no es un paramset")
        with pytest.raises(CheckpointError):
            CriticInspector(bogus)
        with pytest.raises(CheckpointError):
            CriticInspector(tmp_path / "nada.flpw")

    def test_observation_outside_runs_dir(self, checkpoint, tmp_path, monkeypatch):
        """TEST 14: Solo se leen observaciones dentro del directorio de corridas"""
        path, obs = checkpoint
        monkeypatch.setattr(main, "inspector", CriticInspector(path))
        outside = tmp_path / "afuera.npz"
        outside.write_bytes(obs.read_bytes())
        for target in [str(outside), "../afuera.npz", "full/../../afuera.npz", "/etc/passwd"]:
            response = client.post("/critic-slice", json={"observation_path": target})
            assert response.status_code == 400, target
        assert client.post("/critic-slice", json={"observation_path": str(obs)}).status_code == 200
        print("\n🔒 Rutas fuera de RUNS_DIR rechazadas con 400")


# ============================================================================
# FUNCIONES AUXILIARES PARA REPORTES
# ============================================================================

@pytest.fixture(autouse=True)
def test_info(request):
    """Información de cada test para reportes ordenados"""
    test_name = request.node.name
    if test_name.startswith('test_'):
        print(f"\n{'='*70}")
        print(f"🧪 {test_name.replace('_', ' ').upper()}")
        print(f"⏰ {datetime.now().strftime('%H:%M:%S')}")
        print(f"{'='*70}")
