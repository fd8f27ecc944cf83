# Configuración del sistema de práctica autónoma de conducción rápida
import logging
import os
from pathlib import Path
from typing import List, Optional, Union

import yaml
from dotenv import load_dotenv

from .models import RunConfig

load_dotenv()

# Rutas base
BASE_DIR = Path(__file__).resolve().parent.parent
RUNS_DIR = Path(os.getenv("FASTLAP_RUNS_DIR", str(BASE_DIR / "runs")))

# Checkpoint que sirve la API de inspección (opcional)
CHECKPOINT_PATH = os.getenv("FASTLAP_CHECKPOINT", "")

# Configuración de la API
API_TITLE = "Autonomous Practicing Racing API"
API_VERSION = "1.0.0"
API_DESCRIPTION = """
## API de inspección para entrenamiento de carreras autónomas 🏎️

Servicio de solo lectura sobre las corridas de entrenamiento: resúmenes de
vueltas, estado del checkpoint cargado y cortes del crítico frente a
distintos ángulos de dirección.

### Uso:
1. Consulte `/runs` para listar las corridas disponibles
2. Pida `/runs/{name}/summary` para las estadísticas de vueltas
3. Envíe una observación capturada a `/critic-slice`
"""

# Configuración de entorno
ENVIRONMENT = os.getenv("ENVIRONMENT", "development")

# Orígenes del panel de control que consume la API
DASHBOARD_URL = os.getenv("DASHBOARD_URL", "")


def get_allowed_origins() -> List[str]:
    """Orígenes locales siempre; en producción se añade el panel configurado"""
    origins = [
        "http://localhost:3000",
        "http://localhost:5173",
        "http://localhost:8000",
        "http://127.0.0.1:8000",
    ]
    if ENVIRONMENT == "production" and DASHBOARD_URL:
        origins.append(DASHBOARD_URL)
    return origins


ALLOWED_ORIGINS = get_allowed_origins()
ALLOW_ALL_ORIGINS = ENVIRONMENT == "development"

# Configuración de logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s [%(levelname)8s] %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Configura el logging del proceso una sola vez (CLI y servicio HTTP)"""
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)


def load_run_config(path: Union[str, Path, None] = None, **overrides) -> RunConfig:
    """
    Carga un archivo YAML de corrida y lo valida con pydantic.

    Sin ruta se devuelven los valores por defecto (los de la tabla de
    hiperparámetros). Los `overrides` se aplican sobre las claves de primer nivel.
    """
    data = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.model_validate(data)


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Escribe la configuración efectiva de una corrida"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.model_dump(mode="json"), fh, sort_keys=False)
    return path
