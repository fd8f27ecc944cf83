from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from datetime import datetime
from pathlib import Path
import logging

import numpy as np
import yaml

from .config import (
    API_TITLE,
    API_VERSION,
    API_DESCRIPTION,
    ALLOWED_ORIGINS,
    ALLOW_ALL_ORIGINS,
    ENVIRONMENT,
    RUNS_DIR,
    configure_logging,
)
from .harness import load_run_laps, summarize_laps
from .learner import CheckpointError
from .models import CriticSliceRequest, CriticSliceResponse, HealthResponse, RunSummaryResponse
from .predictor import inspector

# Configurar logging
configure_logging()
logger = logging.getLogger(__name__)

# Crear aplicación FastAPI
app = FastAPI(
    title=API_TITLE,
    version=API_VERSION,
    description=API_DESCRIPTION
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"] if ALLOW_ALL_ORIGINS else ALLOWED_ORIGINS,
    allow_credentials=True,
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["*"],
)
logger.info("🔓 CORS: todos los orígenes" if ALLOW_ALL_ORIGINS else f"🔒 CORS: {ALLOWED_ORIGINS}")


@app.get("/", tags=["General"])
async def root():
    """Endpoint raíz con información de la API"""
    return {
        "message": "API de inspección de práctica autónoma de carreras",
        "version": API_VERSION,
        "environment": ENVIRONMENT,
        "endpoints": {
            "/": "Información de la API",
            "/health": "Estado de salud de la API",
            "/runs": "Corridas disponibles",
            "/runs/{name}/summary": "Estadísticas de vueltas de una corrida",
            "/critic-slice": "Q del crítico frente a la dirección",
            "/docs": "Documentación interactiva"
        }
    }


@app.get("/health", response_model=HealthResponse, tags=["General"])
async def health_check():
    """Verificar el estado de la API"""
    return HealthResponse(
        status="healthy",
        models_loaded=inspector.loaded,
        param_version=inspector.param_version if inspector.loaded else None,
        timestamp=datetime.now().isoformat()
    )


@app.get("/runs", tags=["Corridas"])
async def list_runs():
    """Directorios de corrida que contienen un laps.csv"""
    if not RUNS_DIR.exists():
        return {"runs": []}
    return {"runs": sorted(p.name for p in RUNS_DIR.iterdir() if (p / "laps.csv").exists())}


@app.get("/runs/{name}/summary", response_model=RunSummaryResponse, tags=["Corridas"])
async def run_summary(name: str):
    """
    Estadísticas de vueltas recalculadas desde laps.csv.

    Incluye tiempo hasta la primera vuelta, mejor vuelta, medianas y
    colisiones por vuelta.
    """
    run_dir = RUNS_DIR / name
    if "/" in name or ".." in name:
        raise HTTPException(status_code=400, detail="Nombre de corrida inválido")
    try:
        laps = load_run_laps(run_dir)
    except FileNotFoundError:
        raise HTTPException(status_code=404, detail=f"Corrida no encontrada: {name}")
    stuck_time = None
    summary_file = run_dir / "summary.yaml"
    if summary_file.exists():
        with open(summary_file, "r", encoding="utf-8") as fh:
            stuck_time = (yaml.safe_load(fh) or {}).get("stuck_time")
    summary = summarize_laps(laps, stuck_time)
    return RunSummaryResponse(run=name, laps=int(summary["laps"]), summary=summary)


def resolve_observation(observation_path: str) -> Path:
    """Ruta de la observación dentro de RUNS_DIR (relativa o absoluta); fuera de él es 400"""
    root = Path(RUNS_DIR).resolve()
    candidate = Path(observation_path)
    resolved = (candidate if candidate.is_absolute() else root / candidate).resolve()
    if not resolved.is_relative_to(root):
        logger.warning(f"Observación fuera del directorio de corridas: {observation_path}")
        raise HTTPException(status_code=400, detail="La observación debe estar dentro del directorio de corridas")
    return resolved


@app.post("/critic-slice", response_model=CriticSliceResponse, tags=["Crítico"])
async def critic_slice(request: CriticSliceRequest):
    """
    Evaluar el ensamble de críticos sobre una observación capturada.

    Devuelve media, mínimo y desviación de Q para cada ángulo de dirección
    de la grilla, con la velocidad objetivo fija.
    """
    if not inspector.loaded:
        raise HTTPException(status_code=503, detail="No hay un checkpoint cargado")
    observation = resolve_observation(request.observation_path)
    grid = np.linspace(request.steering_min, request.steering_max, request.n_steering)
    try:
        rows = inspector.critic_slice(observation, grid, request.velocity_target)
    except FileNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except (CheckpointError, ValueError, RuntimeError) as e:
        logger.error(f"Error evaluando el crítico: {str(e)}")
        raise HTTPException(status_code=500, detail=f"Error evaluando el crítico: {str(e)}")
    best = max(rows, key=lambda r: r.q_mean)
    logger.info(f"Corte del crítico: mejor dirección {best.steering:+.3f} rad")
    return CriticSliceResponse(param_version=inspector.param_version, best_steering=best.steering, rows=rows)


if __name__ == "__main__":
    import uvicorn
    import os

    port = int(os.environ.get("PORT", 8000))
    uvicorn.run("app.main:app", host="0.0.0.0", port=port, reload=True)
