"""Inspección del crítico: cortes de Q frente a la dirección para una observación capturada"""
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd
import torch

from .config import CHECKPOINT_PATH, load_run_config
from .learner import CheckpointError, checkpoint_counters
from .models import CriticSliceRow, RunConfig
from .networks import ActionScaler, CriticEnsemble, ParamSet, ParamSetError, build_critic, encoder_from_paramset

logger = logging.getLogger(__name__)


def _run_config_for(checkpoint: Path) -> RunConfig:
    """La configuración de la corrida vive dos niveles arriba de checkpoints/learner.flpw"""
    candidate = checkpoint.parent.parent / "config.yaml"
    return load_run_config(candidate if candidate.exists() else None)


class CriticInspector:
    """Clase para cargar un checkpoint del aprendiz y evaluar su ensamble de críticos"""

    def __init__(self, checkpoint: Union[str, Path, None] = None, config: Optional[RunConfig] = None):
        self.critic: Optional[CriticEnsemble] = None
        self.encoder = None
        self.param_version = 0
        self.config = config
        if checkpoint:
            self._load(Path(checkpoint))

    def _load(self, checkpoint: Path) -> None:
        if not checkpoint.exists():
            raise CheckpointError(f"No existe el checkpoint {checkpoint}")
        try:
            ps = ParamSet.decode(checkpoint.read_bytes())
        except ParamSetError as exc:
            raise CheckpointError(f"Checkpoint corrupto: {exc}") from exc
        feature_dim = checkpoint_counters(ps)["feature_dim"]
        self.config = self.config or _run_config_for(checkpoint)
        critic = build_critic(self.config.learner.ensemble_size, feature_dim, self.config.network, self.config.seed)
        try:
            ps.load_module("critic", critic)
        except (ParamSetError, RuntimeError) as exc:
            raise CheckpointError(f"Crítico incompatible: {exc}") from exc
        self.critic = critic.eval()
        if ps.subset("encoder"):
            self.encoder = encoder_from_paramset(ps).eval()
        self.param_version = ps.version
        logger.info("Crítico cargado desde %s (v%d, %d miembros)", checkpoint, ps.version, critic.n_members)

    @property
    def loaded(self) -> bool:
        return self.critic is not None

    @torch.no_grad()
    def critic_slice(self, observation: Union[str, Path], steering: np.ndarray,
                     velocity_target: float) -> List[CriticSliceRow]:
        """Q de cada miembro para (velocidad fija, dirección variable) sobre una observación guardada"""
        if not self.loaded:
            raise CheckpointError("No hay un crítico cargado")
        path = Path(observation)
        if not path.exists():
            raise FileNotFoundError(f"No existe la observación {path}")
        with np.load(path) as f:
            obs = {k: torch.from_numpy(f[k].astype(np.float32)) for k in ("features", "proprio", "goal", "prev_action")}
        n = len(steering)
        scaler = ActionScaler(self.config.world)
        actions = np.stack([scaler.to_normalized([velocity_target, s]) for s in steering]).astype(np.float32)
        feats = obs["features"].unsqueeze(0)
        if self.encoder is not None:
            frames, size = self.encoder.params.frames, self.encoder.raster_size
            feats = self.encoder(feats.reshape(1, frames, size, size))
        q = self.critic(feats.expand(n, -1), obs["proprio"].expand(n, -1), obs["goal"].expand(n, -1),
                        obs["prev_action"].expand(n, -1), torch.from_numpy(actions))
        q = q.numpy()
        return [CriticSliceRow(steering=float(s), q_mean=float(q[:, i].mean()), q_min=float(q[:, i].min()),
                               q_std=float(q[:, i].std())) for i, s in enumerate(steering)]


def dump_critic_slice(checkpoint: Union[str, Path], observation: Union[str, Path], steering_grid: np.ndarray,
                      output: Union[str, Path], velocity_target: float = 2.0,
                      config: Optional[RunConfig] = None) -> pd.DataFrame:
    """Escribe el corte del crítico en CSV (columnas steering, q_mean, q_min, q_std)"""
    rows = CriticInspector(checkpoint, config).critic_slice(observation, np.asarray(steering_grid), velocity_target)
    table = pd.DataFrame([r.model_dump() for r in rows])
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(output, index=False)
    return table


def _load_default() -> CriticInspector:
    try:
        return CriticInspector(CHECKPOINT_PATH or None)
    except CheckpointError as exc:
        logger.error(f"Error cargando el checkpoint del crítico: {exc}")
        return CriticInspector()


# Instancia global del inspector
inspector = _load_default()
