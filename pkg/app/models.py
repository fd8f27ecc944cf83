from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    """Base para los bloques de configuración: rechaza claves desconocidas"""
    model_config = ConfigDict(extra="forbid")


class WorldParams(_Strict):
    """Parámetros del simulador 2D (dinámica, colisión y raster egocéntrico)"""
    dt: float = Field(0.1, gt=0, description="Paso de control (s)")
    wheelbase: float = Field(0.33, gt=0, description="Distancia entre ejes L (m)")
    speed_tau: float = Field(0.4, gt=0, description="Constante de tiempo del retardo de velocidad (s)")
    speed_cap: float = Field(3.5, gt=0, description="Velocidad máxima alcanzable (m/s)")
    velocity_range: Tuple[float, float] = Field((0.5, 3.5), description="Rango de velocidad objetivo (m/s)")
    steering_range: Tuple[float, float] = Field((-0.5, 0.5), description="Rango de dirección (rad)")
    collision_accel: float = Field(6.0, gt=0, description="Umbral A de aceleración lateral (m/s²)")
    fov_deg: float = Field(120.0, gt=0, lt=360)
    max_range: float = Field(10.0, gt=0, description="Alcance máximo de los rayos (m)")
    raster_size: int = Field(64, ge=4, le=256)

    @field_validator("velocity_range", "steering_range")
    @classmethod
    def validate_range(cls, v):
        if v[0] >= v[1]:
            raise ValueError("El rango debe ser creciente")
        return v

    @field_validator("velocity_range")
    @classmethod
    def validate_velocity(cls, v):
        if v[0] < 0:
            raise ValueError("La política nunca comanda velocidad negativa")
        return v


class EstimatorParams(_Strict):
    """Ruido del canal de posición y del EKF de rumbo"""
    localization: Literal["estimated", "truth"] = "estimated"
    position_noise: float = Field(0.15, ge=0, description="σ de posición (m)")
    velocity_noise: float = Field(0.1, ge=0, description="σ de velocidad absoluta (m/s)")
    gyro_noise: float = Field(0.02, ge=0, description="σ del giróscopo (rad/s)")
    process_noise: float = Field(0.01, ge=0, description="Ruido de proceso (rad²/s)")
    meas_noise: float = Field(0.01, gt=0, description="Ruido de medición ((m/s)²)")
    min_speed: float = Field(0.2, ge=0, description="Velocidad mínima para actualizar el rumbo")


class RewardParams(_Strict):
    """Constantes de la recompensa 'speed-made-good'"""
    c_stuck_penalty: float = Field(10.0, ge=0)
    c_collide: float = Field(0.2, ge=0, description="s²/m")
    accel_threshold: float = Field(6.0, gt=0, description="A (m/s²)")


class PracticeParams(_Strict):
    """Máquina de estados de práctica: radio de checkpoint, atasco y recuperación"""
    reach_radius: float = Field(2.0, gt=0)
    stuck_window: float = Field(3.0, gt=0, description="Ventana de atasco (s)")
    stuck_distance: float = Field(0.5, gt=0, description="Desplazamiento mínimo en la ventana (m)")
    stuck_smoothing: int = Field(10, ge=1, description="Muestras de la media móvil de posición para medir el atasco")
    recovery_duration: float = Field(1.0, gt=0)
    recovery_speed: float = Field(-1.0, lt=0)
    recovery_steering: float = Field(0.5, gt=0)
    pseudo_resets: bool = True


class EncoderParams(_Strict):
    """Codificador convolucional"""
    layers: int = Field(4, ge=1)
    kernel: int = Field(3, ge=1)
    stride: int = Field(2, ge=1)
    channels: int = Field(32, ge=1)
    frames: int = Field(3, ge=1)


class NetworkParams(_Strict):
    """Cabezas MLP de actor y crítico"""
    hidden_dims: List[int] = Field(default_factory=lambda: [256, 256])
    input_dense: int = Field(64, ge=1, description="Capa densa de propiocepción+meta+acción")
    squash_delta: float = Field(0.2, gt=0)
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    layer_norm: bool = False


class LearnerConfig(_Strict):
    """Aprendiz en línea estilo RLPD"""
    discount: float = Field(0.99, gt=0, lt=1)
    actor_lr: float = Field(3e-4, gt=0)
    critic_lr: float = Field(3e-4, gt=0)
    temperature_lr: float = Field(3e-4, gt=0)
    ensemble_size: int = Field(10, ge=1)
    target_subset: int = Field(2, ge=1)
    polyak: float = Field(0.005, gt=0, le=1)
    utd: int = Field(8, ge=1)
    batch_size: int = Field(256, ge=1)
    initial_temperature: float = Field(1.0, gt=0)
    initial_target_entropy: float = -3.0
    entropy_decay: float = Field(1e-5, ge=0)
    min_target_entropy: Optional[float] = None
    publish_every: int = Field(50, ge=1)
    checkpoint_every: int = Field(5000, ge=1)
    replay_capacity: int = Field(1_000_000, ge=1)

    @model_validator(mode="after")
    def validate_subset(self):
        if not 1 <= self.target_subset <= self.ensemble_size:
            raise ValueError("target_subset debe cumplir M <= N")
        if self.ensemble_size >= 2 and self.target_subset < 2:
            raise ValueError("Con ensamble, target_subset debe ser al menos 2")
        return self

    def entropy_floor(self, action_dim: int = 2) -> float:
        if self.min_target_entropy is not None:
            return self.min_target_entropy
        return -2.0 * action_dim


class IqlConfig(_Strict):
    """Preentrenamiento IQL condicionado a metas"""
    expectile: float = Field(0.7, gt=0, lt=1)
    discount: float = Field(0.99, gt=0, lt=1)
    actor_lr: float = Field(3e-4, gt=0)
    critic_lr: float = Field(3e-4, gt=0)
    value_lr: float = Field(3e-4, gt=0)
    awr_temperature: float = Field(3.0, gt=0)
    max_weight: float = Field(100.0, gt=0)
    polyak: float = Field(0.005, gt=0, le=1)
    n_critics: int = Field(2, ge=1)
    batch_size: int = Field(256, ge=1)
    steps: int = Field(20_000, ge=1)
    max_goal_offset: int = Field(100, ge=1)
    future_goal_prob: float = Field(0.5, ge=0, le=1)


class PriorDataConfig(_Strict):
    """Generación del conjunto previo de navegación a baja velocidad"""
    n_maps: int = Field(10, ge=1)
    steps_per_map: int = Field(1000, ge=1)
    cruise_speed: float = Field(1.2, gt=0)
    max_speed: float = Field(1.5, gt=0)
    map_retries: int = Field(5, ge=1)
    n_jobs: int = Field(1, description="Procesos de joblib (-1 = todos)")

    @model_validator(mode="after")
    def validate_speed(self):
        if self.cruise_speed > self.max_speed:
            raise ValueError("cruise_speed no puede superar max_speed")
        return self


class LinkParams(_Strict):
    """Enlace robot ↔ estación de trabajo"""
    transport: Literal["loopback", "tcp"] = "loopback"
    host: str = "127.0.0.1"
    port: int = Field(7755, ge=1, le=65535)
    flush_every: int = Field(10, ge=1, description="K pasos por TRANSITION_BATCH")
    latency_s: float = Field(0.0, ge=0)
    heartbeat_s: float = Field(1.0, gt=0)
    outgoing_cap: int = Field(10_000, ge=1)


class CourseParams(_Strict):
    """Mapa y circuito"""
    map_seed: int = Field(0, ge=0)
    map_file: Optional[Path] = None
    checkpoints: Optional[List[Tuple[float, float]]] = None
    n_checkpoints: int = Field(4, ge=2)
    demo_speed: float = Field(1.4, gt=0, le=1.5)
    oracle_speed: float = Field(3.0, gt=0)


class AblationFlags(_Strict):
    """Ablaciones: cada bandera desactiva o reemplaza un solo componente"""
    no_demo: bool = False
    no_pretrain: bool = False
    no_pseudo_resets: bool = False
    state_based: bool = False
    blind: bool = False

    @model_validator(mode="after")
    def validate_modes(self):
        if self.state_based and self.blind:
            raise ValueError("state_based y blind son excluyentes")
        return self


class PhaseToggles(_Strict):
    pretrain: bool = True
    demo: bool = True
    online: bool = True


class RunConfig(_Strict):
    """Configuración declarativa completa de una corrida"""
    seed: int = Field(0, ge=0)
    step_budget: int = Field(100_000, ge=1)
    output_dir: Path = Path("runs/default")
    encoder_checkpoint: Optional[Path] = None
    prior_dir: Optional[Path] = None
    lap_timeout_s: float = Field(120.0, gt=0)
    eval_laps: int = Field(5, ge=1)
    snapshot_every: int = Field(1000, ge=1)

    world: WorldParams = Field(default_factory=WorldParams)
    estimator: EstimatorParams = Field(default_factory=EstimatorParams)
    reward: RewardParams = Field(default_factory=RewardParams)
    practice: PracticeParams = Field(default_factory=PracticeParams)
    encoder: EncoderParams = Field(default_factory=EncoderParams)
    network: NetworkParams = Field(default_factory=NetworkParams)
    learner: LearnerConfig = Field(default_factory=LearnerConfig)
    iql: IqlConfig = Field(default_factory=IqlConfig)
    prior: PriorDataConfig = Field(default_factory=PriorDataConfig)
    link: LinkParams = Field(default_factory=LinkParams)
    course: CourseParams = Field(default_factory=CourseParams)
    ablations: AblationFlags = Field(default_factory=AblationFlags)
    phases: PhaseToggles = Field(default_factory=PhaseToggles)

    @model_validator(mode="after")
    def align_thresholds(self):
        # El umbral de colisión del simulador es el mismo A de la recompensa;
        # manda el bloque que lo fijó explícitamente (reward si son ambos)
        if "accel_threshold" in self.reward.model_fields_set:
            self.world.collision_accel = self.reward.accel_threshold
        elif "collision_accel" in self.world.model_fields_set:
            self.reward.accel_threshold = self.world.collision_accel
        elif self.reward.accel_threshold != self.world.collision_accel:
            self.world.collision_accel = self.reward.accel_threshold
        if self.ablations.no_pseudo_resets:
            self.practice.pseudo_resets = False
        return self

    @property
    def observation_mode(self) -> str:
        """raster (por defecto), state (privilegiado) o blind"""
        if self.ablations.state_based:
            return "state"
        if self.ablations.blind:
            return "blind"
        return "raster"

    @property
    def uses_demo(self) -> bool:
        return self.phases.demo and not self.ablations.no_demo

    @property
    def trains_encoder(self) -> bool:
        return self.observation_mode == "raster" and (
            self.ablations.no_pretrain or not self.phases.pretrain
        )


class LapRecord(BaseModel):
    """Registro de una vuelta completada (o DNF en evaluación)"""
    lap_index: int = Field(..., ge=0)
    lap_time: float = Field(..., description="Tiempo de vuelta (s); NaN si DNF")
    collisions: int = Field(0, ge=0)
    stuck_events: int = Field(0, ge=0)
    sim_time: float = Field(..., ge=0, description="Tiempo simulado al cerrar la vuelta")
    env_step: int = Field(..., ge=0)
    wall_clock: float = Field(0.0, description="Segundos de reloj desde el inicio")
    dnf: bool = False

    @model_validator(mode="after")
    def validate_time(self):
        if not self.dnf and not self.lap_time > 0:
            raise ValueError("El tiempo de vuelta debe ser positivo")
        return self


# ============================================================================
# MODELOS DE LA API HTTP
# ============================================================================

class HealthResponse(BaseModel):
    """Modelo para la respuesta de health check"""
    status: str
    models_loaded: bool
    param_version: Optional[int] = None
    timestamp: str


class RunSummaryResponse(BaseModel):
    """Resumen de vueltas de una corrida"""
    run: str
    laps: int
    summary: Dict[str, Optional[float]]


class CriticSliceRequest(BaseModel):
    """Pedido de corte del crítico frente a la dirección inyectada"""
    observation_path: str = Field(..., description="Archivo .npz de una corrida, relativo a FASTLAP_RUNS_DIR")
    steering_min: float = Field(-0.5, ge=-0.5, le=0.5)
    steering_max: float = Field(0.5, ge=-0.5, le=0.5)
    n_steering: int = Field(21, ge=2, le=201)
    velocity_target: float = Field(2.0, ge=0.5, le=3.5)

    @model_validator(mode="after")
    def validate_grid(self):
        if self.steering_min >= self.steering_max:
            raise ValueError("steering_min debe ser menor que steering_max")
        return self

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "observation_path": "default/snapshots/obs_001000.npz",
                "steering_min": -0.5,
                "steering_max": 0.5,
                "n_steering": 21,
                "velocity_target": 2.0,
            }
        }
    )


class CriticSliceRow(BaseModel):
    steering: float
    q_mean: float
    q_min: float
    q_std: float


class CriticSliceResponse(BaseModel):
    """Valores Q del ensamble para cada dirección de la grilla"""
    param_version: int
    best_steering: float
    rows: List[CriticSliceRow]
