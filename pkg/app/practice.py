"""
Máquina de estados de práctica autónoma.

Alterna entre perseguir el checkpoint activo y la maniobra de recuperación
(pseudo-reset). Calcula la recompensa de velocidad hacia la meta, detecta
colisiones y atascos y registra vueltas.
"""
import copy
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Optional, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from .models import PracticeParams, RewardParams
from .seeding import RECOVERY, substream
from .world import Action, CarState, WorldMap

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    PRACTICING = "Practicing"
    RECOVERING = "Recovering"


class Blocked(str, Enum):
    OK = "Ok"
    COLLIDED = "Collided"
    STUCK = "Stuck"


@dataclass(frozen=True)
class Course:
    """Checkpoints ordenados y cíclicos con radio de alcance"""
    checkpoints: np.ndarray
    reach_radius: float = 2.0

    def __post_init__(self):
        pts = np.asarray(self.checkpoints, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "checkpoints", pts)
        if len(pts) < 2:
            raise ValueError("Un circuito necesita al menos 2 checkpoints")
        if not self.reach_radius > 0:
            raise ValueError("reach_radius debe ser positivo")
        if not np.all(np.isfinite(pts)):
            raise ValueError("Checkpoints no finitos")

    def __len__(self) -> int:
        return len(self.checkpoints)

    def successor(self, index: int) -> int:
        return (index + 1) % len(self)

    def validate_on(self, world_map: WorldMap) -> "Course":
        if not np.all(world_map.is_free(self.checkpoints)):
            raise ValueError(f"Hay checkpoints fuera del espacio libre de {world_map.map_id}")
        return self


@dataclass(frozen=True)
class LapEvent:
    lap_time: float
    collisions: int
    stuck_events: int
    finished_at: float


@dataclass
class PracticeState:
    mode: Mode = Mode.PRACTICING
    active_checkpoint_index: int = 0
    # (t, x, y, acelerador no nulo) desde la última entrada en Practicing
    position_history: Deque[Tuple[float, float, float, bool]] = field(default_factory=deque)
    lap_start_time: Optional[float] = None
    laps_completed: int = 0
    collisions_this_lap: int = 0
    stuck_events_this_lap: int = 0
    practicing_since: float = 0.0
    recovery_started: Optional[float] = None
    recovery_seed: int = 0
    last_lap: Optional[LapEvent] = None

    def record(self, now: float, position, throttle: float, horizon: float) -> None:
        self.position_history.append((now, float(position[0]), float(position[1]), throttle != 0.0))
        while self.position_history and self.position_history[0][0] < now - horizon - 1e-9:
            self.position_history.popleft()


def compute_reward(velocity, goal_dir, lateral_accel: float, stuck: bool, params: RewardParams) -> float:
    """r = v·ĝ − C_stuck·1[stuck] − C_collide·1[|a_lat| > A]·|a_lat|"""
    g = np.asarray(goal_dir, dtype=np.float64)
    if abs(float(np.linalg.norm(g)) - 1.0) > 1e-6:
        raise ValueError("goal_dir debe ser unitario")
    reward = float(np.dot(np.asarray(velocity, dtype=np.float64), g))
    if stuck:
        reward -= params.c_stuck_penalty
    if abs(lateral_accel) > params.accel_threshold:
        reward -= params.c_collide * abs(lateral_accel)
    return reward


def advance_checkpoint(ps: PracticeState, position, course: Course, now: float) -> PracticeState:
    """
    Avanza el checkpoint activo si la posición está dentro del radio.

    La primera llegada al checkpoint 0 arma el cronómetro; cada llegada
    posterior al 0 cierra una vuelta y deja el evento en `last_lap`.
    """
    if ps.mode != Mode.PRACTICING:
        raise ValueError("advance_checkpoint solo aplica en Practicing")
    ps.last_lap = None
    target = course.checkpoints[ps.active_checkpoint_index]
    if np.linalg.norm(np.asarray(position, dtype=np.float64) - target) >= course.reach_radius:
        return ps
    if ps.active_checkpoint_index == 0:
        if ps.lap_start_time is not None:
            ps.last_lap = LapEvent(now - ps.lap_start_time, ps.collisions_this_lap,
                                   ps.stuck_events_this_lap, now)
            ps.laps_completed += 1
            logger.info("Vuelta %d completada en %.2f s (%d colisiones)",
                        ps.laps_completed, ps.last_lap.lap_time, ps.collisions_this_lap)
        ps.lap_start_time = now
        ps.collisions_this_lap = 0
        ps.stuck_events_this_lap = 0
    ps.active_checkpoint_index = course.successor(ps.active_checkpoint_index)
    return ps


def smoothed_spread(points: np.ndarray, k: int) -> float:
    """Máxima distancia entre medias móviles de k posiciones; con k = 1 son las posiciones crudas"""
    k = max(1, min(k, len(points) // 2))
    kernel = np.ones(k) / k
    smooth = np.column_stack([np.convolve(points[:, i], kernel, mode="valid") for i in range(2)])
    return float(pdist(smooth).max())


def detect_blocked(ps: PracticeState, lateral_accel: float, now: float, params: RewardParams,
                   practice: Optional[PracticeParams] = None) -> Blocked:
    practice = practice or PracticeParams()
    if abs(lateral_accel) > params.accel_threshold:
        return Blocked.COLLIDED
    if now - ps.practicing_since < practice.stuck_window - 1e-9:
        return Blocked.OK
    window = [h for h in ps.position_history if h[0] >= now - practice.stuck_window - 1e-9]
    if len(window) < 2 or window[0][0] > now - practice.stuck_window + 1e-9:
        return Blocked.OK
    if not all(h[3] for h in window):
        return Blocked.OK
    spread = smoothed_spread(np.array([[h[1], h[2]] for h in window]), practice.stuck_smoothing)
    return Blocked.STUCK if spread < practice.stuck_distance else Blocked.OK


def recovery_step(rng_seed: int, elapsed_in_recovery: float,
                  params: Optional[PracticeParams] = None) -> Tuple[Action, bool]:
    """Marcha atrás con una dirección uniforme fija por semilla durante la duración de recuperación"""
    params = params or PracticeParams()
    steering = float(np.random.default_rng(rng_seed).uniform(-params.recovery_steering,
                                                             params.recovery_steering))
    done = elapsed_in_recovery >= params.recovery_duration - 1e-9
    return Action(params.recovery_speed, steering), done


@dataclass(frozen=True)
class TickOutcome:
    """Resultado de un paso de control visto por la FSM"""
    reward: float
    done: bool
    blocked: Blocked
    record_transition: bool
    lap: Optional[LapEvent]
    telemetry: Dict[str, float]


class PracticeFSM:
    """Envuelve PracticeState, el circuito y las constantes; avanza un tick de control por vez"""

    def __init__(self, course: Course, reward: RewardParams, practice: PracticeParams, seed: int,
                 dt: float = 0.1):
        self.course = course
        self.reward_params = reward
        self.params = practice
        self.dt = dt
        self.rng = substream(seed, RECOVERY)
        self.state = PracticeState()
        self._motion: Deque[Tuple[float, float, float]] = deque()
        self.total_collisions = 0
        self.total_stuck_events = 0
        self.stuck_time = 0.0

    @property
    def mode(self) -> Mode:
        return self.state.mode

    @property
    def active_checkpoint(self) -> np.ndarray:
        return self.course.checkpoints[self.state.active_checkpoint_index]

    def recovery_command(self, now: float) -> Tuple[Optional[Action], bool]:
        """Acción de recuperación vigente; al terminar vuelve a Practicing y devuelve (None, True)"""
        ps = self.state
        if ps.mode != Mode.RECOVERING:
            return None, True
        action, done = recovery_step(ps.recovery_seed, now - ps.recovery_started, self.params)
        if done:
            ps.mode = Mode.PRACTICING
            ps.practicing_since = now
            ps.recovery_started = None
            ps.position_history.clear()
            logger.debug("Recuperación terminada en t=%.1f", now)
            return None, True
        return action, False

    def _account_motion(self, now: float, position) -> None:
        horizon = self.params.stuck_window
        self._motion.append((now, float(position[0]), float(position[1])))
        while self._motion and self._motion[0][0] < now - horizon - 1e-9:
            self._motion.popleft()
        if self._motion[0][0] <= now - horizon + 1e-9 and len(self._motion) >= 2:
            spread = smoothed_spread(np.array([[m[1], m[2]] for m in self._motion]), self.params.stuck_smoothing)
            if spread < self.params.stuck_distance:
                self.stuck_time += self.dt

    def after_step(self, state: CarState, action: Action, acted_in: Mode, now: float) -> TickOutcome:
        """
        Procesa el estado resultante de ejecutar `action`.

        Solo las transiciones decididas en Practicing se registran; la
        penalización de atasco va en la transición que disparó la detección
        con done = 1.
        """
        ps = self.state
        self._account_motion(now, state.position)
        reward, done, blocked, lap = 0.0, False, Blocked.OK, None
        if acted_in == Mode.PRACTICING:
            ps.record(now, state.position, action.velocity_target, self.params.stuck_window + 1.0)
            blocked = detect_blocked(ps, state.lateral_accel, now, self.reward_params, self.params)
            delta = self.active_checkpoint - state.position
            dist = float(np.linalg.norm(delta))
            goal_dir = delta / dist if dist > 0 else np.array([math.cos(state.heading), math.sin(state.heading)])
            reward = compute_reward(state.velocity(), goal_dir, state.lateral_accel,
                                    blocked == Blocked.STUCK, self.reward_params)
            if blocked != Blocked.OK:
                done = True
                self._on_blocked(blocked, now)
            else:
                advance_checkpoint(ps, state.position, self.course, now)
                lap = ps.last_lap
        telemetry = {
            "time": now, "x": state.x, "y": state.y, "speed": state.speed, "reward": reward,
            "mode": ps.mode.value, "active_checkpoint": ps.active_checkpoint_index,
            "laps": ps.laps_completed, "collisions": self.total_collisions,
            "stuck_time": self.stuck_time,
        }
        return TickOutcome(reward, done, blocked, acted_in == Mode.PRACTICING, lap, telemetry)

    def _on_blocked(self, blocked: Blocked, now: float) -> None:
        ps = self.state
        if blocked == Blocked.COLLIDED:
            ps.collisions_this_lap += 1
            self.total_collisions += 1
        else:
            ps.stuck_events_this_lap += 1
            self.total_stuck_events += 1
        ps.position_history.clear()
        logger.debug("Bloqueo %s en t=%.1f", blocked.value, now)
        if self.params.pseudo_resets:
            ps.mode = Mode.RECOVERING
            ps.recovery_started = now
            ps.recovery_seed = int(self.rng.integers(0, 2**63 - 1))
        else:
            ps.practicing_since = now

    def state_dict(self) -> dict:
        """Todo lo que la FSM arrastra entre ticks, para reanudar una corrida"""
        return {
            "state": copy.deepcopy(self.state), "motion": list(self._motion),
            "total_collisions": self.total_collisions, "total_stuck_events": self.total_stuck_events,
            "stuck_time": self.stuck_time, "rng": self.rng.bit_generator.state,
        }

    def load_state_dict(self, saved: dict) -> None:
        self.state = copy.deepcopy(saved["state"])
        self._motion = deque(saved["motion"])
        self.total_collisions = saved["total_collisions"]
        self.total_stuck_events = saved["total_stuck_events"]
        self.stuck_time = saved["stuck_time"]
        self.rng.bit_generator.state = saved["rng"]
