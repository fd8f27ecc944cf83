"""Mundo de conducción 2D determinista: bicicleta cinemática, terreno y raster egocéntrico"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.path import Path as PolygonPath

from .models import WorldParams

logger = logging.getLogger(__name__)

# Retroceso desde el punto de contacto al resolver una colisión (m)
CONTACT_BACKOFF = 0.01
# En contacto la aceleración lateral salta a 5·A; en movimiento libre queda bajo 0.9·A
COLLISION_SPIKE = 5.0
FREE_MOTION_CAP = 0.9


def wrap_angle(angle: float) -> float:
    """Envuelve un ángulo al intervalo (-π, π]"""
    return math.pi - ((math.pi - angle) % (2.0 * math.pi))


@dataclass(frozen=True)
class CarState:
    """Estado del vehículo en el marco del mundo"""
    x: float
    y: float
    heading: float
    speed: float = 0.0
    yaw_rate: float = 0.0
    lateral_accel: float = 0.0
    long_accel: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    @property
    def linear_accel(self) -> np.ndarray:
        """Aceleración lineal en el marco del cuerpo (longitudinal, lateral)"""
        return np.array([self.long_accel, self.lateral_accel], dtype=np.float64)

    def velocity(self) -> np.ndarray:
        """Velocidad en el marco del mundo (sin deslizamiento lateral)"""
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])

    def body_velocity(self) -> np.ndarray:
        return np.array([self.speed, 0.0])

    def proprio(self) -> np.ndarray:
        """v, ω y α en el marco del cuerpo, 3 componentes cada uno (z = 0 en 2D)"""
        return np.array(
            [self.speed, 0.0, 0.0, 0.0, 0.0, self.yaw_rate, self.long_accel, self.lateral_accel, 0.0],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class Action:
    """Comando (velocidad objetivo, dirección) en unidades físicas"""
    velocity_target: float
    steering: float

    def __post_init__(self):
        if not (math.isfinite(self.velocity_target) and math.isfinite(self.steering)):
            raise ValueError("Acción con valores no finitos")

    @classmethod
    def clipped(cls, velocity_target: float, steering: float, params: WorldParams) -> "Action":
        """Acción de política recortada a los rangos globales"""
        v_lo, v_hi = params.velocity_range
        s_lo, s_hi = params.steering_range
        return cls(float(np.clip(velocity_target, v_lo, v_hi)), float(np.clip(steering, s_lo, s_hi)))

    def is_policy_action(self, params: WorldParams, tol: float = 1e-6) -> bool:
        v_lo, v_hi = params.velocity_range
        s_lo, s_hi = params.steering_range
        return (v_lo - tol <= self.velocity_target <= v_hi + tol) and (s_lo - tol <= self.steering <= s_hi + tol)


@dataclass
class WorldMap:
    """Límites, obstáculos convexos y grilla de terreno (factor de velocidad y arrastre)"""
    bounds: Tuple[float, float, float, float]
    obstacles: List[np.ndarray]
    speed_factor: np.ndarray
    drag: np.ndarray
    cell_size: float
    map_id: str = "map"

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("Límites de mapa inválidos")
        if self.cell_size <= 0:
            raise ValueError("cell_size debe ser positivo")
        self.obstacles = [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in self.obstacles]
        self.speed_factor = np.asarray(self.speed_factor, dtype=np.float64)
        self.drag = np.asarray(self.drag, dtype=np.float64)
        if self.speed_factor.shape != self.drag.shape or self.speed_factor.ndim != 2:
            raise ValueError("Las grillas de terreno deben ser 2D y de igual forma")
        if np.any(self.speed_factor <= 0) or np.any(self.speed_factor > 1):
            raise ValueError("El factor de velocidad debe estar en (0, 1]")
        if np.any(self.drag < 0):
            raise ValueError("El arrastre debe ser no negativo")
        self._paths = [PolygonPath(p) for p in self.obstacles]
        self._segments = self._build_segments()

    @classmethod
    def uniform(cls, bounds, obstacles: Sequence = (), cell_size: float = 1.0, map_id: str = "map") -> "WorldMap":
        """Mapa con terreno nominal en toda su extensión"""
        xmin, ymin, xmax, ymax = bounds
        rows = max(1, int(math.ceil((ymax - ymin) / cell_size)))
        cols = max(1, int(math.ceil((xmax - xmin) / cell_size)))
        return cls(bounds, list(obstacles), np.ones((rows, cols)), np.zeros((rows, cols)), cell_size, map_id)

    def _build_segments(self) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.bounds
        corners = np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])
        segs = [np.stack([corners, np.roll(corners, -1, axis=0)], axis=1)]
        for poly in self.obstacles:
            segs.append(np.stack([poly, np.roll(poly, -1, axis=0)], axis=1))
        return np.concatenate(segs, axis=0)

    @property
    def segments(self) -> np.ndarray:
        """Aristas (m, 2, 2) de límites y obstáculos"""
        return self._segments

    def terrain_at(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """Factor de velocidad y arrastre en los puntos dados; fuera de la grilla es terreno nominal"""
        pts = np.asarray(points, dtype=np.float64)
        xmin, ymin, _, _ = self.bounds
        cols = np.floor((pts[..., 0] - xmin) / self.cell_size).astype(np.int64)
        rows = np.floor((pts[..., 1] - ymin) / self.cell_size).astype(np.int64)
        n_rows, n_cols = self.speed_factor.shape
        inside = (rows >= 0) & (rows < n_rows) & (cols >= 0) & (cols < n_cols)
        rows_c = np.clip(rows, 0, n_rows - 1)
        cols_c = np.clip(cols, 0, n_cols - 1)
        sf = np.where(inside, self.speed_factor[rows_c, cols_c], 1.0)
        drag = np.where(inside, self.drag[rows_c, cols_c], 0.0)
        return sf, drag

    def in_bounds(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        xmin, ymin, xmax, ymax = self.bounds
        return (pts[:, 0] > xmin) & (pts[:, 0] < xmax) & (pts[:, 1] > ymin) & (pts[:, 1] < ymax)

    def is_free(self, points) -> np.ndarray:
        """Puntos dentro de los límites y fuera de todo obstáculo"""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        free = self.in_bounds(pts)
        for path in self._paths:
            free &= ~path.contains_points(pts)
        return free


@dataclass(frozen=True)
class EgoRaster:
    """Pila de cuadros de profundidad, del más viejo al más nuevo"""
    frames: np.ndarray

    @classmethod
    def initial(cls, frame: np.ndarray, n_frames: int = 3) -> "EgoRaster":
        return cls(np.repeat(frame[None].astype(np.float32), n_frames, axis=0))

    def push(self, frame: np.ndarray) -> "EgoRaster":
        return EgoRaster(np.concatenate([self.frames[1:], frame[None].astype(np.float32)], axis=0))

    @property
    def newest(self) -> np.ndarray:
        return self.frames[-1]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def first_hits(origins: np.ndarray, dirs: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """
    Parámetro t del primer impacto de cada rayo o + t·d con las aristas.

    Devuelve inf para los rayos sin impacto. Con d unitario, t es la distancia.
    """
    seg_a = segments[:, 0, :]
    edge = segments[:, 1, :] - seg_a
    denom = _cross(dirs[:, None, :], edge[None, :, :])
    diff = seg_a[None, :, :] - origins[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(diff, edge[None, :, :]) / denom
        u = _cross(diff, dirs[:, None, :]) / denom
    valid = (np.abs(denom) > 1e-12) & (t > 1e-12) & (u >= 0.0) & (u <= 1.0)
    return np.where(valid, t, np.inf).min(axis=1)


def step_dynamics(state: CarState, action: Action, world_map: WorldMap, dt: float,
                  params: Optional[WorldParams] = None) -> CarState:
    """
    Integra un paso del modelo de bicicleta cinemática.

    La velocidad se relaja hacia velocity_target × factor de terreno con un
    retardo de primer orden; una colisión fija la posición en el contacto y
    dispara la aceleración lateral por encima del umbral.
    """
    params = params or WorldParams()
    inputs = (state.x, state.y, state.heading, state.speed, action.velocity_target, action.steering, dt)
    if not all(math.isfinite(v) for v in inputs):
        raise ValueError("Entrada no finita en step_dynamics")
    if dt <= 0:
        raise ValueError("dt debe ser positivo")

    sf, drag = world_map.terrain_at(np.array([state.x, state.y]))
    target = action.velocity_target * float(sf)
    alpha = 1.0 - math.exp(-dt / params.speed_tau)
    speed = state.speed + (target - state.speed) * alpha
    speed *= max(0.0, 1.0 - float(drag) * dt)
    speed = float(np.clip(speed, -params.speed_cap, params.speed_cap))

    tan_s = math.tan(action.steering)
    yaw_rate = speed * tan_s / params.wheelbase
    heading_mid = state.heading + 0.5 * yaw_rate * dt
    disp = np.array([speed * dt * math.cos(heading_mid), speed * dt * math.sin(heading_mid)])
    heading = wrap_angle(state.heading + yaw_rate * dt)
    free_cap = FREE_MOTION_CAP * params.collision_accel
    lateral = float(np.clip(speed * yaw_rate, -free_cap, free_cap))
    long_accel = (speed - state.speed) / dt

    length = float(np.hypot(disp[0], disp[1]))
    if length > 0.0:
        t_hit = first_hits(np.array([[state.x, state.y]]), disp[None, :], world_map.segments)[0]
        if t_hit <= 1.0:
            travel = max(t_hit * length - CONTACT_BACKOFF, 0.0)
            pos = np.array([state.x, state.y]) + disp / length * travel
            spike = COLLISION_SPIKE * params.collision_accel * (1.0 if tan_s >= 0 else -1.0)
            logger.debug("Colisión en (%.2f, %.2f)", pos[0], pos[1])
            return CarState(float(pos[0]), float(pos[1]), heading, 0.0, 0.0, spike, -state.speed / dt)

    return CarState(state.x + float(disp[0]), state.y + float(disp[1]), heading, speed, yaw_rate,
                    lateral, long_accel)


def render_frame(state: CarState, world_map: WorldMap, params: Optional[WorldParams] = None) -> np.ndarray:
    """Un cuadro H×W: cada columna es un rayo; filas = bandas de alcance (fila 0 la más lejana)"""
    params = params or WorldParams()
    n = params.raster_size
    fov = math.radians(params.fov_deg)
    offsets = fov / 2.0 - np.arange(n) * fov / (n - 1)
    angles = state.heading + offsets
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origin = np.array([state.x, state.y])
    hits = np.minimum(first_hits(np.tile(origin, (n, 1)), dirs, world_map.segments), params.max_range)
    norm = hits / params.max_range
    ranges = params.max_range * (n - np.arange(n)) / n
    sample = np.minimum(ranges[:, None], hits[None, :])
    points = origin + sample[..., None] * dirs[None, :, :]
    sf, _ = world_map.terrain_at(points)
    return (norm[None, :] * sf).astype(np.float32)


def render_ego(state: CarState, world_map: WorldMap, prev: Optional[EgoRaster] = None,
               params: Optional[WorldParams] = None, n_frames: int = 3) -> EgoRaster:
    """Renderiza el cuadro actual y lo apila sobre los anteriores"""
    if not world_map.in_bounds([state.x, state.y])[0]:
        raise ValueError("El vehículo está fuera de los límites del mapa")
    frame = render_frame(state, world_map, params)
    if prev is None:
        return EgoRaster.initial(frame, n_frames)
    return prev.push(frame)


def relative_goal(pose, checkpoint) -> Tuple[np.ndarray, float]:
    """Dirección unitaria y distancia al checkpoint en el marco del cuerpo"""
    cx, cy = float(checkpoint[0]), float(checkpoint[1])
    if not (math.isfinite(cx) and math.isfinite(cy)):
        raise ValueError("Checkpoint no finito")
    dx, dy = cx - pose.x, cy - pose.y
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    bx = c * dx + s * dy
    by = -s * dx + c * dy
    dist = math.hypot(bx, by)
    if dist == 0.0:
        return np.array([1.0, 0.0]), 0.0
    return np.array([bx / dist, by / dist]), dist


def goal_vector(pose, checkpoint) -> np.ndarray:
    """(dir_x, dir_y, distancia) tal como viaja en el estado observado"""
    direction, dist = relative_goal(pose, checkpoint)
    return np.array([direction[0], direction[1], dist], dtype=np.float32)


class DrivingWorld:
    """Instancia de mundo: estado del vehículo y pila de raster; sin estado compartido"""

    def __init__(self, world_map: WorldMap, params: WorldParams, start: CarState, n_frames: int = 3):
        self.map = world_map
        self.params = params
        self.start = start
        self.n_frames = n_frames
        self.state = start
        self.raster: Optional[EgoRaster] = None

    def reset(self, state: Optional[CarState] = None) -> CarState:
        self.state = state or self.start
        self.raster = None
        return self.state

    def step(self, action: Action) -> CarState:
        self.state = step_dynamics(self.state, action, self.map, self.params.dt, self.params)
        return self.state

    def observe(self) -> EgoRaster:
        self.raster = render_ego(self.state, self.map, self.raster, self.params, self.n_frames)
        return self.raster

    def teleport(self, **changes) -> CarState:
        self.state = replace(self.state, **changes)
        return self.state

    def state_dict(self) -> dict:
        return {"state": self.state, "raster": None if self.raster is None else self.raster.frames.copy()}

    def load_state_dict(self, saved: dict) -> None:
        self.state = saved["state"]
        self.raster = None if saved["raster"] is None else EgoRaster(saved["raster"].copy())
