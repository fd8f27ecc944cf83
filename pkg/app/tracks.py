"""
Mapas procedurales, codec FLMAP v1, planificador en grilla y seguidor pure-pursuit.

El circuito de evaluación, los mapas del conjunto previo y los mapas densos
comparten el mismo WorldMap; sus identificadores van en espacios de nombres
distintos (`course-<seed>`, `prior-<seed>`, `dense-<seed>`).
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import ConvexHull

from .models import WorldParams
from .seeding import WORLD, substream
from .world import Action, CarState, WorldMap, wrap_angle

logger = logging.getLogger(__name__)

FLMAP_HEADER = "FLMAP v1"
MUD_SPEED_FACTOR = 0.35


class MapGenerationError(RuntimeError):
    """No se obtuvo un mapa con espacio libre conectado tras los reintentos"""


@dataclass
class TrackLayout:
    """Mapa más la línea central de referencia y la pose de salida"""
    world_map: WorldMap
    centerline: np.ndarray
    start: CarState

    @property
    def length(self) -> float:
        return path_length(self.centerline)


def box(x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Rectángulo como polígono convexo antihorario"""
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)


def path_length(path: np.ndarray) -> float:
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def resample_path(path: np.ndarray, spacing: float) -> np.ndarray:
    """Reinterpola una polilínea a espaciado uniforme por longitud de arco"""
    path = np.asarray(path, dtype=np.float64)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    if arc[-1] == 0.0:
        return path[:1].copy()
    n = max(2, int(math.ceil(arc[-1] / spacing)) + 1)
    s = np.linspace(0.0, arc[-1], n)
    return np.stack([np.interp(s, arc, path[:, 0]), np.interp(s, arc, path[:, 1])], axis=1)


def checkpoints_from_path(path: np.ndarray, n_checkpoints: int) -> np.ndarray:
    """n puntos del recorrido equiespaciados por longitud de arco; el primero es el inicio"""
    path = np.asarray(path, dtype=np.float64)
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = arc[-1] * np.arange(n_checkpoints) / n_checkpoints
    idx = np.searchsorted(arc, targets, side="left").clip(0, len(path) - 1)
    return path[idx].copy()


def _terrain_grid(bounds, cell_size: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    xmin, ymin, xmax, ymax = bounds
    rows = int(math.ceil((ymax - ymin) / cell_size))
    cols = int(math.ceil((xmax - xmin) / cell_size))
    cx = xmin + (np.arange(cols) + 0.5) * cell_size
    cy = ymin + (np.arange(rows) + 0.5) * cell_size
    return np.ones((rows, cols)), np.zeros((rows, cols)), cx, cy


def _ellipse_arc(center, rx: float, ry: float, t0: float, t1: float, n: int = 24) -> np.ndarray:
    t = np.linspace(t0, t1, n)
    return np.stack([center[0] + rx * np.cos(t), center[1] + ry * np.sin(t)], axis=1)


# ============================================================================
# GENERADORES DE MAPAS
# ============================================================================

def generate_course_map(seed: int, cell_size: float = 0.5) -> TrackLayout:
    """
    Circuito de evaluación de unos 60 m alrededor de un muro central delgado.

    Dos horquillas en los extremos del muro, una chicana de dos bloques en la
    recta inferior y un parche de barro en la recta superior. El recorrido es
    antihorario y arranca en (5, 3.4) mirando al este.
    """
    rng = substream(seed, WORLD)
    bounds = (0.0, 0.0, 28.0, 14.0)
    a_x = 9.0 + rng.uniform(-0.5, 0.5)
    b_x = 14.5 + rng.uniform(-0.5, 0.5)
    m_x = 12.0 + rng.uniform(-1.0, 1.0)

    obstacles = [
        box(4.0, 6.8, 24.0, 7.2),
        box(a_x, 0.0, a_x + 1.0, 3.6),
        box(b_x, 3.2, b_x + 1.0, 6.8),
    ]
    speed, drag, cx, cy = _terrain_grid(bounds, cell_size)
    mud = (cx[None, :] >= m_x) & (cx[None, :] <= m_x + 8.0) & (cy[:, None] >= 9.4)
    speed[mud] = MUD_SPEED_FACTOR
    world_map = WorldMap(bounds, obstacles, speed, drag, cell_size, map_id=f"course-{seed}")

    bottom = np.array([
        [5.0, 3.4], [a_x - 1.2, 4.9], [a_x + 0.5, 5.2], [a_x + 1.8, 4.2],
        [b_x - 0.9, 1.8], [b_x + 0.5, 1.6], [b_x + 2.0, 2.6], [22.0, 3.4],
    ])
    right = _ellipse_arc((24.0, 7.0), 2.0, 3.6, -math.pi / 2, math.pi / 2)
    top = np.array([[m_x + 9.5, 8.4], [m_x - 0.5, 8.4], [m_x - 2.5, 10.6]])
    left = _ellipse_arc((4.0, 7.0), 2.0, 3.6, math.pi / 2, 3 * math.pi / 2)
    centerline = np.concatenate([bottom, right, top, left, [[5.0, 3.4]]], axis=0)
    centerline = resample_path(centerline, 0.1)
    logger.debug("Circuito %s: %.1f m", world_map.map_id, path_length(centerline))
    return TrackLayout(world_map, centerline, CarState(5.0, 3.4, 0.0))


def _free_fraction(world_map: WorldMap, resolution: float = 0.5) -> float:
    """Fracción de celdas libres en la mayor componente conexa"""
    planner = GridPlanner(world_map, resolution=resolution)
    labels, count = ndimage.label(planner.free)
    if count == 0:
        return 0.0
    sizes = np.bincount(labels.ravel())[1:]
    return float(sizes.max() / planner.free.size)


def _random_convex(rng: np.random.Generator, center, size: float) -> np.ndarray:
    pts = center + rng.uniform(-size / 2, size / 2, size=(8, 2))
    hull = ConvexHull(pts)
    return pts[hull.vertices]


def generate_prior_map(seed: int, retries: int = 5, cell_size: float = 1.0,
                       size: float = 30.0, n_obstacles: Tuple[int, int] = (6, 12)) -> WorldMap:
    """Mapa de desorden convexo aleatorio con manchas de barro para el conjunto previo"""
    rng = substream(seed, "prior-map")
    bounds = (0.0, 0.0, size, size)
    for attempt in range(retries):
        k = int(rng.integers(n_obstacles[0], n_obstacles[1] + 1))
        obstacles = [_random_convex(rng, rng.uniform(3.0, size - 3.0, size=2), rng.uniform(1.5, 4.0))
                     for _ in range(k)]
        speed, drag, cx, cy = _terrain_grid(bounds, cell_size)
        for _ in range(int(rng.integers(0, 3))):
            c = rng.uniform(0, size, size=2)
            r = rng.uniform(1.5, 3.5)
            blob = (cx[None, :] - c[0]) ** 2 + (cy[:, None] - c[1]) ** 2 < r ** 2
            speed[blob] = 0.5
        world_map = WorldMap(bounds, obstacles, speed, drag, cell_size, map_id=f"prior-{seed}")
        if _free_fraction(world_map) >= 0.5:
            return world_map
        logger.warning("Mapa previo %s sin espacio libre suficiente (intento %d)", seed, attempt + 1)
    raise MapGenerationError(f"prior-{seed}: reintentos agotados ({retries})")


def generate_dense_map(seed: int, size: float = 20.0, n_boxes: Tuple[int, int] = (25, 40)) -> Tuple[WorldMap, CarState]:
    """Mapa adversarial lleno de cajas pequeñas; devuelve el mapa y una pose libre de salida"""
    rng = substream(seed, "dense-map")
    bounds = (0.0, 0.0, size, size)
    start = np.array([size / 2, size / 2])
    obstacles = []
    for _ in range(int(rng.integers(n_boxes[0], n_boxes[1] + 1))):
        x, y = rng.uniform(0.5, size - 1.5, size=2)
        w, h = rng.uniform(0.3, 1.2, size=2)
        if x - 0.5 < start[0] < x + w + 0.5 and y - 0.5 < start[1] < y + h + 0.5:
            continue
        obstacles.append(box(x, y, x + w, y + h))
    world_map = WorldMap.uniform(bounds, obstacles, cell_size=1.0, map_id=f"dense-{seed}")
    return world_map, CarState(float(start[0]), float(start[1]), float(rng.uniform(-math.pi, math.pi)))


# ============================================================================
# CODEC FLMAP v1
# ============================================================================

def dumps_map(world_map: WorldMap) -> str:
    """Serializa un WorldMap en texto FLMAP v1 (floats en precisión repr)"""
    lines = [FLMAP_HEADER, f"id {world_map.map_id}",
             "bounds " + " ".join(repr(float(b)) for b in world_map.bounds),
             f"cell_size {world_map.cell_size!r}",
             f"obstacles {len(world_map.obstacles)}"]
    for poly in world_map.obstacles:
        coords = " ".join(repr(float(v)) for v in poly.ravel())
        lines.append(f"{len(poly)} {coords}")
    rows, cols = world_map.speed_factor.shape
    lines.append(f"terrain {rows} {cols}")
    lines.extend(" ".join(repr(float(v)) for v in row) for row in world_map.speed_factor)
    lines.append(f"drag {rows} {cols}")
    lines.extend(" ".join(repr(float(v)) for v in row) for row in world_map.drag)
    return "\n".join(lines) + "\n"


def loads_map(text: str) -> WorldMap:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FLMAP_HEADER:
        raise ValueError("Cabecera FLMAP v1 ausente")
    it = iter(lines[1:])
    try:
        map_id = next(it).split(maxsplit=1)[1]
        bounds = tuple(float(v) for v in next(it).split()[1:5])
        cell_size = float(next(it).split()[1])
        n_obs = int(next(it).split()[1])
        obstacles = []
        for _ in range(n_obs):
            parts = next(it).split()
            n = int(parts[0])
            obstacles.append(np.array([float(v) for v in parts[1:1 + 2 * n]]).reshape(n, 2))
        rows, cols = (int(v) for v in next(it).split()[1:3])
        speed = np.array([[float(v) for v in next(it).split()] for _ in range(rows)])
        drag = np.zeros((rows, cols))
        header = next(it, None)
        if header is not None and header.startswith("drag"):
            drag = np.array([[float(v) for v in next(it).split()] for _ in range(rows)])
    except (StopIteration, IndexError) as exc:
        raise ValueError("Archivo FLMAP truncado") from exc
    return WorldMap(bounds, obstacles, speed.reshape(rows, cols), drag.reshape(rows, cols), cell_size, map_id)


def save_map(world_map: WorldMap, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_map(world_map), encoding="utf-8")
    return path


def load_map(path: Union[str, Path]) -> WorldMap:
    return loads_map(Path(path).read_text(encoding="utf-8"))


# ============================================================================
# PLANIFICADOR Y SEGUIDOR
# ============================================================================

_NEIGHBORS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


class GridPlanner:
    """Dijkstra sobre una grilla de ocupación inflada, con costo extra en terreno lento"""

    def __init__(self, world_map: WorldMap, resolution: float = 0.25, inflation: float = 0.4):
        self.map = world_map
        self.resolution = resolution
        xmin, ymin, xmax, ymax = world_map.bounds
        self.cols = int(math.ceil((xmax - xmin) / resolution))
        self.rows = int(math.ceil((ymax - ymin) / resolution))
        cx = xmin + (np.arange(self.cols) + 0.5) * resolution
        cy = ymin + (np.arange(self.rows) + 0.5) * resolution
        gx, gy = np.meshgrid(cx, cy)
        self.centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
        occupied = ~world_map.is_free(self.centers).reshape(self.rows, self.cols)
        radius = int(math.ceil(inflation / resolution))
        if radius > 0:
            yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
            occupied = ndimage.binary_dilation(occupied, structure=(xx ** 2 + yy ** 2) <= radius ** 2,
                                               border_value=1)
        self.free = ~occupied
        sf, _ = world_map.terrain_at(self.centers)
        self._cost = (1.0 / sf).reshape(self.rows, self.cols)
        self.graph = self._build_graph()

    def _build_graph(self):
        idx = np.arange(self.rows * self.cols).reshape(self.rows, self.cols)
        src, dst, w = [], [], []
        for dr, dc in _NEIGHBORS:
            r0, r1 = max(0, -dr), self.rows - max(0, dr)
            c0, c1 = max(0, -dc), self.cols - max(0, dc)
            a = (slice(r0, r1), slice(c0, c1))
            b = (slice(r0 + dr, r1 + dr), slice(c0 + dc, c1 + dc))
            ok = self.free[a] & self.free[b]
            step = math.hypot(dr, dc) * self.resolution
            src.append(idx[a][ok])
            dst.append(idx[b][ok])
            w.append(step * 0.5 * (self._cost[a][ok] + self._cost[b][ok]))
        n = self.rows * self.cols
        return coo_matrix((np.concatenate(w), (np.concatenate(src), np.concatenate(dst))), shape=(n, n)).tocsr()

    def nearest_free(self, point) -> int:
        free_idx = np.flatnonzero(self.free.ravel())
        if free_idx.size == 0:
            raise MapGenerationError(f"{self.map.map_id}: sin celdas libres")
        d = np.linalg.norm(self.centers[free_idx] - np.asarray(point), axis=1)
        return int(free_idx[np.argmin(d)])

    def random_free_point(self, rng: np.random.Generator) -> np.ndarray:
        free_idx = np.flatnonzero(self.free.ravel())
        return self.centers[int(rng.choice(free_idx))].copy()

    def plan(self, start, goal) -> Optional[np.ndarray]:
        """Camino de celdas libres de start a goal, o None si no hay conexión"""
        s, g = self.nearest_free(start), self.nearest_free(goal)
        dist, pred = dijkstra(self.graph, directed=True, indices=s, return_predecessors=True)
        if not np.isfinite(dist[g]):
            return None
        chain = [g]
        while chain[-1] != s:
            chain.append(int(pred[chain[-1]]))
        return self.centers[chain[::-1]].copy()


class PurePursuit:
    """Seguidor pure-pursuit sobre una polilínea densa; el índice de avance solo crece"""

    def __init__(self, path: np.ndarray, speed: float, params: WorldParams,
                 lookahead: float = 1.0, window: int = 30):
        self.path = resample_path(path, 0.1)
        self.speed = speed
        self.params = params
        self.lookahead = lookahead
        self.window = window
        self.index = 0

    @property
    def done(self) -> bool:
        return self.index >= len(self.path) - 1

    def command(self, state: CarState) -> Action:
        hi = min(len(self.path), self.index + self.window)
        d = np.linalg.norm(self.path[self.index:hi] - state.position, axis=1)
        self.index += int(np.argmin(d))
        target_idx = self.index
        while target_idx < len(self.path) - 1 and \
                np.linalg.norm(self.path[target_idx] - state.position) < self.lookahead:
            target_idx += 1
        tx, ty = self.path[target_idx]
        alpha = wrap_angle(math.atan2(ty - state.y, tx - state.x) - state.heading)
        steering = math.atan2(2.0 * self.params.wheelbase * math.sin(alpha), self.lookahead)
        return Action.clipped(self.speed, steering, self.params)
