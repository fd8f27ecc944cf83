"""
Preentrenamiento del codificador con IQL condicionado a metas sobre un
conjunto previo de navegación a baja velocidad, y congelamiento posterior.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch
import yaml
from joblib import Parallel, delayed

from .models import EncoderParams, IqlConfig, NetworkParams, PriorDataConfig, RewardParams, WorldParams
from .networks import (ActionScaler, ConvEncoder, ParamSet, ValueNetwork, build_actor,
                       build_critic, build_encoder, encoder_from_paramset, encoder_meta, freeze, polyak_update)
from .practice import compute_reward
from .replay import Batch
from .seeding import NETWORK_INIT, RELABEL, substream, torch_generator
from .link import decode_transitions, record_dtype
from .tracks import GridPlanner, PurePursuit, generate_prior_map
from .world import CarState, DrivingWorld, goal_vector, render_frame

logger = logging.getLogger(__name__)

DATASET_VERSION = 1


# ============================================================================
# CONJUNTO PREVIO
# ============================================================================

@dataclass
class PriorTrajectory:
    """Una trayectoria continua por mapa: T+1 observaciones y T acciones"""
    map_id: str
    frames: np.ndarray        # (T+1, H, W) cuadro más nuevo de cada paso
    proprio: np.ndarray       # (T+1, 9)
    prev_action: np.ndarray   # (T+1, 2) normalizada
    action: np.ndarray        # (T, 2) normalizada
    poses: np.ndarray         # (T+1, 3) x, y, rumbo
    velocities: np.ndarray    # (T+1, 2) marco del mundo
    lateral_accel: np.ndarray  # (T+1,)
    free_points: np.ndarray   # (K, 2) puntos libres del mismo mapa

    @property
    def steps(self) -> int:
        return len(self.action)

    def stack(self, t: int, n_frames: int = 3) -> np.ndarray:
        """Pila de cuadros reconstruida; al inicio se repite el primer cuadro"""
        idx = [max(t - k, 0) for k in range(n_frames - 1, -1, -1)]
        return self.frames[idx]


@dataclass
class PriorDataset:
    trajectories: List[PriorTrajectory]
    index: np.ndarray = field(init=False)

    def __post_init__(self):
        self.index = np.array([(i, t) for i, tr in enumerate(self.trajectories) for t in range(tr.steps)],
                              dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def map_ids(self) -> List[str]:
        return [tr.map_id for tr in self.trajectories]


def record_prior_trajectory(map_seed: int, cfg: PriorDataConfig, world: WorldParams) -> PriorTrajectory:
    """Navegador guionado: metas libres aleatorias, Dijkstra en grilla y pure-pursuit a velocidad de crucero"""
    world_map = generate_prior_map(map_seed, retries=cfg.map_retries)
    planner = GridPlanner(world_map)
    rng = substream(map_seed, "prior-navigator")
    scaler = ActionScaler(world)
    start = planner.random_free_point(rng)
    sim = DrivingWorld(world_map, world, CarState(float(start[0]), float(start[1]),
                                                  float(rng.uniform(-math.pi, math.pi))))
    T = cfg.steps_per_map
    frames = np.zeros((T + 1, world.raster_size, world.raster_size), dtype=np.float32)
    proprio = np.zeros((T + 1, 9), dtype=np.float32)
    poses = np.zeros((T + 1, 3))
    velocities = np.zeros((T + 1, 2))
    lateral = np.zeros(T + 1)
    actions = np.zeros((T, 2), dtype=np.float32)

    def snapshot(t: int) -> None:
        s = sim.state
        frames[t] = render_frame(s, world_map, world)
        proprio[t] = s.proprio()
        poses[t] = (s.x, s.y, s.heading)
        velocities[t] = s.velocity()
        lateral[t] = s.lateral_accel

    follower: Optional[PurePursuit] = None
    snapshot(0)
    for t in range(T):
        tries = 0
        while follower is None or follower.done:
            path = planner.plan(sim.state.position, planner.random_free_point(rng))
            tries += 1
            if path is not None and len(path) > 1:
                follower = PurePursuit(path, cfg.cruise_speed, world)
            elif tries > 20:
                follower = PurePursuit(np.stack([sim.state.position, planner.random_free_point(rng)]),
                                       cfg.cruise_speed, world)
        action = follower.command(sim.state)
        sim.step(action)
        actions[t] = scaler.to_normalized([action.velocity_target, action.steering])
        snapshot(t + 1)
        if abs(sim.state.lateral_accel) > world.collision_accel:
            follower = None
    prev = np.concatenate([actions[:1], actions], axis=0)
    free_points = planner.centers[planner.free.ravel()]
    traj = PriorTrajectory(world_map.map_id, frames, proprio, prev, actions, poses, velocities, lateral,
                           free_points)
    logger.info("Trayectoria previa %s: %d pasos", world_map.map_id, T)
    return traj


def generate_prior_dataset(seed: int, n_maps: int, steps_per_map: int,
                           cfg: Optional[PriorDataConfig] = None, world: Optional[WorldParams] = None) -> PriorDataset:
    """Recorre n_maps mapas previos en paralelo con joblib"""
    if n_maps < 1:
        raise ValueError("n_maps debe ser al menos 1")
    cfg = (cfg or PriorDataConfig()).model_copy(update={"n_maps": n_maps, "steps_per_map": steps_per_map})
    world = world or WorldParams()
    results = Parallel(n_jobs=cfg.n_jobs)(
        delayed(record_prior_trajectory)(s, cfg, world) for s in prior_map_seeds(seed, n_maps)
    )
    return PriorDataset(list(results))


def prior_map_seeds(seed: int, n_maps: int) -> List[int]:
    return [seed * 10_000 + i for i in range(n_maps)]


def save_prior_dataset(dataset: PriorDataset, directory: Union[str, Path], world: WorldParams,
                       map_seeds: List[int]) -> Path:
    """Manifiesto YAML + registros en formato TRANSITION_BATCH + npz de poses y velocidades"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    n_pixels = world.raster_size ** 2
    for seed, traj in zip(map_seeds, dataset.trajectories):
        recs = np.zeros(traj.steps + 1, dtype=record_dtype(n_pixels))
        recs["features"] = traj.frames.reshape(len(traj.frames), -1)
        recs["proprio"] = traj.proprio
        recs["prev_action"] = traj.prev_action
        recs["action"][:-1] = traj.action
        recs["step"] = np.arange(traj.steps + 1)
        rec_file = f"{traj.map_id}.records"
        (directory / rec_file).write_bytes(recs.tobytes())
        arr_file = f"{traj.map_id}.npz"
        np.savez(directory / arr_file, poses=traj.poses, velocities=traj.velocities,
                 lateral_accel=traj.lateral_accel, free_points=traj.free_points)
        entries.append({"seed": int(seed), "map_id": traj.map_id, "records": rec_file, "arrays": arr_file,
                        "steps": traj.steps})
    manifest = {"version": DATASET_VERSION, "raster_size": world.raster_size, "maps": entries}
    with open(directory / "manifest.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return directory


def load_prior_dataset(directory: Union[str, Path]) -> PriorDataset:
    directory = Path(directory)
    with open(directory / "manifest.yaml", "r", encoding="utf-8") as fh:
        manifest = yaml.safe_load(fh)
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"Versión de conjunto previo no soportada: {manifest.get('version')}")
    size = int(manifest["raster_size"])
    trajectories = []
    for entry in manifest["maps"]:
        recs = decode_transitions((directory / entry["records"]).read_bytes(), size * size)
        with np.load(directory / entry["arrays"]) as arrays:
            trajectories.append(PriorTrajectory(
                entry["map_id"], recs["features"].reshape(-1, size, size), recs["proprio"],
                recs["prev_action"], recs["action"][:-1], arrays["poses"], arrays["velocities"],
                arrays["lateral_accel"], arrays["free_points"],
            ))
    return PriorDataset(trajectories)


# ============================================================================
# REETIQUETADO DE METAS
# ============================================================================

@dataclass(frozen=True)
class RelabeledSample:
    traj: int
    step: int
    goal: np.ndarray
    next_goal: np.ndarray
    reward: float
    done: bool
    from_future: bool


def relabel_goal(dataset: PriorDataset, index: int, rng: np.random.Generator,
                 cfg: Optional[IqlConfig] = None, reward: Optional[RewardParams] = None,
                 reach_radius: float = 2.0) -> RelabeledSample:
    """
    Mezcla 1:1 de metas futuras de la misma trayectoria y puntos libres aleatorios
    del mismo mapa; la recompensa se recalcula contra la meta reetiquetada.
    """
    cfg = cfg or IqlConfig()
    reward = reward or RewardParams()
    i, t = (int(v) for v in dataset.index[index])
    traj = dataset.trajectories[i]
    future = bool(rng.random() < cfg.future_goal_prob)
    if future:
        offset = int(rng.integers(1, cfg.max_goal_offset + 1))
        goal_pos = traj.poses[min(t + offset, traj.steps), :2]
    else:
        goal_pos = traj.free_points[int(rng.integers(0, len(traj.free_points)))]
    pose_t = CarState(*traj.poses[t])
    pose_n = CarState(*traj.poses[t + 1])
    delta = goal_pos - traj.poses[t + 1, :2]
    dist = float(np.linalg.norm(delta))
    heading = traj.poses[t + 1, 2]
    direction = delta / dist if dist > 0 else np.array([math.cos(heading), math.sin(heading)])
    r = compute_reward(traj.velocities[t + 1], direction, float(traj.lateral_accel[t + 1]), False, reward)
    return RelabeledSample(i, t, goal_vector(pose_t, goal_pos), goal_vector(pose_n, goal_pos), r,
                           dist < reach_radius, future)


def sample_iql_batch(dataset: PriorDataset, batch_size: int, rng: np.random.Generator,
                     cfg: Optional[IqlConfig] = None, reward: Optional[RewardParams] = None,
                     n_frames: int = 3) -> Batch:
    picks = rng.integers(0, len(dataset), size=batch_size)
    cols: Dict[str, list] = {k: [] for k in ("features", "proprio", "goal", "prev_action", "action", "reward",
                                             "done", "next_features", "next_proprio", "next_goal",
                                             "next_prev_action")}
    for k in picks:
        s = relabel_goal(dataset, int(k), rng, cfg, reward)
        tr = dataset.trajectories[s.traj]
        t = s.step
        cols["features"].append(tr.stack(t, n_frames))
        cols["next_features"].append(tr.stack(t + 1, n_frames))
        cols["proprio"].append(tr.proprio[t])
        cols["next_proprio"].append(tr.proprio[t + 1])
        cols["goal"].append(s.goal)
        cols["next_goal"].append(s.next_goal)
        cols["prev_action"].append(tr.prev_action[t])
        cols["next_prev_action"].append(tr.prev_action[t + 1])
        cols["action"].append(tr.action[t])
        cols["reward"].append(s.reward)
        cols["done"].append(float(s.done))
    tensors = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in cols.items()}
    return Batch(from_demo=torch.zeros(batch_size, dtype=torch.bool), **tensors)


# ============================================================================
# IQL
# ============================================================================

def expectile_loss(u: torch.Tensor, tau: float) -> torch.Tensor:
    """L₂^τ(u) = |τ − 1[u < 0]|·u²"""
    return torch.abs(tau - (u < 0).to(u.dtype)) * u.pow(2)


def iql_value_loss(q_target: torch.Tensor, v: torch.Tensor, tau: float) -> torch.Tensor:
    return expectile_loss(q_target - v, tau).mean()


def iql_critic_loss(q: torch.Tensor, reward, done, discount: float, next_v) -> torch.Tensor:
    """Suma sobre miembros del error cuadrático contra r + γ·(1 − done)·V(s′)"""
    y = reward + discount * (1.0 - done) * next_v
    if q.dim() == 1:
        return (q - y).pow(2).mean()
    return (q - y.unsqueeze(0)).pow(2).mean(dim=1).sum()


def awr_weights(q_target, v, temperature: float, max_weight: float) -> torch.Tensor:
    return torch.exp(temperature * (q_target - v)).clamp(max=max_weight)


class IqlTrainer:
    """Codificador + ensamble de 2 críticos + valor + actor; la pérdida del crítico entrena el codificador"""

    def __init__(self, cfg: IqlConfig, encoder_params: EncoderParams, network: NetworkParams,
                 raster_size: int, seed: int):
        self.cfg = cfg
        self.encoder = build_encoder(encoder_params, raster_size, seed)
        dim = self.encoder.output_dim
        self.critic = build_critic(cfg.n_critics, dim, network, seed, name="iql-critic")
        self.value = ValueNetwork(dim, network, torch_generator(seed, NETWORK_INIT + "/iql-value"))
        self.actor = build_actor(dim, network, seed)
        self.target_encoder = freeze(copy.deepcopy(self.encoder))
        self.target_critic = freeze(copy.deepcopy(self.critic))
        self.critic_opt = torch.optim.Adam(list(self.encoder.parameters()) + list(self.critic.parameters()),
                                           lr=cfg.critic_lr)
        self.value_opt = torch.optim.Adam(self.value.parameters(), lr=cfg.value_lr)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.steps = 0

    def targets(self, batch: Batch):
        """min sobre críticos objetivo en (s, a) y V(s′), ambos sin gradiente"""
        with torch.no_grad():
            t_feats = self.target_encoder(batch.features)
            q_t = self.target_critic(t_feats, batch.proprio, batch.goal, batch.prev_action, batch.action).min(0).values
            next_v = self.value(self.encoder(batch.next_features), batch.next_proprio, batch.next_goal,
                                batch.next_prev_action)[0]
        return q_t, next_v

    def value_loss(self, batch: Batch, feats, q_t):
        v = self.value(feats, batch.proprio, batch.goal, batch.prev_action)[0]
        return iql_value_loss(q_t, v, self.cfg.expectile), v

    def critic_loss(self, batch: Batch, feats, next_v) -> torch.Tensor:
        q = self.critic(feats, batch.proprio, batch.goal, batch.prev_action, batch.action)
        return iql_critic_loss(q, batch.reward, batch.done, self.cfg.discount, next_v)

    def actor_loss(self, batch: Batch, feats, q_t, v) -> torch.Tensor:
        """Regresión ponderada por ventaja sobre las acciones del conjunto de datos"""
        weights = awr_weights(q_t, v, self.cfg.awr_temperature, self.cfg.max_weight)
        logp = self.actor.log_prob(feats, batch.proprio, batch.goal, batch.prev_action, batch.action)
        return -(weights * logp).mean()

    def iql_update(self, batch: Batch) -> Dict[str, float]:
        q_t, next_v = self.targets(batch)
        feats = self.encoder(batch.features)
        detached = feats.detach()

        value_loss, v = self.value_loss(batch, detached, q_t)
        self.value_opt.zero_grad()
        value_loss.backward()
        self.value_opt.step()

        critic_loss = self.critic_loss(batch, feats, next_v)
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()

        actor_loss = self.actor_loss(batch, detached, q_t, v.detach())
        self.actor_opt.zero_grad()
        actor_loss.backward()
        self.actor_opt.step()

        polyak_update(self.target_encoder, self.encoder, self.cfg.polyak)
        polyak_update(self.target_critic, self.critic, self.cfg.polyak)
        self.steps += 1
        return {"value_loss": float(value_loss), "critic_loss": float(critic_loss), "actor_loss": float(actor_loss)}

    def train(self, dataset: PriorDataset, steps: int, seed: int, reward: Optional[RewardParams] = None,
              log_every: int = 500) -> List[Dict[str, float]]:
        rng = substream(seed, RELABEL)
        history = []
        frames = self.encoder.params.frames
        for step in range(steps):
            batch = sample_iql_batch(dataset, self.cfg.batch_size, rng, self.cfg, reward, frames)
            metrics = self.iql_update(batch)
            if (step + 1) % log_every == 0 or step + 1 == steps:
                metrics["step"] = step + 1
                history.append(metrics)
                logger.info("IQL paso %d: V=%.4f Q=%.4f π=%.4f", step + 1, metrics["value_loss"],
                            metrics["critic_loss"], metrics["actor_loss"])
        return history


class FrozenEncoder:
    """Codificador inmutable usado por el robot para producir características"""

    def __init__(self, encoder: ConvEncoder):
        self.encoder = freeze(encoder)

    @property
    def output_dim(self) -> int:
        return self.encoder.output_dim

    @torch.no_grad()
    def featurize(self, frames: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
        return self.encoder(x).numpy()[0] if x.dim() == 3 else self.encoder(x).numpy()

    def paramset(self) -> ParamSet:
        ps = ParamSet(0).add_module("encoder", self.encoder)
        ps.tensors["meta.encoder"] = encoder_meta(self.encoder.params, self.encoder.raster_size)
        return ps

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.paramset().encode())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "FrozenEncoder":
        return cls(encoder_from_paramset(ParamSet.decode(Path(path).read_bytes())))


def freeze_encoder(trainer: IqlTrainer, path: Optional[Union[str, Path]] = None) -> FrozenEncoder:
    """Retiene solo el codificador; las cabezas de IQL se descartan"""
    frozen = FrozenEncoder(copy.deepcopy(trainer.encoder))
    if path is not None:
        frozen.save(path)
        logger.info("Codificador congelado guardado en %s", path)
    return frozen
