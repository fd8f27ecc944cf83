"""Lado robot: bucle de control a 10 Hz, caracterización local y envío de transiciones"""
import copy
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, List, Optional, Union

import joblib
import numpy as np
import torch

from .estimation import PoseEstimator
from .learner import BLIND, FROZEN, RAW, STATE, STATE_FEATURE_DIM
from .link import MAX_PAYLOAD, LinkEndpoint, MsgType, encode_hello, encode_transitions, record_dtype
from .models import RunConfig
from .networks import ActionScaler, Actor, ConvEncoder, ParamSet, ParamSetError, build_actor
from .practice import Mode, PracticeFSM
from .seeding import POLICY, torch_generator
from .world import Action, CarState, DrivingWorld, goal_vector

logger = logging.getLogger(__name__)


@dataclass
class Observation:
    """Tupla sensorial completa en el formato del registro de transición"""
    features: np.ndarray
    proprio: np.ndarray
    goal: np.ndarray
    prev_action: np.ndarray


def feature_dim_for(mode: str, encoder_dim: int, raster_size: int, frames: int) -> int:
    return {FROZEN: encoder_dim, RAW: frames * raster_size * raster_size,
            STATE: STATE_FEATURE_DIM, BLIND: 0}[mode]


def state_features(pose: CarState) -> np.ndarray:
    """Pose privilegiada estimada como características (ablación basada en estado)"""
    return np.array([pose.x / 10.0, pose.y / 10.0, math.cos(pose.heading), math.sin(pose.heading)],
                    dtype=np.float32)


class RobotPolicy:
    """Actor local; los PARAM_UPDATE se aplican por intercambio atómico de la referencia"""

    def __init__(self, actor: Actor, mode: str, encoder: Optional[ConvEncoder] = None, seed: int = 0):
        self.actor = actor
        self.mode = mode
        self.encoder = encoder
        self.version = 0
        self.generator = torch_generator(seed, POLICY)

    def featurize(self, frames: Optional[np.ndarray], pose: CarState) -> np.ndarray:
        if self.mode == STATE:
            return state_features(pose)
        if self.mode == BLIND:
            return np.zeros(0, dtype=np.float32)
        if self.mode == RAW:
            return frames.astype(np.float32).ravel()
        with torch.no_grad():
            return self.encoder(torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))).numpy()[0]

    def apply(self, ps: ParamSet) -> bool:
        """Aplica una versión más nueva; las viejas o repetidas se ignoran"""
        if ps.version <= self.version:
            return False
        actor = copy.deepcopy(self.actor)
        ps.load_module("actor", actor)
        encoder = self.encoder
        if self.mode == RAW and ps.subset("encoder"):
            encoder = ps.load_module("encoder", copy.deepcopy(self.encoder))
        self.actor, self.encoder, self.version = actor, encoder, ps.version
        return True

    @torch.no_grad()
    def act(self, obs: Observation, deterministic: bool = False) -> np.ndarray:
        feats = torch.from_numpy(obs.features).unsqueeze(0)
        if self.mode == RAW:
            n = self.encoder.params.frames
            size = self.encoder.raster_size
            feats = self.encoder(feats.reshape(1, n, size, size))
        args = (feats, torch.from_numpy(obs.proprio).unsqueeze(0), torch.from_numpy(obs.goal).unsqueeze(0),
                torch.from_numpy(obs.prev_action).unsqueeze(0))
        if deterministic:
            return self.actor.mean_action(*args)[0].numpy().astype(np.float64)
        action, _ = self.actor(*args, torch.randn(1, 2, generator=self.generator))
        return action[0].numpy().astype(np.float64)

    def state_dict(self) -> dict:
        saved = {"actor": copy.deepcopy(self.actor.state_dict()), "version": self.version,
                 "generator": self.generator.get_state()}
        if self.mode == RAW:
            saved["encoder"] = copy.deepcopy(self.encoder.state_dict())
        return saved

    def load_state_dict(self, saved: dict) -> None:
        self.actor.load_state_dict(saved["actor"])
        if "encoder" in saved:
            self.encoder.load_state_dict(saved["encoder"])
        self.version = saved["version"]
        self.generator.set_state(saved["generator"])


class RobotLoop:
    """
    Un tick por llamada a `step_once`: observar, caracterizar, actuar, avanzar
    la FSM, acumular registros y vaciar un TRANSITION_BATCH cada K pasos.

    El tick nunca espera a la red: con el enlace caído los registros se
    acumulan hasta el tope y luego se descarta el más viejo.
    """

    def __init__(self, config: RunConfig, world: DrivingWorld, fsm: PracticeFSM, policy: RobotPolicy,
                 estimator: PoseEstimator, link: Optional[LinkEndpoint] = None, deterministic: bool = False):
        self.config = config
        self.world = world
        self.fsm = fsm
        self.policy = policy
        self.estimator = estimator
        self.link = link
        self.deterministic = deterministic
        self.scaler = ActionScaler(config.world)
        self.dt = config.world.dt
        self.env_step = 0
        self.prev_action = self.scaler.to_normalized([config.world.velocity_range[0], 0.0]).astype(np.float32)
        self.uses_raster = policy.mode in (FROZEN, RAW)
        self.feature_dim = feature_dim_for(policy.mode, policy.encoder.output_dim if policy.encoder else 0,
                                           config.world.raster_size, config.encoder.frames)
        self.dtype = record_dtype(self.feature_dim)
        self.pending: List[tuple] = []
        self.outgoing: Deque[np.ndarray] = deque()
        self.telemetry: List[Dict[str, float]] = []
        self.laps: List[dict] = []
        self.pose = estimator.observe(world.state, self.dt)
        self.last_observation: Optional[Observation] = None
        self._hello_sent = False

    @property
    def now(self) -> float:
        return round(self.env_step * self.dt, 9)

    def handshake(self) -> bool:
        """HELLO con feature_dim; se envía con el enlace arriba y se repite tras cada reconexión"""
        if self.link is None:
            return False
        if not self.link.connected:
            self._hello_sent = False
            return False
        if not self._hello_sent:
            self._hello_sent = self.link.send(encode_hello(self.feature_dim))
        return self._hello_sent

    def state_dict(self) -> dict:
        """Estado del lado robot que una corrida reanudada necesita para seguir donde quedó"""
        return {
            "env_step": self.env_step, "prev_action": self.prev_action.copy(), "pose": self.pose,
            "pending": list(self.pending), "outgoing": list(self.outgoing), "laps": list(self.laps),
            "last_observation": self.last_observation,
            "world": self.world.state_dict(), "fsm": self.fsm.state_dict(),
            "estimator": self.estimator.state_dict(), "policy": self.policy.state_dict(),
        }

    def load_state_dict(self, saved: dict) -> None:
        self.env_step = saved["env_step"]
        self.prev_action = saved["prev_action"].copy()
        self.pose = saved["pose"]
        self.pending = list(saved["pending"])
        self.outgoing = deque(saved["outgoing"])
        self.laps = list(saved["laps"])
        self.last_observation = saved["last_observation"]
        self.world.load_state_dict(saved["world"])
        self.fsm.load_state_dict(saved["fsm"])
        self.estimator.load_state_dict(saved["estimator"])
        self.policy.load_state_dict(saved["policy"])

    def save_state(self, path: Union[str, Path], **extra) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        joblib.dump({"robot": self.state_dict(), **extra}, path)
        logger.info("Estado del robot guardado en %s (paso %d)", path, self.env_step)
        return path

    def load_state(self, path: Union[str, Path]) -> dict:
        """Restaura el estado guardado con `save_state`; devuelve los extras"""
        saved = joblib.load(Path(path))
        self.load_state_dict(saved.pop("robot"))
        logger.info("Estado del robot restaurado desde %s (paso %d)", path, self.env_step)
        return saved

    def _apply_updates(self) -> None:
        if self.link is None:
            return
        for msg in self.link.poll():
            if msg.msg_type != MsgType.PARAM_UPDATE:
                continue
            try:
                ps = ParamSet.decode(msg.payload)
            except ParamSetError as exc:
                logger.warning("PARAM_UPDATE descartado: %s", exc)
                continue
            if self.policy.apply(ps):
                logger.debug("Política actualizada a v%d", ps.version)

    def observe(self) -> Observation:
        frames = self.world.observe().frames if self.uses_raster else None
        features = self.policy.featurize(frames, self.pose)
        goal = goal_vector(self.pose, self.fsm.active_checkpoint)
        return Observation(features.astype(np.float32), self.pose.proprio(), goal, self.prev_action.copy())

    def step_once(self) -> Dict[str, float]:
        self.handshake()
        self._apply_updates()
        obs = self.observe()
        self.last_observation = obs
        now = self.now
        action, acted_in = None, Mode.PRACTICING
        if self.fsm.mode == Mode.RECOVERING:
            action, finished = self.fsm.recovery_command(now)
            if not finished:
                acted_in = Mode.RECOVERING
        if acted_in == Mode.PRACTICING:
            normalized = self.policy.act(obs, self.deterministic)
            phys = self.scaler.to_physical(normalized)
            action = Action.clipped(phys[0], phys[1], self.config.world)
        self.world.step(action)
        self.pose = self.estimator.observe(self.world.state, self.dt)
        step = self.env_step
        self.env_step += 1
        outcome = self.fsm.after_step(self.pose, action, acted_in, self.now)
        applied = self.scaler.to_normalized([action.velocity_target, action.steering]).astype(np.float32)
        if outcome.record_transition:
            self.pending.append((obs.features, obs.proprio, obs.goal, obs.prev_action, applied,
                                 outcome.reward, int(outcome.done), step))
        self.prev_action = applied
        if len(self.pending) >= self.config.link.flush_every:
            self.flush()
        if outcome.lap is not None:
            self.laps.append({"lap_time": outcome.lap.lap_time, "collisions": outcome.lap.collisions,
                              "stuck_events": outcome.lap.stuck_events, "sim_time": self.now,
                              "env_step": self.env_step})
        row = dict(outcome.telemetry)
        row["param_version"] = self.policy.version
        self.telemetry.append(row)
        if self.link is not None:
            self.link.maybe_heartbeat()
        return row

    def flush(self) -> None:
        if not self.pending:
            return
        records = np.zeros(len(self.pending), dtype=self.dtype)
        for i, rec in enumerate(self.pending):
            records[i] = rec
        self.pending = []
        if self.link is None:
            return
        self.outgoing.extend(records)
        cap = self.config.link.outgoing_cap
        while len(self.outgoing) > cap:
            self.outgoing.popleft()
            self.link.counters.dropped += 1
        if not self.link.connected:
            return
        per_frame = max(1, MAX_PAYLOAD // self.dtype.itemsize)
        while self.outgoing:
            n = min(per_frame, len(self.outgoing))
            chunk = np.array([self.outgoing[i] for i in range(n)], dtype=self.dtype)
            if not self.link.send(encode_transitions(chunk)):
                return
            for _ in range(n):
                self.outgoing.popleft()
