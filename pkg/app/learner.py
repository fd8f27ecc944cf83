"""
Aprendiz en línea estilo RLPD: ensamble de críticos con mínimo sobre un
subconjunto aleatorio, actor SAC con aplastamiento tanh desplazado,
temperatura dual y publicación versionada de parámetros.
"""
import copy
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import joblib
import numpy as np
import pandas as pd
import torch
from torch import nn

from .link import (LinkEndpoint, MsgType, TransitionAssembler, decode_hello, decode_transitions,
                   encode_ack, encode_params)
from .models import EncoderParams, LearnerConfig, NetworkParams
from .networks import (ACTION_DIM, ConvEncoder, CriticEnsemble, ParamSet, ParamSetError, build_actor,
                       build_critic, build_encoder, encoder_meta, polyak_update)
from .replay import Batch, DemoBuffer, ReplayBuffer, sample_mixed_batch
from .seeding import LEARNER, substream, torch_generator

logger = logging.getLogger(__name__)

# Modos de características de la observación visual
FROZEN = "frozen"
RAW = "raw"
STATE = "state"
BLIND = "blind"

STATE_FEATURE_DIM = 4
ASSEMBLER_STATE = "assembler.joblib"


class CheckpointError(RuntimeError):
    """Checkpoint ausente o incompatible con la configuración actual"""


# Los tensores viajan en f4: cada contador entero se guarda en 4 trozos de 16 bits
COUNTER_LIMBS = 4
COUNTER_FIELDS = ("updates", "version", "feature_dim")


def pack_counters(*values: int) -> np.ndarray:
    """Enteros no negativos < 2⁶⁴ → f4 exactos (trozos de 16 bits, menos significativo primero)"""
    limbs = []
    for value in values:
        value = int(value)
        if value < 0 or value >> (16 * COUNTER_LIMBS):
            raise ValueError(f"Contador fuera de rango: {value}")
        limbs.extend((value >> (16 * i)) & 0xFFFF for i in range(COUNTER_LIMBS))
    return np.asarray(limbs, dtype=np.float32)


def unpack_counters(arr: np.ndarray) -> List[int]:
    limbs = np.asarray(arr).reshape(-1, COUNTER_LIMBS).astype(np.int64)
    return [sum(int(limb) << (16 * i) for i, limb in enumerate(row)) for row in limbs]


def checkpoint_counters(ps: ParamSet) -> Dict[str, int]:
    """updates, version y feature_dim de un checkpoint del aprendiz"""
    arr = ps.tensors.get("counters")
    if arr is None:
        raise CheckpointError("El ParamSet no es un checkpoint del aprendiz")
    if arr.size != COUNTER_LIMBS * len(COUNTER_FIELDS):
        expected = COUNTER_LIMBS * len(COUNTER_FIELDS)
        raise CheckpointError(f"Contadores con {arr.size} valores, se esperaban {expected}")
    return dict(zip(COUNTER_FIELDS, unpack_counters(arr)))


def target_entropy_at(cfg: LearnerConfig, updates: int) -> float:
    """Decremento lineal por actualización con piso en −2·dim(acción)"""
    return max(cfg.initial_target_entropy - cfg.entropy_decay * updates, cfg.entropy_floor(ACTION_DIM))


def critic_target(reward, done, discount: float, q_next, alpha, next_log_prob):
    """y = r + γ·(1 − done)·(Q̄ − α·log π(a′|s′))"""
    return reward + discount * (1.0 - done) * (q_next - alpha * next_log_prob)


def subset_min(q_values: torch.Tensor, subset_size: int, generator: torch.Generator) -> torch.Tensor:
    """Mínimo sobre M miembros elegidos al azar del ensamble (eje 0)"""
    idx = torch.randperm(q_values.shape[0], generator=generator)[:subset_size]
    return q_values[idx].min(dim=0).values


def temperature_loss(log_alpha: torch.Tensor, batch_entropy, target_entropy: float) -> torch.Tensor:
    return log_alpha.exp() * (float(batch_entropy) - target_entropy)


def temperature_update(log_alpha: torch.Tensor, batch_entropy, target_entropy: float,
                       optimizer: torch.optim.Optimizer) -> torch.Tensor:
    """Un paso de gradiente sobre log α; baja α cuando la entropía supera el objetivo"""
    optimizer.zero_grad()
    temperature_loss(log_alpha, batch_entropy, target_entropy).backward()
    optimizer.step()
    return log_alpha


class RlpdLearner:
    """Único escritor de los parámetros del actor, críticos y temperatura"""

    def __init__(self, cfg: LearnerConfig, network: NetworkParams, feature_dim: int, seed: int,
                 feature_mode: str = FROZEN, encoder: Optional[ConvEncoder] = None):
        if feature_mode == RAW and encoder is None:
            raise ValueError("El modo raw necesita un codificador entrenable")
        self.cfg = cfg
        self.network = network
        self.feature_mode = feature_mode
        self.encoder = encoder if feature_mode == RAW else None
        self.feature_dim = encoder.output_dim if self.encoder is not None else feature_dim
        self.actor = build_actor(self.feature_dim, network, seed)
        self.critic = build_critic(cfg.ensemble_size, self.feature_dim, network, seed)
        self.target = copy.deepcopy(self.critic)
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(cfg.initial_temperature), dtype=torch.float32))
        critic_params = list(self.critic.parameters())
        if self.encoder is not None:
            critic_params += list(self.encoder.parameters())
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.critic_opt = torch.optim.Adam(critic_params, lr=cfg.critic_lr)
        self.temp_opt = torch.optim.Adam([self.log_alpha], lr=cfg.temperature_lr)
        self.generator = torch_generator(seed, LEARNER)
        self.rng = substream(seed, LEARNER)
        self.updates = 0
        self.version = 0

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.exp())

    @property
    def target_entropy(self) -> float:
        return target_entropy_at(self.cfg, self.updates)

    def _features(self, batch: Batch):
        if self.encoder is None:
            return batch.features, batch.next_features
        frames = self.encoder.params.frames
        size = self.encoder.raster_size
        feats = self.encoder(batch.features.reshape(-1, frames, size, size))
        with torch.no_grad():
            next_feats = self.encoder(batch.next_features.reshape(-1, frames, size, size))
        return feats, next_feats

    def _noise(self, n: int) -> torch.Tensor:
        return torch.randn(n, ACTION_DIM, generator=self.generator)

    def critic_targets(self, batch: Batch, next_feats) -> torch.Tensor:
        """y = r + γ(1−d)(min sobre M críticos objetivo − α·log π(a'|s')), sin gradiente"""
        with torch.no_grad():
            a2, logp2 = self.actor(next_feats, batch.next_proprio, batch.next_goal, batch.next_prev_action,
                                   self._noise(len(batch)))
            q_next = self.target(next_feats, batch.next_proprio, batch.next_goal, batch.next_prev_action, a2)
            q_min = subset_min(q_next, self.cfg.target_subset, self.generator)
            return critic_target(batch.reward, batch.done, self.cfg.discount, q_min, self.log_alpha.exp(), logp2)

    def critic_loss(self, batch: Batch, feats, y: torch.Tensor) -> torch.Tensor:
        q = self.critic(feats, batch.proprio, batch.goal, batch.prev_action, batch.action)
        return (q - y.unsqueeze(0)).pow(2).mean(dim=1).sum()

    def actor_loss(self, batch: Batch, feats, noise: torch.Tensor):
        """Pérdida del actor y log π de las acciones muestreadas con `noise`"""
        action, logp = self.actor(feats, batch.proprio, batch.goal, batch.prev_action, noise)
        q = self.critic(feats, batch.proprio, batch.goal, batch.prev_action, action).min(dim=0).values
        return (self.log_alpha.exp().detach() * logp - q).mean(), logp

    def critic_update(self, batch: Batch, feats=None, next_feats=None) -> float:
        if feats is None:
            feats, next_feats = self._features(batch)
        loss = self.critic_loss(batch, feats, self.critic_targets(batch, next_feats))
        self.critic_opt.zero_grad()
        loss.backward()
        self.critic_opt.step()
        polyak_update(self.target, self.critic, self.cfg.polyak)
        return float(loss)

    def actor_update(self, batch: Batch, feats=None):
        """Maximiza min_N Q(s, ã) − α·log π(ã|s); solo se mueven los parámetros del actor"""
        if feats is None:
            feats, _ = self._features(batch)
        loss, logp = self.actor_loss(batch, feats.detach(), self._noise(len(batch)))
        self.actor_opt.zero_grad()
        loss.backward()
        self.actor_opt.step()
        return float(loss), float(-logp.mean().detach())

    def update(self, batch: Batch) -> Dict[str, float]:
        feats, next_feats = self._features(batch)
        critic_loss = self.critic_update(batch, feats, next_feats)
        actor_loss, entropy = self.actor_update(batch, feats)
        temperature_update(self.log_alpha, entropy, self.target_entropy, self.temp_opt)
        self.updates += 1
        return {"critic_loss": critic_loss, "actor_loss": actor_loss, "entropy": entropy}

    def publish(self) -> ParamSet:
        """Instantánea inmutable del actor (y del codificador si se entrena)"""
        self.version += 1
        ps = ParamSet(self.version).add_module("actor", self.actor)
        if self.encoder is not None:
            ps.add_module("encoder", self.encoder)
            ps.tensors["meta.encoder"] = encoder_meta(self.encoder.params, self.encoder.raster_size)
        return ps

    # ------------------------------------------------------------------
    # Checkpoint completo
    # ------------------------------------------------------------------

    def state_paramset(self) -> ParamSet:
        ps = ParamSet(self.version)
        ps.add_module("actor", self.actor).add_module("critic", self.critic).add_module("target", self.target)
        if self.encoder is not None:
            ps.add_module("encoder", self.encoder)
            ps.tensors["meta.encoder"] = encoder_meta(self.encoder.params, self.encoder.raster_size)
        ps.tensors["log_alpha"] = self.log_alpha.detach().numpy().reshape(1).astype(np.float32)
        ps.tensors["counters"] = pack_counters(self.updates, self.version, self.feature_dim)
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt), ("temp_opt", self.temp_opt)):
            for idx, st in opt.state_dict()["state"].items():
                for key, value in st.items():
                    ps.tensors[f"{name}.{idx}.{key}"] = torch.as_tensor(value).detach().numpy().astype(np.float32)
        ps.tensors["rng.torch"] = self.generator.get_state().numpy().astype(np.float32)
        raw = json.dumps(self.rng.bit_generator.state).encode("utf-8")
        ps.tensors["rng.numpy"] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
        return ps

    def load_state(self, ps: ParamSet) -> "RlpdLearner":
        counters = checkpoint_counters(ps)
        if counters["feature_dim"] != self.feature_dim:
            raise CheckpointError(f"feature_dim {counters['feature_dim']} != {self.feature_dim}")
        try:
            ps.load_module("actor", self.actor)
            ps.load_module("critic", self.critic)
            ps.load_module("target", self.target)
            if self.encoder is not None:
                ps.load_module("encoder", self.encoder)
        except (ParamSetError, RuntimeError) as exc:
            raise CheckpointError(str(exc)) from exc
        with torch.no_grad():
            self.log_alpha.copy_(torch.from_numpy(ps.tensors["log_alpha"]).reshape(()))
        self.updates, self.version = counters["updates"], counters["version"]
        for name, opt in (("actor_opt", self.actor_opt), ("critic_opt", self.critic_opt), ("temp_opt", self.temp_opt)):
            state = opt.state_dict()
            restored = {}
            for idx in range(len(state["param_groups"][0]["params"])):
                entry = {}
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    arr = ps.tensors.get(f"{name}.{idx}.{key}")
                    if arr is not None:
                        entry[key] = torch.from_numpy(arr.copy())
                if entry:
                    restored[idx] = entry
            state["state"] = restored
            opt.load_state_dict(state)
        self.generator.set_state(torch.from_numpy(ps.tensors["rng.torch"].astype(np.uint8)))
        raw = ps.tensors["rng.numpy"].astype(np.uint8).tobytes()
        self.rng.bit_generator.state = json.loads(raw.decode("utf-8"))
        return self

    def save_checkpoint(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.state_paramset().encode())
        logger.info("Checkpoint del aprendiz guardado en %s (update %d)", path, self.updates)
        return path

    def load_checkpoint(self, path: Union[str, Path]) -> "RlpdLearner":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"No existe el checkpoint {path}")
        return self.load_state(ParamSet.decode(path.read_bytes()))


class LearnerLoop:
    """
    Lado estación de trabajo: drena lotes del enlace al buffer en línea y
    ejecuta utd × (transiciones nuevas) actualizaciones.
    """

    def __init__(self, learner: RlpdLearner, link: LinkEndpoint, online: ReplayBuffer,
                 demo: Optional[DemoBuffer], feature_dim: int, output_dir: Optional[Path] = None):
        self.learner = learner
        self.link = link
        self.online = online
        self.demo = demo
        self.feature_dim = feature_dim
        self.output_dir = Path(output_dir) if output_dir else None
        self.assembler = TransitionAssembler()
        self.pending_updates = 0
        self.telemetry: List[Dict[str, float]] = []
        self._rate_t0 = time.perf_counter()
        self._rate_n = 0
        self.last_published: Optional[ParamSet] = None

    def drain(self) -> int:
        """Procesa los mensajes entrantes; devuelve las transiciones nuevas insertadas"""
        new = 0
        for msg in self.link.poll():
            if msg.msg_type == MsgType.HELLO:
                announced = decode_hello(msg.payload)
                if announced is not None and announced != self.feature_dim:
                    logger.error("HELLO anuncia %d características, se esperaban %d", announced, self.feature_dim)
                continue
            if msg.msg_type != MsgType.TRANSITION_BATCH:
                continue
            records = decode_transitions(msg.payload, self.feature_dim)
            for rec, nxt in self.assembler.push(records):
                self.online.add(
                    features=rec["features"], proprio=rec["proprio"], goal=rec["goal"],
                    prev_action=rec["prev_action"], action=rec["action"], reward=rec["reward"],
                    done=float(rec["done"]), next_features=nxt["features"], next_proprio=nxt["proprio"],
                    next_goal=nxt["goal"], next_prev_action=nxt["prev_action"],
                )
                new += 1
            self.link.send(encode_ack(max(self.assembler.highest_seen, 0)))
        return new

    def pump(self) -> int:
        """Un ciclo: drenar y luego ejecutar las actualizaciones adeudadas; devuelve cuántas"""
        self.pending_updates += self.learner.cfg.utd * self.drain()
        done = 0
        cfg = self.learner.cfg
        while self.pending_updates > 0 and len(self.online) > 0:
            batch = sample_mixed_batch(self.online, self.demo, cfg.batch_size, self.learner.rng)
            metrics = self.learner.update(batch)
            self.pending_updates -= 1
            done += 1
            self._rate_n += 1
            if self.learner.updates % cfg.publish_every == 0:
                self._publish(metrics)
            if self.output_dir is not None and self.learner.updates % cfg.checkpoint_every == 0:
                self.checkpoint()
        self.link.maybe_heartbeat()
        return done

    def _publish(self, metrics: Dict[str, float]) -> None:
        ps = self.learner.publish()
        self.last_published = ps
        if not self.link.send(encode_params(ps)):
            logger.warning("Enlace caído: publicación v%d no enviada", ps.version)
        elapsed = max(time.perf_counter() - self._rate_t0, 1e-9)
        self.telemetry.append({
            "update": self.learner.updates, "critic_loss": metrics["critic_loss"],
            "actor_loss": metrics["actor_loss"], "alpha": self.learner.alpha,
            "target_entropy": self.learner.target_entropy, "entropy": metrics["entropy"],
            "updates_per_sec": self._rate_n / elapsed, "param_version": ps.version,
        })
        self._rate_t0, self._rate_n = time.perf_counter(), 0
        logger.debug("Publicados parámetros v%d (update %d)", ps.version, self.learner.updates)

    def checkpoint(self) -> None:
        ckpt_dir = self.output_dir / "checkpoints"
        self.learner.save_checkpoint(ckpt_dir / "learner.flpw")
        self.online.save(ckpt_dir / "replay.npz")
        joblib.dump({"highest_seen": self.assembler.highest_seen, "pending": self.assembler.pending},
                    ckpt_dir / ASSEMBLER_STATE)

    def restore(self, ckpt_dir: Union[str, Path]) -> "LearnerLoop":
        """Aprendiz, buffer en línea y registro pendiente de emparejar de una corrida anterior"""
        ckpt_dir = Path(ckpt_dir)
        self.learner.load_checkpoint(ckpt_dir / "learner.flpw")
        self.online = ReplayBuffer.load(ckpt_dir / "replay.npz")
        if (ckpt_dir / ASSEMBLER_STATE).exists():
            saved = joblib.load(ckpt_dir / ASSEMBLER_STATE)
            self.assembler.highest_seen, self.assembler.pending = saved["highest_seen"], saved["pending"]
        return self

    def write_telemetry(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.telemetry, columns=["update", "critic_loss", "actor_loss", "alpha", "target_entropy",
                                              "entropy", "updates_per_sec", "param_version"]).to_csv(path, index=False)
        return path


def run_learner_loop(loop: LearnerLoop, stop, idle_s: float = 0.01) -> None:
    """Bucle de servicio para el transporte TCP; termina cuando `stop` está activo"""
    logger.info("Bucle del aprendiz iniciado")
    while not stop.is_set():
        if loop.pump() == 0:
            time.sleep(idle_s)
    logger.info("Bucle del aprendiz detenido en la actualización %d", loop.learner.updates)
