"""Buffers de repetición (en línea y demostración) y muestreo de lotes mixtos 50/50"""
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch

from .networks import ACTION_DIM, GOAL_DIM, PROPRIO_DIM

logger = logging.getLogger(__name__)

# Escala de cuantización de rasters crudos guardados como uint8
RASTER_SCALE = 255.0


@dataclass
class Batch:
    """Lote de transiciones como tensores float32"""
    features: torch.Tensor
    proprio: torch.Tensor
    goal: torch.Tensor
    prev_action: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    done: torch.Tensor
    next_features: torch.Tensor
    next_proprio: torch.Tensor
    next_goal: torch.Tensor
    next_prev_action: torch.Tensor
    from_demo: torch.Tensor

    def __len__(self) -> int:
        return int(self.reward.shape[0])

    @staticmethod
    def concat(a: "Batch", b: "Batch") -> "Batch":
        return Batch(**{f.name: torch.cat([getattr(a, f.name), getattr(b, f.name)]) for f in fields(Batch)})


class ReplayBuffer:
    """
    Almacenamiento columnar con sobrescritura FIFO al llegar a la capacidad.

    Las columnas crecen por duplicación hasta `capacity`. Con
    `feature_shape` multidimensional (rasters crudos) las características se
    guardan cuantizadas en uint8.
    """

    COLUMNS = ("proprio", "goal", "prev_action", "action", "reward", "done",
               "next_proprio", "next_goal", "next_prev_action")

    def __init__(self, capacity: int, feature_shape=(512,), initial: int = 1024):
        if capacity < 1:
            raise ValueError("La capacidad debe ser positiva")
        self.capacity = int(capacity)
        self.feature_shape = tuple(int(d) for d in feature_shape)
        self.quantized = len(self.feature_shape) > 1
        self.size = 0
        self.cursor = 0
        self.frozen = False
        self._alloc(min(self.capacity, initial))

    def _shapes(self) -> Dict[str, tuple]:
        return {
            "features": self.feature_shape, "next_features": self.feature_shape,
            "proprio": (PROPRIO_DIM,), "next_proprio": (PROPRIO_DIM,),
            "goal": (GOAL_DIM,), "next_goal": (GOAL_DIM,),
            "prev_action": (ACTION_DIM,), "next_prev_action": (ACTION_DIM,), "action": (ACTION_DIM,),
            "reward": (), "done": (),
        }

    def _alloc(self, n: int) -> None:
        old = getattr(self, "data", None)
        data = {}
        for name, shape in self._shapes().items():
            dtype = np.uint8 if (self.quantized and "features" in name) else np.float32
            data[name] = np.zeros((n,) + shape, dtype=dtype)
            if old is not None:
                data[name][: len(old[name])] = old[name]
        self.data = data
        self._allocated = n

    def __len__(self) -> int:
        return self.size

    def add(self, **transition) -> None:
        if self.frozen:
            raise RuntimeError("El buffer de demostración es de solo lectura")
        if self.cursor >= self._allocated and self._allocated < self.capacity:
            self._alloc(min(self.capacity, 2 * self._allocated))
        i = self.cursor
        for name in self.data:
            value = np.asarray(transition[name]).reshape(self.data[name].shape[1:])
            if self.quantized and "features" in name:
                value = np.clip(np.rint(value * RASTER_SCALE), 0, 255)
            self.data[name][i] = value
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def freeze(self) -> "ReplayBuffer":
        self.frozen = True
        for arr in self.data.values():
            arr.setflags(write=False)
        return self

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("Buffer vacío")
        return rng.integers(0, self.size, size=n)

    def gather(self, idx: np.ndarray, from_demo: bool = False) -> Batch:
        out = {}
        for name, arr in self.data.items():
            values = arr[idx]
            if self.quantized and "features" in name:
                values = values.astype(np.float32) / RASTER_SCALE
            out[name] = torch.from_numpy(np.ascontiguousarray(values, dtype=np.float32))
        out["from_demo"] = torch.full((len(idx),), from_demo, dtype=torch.bool)
        return Batch(**out)

    def sample(self, n: int, rng: np.random.Generator, from_demo: bool = False) -> Batch:
        return self.gather(self.sample_indices(n, rng), from_demo)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {k: v[: self.size] if self.size < self.capacity else v for k, v in self.data.items()}
        np.savez(path, cursor=self.cursor, size=self.size, capacity=self.capacity,
                 feature_shape=np.array(self.feature_shape), **arrays)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ReplayBuffer":
        with np.load(path) as f:
            buf = cls(int(f["capacity"]), tuple(int(d) for d in f["feature_shape"]), initial=max(1, int(f["size"])))
            for name in buf.data:
                n = int(f["size"])
                buf.data[name][:n] = f[name][:n]
            buf.size = int(f["size"])
            buf.cursor = int(f["cursor"])
        return buf


class DemoBuffer(ReplayBuffer):
    """Transiciones de la vuelta lenta de demostración; inmutable tras la carga"""

    @classmethod
    def from_replay(cls, replay: ReplayBuffer) -> "DemoBuffer":
        demo = cls(max(1, replay.size), replay.feature_shape, initial=max(1, replay.size))
        for name in demo.data:
            demo.data[name][: replay.size] = replay.data[name][: replay.size]
        demo.size = replay.size
        demo.cursor = replay.size % demo.capacity
        return demo.freeze()


def sample_mixed_batch(online: ReplayBuffer, demo: Optional[ReplayBuffer], batch_size: int,
                       rng: np.random.Generator) -> Batch:
    """⌈n/2⌉ transiciones de la demostración y ⌊n/2⌋ en línea; sin demo todo es en línea"""
    if len(online) == 0:
        raise ValueError("El buffer en línea está vacío")
    if demo is None or len(demo) == 0:
        return online.sample(batch_size, rng)
    n_demo = (batch_size + 1) // 2
    n_online = batch_size // 2
    demo_part = demo.sample(n_demo, rng, from_demo=True)
    if n_online == 0:
        return demo_part
    return Batch.concat(demo_part, online.sample(n_online, rng))
