"""Subflujos aleatorios con nombre derivados de la semilla única de la corrida"""
import zlib

import numpy as np
import torch

# Nombres usados en todo el paquete; las ablaciones comparten semillas acopladas
WORLD = "world"
POLICY = "policy"
RELABEL = "relabel"
RECOVERY = "recovery"
SENSORS = "sensors"
LEARNER = "learner"
NETWORK_INIT = "network-init"


def substream(seed: int, name: str) -> np.random.Generator:
    """Generador numpy independiente para (semilla, nombre)"""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def torch_generator(seed: int, name: str) -> torch.Generator:
    """Generador de torch sembrado desde el mismo subflujo"""
    gen = torch.Generator()
    gen.manual_seed(int(substream(seed, name).integers(0, 2**62)))
    return gen
