"""
Redes de actor, ensamble de críticos y codificador convolucional (torch).

Las acciones viven en un espacio normalizado [-1, 1]² dentro de las redes;
`ActionScaler` las lleva a unidades físicas (velocidad, dirección). El
aplastamiento tanh desplazado centra la acción en la acción previa con
amplitud δ.
"""
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import EncoderParams, NetworkParams, WorldParams
from .seeding import NETWORK_INIT, torch_generator

logger = logging.getLogger(__name__)

PROPRIO_DIM = 9
GOAL_DIM = 3
ACTION_DIM = 2

PARAMSET_MAGIC = b"FLPW"


class ParamSetError(ValueError):
    """Contenedor de parámetros corrupto, truncado o incompatible"""


# ============================================================================
# ESPACIO DE ACCIONES Y APLASTAMIENTO
# ============================================================================

class ActionScaler:
    """Mapa afín entre [-1, 1]² y los rangos físicos de velocidad y dirección"""

    def __init__(self, params: WorldParams):
        self.low = np.array([params.velocity_range[0], params.steering_range[0]], dtype=np.float64)
        self.high = np.array([params.velocity_range[1], params.steering_range[1]], dtype=np.float64)

    def to_physical(self, normalized) -> np.ndarray:
        n = np.clip(np.asarray(normalized, dtype=np.float64), -1.0, 1.0)
        return self.low + (n + 1.0) * 0.5 * (self.high - self.low)

    def to_normalized(self, physical) -> np.ndarray:
        p = np.clip(np.asarray(physical, dtype=np.float64), self.low, self.high)
        return 2.0 * (p - self.low) / (self.high - self.low) - 1.0


def shifted_tanh(x, a_prev, delta: float):
    """f(x) = tanh((x − a_prev)/δ)·δ + a_prev"""
    return torch.tanh((x - a_prev) / delta) * delta + a_prev


def shifted_tanh_log_derivative(x, a_prev, delta: float):
    """log f′(x) = log sech²(u) con u = (x − a_prev)/δ, forma estable"""
    u = (x - a_prev) / delta
    return 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))


def shifted_tanh_inverse(y, a_prev, delta: float, eps: float = 1e-6):
    """Preimagen de y; se recorta al interior de la banda abierta (a_prev − δ, a_prev + δ)"""
    z = ((y - a_prev) / delta).clamp(-1.0 + eps, 1.0 - eps)
    return torch.atanh(z) * delta + a_prev


# ============================================================================
# CAPAS
# ============================================================================

def _uniform_(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=gen)


class EnsembleLinear(nn.Module):
    """N capas lineales independientes evaluadas con un solo baddbmm"""

    def __init__(self, n_members: int, in_features: int, out_features: int, gen: torch.Generator):
        super().__init__()
        self.n_members = n_members
        self.weight = nn.Parameter(torch.empty(n_members, in_features, out_features))
        self.bias = nn.Parameter(torch.empty(n_members, 1, out_features))
        _uniform_(self.weight, in_features, gen)
        _uniform_(self.bias, in_features, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (N, B, in)
        return torch.baddbmm(self.bias, x, self.weight)


class ConvEncoder(nn.Module):
    """Pila de convoluciones 3×3 stride 2 + ReLU sobre los cuadros apilados"""

    def __init__(self, params: EncoderParams, raster_size: int, gen: torch.Generator):
        super().__init__()
        self.params = params
        self.raster_size = raster_size
        layers = []
        in_ch = params.frames
        for _ in range(params.layers):
            conv = nn.Conv2d(in_ch, params.channels, params.kernel, stride=params.stride,
                             padding=params.kernel // 2)
            _uniform_(conv.weight, in_ch * params.kernel ** 2, gen)
            _uniform_(conv.bias, in_ch * params.kernel ** 2, gen)
            layers.append(conv)
            in_ch = params.channels
        self.convs = nn.ModuleList(layers)
        self.output_dim = self._infer_output_dim()

    def _infer_output_dim(self) -> int:
        size = self.raster_size
        pad = self.params.kernel // 2
        for _ in range(self.params.layers):
            size = (size + 2 * pad - self.params.kernel) // self.params.stride + 1
        return size * size * self.params.channels

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        h = frames
        for conv in self.convs:
            h = F.relu(conv(h))
        return h.flatten(start_dim=1)


class _Head(nn.Module):
    """
    Capa densa sobre (propiocepción, meta, acción previa[, acción]) concatenada
    con las características visuales y seguida del tronco MLP.

    Con n_members > 1 es un ensamble sin acoplamiento entre miembros.
    """

    def __init__(self, n_members: int, feature_dim: int, low_dim: int, out_dim: int,
                 params: NetworkParams, gen: torch.Generator):
        super().__init__()
        self.n_members = n_members
        self.feature_dim = feature_dim
        self.low_dim = low_dim
        self.layer_norm = params.layer_norm
        self.input_dense = EnsembleLinear(n_members, low_dim, params.input_dense, gen)
        dims = [params.input_dense + feature_dim] + list(params.hidden_dims)
        self.trunk = nn.ModuleList(EnsembleLinear(n_members, a, b, gen) for a, b in zip(dims[:-1], dims[1:]))
        self.out = EnsembleLinear(n_members, dims[-1], out_dim, gen)

    def forward(self, features: torch.Tensor, low: torch.Tensor) -> torch.Tensor:
        if low.shape[-1] != self.low_dim or features.shape[-1] != self.feature_dim:
            raise ValueError(
                f"Dimensiones inconsistentes: low={low.shape[-1]}/{self.low_dim}, "
                f"features={features.shape[-1]}/{self.feature_dim}"
            )
        n = self.n_members
        low = low.unsqueeze(0).expand(n, *low.shape)
        features = features.unsqueeze(0).expand(n, *features.shape)
        h = F.relu(self.input_dense(low))
        h = torch.cat([h, features], dim=-1)
        for layer in self.trunk:
            h = layer(h)
            if self.layer_norm:
                h = F.layer_norm(h, h.shape[-1:])
            h = F.relu(h)
        return self.out(h)


class CriticEnsemble(nn.Module):
    """Q(s, a) para N miembros independientes; salida (N, B)"""

    def __init__(self, n_members: int, feature_dim: int, params: NetworkParams, gen: torch.Generator,
                 action_dim: int = ACTION_DIM):
        super().__init__()
        self.n_members = n_members
        self.action_dim = action_dim
        self.head = _Head(n_members, feature_dim, PROPRIO_DIM + GOAL_DIM + ACTION_DIM + action_dim, 1,
                          params, gen)

    def forward(self, features, proprio, goal, prev_action, action=None) -> torch.Tensor:
        parts = [proprio, goal, prev_action]
        if self.action_dim:
            parts.append(action)
        return self.head(features, torch.cat(parts, dim=-1)).squeeze(-1)


class ValueNetwork(CriticEnsemble):
    """V(s) con la misma forma que un crítico sin la acción evaluada"""

    def __init__(self, feature_dim: int, params: NetworkParams, gen: torch.Generator, n_members: int = 1):
        super().__init__(n_members, feature_dim, params, gen, action_dim=0)


class Actor(nn.Module):
    """Gaussiana diagonal aplastada con tanh desplazado alrededor de la acción previa"""

    def __init__(self, feature_dim: int, params: NetworkParams, gen: torch.Generator):
        super().__init__()
        self.params = params
        self.head = _Head(1, feature_dim, PROPRIO_DIM + GOAL_DIM + ACTION_DIM, 2 * ACTION_DIM, params, gen)

    def distribution(self, features, proprio, goal, prev_action) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.head(features, torch.cat([proprio, goal, prev_action], dim=-1))[0]
        mean, log_std = out.chunk(2, dim=-1)
        log_std = log_std.clamp(self.params.log_std_min, self.params.log_std_max)
        return mean, log_std

    def squash(self, x, prev_action):
        return shifted_tanh(x, prev_action, self.params.squash_delta).clamp(-1.0, 1.0)

    def forward(self, features, proprio, goal, prev_action, noise) -> Tuple[torch.Tensor, torch.Tensor]:
        """Acción normalizada y log π con la corrección exacta del cambio de variables"""
        mean, log_std = self.distribution(features, proprio, goal, prev_action)
        std = log_std.exp()
        x = mean + std * noise
        log_prob = (-0.5 * noise.pow(2) - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
        log_prob = log_prob - shifted_tanh_log_derivative(x, prev_action, self.params.squash_delta).sum(-1)
        return self.squash(x, prev_action), log_prob

    def mean_action(self, features, proprio, goal, prev_action) -> torch.Tensor:
        mean, _ = self.distribution(features, proprio, goal, prev_action)
        return self.squash(mean, prev_action)

    def log_prob(self, features, proprio, goal, prev_action, action) -> torch.Tensor:
        """log π de una acción dada (se usa la preimagen recortada del aplastamiento)"""
        mean, log_std = self.distribution(features, proprio, goal, prev_action)
        x = shifted_tanh_inverse(action, prev_action, self.params.squash_delta)
        noise = (x - mean) / log_std.exp()
        lp = (-0.5 * noise.pow(2) - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
        return lp - shifted_tanh_log_derivative(x, prev_action, self.params.squash_delta).sum(-1)


def forward_critic(critic: CriticEnsemble, features, proprio, goal, prev_action, action) -> torch.Tensor:
    return critic(features, proprio, goal, prev_action, action)


def forward_actor(actor: Actor, features, proprio, goal, prev_action, noise_sample):
    return actor(features, proprio, goal, prev_action, noise_sample)


def build_encoder(params: EncoderParams, raster_size: int, seed: int) -> ConvEncoder:
    return ConvEncoder(params, raster_size, torch_generator(seed, NETWORK_INIT + "/encoder"))


def build_actor(feature_dim: int, params: NetworkParams, seed: int) -> Actor:
    return Actor(feature_dim, params, torch_generator(seed, NETWORK_INIT + "/actor"))


def build_critic(n_members: int, feature_dim: int, params: NetworkParams, seed: int,
                 name: str = "critic") -> CriticEnsemble:
    return CriticEnsemble(n_members, feature_dim, params, torch_generator(seed, NETWORK_INIT + "/" + name))


def gradient(module: nn.Module, loss_fn: Callable[[nn.Module, object], torch.Tensor], batch) -> Dict[str, torch.Tensor]:
    """Gradientes de modo inverso de la pérdida escalar, con la forma de los parámetros"""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    loss = loss_fn(module, batch)
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(named, grads)}


def polyak_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    with torch.no_grad():
        for t, s in zip(target.parameters(), source.parameters()):
            t.mul_(1.0 - tau).add_(s, alpha=tau)


# ============================================================================
# PARAMSET (formato FLPW)
# ============================================================================

@dataclass
class ParamSet:
    """Tensores f32 con nombre y una versión monótona"""
    version: int
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def encode(self) -> bytes:
        out = [PARAMSET_MAGIC, struct.pack("<II", self.version, len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes(order="C"))
        body = b"".join(out)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    @classmethod
    def decode(cls, data: bytes) -> "ParamSet":
        if len(data) < 16:
            raise ParamSetError("ParamSet truncado")
        if data[:4] != PARAMSET_MAGIC:
            raise ParamSetError("Magic FLPW ausente")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != crc:
            raise ParamSetError("CRC de ParamSet inválido")
        version, count = struct.unpack_from("<II", body, 4)
        off = 12
        tensors: Dict[str, np.ndarray] = {}
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<H", body, off)
                off += 2
                name = body[off:off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<B", body, off)
                off += 1
                dims = struct.unpack_from(f"<{rank}I", body, off)
                off += 4 * rank
                size = int(np.prod(dims)) if rank else 1
                if off + 4 * size > len(body):
                    raise ParamSetError(f"Tensor {name} truncado")
                tensors[name] = np.frombuffer(body, dtype="<f4", count=size, offset=off).reshape(dims).copy()
                off += 4 * size
        except struct.error as exc:
            raise ParamSetError("ParamSet truncado") from exc
        if off != len(body):
            raise ParamSetError("Bytes sobrantes en ParamSet")
        return cls(version, tensors)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def add_module(self, prefix: str, module: nn.Module) -> "ParamSet":
        for name, t in module.state_dict().items():
            self.tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype(np.float32)
        return self

    def load_module(self, prefix: str, module: nn.Module) -> nn.Module:
        state = self.subset(prefix)
        expected = module.state_dict()
        missing = set(expected) - set(state)
        if missing:
            raise ParamSetError(f"Faltan tensores para '{prefix}': {sorted(missing)[:3]}")
        module.load_state_dict({k: torch.from_numpy(state[k]).reshape(expected[k].shape) for k in expected})
        return module

    def fingerprint(self, prefix: str = "") -> int:
        """CRC32 de los bytes de los tensores bajo el prefijo"""
        crc = 0
        for k in sorted(self.tensors):
            if k.startswith(prefix):
                crc = zlib.crc32(np.ascontiguousarray(self.tensors[k], dtype="<f4").tobytes(), crc)
        return crc


def encoder_meta(params: EncoderParams, raster_size: int) -> np.ndarray:
    return np.array([params.layers, params.kernel, params.stride, params.channels, params.frames,
                     raster_size], dtype=np.float32)


def encoder_from_paramset(ps: ParamSet) -> ConvEncoder:
    """Reconstruye el codificador a partir de `meta.encoder` y los tensores `encoder.*`"""
    meta = ps.tensors.get("meta.encoder")
    if meta is None:
        raise ParamSetError("El ParamSet no contiene un codificador")
    layers, kernel, stride, channels, frames, raster = (int(v) for v in meta)
    params = EncoderParams(layers=layers, kernel=kernel, stride=stride, channels=channels, frames=frames)
    encoder = ConvEncoder(params, raster, torch.Generator().manual_seed(0))
    return ps.load_module("encoder", encoder)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()
