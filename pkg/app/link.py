"""
Enlace robot ↔ estación de trabajo.

Tramas `FRLP` con CRC32 sobre el payload, códecs de payload, transporte
loopback (determinista, con latencia sobre un reloj inyectable) y TCP con
hilos emisor/receptor y reconexión.
"""
import logging
import queue
import socket
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from typing import Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from .networks import ACTION_DIM, GOAL_DIM, PROPRIO_DIM, ParamSet

logger = logging.getLogger(__name__)

MAGIC = b"FRLP"
PROTOCOL_VERSION = 1
HEADER = struct.Struct("<4sBBI")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 16 * 1024 * 1024
FRAME_OVERHEAD = HEADER.size + CRC.size


# ============================================================================
# ERRORES
# ============================================================================

class LinkError(Exception):
    """Base de los errores de decodificación del enlace"""
    counter = "link_error"


class BadMagic(LinkError):
    counter = "bad_magic"


class BadCrc(LinkError):
    counter = "bad_crc"


class UnknownType(LinkError):
    counter = "unknown_type"


class Truncated(LinkError):
    counter = "truncated"


class Oversize(LinkError):
    counter = "oversize"


class MsgType(IntEnum):
    HELLO = 0
    TRANSITION_BATCH = 1
    PARAM_UPDATE = 2
    ACK = 3
    HEARTBEAT = 4


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    payload: bytes = b""


# ============================================================================
# CÓDEC DE TRAMAS
# ============================================================================

def encode_frame(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise Oversize(f"Payload de {len(msg.payload)} bytes excede 16 MiB")
    header = HEADER.pack(MAGIC, PROTOCOL_VERSION, int(msg.msg_type), len(msg.payload))
    return header + msg.payload + CRC.pack(zlib.crc32(msg.payload) & 0xFFFFFFFF)


def decode_frame_prefix(data: bytes) -> Tuple[Message, int]:
    """Decodifica la trama al inicio de `data`; devuelve el mensaje y los bytes consumidos"""
    if len(data) < HEADER.size:
        raise Truncated("Cabecera incompleta")
    magic, version, msg_type, length = HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != PROTOCOL_VERSION:
        raise BadMagic(f"Cabecera inválida {magic!r} v{version}")
    if length > MAX_PAYLOAD:
        raise Oversize(f"payload_len {length}")
    end = HEADER.size + length
    if len(data) < end + CRC.size:
        raise Truncated("Trama incompleta")
    payload = bytes(data[HEADER.size:end])
    (crc,) = CRC.unpack_from(data, end)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise BadCrc("CRC32 no coincide")
    try:
        kind = MsgType(msg_type)
    except ValueError as exc:
        raise UnknownType(f"Tipo {msg_type}") from exc
    return Message(kind, payload), end + CRC.size


def decode_frame(data: bytes) -> Message:
    msg, consumed = decode_frame_prefix(data)
    if consumed != len(data):
        raise Truncated(f"{len(data) - consumed} bytes sobrantes tras la trama")
    return msg


class FrameReader:
    """
    Decodificador incremental de flujo.

    Ante magic inválido descarta hasta la próxima aparición de `FRLP`; las
    tramas con CRC o tipo inválidos se saltan completas. Cada rechazo se
    cuenta por clase.
    """

    def __init__(self):
        self.buffer = bytearray()
        self.errors: Dict[str, int] = {"bad_magic": 0, "bad_crc": 0, "unknown_type": 0,
                                       "truncated": 0, "oversize": 0}

    def feed(self, data: bytes) -> List[Message]:
        self.buffer.extend(data)
        out: List[Message] = []
        while self.buffer:
            try:
                msg, consumed = decode_frame_prefix(bytes(self.buffer))
            except Truncated:
                break
            except (BadMagic, Oversize) as exc:
                self.errors[exc.counter] += 1
                nxt = self.buffer.find(MAGIC, 1)
                del self.buffer[: nxt if nxt > 0 else len(self.buffer)]
                continue
            except (BadCrc, UnknownType) as exc:
                self.errors[exc.counter] += 1
                (length,) = struct.unpack_from("<I", self.buffer, 6)
                del self.buffer[: HEADER.size + length + CRC.size]
                continue
            del self.buffer[:consumed]
            out.append(msg)
        return out


# ============================================================================
# CÓDECS DE PAYLOAD
# ============================================================================

def record_dtype(feature_dim: int) -> np.dtype:
    """Registro empaquetado little-endian: 4·F + 77 bytes"""
    return np.dtype([
        ("features", "<f4", (feature_dim,)),
        ("proprio", "<f4", (PROPRIO_DIM,)),
        ("goal", "<f4", (GOAL_DIM,)),
        ("prev_action", "<f4", (ACTION_DIM,)),
        ("action", "<f4", (ACTION_DIM,)),
        ("reward", "<f4"),
        ("done", "u1"),
        ("step", "<u8"),
    ])


def encode_transitions(records: np.ndarray) -> Message:
    return Message(MsgType.TRANSITION_BATCH, records.tobytes())


def decode_transitions(payload: bytes, feature_dim: int) -> np.ndarray:
    dtype = record_dtype(feature_dim)
    if len(payload) % dtype.itemsize:
        raise Truncated(f"Payload de {len(payload)} bytes no es múltiplo de {dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).copy()


def encode_hello(feature_dim: Optional[int] = None) -> Message:
    return Message(MsgType.HELLO, b"" if feature_dim is None else struct.pack("<I", feature_dim))


def decode_hello(payload: bytes) -> Optional[int]:
    if not payload:
        return None
    if len(payload) != 4:
        raise Truncated("HELLO con payload inválido")
    return struct.unpack("<I", payload)[0]


def encode_ack(step: int) -> Message:
    return Message(MsgType.ACK, struct.pack("<Q", step))


def decode_ack(payload: bytes) -> int:
    if len(payload) != 8:
        raise Truncated("ACK con payload inválido")
    return struct.unpack("<Q", payload)[0]


def encode_params(params: ParamSet) -> Message:
    return Message(MsgType.PARAM_UPDATE, params.encode())


HEARTBEAT_FIELDS = ("sent", "received", "bad_magic", "bad_crc", "unknown_type", "truncated", "dropped")


@dataclass
class LinkCounters:
    sent: int = 0
    received: int = 0
    bad_magic: int = 0
    bad_crc: int = 0
    unknown_type: int = 0
    truncated: int = 0
    dropped: int = 0
    bytes_sent: int = 0

    def heartbeat(self) -> Message:
        return Message(MsgType.HEARTBEAT, struct.pack(f"<{len(HEARTBEAT_FIELDS)}Q",
                                                      *(getattr(self, f) for f in HEARTBEAT_FIELDS)))

    @staticmethod
    def decode_heartbeat(payload: bytes) -> Dict[str, int]:
        n = len(HEARTBEAT_FIELDS)
        if len(payload) != 8 * n:
            raise Truncated("HEARTBEAT con payload inválido")
        return dict(zip(HEARTBEAT_FIELDS, struct.unpack(f"<{n}Q", payload)))


# ============================================================================
# TRANSPORTES
# ============================================================================

class SimClock:
    """Reloj de simulación avanzado explícitamente por el planificador"""

    def __init__(self, start: float = 0.0):
        self.now = start

    def __call__(self) -> float:
        return self.now

    def advance(self, dt: float) -> None:
        self.now += dt


class LoopbackTransport:
    """Extremo de un par en memoria; entrega cada envío tras `latency` en el reloj dado"""

    def __init__(self, clock: Callable[[], float], latency: float = 0.0):
        self.clock = clock
        self.latency = latency
        self.inbox: Deque[Tuple[float, bytes]] = deque()
        self.peer: Optional["LoopbackTransport"] = None
        self.connected = True

    def send(self, data: bytes) -> None:
        if not self.connected or self.peer is None:
            raise ConnectionError("Loopback desconectado")
        self.peer.inbox.append((self.clock() + self.latency, bytes(data)))

    def recv(self) -> bytes:
        now = self.clock()
        chunks = []
        while self.inbox and self.inbox[0][0] <= now + 1e-12:
            chunks.append(self.inbox.popleft()[1])
        return b"".join(chunks)

    def sever(self) -> None:
        """Corta ambos sentidos; lo que estaba en vuelo se pierde"""
        for end in (self, self.peer):
            if end is not None:
                end.connected = False
                end.inbox.clear()

    def restore(self) -> None:
        for end in (self, self.peer):
            if end is not None:
                end.connected = True

    def close(self) -> None:
        self.connected = False


def loopback_pair(clock: Callable[[], float], latency: float = 0.0) -> Tuple[LoopbackTransport, LoopbackTransport]:
    a, b = LoopbackTransport(clock, latency), LoopbackTransport(clock, latency)
    a.peer, b.peer = b, a
    return a, b


class TcpTransport:
    """
    Flujo de bytes TCP con hilo emisor, hilo receptor y reconexión.

    `send` nunca bloquea: encola y el hilo emisor escribe. Con el enlace
    caído los envíos fallan con ConnectionError.
    """

    def __init__(self, host: str, port: int, server: bool, retry_s: float = 0.5):
        self.host = host
        self.port = port
        self.server = server
        self.retry_s = retry_s
        self._sock: Optional[socket.socket] = None
        self._listener: Optional[socket.socket] = None
        self._outgoing: "queue.Queue[bytes]" = queue.Queue()
        self._incoming = bytearray()
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.connected = False
        self._threads = [threading.Thread(target=self._connect_loop, daemon=True),
                         threading.Thread(target=self._send_loop, daemon=True)]
        for t in self._threads:
            t.start()

    def _connect_loop(self) -> None:
        while not self._stop.is_set():
            try:
                if self.server:
                    if self._listener is None:
                        self._listener = socket.create_server((self.host, self.port))
                        self._listener.settimeout(self.retry_s)
                    sock, _ = self._listener.accept()
                else:
                    sock = socket.create_connection((self.host, self.port), timeout=self.retry_s)
                sock.settimeout(self.retry_s)
                self._sock = sock
                self.connected = True
                logger.info("Enlace TCP conectado (%s:%d)", self.host, self.port)
                self._recv_loop(sock)
            except OSError:
                pass
            if self.connected:
                logger.warning("Enlace TCP perdido; reintentando")
            self.connected = False
            self._sock = None
            time.sleep(self.retry_s)

    def _recv_loop(self, sock: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                data = sock.recv(65536)
            except socket.timeout:
                continue
            if not data:
                return
            with self._lock:
                self._incoming.extend(data)

    def _send_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data = self._outgoing.get(timeout=self.retry_s)
            except queue.Empty:
                continue
            sock = self._sock
            if sock is None:
                continue
            try:
                sock.sendall(data)
            except OSError:
                logger.warning("Fallo al enviar %d bytes por TCP", len(data))

    def send(self, data: bytes) -> None:
        if not self.connected:
            raise ConnectionError("Enlace TCP caído")
        self._outgoing.put(bytes(data))

    def recv(self) -> bytes:
        with self._lock:
            data = bytes(self._incoming)
            self._incoming.clear()
        return data

    def close(self) -> None:
        self._stop.set()
        for s in (self._sock, self._listener):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass


# ============================================================================
# EXTREMOS DEL ENLACE
# ============================================================================

class LinkEndpoint:
    """Transporte + lector de tramas + contadores de salud"""

    def __init__(self, transport, clock: Callable[[], float] = time.monotonic, heartbeat_s: float = 1.0):
        self.transport = transport
        self.reader = FrameReader()
        self.counters = LinkCounters()
        self.clock = clock
        self.heartbeat_s = heartbeat_s
        self._last_heartbeat = None
        self.peer_counters: Dict[str, int] = {}

    @property
    def connected(self) -> bool:
        return bool(self.transport.connected)

    def send(self, msg: Message) -> bool:
        frame = encode_frame(msg)
        try:
            self.transport.send(frame)
        except ConnectionError:
            return False
        self.counters.sent += 1
        self.counters.bytes_sent += len(frame)
        return True

    def poll(self) -> List[Message]:
        msgs = self.reader.feed(self.transport.recv())
        for name, count in self.reader.errors.items():
            if hasattr(self.counters, name):
                setattr(self.counters, name, count)
        self.counters.received += len(msgs)
        out = []
        for m in msgs:
            if m.msg_type == MsgType.HEARTBEAT:
                try:
                    self.peer_counters = LinkCounters.decode_heartbeat(m.payload)
                except LinkError:
                    self.counters.truncated += 1
                continue
            out.append(m)
        return out

    def maybe_heartbeat(self) -> None:
        now = self.clock()
        if self._last_heartbeat is None or now - self._last_heartbeat >= self.heartbeat_s - 1e-9:
            self._last_heartbeat = now
            self.send(self.counters.heartbeat())

    def telemetry(self) -> Dict[str, int]:
        return asdict(self.counters)


class TransitionAssembler:
    """
    Empareja el registro t con el t+1 para reconstruir s′; un registro
    terminal se completa solo. Los pasos ya vistos se descartan.
    """

    def __init__(self):
        self.highest_seen = -1
        self.pending: Optional[np.void] = None
        self.duplicates = 0
        self.gaps = 0

    def push(self, records: np.ndarray) -> List[Tuple[np.void, np.void]]:
        """Devuelve pares (registro, siguiente registro); en terminales el siguiente es él mismo"""
        out = []
        for rec in records:
            step = int(rec["step"])
            if step <= self.highest_seen:
                self.duplicates += 1
                continue
            self.highest_seen = step
            if self.pending is not None:
                if int(self.pending["step"]) + 1 == step:
                    out.append((self.pending, rec))
                else:
                    self.gaps += 1
                self.pending = None
            if rec["done"]:
                out.append((rec, rec))
            else:
                self.pending = rec
        return out
