"""
Orquestación de corridas: vuelta de demostración, entrenamiento con enlace
loopback, evaluación, resúmenes de vueltas, gráficos e informes.
"""
import copy
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
import yaml  # noqa: E402

from .config import dump_run_config  # noqa: E402
from .estimation import PoseEstimator  # noqa: E402
from .learner import (BLIND, FROZEN, RAW, STATE, CheckpointError, LearnerLoop, RlpdLearner,  # noqa: E402
                      run_learner_loop)
from .link import LinkEndpoint, SimClock, TcpTransport, loopback_pair  # noqa: E402
from .models import LapRecord, RunConfig  # noqa: E402
from .networks import ActionScaler, ParamSet, build_actor, build_encoder, encoder_from_paramset  # noqa: E402
from .practice import Course, Mode, PracticeFSM  # noqa: E402
from .pretrain import FrozenEncoder  # noqa: E402
from .replay import DemoBuffer, ReplayBuffer  # noqa: E402
from .robot import Observation, RobotLoop, RobotPolicy, feature_dim_for, state_features  # noqa: E402
from .tracks import (PurePursuit, TrackLayout, checkpoints_from_path, generate_course_map,  # noqa: E402
                     load_map, path_length)
from .world import CarState, DrivingWorld, goal_vector  # noqa: E402

logger = logging.getLogger(__name__)

ROBOT_STATE = "robot.joblib"
LAP_COLUMNS = ["lap_index", "lap_time", "collisions", "stuck_events", "sim_time", "env_step", "dnf"]


class DemoLapError(RuntimeError):
    """El seguidor guionado no completó la vuelta de demostración"""

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(f"{message} (trayectoria: {dump_path})" if dump_path else message)
        self.dump_path = dump_path


# ============================================================================
# CIRCUITO Y MODO DE OBSERVACIÓN
# ============================================================================

def build_layout(config: RunConfig) -> TrackLayout:
    """Circuito procedural por semilla, o mapa FLMAP con la línea central del circuito por defecto"""
    layout = generate_course_map(config.course.map_seed, cell_size=0.5)
    if config.course.map_file is not None:
        layout = TrackLayout(load_map(config.course.map_file), layout.centerline, layout.start)
    return layout


def feature_mode(config: RunConfig) -> str:
    mode = config.observation_mode
    if mode == "state":
        return STATE
    if mode == "blind":
        return BLIND
    return RAW if config.trains_encoder else FROZEN


def load_frozen_encoder(config: RunConfig) -> FrozenEncoder:
    path = config.encoder_checkpoint
    if path is None or not Path(path).exists():
        raise CheckpointError(f"Se requiere un codificador preentrenado (encoder_checkpoint={path})")
    return FrozenEncoder.load(path)


@dataclass
class Featurizer:
    """Convierte (pila de cuadros, pose) en el vector de características del modo activo"""
    mode: str
    encoder: Optional[FrozenEncoder] = None

    def __call__(self, frames: Optional[np.ndarray], pose: CarState) -> np.ndarray:
        if self.mode == STATE:
            return state_features(pose)
        if self.mode == BLIND:
            return np.zeros(0, dtype=np.float32)
        if self.mode == RAW:
            return frames.astype(np.float32).ravel()
        return self.encoder.featurize(frames).astype(np.float32)

    def replay_shape(self, config: RunConfig, encoder_dim: int) -> tuple:
        if self.mode == RAW:
            return (config.encoder.frames, config.world.raster_size, config.world.raster_size)
        return (feature_dim_for(self.mode, encoder_dim, config.world.raster_size, config.encoder.frames),)


# ============================================================================
# VUELTA DE DEMOSTRACIÓN
# ============================================================================

@dataclass
class DemoResult:
    course: Course
    buffer: DemoBuffer
    lap_time: float
    path: np.ndarray
    collisions: int = 0


def _drive_scripted(layout: TrackLayout, config: RunConfig, speed: float, lookahead: float,
                    record_frames: bool) -> dict:
    world = DrivingWorld(layout.world_map, config.world, layout.start, config.encoder.frames)
    estimator = PoseEstimator(config.estimator, config.seed, layout.start.heading)
    follower = PurePursuit(layout.centerline, speed, config.world, lookahead=lookahead)
    max_steps = int(3 * layout.length / speed / config.world.dt)
    poses, truths, stacks, actions = [estimator.observe(world.state, config.world.dt)], [world.state], [], []
    collisions = 0
    for _ in range(max_steps):
        if record_frames:
            stacks.append(world.observe().frames)
        action = follower.command(world.state)
        world.step(action)
        actions.append(action)
        truths.append(world.state)
        poses.append(estimator.observe(world.state, config.world.dt))
        if abs(world.state.lateral_accel) > config.world.collision_accel:
            collisions += 1
        if follower.done:
            break
    if record_frames:
        stacks.append(world.observe().frames)
    return {"poses": poses, "truths": truths, "stacks": stacks, "actions": actions,
            "collisions": collisions, "completed": follower.done}


def _dump_trajectory(truths: Sequence[CarState], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([{"x": s.x, "y": s.y, "heading": s.heading, "speed": s.speed} for s in truths]).to_csv(path, index=False)
    return path


def record_demo_lap(config: RunConfig, layout: Optional[TrackLayout] = None,
                    featurizer: Optional[Featurizer] = None, encoder_dim: int = 0) -> DemoResult:
    """
    Vuelta lenta con pure-pursuit sobre la línea central.

    Los checkpoints salen del recorrido por submuestreo uniforme en longitud de
    arco; las recompensas de la demostración se recalculan contra ese mismo
    circuito con una FSM nueva.
    """
    layout = layout or build_layout(config)
    featurizer = featurizer or Featurizer(STATE)
    uses_raster = featurizer.mode in (FROZEN, RAW)
    run = _drive_scripted(layout, config, config.course.demo_speed, 1.0, uses_raster)
    if run["collisions"] or not run["completed"]:
        dump = _dump_trajectory(run["truths"], Path(config.output_dir) / "demo_failure.csv")
        logger.error("Vuelta de demostración fallida: %d colisiones", run["collisions"])
        raise DemoLapError("El seguidor no completó la vuelta de demostración sin colisiones", dump)

    path = np.array([[s.x, s.y] for s in run["truths"]])
    if config.course.checkpoints:
        checkpoints = np.asarray(config.course.checkpoints, dtype=np.float64)
    else:
        checkpoints = checkpoints_from_path(path, config.course.n_checkpoints)
    course = Course(checkpoints, config.practice.reach_radius).validate_on(layout.world_map)
    lap_time = len(run["actions"]) * config.world.dt

    scaler = ActionScaler(config.world)
    fsm = PracticeFSM(course, config.reward, config.practice, config.seed, config.world.dt)
    buffer = ReplayBuffer(max(1, len(run["actions"])), featurizer.replay_shape(config, encoder_dim),
                          initial=max(1, len(run["actions"])))
    prev = scaler.to_normalized([config.world.velocity_range[0], 0.0]).astype(np.float32)
    poses = run["poses"]
    goal = goal_vector(poses[0], fsm.active_checkpoint)
    for t, action in enumerate(run["actions"]):
        applied = scaler.to_normalized([action.velocity_target, action.steering]).astype(np.float32)
        outcome = fsm.after_step(poses[t + 1], action, Mode.PRACTICING, round((t + 1) * config.world.dt, 9))
        next_goal = goal_vector(poses[t + 1], fsm.active_checkpoint)
        frames = run["stacks"][t] if uses_raster else None
        next_frames = run["stacks"][t + 1] if uses_raster else None
        buffer.add(features=featurizer(frames, poses[t]), proprio=poses[t].proprio(), goal=goal, prev_action=prev,
                   action=applied, reward=outcome.reward, done=float(outcome.done),
                   next_features=featurizer(next_frames, poses[t + 1]), next_proprio=poses[t + 1].proprio(),
                   next_goal=next_goal, next_prev_action=applied)
        prev, goal = applied, next_goal
    logger.info("Vuelta de demostración: %.1f s, %.1f m, %d checkpoints", lap_time, path_length(path), len(course))
    return DemoResult(course, DemoBuffer.from_replay(buffer), lap_time, path, run["collisions"])


def scripted_oracle_lap(layout: TrackLayout, config: RunConfig) -> Tuple[float, int]:
    """Tiempo de referencia: pure-pursuit rápido sobre la línea central verdadera"""
    run = _drive_scripted(layout, config, config.course.oracle_speed, 1.5, False)
    lap_time = len(run["actions"]) * config.world.dt if run["completed"] else float("nan")
    return lap_time, run["collisions"]


def save_course(course: Course, demo_lap_time: float, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump({"checkpoints": course.checkpoints.tolist(), "reach_radius": course.reach_radius,
                        "demo_lap_time": demo_lap_time}, fh, sort_keys=False)
    return path


def load_course(path: Union[str, Path]) -> Tuple[Course, float]:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return Course(np.asarray(data["checkpoints"]), float(data["reach_radius"])), float(data["demo_lap_time"])


# ============================================================================
# RESÚMENES Y GRÁFICOS
# ============================================================================

def laps_frame(records: Sequence[LapRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(exclude={"wall_clock"}) for r in records], columns=LAP_COLUMNS)


def summarize_laps(laps: pd.DataFrame, stuck_time: Optional[float] = None,
                   oracle_lap_time: Optional[float] = None, demo_lap_time: Optional[float] = None) -> Dict[str, Optional[float]]:
    """Estadísticas de vueltas; todas se recalculan desde el CSV de vueltas"""
    ok = laps[~laps["dnf"].astype(bool)] if len(laps) else laps
    times = ok["lap_time"].astype(float)
    coll = ok["collisions"].astype(float)

    def stat(series: pd.Series, fn) -> Optional[float]:
        return float(fn(series)) if len(series) else None

    last5_t, last5_c = times.tail(5), coll.tail(5)
    return {
        "laps": float(len(ok)),
        "dnf": float(len(laps) - len(ok)),
        "t2f": stat(ok["sim_time"].astype(float), lambda s: s.iloc[0]),
        "first_lap": stat(times, lambda s: s.iloc[0]),
        "best_lap": stat(times, np.min),
        "median_lap": stat(times, np.median),
        "median_last5": stat(last5_t, np.median),
        "collisions_best": stat(coll, np.min),
        "collisions_total": stat(coll, np.sum),
        "collisions_mean": stat(coll, np.mean),
        "collisions_median": stat(coll, np.median),
        "collisions_mean_last5": stat(last5_c, np.mean),
        "collisions_median_last5": stat(last5_c, np.median),
        "stuck_events": float(laps["stuck_events"].sum()) if len(laps) else 0.0,
        "stuck_time": stuck_time,
        "oracle_lap": oracle_lap_time,
        "demo_lap": demo_lap_time,
    }


def running_minimum(laps: pd.DataFrame) -> pd.DataFrame:
    ok = laps[~laps["dnf"].astype(bool)]
    return pd.DataFrame({"lap_index": ok["lap_index"].to_numpy(), "sim_time": ok["sim_time"].to_numpy(),
                         "lap_time": ok["lap_time"].to_numpy(), "running_min": ok["lap_time"].cummin().to_numpy()})


def plot_running_minimum(curves: Dict[str, pd.DataFrame], path: Union[str, Path],
                         demo_lap_time: Optional[float] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, df in curves.items():
        if len(df):
            ax.step(df["sim_time"] / 60.0, df["running_min"], where="post", label=label)
    if demo_lap_time is not None:
        ax.axhline(demo_lap_time, color="gray", linestyle="--", label="demo")
    ax.set_xlabel("Tiempo de práctica (min)")
    ax.set_ylabel("Mejor vuelta (s)")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


# ============================================================================
# ENTRENAMIENTO
# ============================================================================

@dataclass
class RunResult:
    output_dir: Path
    laps: pd.DataFrame
    summary: Dict[str, Optional[float]]
    demo_lap_time: float
    param_version: int
    learner_updates: int
    link_counters: Dict[str, int] = field(default_factory=dict)


def _links(config: RunConfig, clock: SimClock):
    """Extremos robot/aprendiz; con TCP el aprendiz corre en un hilo propio"""
    if config.link.transport == "loopback":
        robot_t, learner_t = loopback_pair(clock, config.link.latency_s)
        return (LinkEndpoint(robot_t, clock, config.link.heartbeat_s),
                LinkEndpoint(learner_t, clock, config.link.heartbeat_s))
    learner_t = TcpTransport(config.link.host, config.link.port, server=True)
    robot_t = TcpTransport(config.link.host, config.link.port, server=False)
    return (LinkEndpoint(robot_t, time.monotonic, config.link.heartbeat_s),
            LinkEndpoint(learner_t, time.monotonic, config.link.heartbeat_s))


def _save_snapshot(obs: Observation, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, features=obs.features, proprio=obs.proprio, goal=obs.goal, prev_action=obs.prev_action)


def _previous_rows(path: Path) -> List[dict]:
    """Filas de telemetría de la corrida que se reanuda"""
    if not path.exists() or path.stat().st_size == 0:
        return []
    return pd.read_csv(path).to_dict("records")


def stop_learner(thread: Optional[threading.Thread], stop: threading.Event, timeout: float = 30.0) -> bool:
    """Pide al hilo del aprendiz que termine; True si ya no corre y su estado se puede guardar"""
    stop.set()
    if thread is None:
        return True
    thread.join(timeout=timeout)
    return not thread.is_alive()


def run_training(config: RunConfig, resume: bool = False) -> RunResult:
    """
    Ejecuta la FSM y el aprendiz sobre el enlace hasta agotar el presupuesto de pasos.

    Con loopback la planificación es cooperativa y determinista: un tick del
    robot, avance del reloj simulado y una ronda del aprendiz.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(config, out / "config.yaml")
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(config.seed)
    wall_start = time.perf_counter()

    layout = build_layout(config)
    mode = feature_mode(config)
    frozen = load_frozen_encoder(config) if mode == FROZEN else None
    trainable = build_encoder(config.encoder, config.world.raster_size, config.seed) if mode == RAW else None
    encoder_dim = frozen.output_dim if frozen else (trainable.output_dim if trainable else 0)
    featurizer = Featurizer(mode, frozen)
    logger.info("Corrida %s: modo %s, %d pasos", out.name, mode, config.step_budget)

    demo = record_demo_lap(config, layout, featurizer, encoder_dim)
    save_course(demo.course, demo.lap_time, out / "course.yaml")
    oracle_time, _ = scripted_oracle_lap(layout, config)

    clock = SimClock()
    robot_link, learner_link = _links(config, clock)
    feature_dim = feature_dim_for(mode, encoder_dim, config.world.raster_size, config.encoder.frames)
    learner = RlpdLearner(config.learner, config.network, feature_dim, config.seed, mode, trainable)
    online = ReplayBuffer(config.learner.replay_capacity, featurizer.replay_shape(config, encoder_dim))
    loop = LearnerLoop(learner, learner_link, online, demo.buffer if config.uses_demo else None,
                       feature_dim, out)
    ckpt_dir = out / "checkpoints"
    if resume and (ckpt_dir / "learner.flpw").exists():
        loop.restore(ckpt_dir)
        logger.info("Reanudando desde la actualización %d (v%d)", learner.updates, learner.version)

    policy_encoder = frozen.encoder if frozen else (copy.deepcopy(trainable) if trainable else None)
    policy = RobotPolicy(build_actor(learner.feature_dim, config.network, config.seed), mode, policy_encoder,
                         config.seed)
    world = DrivingWorld(layout.world_map, config.world, layout.start, config.encoder.frames)
    fsm = PracticeFSM(demo.course, config.reward, config.practice, config.seed, config.world.dt)
    estimator = PoseEstimator(config.estimator, config.seed, layout.start.heading)
    robot = RobotLoop(config, world, fsm, policy, estimator, robot_link)

    wall_stamps: List[float] = []
    if resume and (ckpt_dir / ROBOT_STATE).exists():
        extra = robot.load_state(ckpt_dir / ROBOT_STATE)
        wall_start -= extra["wall_clock"]
        wall_stamps = list(extra["wall_stamps"])
        robot.telemetry = _previous_rows(out / "robot_telemetry.csv")
        loop.telemetry = _previous_rows(out / "learner_telemetry.csv")
        clock.now = robot.now
        logger.info("Robot reanudado en el paso %d (t=%.1f s, %d vueltas)", robot.env_step, robot.now,
                    len(robot.laps))
    elif resume:
        logger.warning("Sin %s: el robot arranca desde la salida", ROBOT_STATE)
    if learner.version:
        policy.apply(learner.publish())
    robot.handshake()

    stop = threading.Event()
    learner_thread = None
    if config.link.transport == "tcp":
        learner_thread = threading.Thread(target=run_learner_loop, args=(loop, stop), daemon=True)
        learner_thread.start()

    if robot.env_step >= config.step_budget:
        logger.warning("El presupuesto de %d pasos ya estaba cumplido", config.step_budget)
    try:
        while robot.env_step < config.step_budget:
            robot.step_once()
            clock.advance(config.world.dt)
            if learner_thread is None:
                loop.pump()
            while len(wall_stamps) < len(robot.laps):
                wall_stamps.append(time.perf_counter() - wall_start)
            if robot.env_step % config.snapshot_every == 0 and robot.last_observation is not None:
                _save_snapshot(robot.last_observation, out / "snapshots" / f"obs_{robot.env_step:06d}.npz")
        robot.flush()
        if learner_thread is None:
            clock.advance(config.link.latency_s)
            loop.pump()
    finally:
        learner_stopped = stop_learner(learner_thread, stop)

    if learner_stopped:
        loop.checkpoint()
        robot.save_state(ckpt_dir / ROBOT_STATE, wall_clock=time.perf_counter() - wall_start,
                         wall_stamps=wall_stamps)
    else:
        logger.error("El aprendiz sigue activo: no se escriben checkpoints de esta corrida")
    records = [LapRecord(lap_index=i, wall_clock=wall_stamps[i], **lap) for i, lap in enumerate(robot.laps)]
    laps = laps_frame(records)
    laps.to_csv(out / "laps.csv", index=False)
    pd.DataFrame({"lap_index": range(len(records)), "wall_clock": wall_stamps}).to_csv(out / "laps_timing.csv",
                                                                                     index=False)
    pd.DataFrame(robot.telemetry).to_csv(out / "robot_telemetry.csv", index=False)
    loop.write_telemetry(out / "learner_telemetry.csv")
    curve = running_minimum(laps)
    curve.to_csv(out / "running_min.csv", index=False)
    plot_running_minimum({out.name: curve}, out / "running_min.svg", demo.lap_time)
    summary = summarize_laps(laps, fsm.stuck_time, oracle_time, demo.lap_time)
    with open(out / "summary.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(summary, fh, sort_keys=False)
    link_counters = robot_link.telemetry()
    logger.info("Corrida terminada: %d vueltas, mejor %s s", len(laps), summary["best_lap"])
    return RunResult(out, laps, summary, demo.lap_time, learner.version, learner.updates, link_counters)


# ============================================================================
# EVALUACIÓN
# ============================================================================

def load_policy(checkpoint: Union[str, Path], config: RunConfig) -> RobotPolicy:
    """Actor (y codificador) desde un checkpoint del aprendiz o una publicación"""
    path = Path(checkpoint)
    if not path.exists():
        raise CheckpointError(f"No existe el checkpoint {path}")
    ps = ParamSet.decode(path.read_bytes())
    mode = feature_mode(config)
    if mode == RAW:
        encoder = encoder_from_paramset(ps)
        feature_dim = encoder.output_dim
    elif mode == FROZEN:
        encoder = load_frozen_encoder(config).encoder
        feature_dim = encoder.output_dim
    else:
        encoder = None
        feature_dim = feature_dim_for(mode, 0, config.world.raster_size, config.encoder.frames)
    actor = build_actor(feature_dim, config.network, config.seed)
    try:
        ps.load_module("actor", actor)
    except (ValueError, RuntimeError) as exc:
        raise CheckpointError(f"Checkpoint incompatible: {exc}") from exc
    policy = RobotPolicy(actor, mode, encoder, config.seed)
    policy.version = ps.version
    return policy


def evaluate_policy(checkpoint: Union[str, Path], config: RunConfig, n_laps: int) -> List[LapRecord]:
    """
    Política determinista (acción media) durante n_laps vueltas, sin aprendiz.

    Una vuelta que supera `lap_timeout_s` se marca DNF y el vehículo vuelve a
    la salida.
    """
    out = Path(config.output_dir)
    layout = build_layout(config)
    policy = load_policy(checkpoint, config)
    if (out / "course.yaml").exists():
        course, _ = load_course(out / "course.yaml")
    else:
        course = record_demo_lap(config, layout).course
    records: List[LapRecord] = []
    world = DrivingWorld(layout.world_map, config.world, layout.start, config.encoder.frames)
    estimator = PoseEstimator(config.estimator, config.seed, layout.start.heading)
    fsm = PracticeFSM(course, config.reward, config.practice, config.seed, config.world.dt)
    robot = RobotLoop(config, world, fsm, policy, estimator, link=None, deterministic=True)
    lap_started = 0.0
    seen = 0
    while len(records) < n_laps:
        robot.step_once()
        if len(robot.laps) > seen:
            lap = robot.laps[seen]
            seen += 1
            records.append(LapRecord(lap_index=len(records), **lap))
            lap_started = robot.now
        elif robot.now - lap_started > config.lap_timeout_s:
            logger.warning("Vuelta %d DNF tras %.0f s", len(records), config.lap_timeout_s)
            records.append(LapRecord(lap_index=len(records), lap_time=float("nan"),
                                     collisions=fsm.state.collisions_this_lap,
                                     stuck_events=fsm.state.stuck_events_this_lap,
                                     sim_time=robot.now, env_step=robot.env_step, dnf=True))
            world.reset()
            estimator.reset(layout.start.heading)
            fsm.state = type(fsm.state)()
            fsm.state.practicing_since = robot.now
            robot.pose = estimator.observe(world.state, config.world.dt)
            lap_started = robot.now
    out.mkdir(parents=True, exist_ok=True)
    laps_frame(records).to_csv(out / "eval_laps.csv", index=False)
    return records


# ============================================================================
# INFORMES
# ============================================================================

def load_run_laps(run_dir: Union[str, Path]) -> pd.DataFrame:
    path = Path(run_dir) / "laps.csv"
    if not path.exists():
        raise FileNotFoundError(f"No existe {path}")
    return pd.read_csv(path)


def report(run_dirs: Sequence[Union[str, Path]], output: Union[str, Path]) -> pd.DataFrame:
    """Tabla comparativa de corridas + curvas de mínimo acumulado superpuestas"""
    rows, curves = [], {}
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        laps = load_run_laps(run_dir)
        stuck = None
        telemetry = run_dir / "robot_telemetry.csv"
        if telemetry.exists():
            stuck = float(pd.read_csv(telemetry, usecols=["stuck_time"])["stuck_time"].iloc[-1])
        demo_time = None
        if (run_dir / "course.yaml").exists():
            _, demo_time = load_course(run_dir / "course.yaml")
        summary = summarize_laps(laps, stuck, None, demo_time)
        summary["run"] = run_dir.name
        rows.append(summary)
        curves[run_dir.name] = running_minimum(laps)
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(rows).set_index("run")
    table.to_csv(output / "report.csv")
    plot_running_minimum(curves, output / "report.svg")
    return table


def capture_observation(config: RunConfig, path: Union[str, Path], pose: Optional[CarState] = None) -> Path:
    """Guarda la observación vista desde `pose` (por defecto la salida) hacia el primer checkpoint"""
    layout = build_layout(config)
    mode = feature_mode(config)
    frozen = load_frozen_encoder(config) if mode == FROZEN else None
    course_file = Path(config.output_dir) / "course.yaml"
    if course_file.exists():
        course, _ = load_course(course_file)
    else:
        course = record_demo_lap(config, layout).course
    pose = pose or layout.start
    world = DrivingWorld(layout.world_map, config.world, pose, config.encoder.frames)
    frames = world.observe().frames if mode in (FROZEN, RAW) else None
    scaler = ActionScaler(config.world)
    obs = Observation(Featurizer(mode, frozen)(frames, pose), pose.proprio(),
                      goal_vector(pose, course.checkpoints[0]),
                      scaler.to_normalized([config.world.velocity_range[0], 0.0]).astype(np.float32))
    path = Path(path)
    _save_snapshot(obs, path)
    logger.info("Observación capturada en %s", path)
    return path
