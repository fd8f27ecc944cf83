# tests/test_robot.py
"""
Pruebas del lado robot: caracterización, política local, intercambio de
parámetros y cola de salida con el enlace caído
"""
import numpy as np
import pytest

from app.estimation import PoseEstimator
from app.learner import BLIND, FROZEN, RAW, STATE, STATE_FEATURE_DIM, RlpdLearner
from app.link import LinkEndpoint, MsgType, SimClock, decode_hello, decode_transitions, encode_params, loopback_pair
from app.networks import build_actor, build_encoder
from app.practice import Course, PracticeFSM
from app.robot import Observation, RobotLoop, RobotPolicy, feature_dim_for, state_features
from app.tracks import checkpoints_from_path, generate_course_map
from app.world import CarState, DrivingWorld

from .conftest import tiny_config


@pytest.fixture(scope="module")
def layout():
    return generate_course_map(0)


def make_robot(config, layout, link=None, mode=STATE, encoder=None, deterministic=False) -> RobotLoop:
    course = Course(checkpoints_from_path(layout.centerline, 4), config.practice.reach_radius)
    world = DrivingWorld(layout.world_map, config.world, layout.start, n_frames=config.encoder.frames)
    fsm = PracticeFSM(course, config.reward, config.practice, seed=config.seed, dt=config.world.dt)
    estimator = PoseEstimator(config.estimator, seed=config.seed, initial_heading=layout.start.heading)
    dim = {STATE: STATE_FEATURE_DIM, BLIND: 0}.get(mode, encoder.output_dim if encoder else 0)
    policy = RobotPolicy(build_actor(dim, config.network, config.seed), mode, encoder, seed=config.seed)
    return RobotLoop(config, world, fsm, policy, estimator, link, deterministic)


def link_pair():
    clock = SimClock()
    a, b = loopback_pair(clock)
    return LinkEndpoint(a, clock), LinkEndpoint(b, clock)


@pytest.mark.unit
class TestFeaturization:
    """Dimensiones por modo de observación"""

    def test_feature_dims(self):
        """TEST 1: frozen, raw, state y blind"""
        assert feature_dim_for(FROZEN, 512, 64, 3) == 512
        assert feature_dim_for(RAW, 512, 64, 3) == 3 * 64 * 64
        assert feature_dim_for(STATE, 512, 64, 3) == STATE_FEATURE_DIM
        assert feature_dim_for(BLIND, 512, 64, 3) == 0

    def test_state_features(self):
        """TEST 2: Posición escalada y rumbo como coseno y seno"""
        f = state_features(CarState(10.0, -5.0, 0.0))
        assert f.tolist() == pytest.approx([1.0, -0.5, 1.0, 0.0])

    def test_raw_mode_flattens_frames(self, config):
        """TEST 3: En modo raw las características son la pila aplanada"""
        encoder = build_encoder(config.encoder, 16, 0)
        policy = RobotPolicy(build_actor(encoder.output_dim, config.network, 0), RAW, encoder)
        frames = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
        assert policy.featurize(frames, CarState(0.0, 0.0, 0.0)).shape == (3 * 16 * 16,)
        obs = Observation(frames.ravel(), np.zeros(9, np.float32), np.zeros(3, np.float32), np.zeros(2, np.float32))
        action = policy.act(obs, deterministic=True)
        assert action.shape == (2,) and np.all(np.abs(action) <= 1.0)


@pytest.mark.integration
class TestRobotLoop:
    """Ticks de control, envíos y actualizaciones de parámetros"""

    def test_handshake_and_batches(self, config, layout):
        """TEST 4: HELLO con la dimensión y lotes con pasos crecientes"""
        robot_end, learner_end = link_pair()
        robot = make_robot(config, layout, robot_end)
        robot.handshake()
        for _ in range(50):
            row = robot.step_once()
        assert row["param_version"] == 0
        robot.flush()
        msgs = learner_end.poll()
        assert msgs[0].msg_type == MsgType.HELLO and decode_hello(msgs[0].payload) == STATE_FEATURE_DIM
        steps = np.concatenate([decode_transitions(m.payload, STATE_FEATURE_DIM)["step"]
                                for m in msgs if m.msg_type == MsgType.TRANSITION_BATCH])
        assert len(steps) > 0
        assert np.all(np.diff(steps.astype(np.int64)) > 0)
        assert steps.max() < 50
        assert len(robot.telemetry) == 50

    def test_param_update_applied_once(self, config, layout):
        """TEST 5: PARAM_UPDATE más nuevo se aplica; versiones repetidas se ignoran"""
        robot_end, learner_end = link_pair()
        robot = make_robot(config, layout, robot_end)
        learner = RlpdLearner(config.learner, config.network, STATE_FEATURE_DIM, seed=1, feature_mode=STATE)
        first = learner.publish()
        learner_end.send(encode_params(first))
        assert robot.step_once()["param_version"] == 1
        learner_end.send(encode_params(first))
        robot.step_once()
        assert robot.policy.version == 1
        assert not robot.policy.apply(first)
        assert robot.policy.apply(learner.publish())
        assert robot.policy.version == 2

    def test_deterministic_policy(self, config, layout):
        """TEST 6: La acción media es la misma para la misma observación"""
        robot = make_robot(config, layout, deterministic=True)
        obs = robot.observe()
        assert np.array_equal(robot.policy.act(obs, True), robot.policy.act(obs, True))
        assert obs.goal.shape == (3,) and obs.proprio.shape == (9,)

    def test_outgoing_queue_capped_while_down(self, tmp_path, layout):
        """TEST 7: Con el enlace caído se conserva lo más nuevo hasta el tope"""
        config = tiny_config(tmp_path, link={"outgoing_cap": 5})
        robot_end, learner_end = link_pair()
        robot = make_robot(config, layout, robot_end)
        zeros = (np.zeros(4, np.float32), np.zeros(9, np.float32), np.zeros(3, np.float32),
                 np.zeros(2, np.float32), np.zeros(2, np.float32))
        robot_end.transport.sever()
        robot.pending = [zeros + (0.0, 0, i) for i in range(12)]
        robot.flush()
        assert len(robot.outgoing) == 5
        assert robot_end.counters.dropped == 7
        robot_end.transport.restore()
        robot.pending = [zeros + (0.0, 0, 12)]
        robot.flush()
        assert len(robot.outgoing) == 0
        msgs = learner_end.poll()
        steps = decode_transitions(msgs[-1].payload, STATE_FEATURE_DIM)["step"].tolist()
        assert steps == [8, 9, 10, 11, 12]
        assert robot_end.counters.dropped == 8

    def test_hello_waits_for_connection(self, config, layout):
        """TEST 8: HELLO sale cuando el enlace conecta y se repite tras reconectar"""
        robot_end, learner_end = link_pair()
        robot = make_robot(config, layout, robot_end)
        robot_end.transport.sever()
        assert not robot.handshake()
        for _ in range(3):
            robot.step_once()
        robot_end.transport.restore()
        robot.step_once()
        msgs = learner_end.poll()
        assert msgs[0].msg_type == MsgType.HELLO and decode_hello(msgs[0].payload) == STATE_FEATURE_DIM
        robot.step_once()
        assert not [m for m in learner_end.poll() if m.msg_type == MsgType.HELLO]

        robot_end.transport.sever()
        robot.step_once()
        robot_end.transport.restore()
        robot.step_once()
        hellos = [m for m in learner_end.poll() if m.msg_type == MsgType.HELLO]
        assert len(hellos) == 1
        print("\n✅ HELLO: enviado al conectar y repetido tras la reconexión")


# ============================================================================
# ESTADO PARA REANUDAR
# ============================================================================

@pytest.mark.integration
class TestRobotState:
    """Guardar y restaurar el lado robot a mitad de la práctica"""

    def test_restored_robot_continues_identically(self, config, layout, tmp_path):
        """TEST 9: Un robot restaurado sigue exactamente como el original"""
        original = make_robot(config, layout)
        for _ in range(25):
            original.step_once()
        path = original.save_state(tmp_path / "robot.joblib", marker=7)

        restored = make_robot(config, layout)
        extra = restored.load_state(path)
        assert extra == {"marker": 7}
        assert restored.env_step == 25 and restored.now == pytest.approx(2.5)
        assert restored.fsm.total_collisions == original.fsm.total_collisions
        assert restored.fsm.stuck_time == original.fsm.stuck_time

        for _ in range(15):
            a, b = original.step_once(), restored.step_once()
            assert a == b
        assert restored.world.state == original.world.state
        assert restored.pose == original.pose
        print(f"\n✅ ESTADO DEL ROBOT: 15 ticks idénticos tras restaurar en t={2.5} s")

    def test_state_keeps_queued_records(self, config, layout, tmp_path):
        """TEST 10: Los registros aún no enviados viajan con el estado guardado"""
        robot_end, _ = link_pair()
        robot = make_robot(config, layout, robot_end)
        robot_end.transport.sever()
        for _ in range(config.link.flush_every + 3):
            robot.step_once()
        queued = len(robot.outgoing) + len(robot.pending)
        assert queued > 0
        path = robot.save_state(tmp_path / "robot.joblib")
        restored = make_robot(config, layout)
        restored.load_state(path)
        assert len(restored.outgoing) + len(restored.pending) == queued
        assert [int(r["step"]) for r in restored.outgoing] == [int(r["step"]) for r in robot.outgoing]
