# tests/test_practice.py
"""
Pruebas de la máquina de estados de práctica: recompensa, checkpoints,
bloqueos, recuperación y contabilidad de atasco
"""
import numpy as np
import pytest
from scipy.spatial.distance import pdist
from scipy.stats import kstest

from app.estimation import PoseEstimator
from app.models import EstimatorParams, PracticeParams, RewardParams, WorldParams
from app.networks import ActionScaler
from app.practice import (Blocked, Course, Mode, PracticeFSM, PracticeState, advance_checkpoint, compute_reward,
                          detect_blocked, recovery_step, smoothed_spread)
from app.tracks import generate_dense_map
from app.world import Action, CarState, DrivingWorld, WorldMap

REWARD = RewardParams()
COURSE = Course(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]), reach_radius=2.0)


def t(k: int) -> float:
    return round(k * 0.1, 9)


# ============================================================================
# RECOMPENSA
# ============================================================================

@pytest.mark.unit
class TestReward:
    """r = velocidad hacia la meta − penalizaciones"""

    def test_speed_made_good(self):
        """TEST 1: Solo el término de velocidad hacia la meta"""
        assert compute_reward((2.0, 0.0), (1.0, 0.0), 0.0, False, REWARD) == pytest.approx(2.0, abs=1e-12)
        assert compute_reward((0.0, 2.0), (1.0, 0.0), 0.0, False, REWARD) == pytest.approx(0.0, abs=1e-12)

    def test_stuck_penalty(self):
        """TEST 2: Atasco resta C_stuck"""
        assert compute_reward((2.0, 0.0), (1.0, 0.0), 0.0, True, REWARD) == pytest.approx(-8.0, abs=1e-12)

    def test_collision_penalty_scales_with_accel(self):
        """TEST 3: Sobre el umbral A se resta C_collide·|a_lat|"""
        assert compute_reward((2.0, 0.0), (1.0, 0.0), 7.0, False, REWARD) == pytest.approx(0.6, abs=1e-12)
        assert compute_reward((2.0, 0.0), (1.0, 0.0), -7.0, False, REWARD) == pytest.approx(0.6, abs=1e-12)
        assert compute_reward((2.0, 0.0), (1.0, 0.0), 5.9, False, REWARD) == pytest.approx(2.0, abs=1e-12)

    def test_goal_must_be_unit(self):
        """TEST 4: Una dirección de meta no unitaria es un error"""
        with pytest.raises(ValueError):
            compute_reward((1.0, 0.0), (2.0, 0.0), 0.0, False, REWARD)


# ============================================================================
# CHECKPOINTS Y VUELTAS
# ============================================================================

@pytest.mark.unit
class TestCheckpoints:
    """Orden estricto y cronometraje de vueltas"""

    def test_full_lap(self):
        """TEST 5: Llegar a 0 arma el cronómetro; volver a 0 cierra la vuelta"""
        ps = PracticeState()
        advance_checkpoint(ps, (0.0, 0.5), COURSE, 0.1)
        assert ps.lap_start_time == 0.1 and ps.active_checkpoint_index == 1
        advance_checkpoint(ps, (10.0, 0.5), COURSE, 10.0)
        advance_checkpoint(ps, (9.5, 10.0), COURSE, 20.0)
        assert ps.active_checkpoint_index == 0
        advance_checkpoint(ps, (0.0, 1.0), COURSE, 30.1)
        assert ps.laps_completed == 1
        assert ps.last_lap.lap_time == pytest.approx(30.0)
        print(f"\n✅ VUELTA: {ps.last_lap.lap_time:.1f} s")

    def test_no_skipping(self):
        """TEST 6: Un checkpoint posterior no cuenta antes del activo"""
        ps = PracticeState(active_checkpoint_index=1)
        advance_checkpoint(ps, (10.0, 10.0), COURSE, 1.0)
        assert ps.active_checkpoint_index == 1

    def test_requires_practicing(self):
        """TEST 7: En recuperación no se avanzan checkpoints"""
        with pytest.raises(ValueError):
            advance_checkpoint(PracticeState(mode=Mode.RECOVERING), (0.0, 0.0), COURSE, 0.0)

    def test_course_validation(self):
        """TEST 8: Cursos con menos de dos puntos o fuera del espacio libre"""
        with pytest.raises(ValueError):
            Course(np.array([[0.0, 0.0]]))
        world_map = WorldMap.uniform((0.0, 0.0, 5.0, 5.0))
        with pytest.raises(ValueError):
            COURSE.validate_on(world_map)


# ============================================================================
# BLOQUEOS Y RECUPERACIÓN
# ============================================================================

@pytest.mark.unit
class TestBlocked:
    """Detección de colisión y atasco"""

    def test_collision_detected(self):
        """TEST 9: |a_lat| > A es colisión"""
        assert detect_blocked(PracticeState(), 7.0, 0.1, REWARD) == Blocked.COLLIDED

    def test_stuck_after_window(self):
        """TEST 10: 3 s sin desplazarse con acelerador es atasco"""
        ps = PracticeState()
        for k in range(0, 31):
            ps.record(t(k), (1.0, 1.0), 1.0, 4.0)
        assert detect_blocked(ps, 0.0, t(30), REWARD) == Blocked.STUCK
        assert detect_blocked(ps, 0.0, t(29), REWARD) == Blocked.OK

    def test_zero_throttle_is_not_stuck(self):
        """TEST 11: Detenido sin acelerador no cuenta como atasco"""
        ps = PracticeState()
        for k in range(0, 31):
            ps.record(t(k), (1.0, 1.0), 0.0, 4.0)
        assert detect_blocked(ps, 0.0, t(30), REWARD) == Blocked.OK

    def test_recovery_step_seeded(self):
        """TEST 12: Dirección fija por semilla, marcha atrás y fin tras la duración"""
        a1, done1 = recovery_step(42, 0.0)
        a2, done2 = recovery_step(42, 0.5)
        _, done3 = recovery_step(42, 1.0)
        assert a1 == a2
        assert a1.velocity_target == -1.0
        assert abs(a1.steering) <= 0.5
        assert not done1 and not done2 and done3


@pytest.mark.integration
class TestPracticeFsm:
    """Alternancia Practicing ↔ Recovering"""

    def test_collision_triggers_recovery(self):
        """TEST 13: Colisión → Recovering durante 1 s → Practicing"""
        fsm = PracticeFSM(COURSE, REWARD, PracticeParams(), seed=0)
        out = fsm.after_step(CarState(5.0, 5.0, 0.0, lateral_accel=30.0), Action(1.0, 0.0), Mode.PRACTICING, 0.1)
        assert out.blocked == Blocked.COLLIDED and out.done and out.record_transition
        assert out.reward < 0
        assert fsm.mode == Mode.RECOVERING and fsm.total_collisions == 1
        action, finished = fsm.recovery_command(0.2)
        assert action is not None and not finished
        rec = fsm.after_step(CarState(5.0, 5.0, 0.0), action, Mode.RECOVERING, 0.2)
        assert not rec.record_transition and rec.reward == 0.0
        action, finished = fsm.recovery_command(1.1)
        assert action is None and finished
        assert fsm.mode == Mode.PRACTICING

    def test_no_pseudo_resets_keeps_practicing(self):
        """TEST 14: Sin pseudo-resets se marca done pero no hay maniobra"""
        fsm = PracticeFSM(COURSE, REWARD, PracticeParams(pseudo_resets=False), seed=0)
        out = fsm.after_step(CarState(5.0, 5.0, 0.0, lateral_accel=30.0), Action(1.0, 0.0), Mode.PRACTICING, 0.1)
        assert out.done
        assert fsm.mode == Mode.PRACTICING
        assert fsm.recovery_command(0.2) == (None, True)

    def test_stuck_time_accumulates(self):
        """TEST 15: Cada tick con la condición de ventana suma dt al tiempo de atasco"""
        fsm = PracticeFSM(COURSE, REWARD, PracticeParams(pseudo_resets=False), seed=0, dt=0.1)
        for k in range(1, 41):
            fsm.after_step(CarState(5.0, 5.0, 0.0), Action(1.0, 0.0), Mode.PRACTICING, t(k))
        assert fsm.stuck_time == pytest.approx(1.0)
        assert fsm.total_stuck_events >= 1

    def test_telemetry_row(self):
        """TEST 16: Fila de telemetría por tick"""
        fsm = PracticeFSM(COURSE, REWARD, PracticeParams(), seed=0)
        out = fsm.after_step(CarState(0.0, 0.5, 0.0, speed=1.0), Action(1.0, 0.0), Mode.PRACTICING, 0.1)
        assert set(out.telemetry) >= {"time", "x", "y", "speed", "reward", "mode", "active_checkpoint", "laps",
                                      "collisions", "stuck_time"}
        assert out.telemetry["active_checkpoint"] == 1


# ============================================================================
# VALIDACIÓN ESTADÍSTICA Y VIVACIDAD
# ============================================================================

@pytest.mark.validation
class TestRecoveryStatistics:
    """Distribución de las maniobras y atasco con posición ruidosa"""

    def test_recovery_steering_is_uniform(self):
        """TEST 17: 1000 recuperaciones: dirección uniforme en ±0.5 (KS, p > 0.01) y marcha atrás fija"""
        params = PracticeParams()
        fsm = PracticeFSM(COURSE, REWARD, params, seed=3)
        steerings, velocities = [], []
        for i in range(1000):
            now = 2.0 * i
            fsm.after_step(CarState(5.0, 5.0, 0.0, lateral_accel=30.0), Action(1.0, 0.0), Mode.PRACTICING, now)
            action, finished = fsm.recovery_command(now + 0.1)
            assert not finished
            steerings.append(action.steering)
            velocities.append(action.velocity_target)
            assert fsm.recovery_command(now + params.recovery_duration) == (None, True)
        result = kstest(steerings, "uniform", args=(-params.recovery_steering, 2 * params.recovery_steering))
        assert result.pvalue > 0.01
        assert set(velocities) == {params.recovery_speed}
        print(f"\n✅ KS: estadístico {result.statistic:.4f}, p = {result.pvalue:.3f}")

    def test_stuck_detected_under_position_noise(self):
        """TEST 18: Quieto con σ = 0.15 m de ruido de posición sigue detectándose el atasco"""
        rng = np.random.default_rng(0)
        noisy = np.array([1.0, 1.0]) + rng.normal(0.0, 0.15, size=(31, 2))
        assert pdist(noisy).max() > PracticeParams().stuck_distance
        ps = PracticeState()
        for k in range(31):
            ps.record(t(k), noisy[k], 1.0, 4.0)
        assert detect_blocked(ps, 0.0, t(30), REWARD) == Blocked.STUCK

        moving = np.column_stack([np.arange(31) * 0.03, np.zeros(31)])
        assert smoothed_spread(moving, 10) == pytest.approx(0.03 * 21)
        assert smoothed_spread(moving, 1) == pytest.approx(0.9)
        print(f"\n✅ ATASCO: dispersión cruda {pdist(noisy).max():.2f} m, suavizada "
              f"{smoothed_spread(noisy, 10):.2f} m")


@pytest.mark.slow
@pytest.mark.validation
class TestLiveness:
    """La FSM nunca queda trabada en un mapa denso con una política al azar"""

    @pytest.mark.parametrize("localization", ["truth", "estimated"])
    def test_dense_map_never_wedges(self, localization):
        """TEST 19: 50 000 pasos: recuperación acotada y nunca quieto en Practicing más que la ventana + un paso"""
        world_params, params = WorldParams(), PracticeParams()
        dt = world_params.dt
        world_map, start = generate_dense_map(7)
        world = DrivingWorld(world_map, world_params, start)
        course = Course(np.array([[3.0, 3.0], [17.0, 3.0], [17.0, 17.0], [3.0, 17.0]]), reach_radius=2.0)
        fsm = PracticeFSM(course, REWARD, params, seed=7, dt=dt)
        estimator = PoseEstimator(EstimatorParams(localization=localization), 7, start.heading)
        scaler = ActionScaler(world_params)
        rng = np.random.default_rng(7)
        policy_action = None
        still_ticks, longest_still, longest_recovery = 0, 0, 0.0
        for step in range(50_000):
            now = round((step + 1) * dt, 9)
            if step % 10 == 0:
                phys = scaler.to_physical(rng.uniform(-1.0, 1.0, 2))
                policy_action = Action.clipped(phys[0], phys[1], world_params)
            action, acted_in = policy_action, Mode.PRACTICING
            if fsm.mode == Mode.RECOVERING:
                command, finished = fsm.recovery_command(now)
                if not finished:
                    action, acted_in = command, Mode.RECOVERING
            before = world.state.position
            world.step(action)
            fsm.after_step(estimator.observe(world.state, dt), action, acted_in, now)

            if fsm.mode == Mode.RECOVERING:
                elapsed = now - fsm.state.recovery_started
                longest_recovery = max(longest_recovery, elapsed)
                assert elapsed <= params.recovery_duration + 1e-9
            still = np.array_equal(before, world.state.position)
            still_ticks = still_ticks + 1 if still and fsm.mode == Mode.PRACTICING else 0
            longest_still = max(longest_still, still_ticks)
            assert still_ticks * dt <= params.stuck_window + dt + 1e-9
        assert fsm.total_collisions + fsm.total_stuck_events > 0
        print(f"\n✅ VIVACIDAD ({localization}): {fsm.total_collisions} colisiones, "
              f"{fsm.total_stuck_events} atascos, quieto máx {longest_still * dt:.1f} s, "
              f"recuperación máx {longest_recovery:.1f} s")
