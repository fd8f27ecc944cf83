"""Filtro de Kalman extendido escalar para el rumbo y canal de pose ruidoso"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import EstimatorParams
from .seeding import SENSORS, substream
from .world import CarState, wrap_angle

logger = logging.getLogger(__name__)

# Por debajo de esta velocidad el rumbo no es observable desde la velocidad absoluta
MIN_OBSERVABLE_SPEED = 0.2


@dataclass(frozen=True)
class EkfState:
    heading_est: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError("La varianza del EKF debe ser positiva")


def ekf_predict(ekf: EkfState, yaw_rate: float, dt: float, process_noise: float) -> EkfState:
    """θ ← θ + ω·dt; P ← P + Q·dt"""
    if dt <= 0 or process_noise < 0:
        raise ValueError("ekf_predict requiere dt > 0 y process_noise >= 0")
    return EkfState(wrap_angle(ekf.heading_est + yaw_rate * dt), ekf.variance + process_noise * dt)


def ekf_update(ekf: EkfState, wheel_speed: float, velocity_meas, meas_noise: float,
               min_speed: float = MIN_OBSERVABLE_SPEED) -> EkfState:
    """
    Corrección con h(θ) = (v·cos θ, v·sin θ).

    Con wheel_speed bajo el umbral de observabilidad el estado no cambia.
    """
    if meas_noise <= 0:
        raise ValueError("meas_noise debe ser positivo")
    if abs(wheel_speed) < min_speed:
        return ekf
    theta = ekf.heading_est
    z = np.asarray(velocity_meas, dtype=np.float64)
    h = np.array([wheel_speed * math.cos(theta), wheel_speed * math.sin(theta)])
    jac = np.array([-wheel_speed * math.sin(theta), wheel_speed * math.cos(theta)])
    innov_cov = ekf.variance * np.outer(jac, jac) + meas_noise * np.eye(2)
    gain = ekf.variance * np.linalg.solve(innov_cov, jac)
    theta_new = theta + float(gain @ (z - h))
    variance = ekf.variance * (1.0 - float(gain @ jac))
    # Piso numérico: (1 - K·H) es analíticamente positivo
    variance = max(variance, 1e-12)
    return EkfState(wrap_angle(theta_new), variance)


class PoseEstimator:
    """
    Pose observada por el robot: posición con ruido gaussiano y rumbo del EKF.

    El giróscopo y la velocidad absoluta también llevan ruido; todo sale del
    subflujo `sensors` de la semilla de corrida.
    """

    def __init__(self, params: EstimatorParams, seed: int, initial_heading: float = 0.0):
        self.params = params
        self.rng = substream(seed, SENSORS)
        self.ekf = EkfState(wrap_angle(initial_heading), 0.1)

    def reset(self, heading: float) -> None:
        self.ekf = EkfState(wrap_angle(heading), 0.1)

    def observe(self, truth: CarState, dt: float) -> CarState:
        p = self.params
        if p.localization == "truth":
            return truth
        gyro = truth.yaw_rate + self.rng.normal(0.0, p.gyro_noise)
        self.ekf = ekf_predict(self.ekf, gyro, dt, p.process_noise)
        vel = truth.velocity() + self.rng.normal(0.0, p.velocity_noise, size=2)
        self.ekf = ekf_update(self.ekf, abs(truth.speed), vel * np.sign(truth.speed or 1.0),
                              p.meas_noise, p.min_speed)
        noisy = truth.position + self.rng.normal(0.0, p.position_noise, size=2)
        return CarState(float(noisy[0]), float(noisy[1]), self.ekf.heading_est, truth.speed,
                        truth.yaw_rate, truth.lateral_accel, truth.long_accel)

    def state_dict(self) -> dict:
        return {"ekf": self.ekf, "rng": self.rng.bit_generator.state}

    def load_state_dict(self, saved: dict) -> None:
        self.ekf = saved["ekf"]
        self.rng.bit_generator.state = saved["rng"]
