# tests/conftest.py
"""Configuraciones pequeñas compartidas por la suite"""
import pytest
import torch

from app.models import RunConfig

TINY_NETWORK = {"hidden_dims": [16, 16], "input_dense": 8}
TINY_LEARNER = {"ensemble_size": 3, "target_subset": 2, "batch_size": 8, "utd": 1,
                "publish_every": 5, "checkpoint_every": 10_000, "replay_capacity": 5_000}
TINY_ENCODER = {"layers": 2, "channels": 4, "frames": 3}


def tiny_config(output_dir, **overrides) -> RunConfig:
    """Corrida corta en modo de estado privilegiado con redes diminutas"""
    data = {
        "seed": 0,
        "step_budget": 60,
        "output_dir": str(output_dir),
        "snapshot_every": 20,
        "lap_timeout_s": 2.0,
        "world": {"raster_size": 16},
        "encoder": TINY_ENCODER,
        "network": TINY_NETWORK,
        "learner": TINY_LEARNER,
        "iql": {"batch_size": 8, "steps": 4, "max_goal_offset": 10},
        "prior": {"n_maps": 1, "steps_per_map": 30},
        "ablations": {"state_based": True},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return RunConfig.model_validate(data)


@pytest.fixture
def config(tmp_path) -> RunConfig:
    return tiny_config(tmp_path / "run")


def assert_finite_differences(params, loss_fn, h: float = 1e-3, rel: float = 1e-4, abs_tol: float = 1e-5) -> int:
    """
    Compara el gradiente de modo inverso de `loss_fn()` con diferencias
    centrales en cada coordenada de `params`; devuelve cuántas revisó.
    """
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    checked = 0
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat, analytic = p.data.view(-1), g.reshape(-1)
        for i in range(flat.numel()):
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + h
                plus = float(loss_fn())
                flat[i] = original - h
                minus = float(loss_fn())
                flat[i] = original
            assert float(analytic[i]) == pytest.approx((plus - minus) / (2 * h), rel=rel, abs=abs_tol)
            checked += 1
    return checked
