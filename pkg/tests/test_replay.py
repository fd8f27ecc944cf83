# tests/test_replay.py
"""
Pruebas de los buffers de repetición y del muestreo mixto 50/50
"""
import numpy as np
import pytest
from scipy.stats import chisquare

from app.replay import DemoBuffer, ReplayBuffer, sample_mixed_batch


def transition(i: float, feature_shape=(4,)):
    return {
        "features": np.full(feature_shape, 0.5, dtype=np.float32),
        "next_features": np.full(feature_shape, 0.25, dtype=np.float32),
        "proprio": np.full(9, i), "next_proprio": np.full(9, i + 1),
        "goal": np.zeros(3), "next_goal": np.zeros(3),
        "prev_action": np.zeros(2), "next_prev_action": np.zeros(2), "action": np.zeros(2),
        "reward": float(i), "done": 0.0,
    }


def filled(n: int, capacity: int = 1000, start: int = 0) -> ReplayBuffer:
    buf = ReplayBuffer(capacity, (4,), initial=4)
    for i in range(start, start + n):
        buf.add(**transition(i))
    return buf


@pytest.mark.unit
class TestReplayBuffer:
    """Capacidad, FIFO y persistencia"""

    def test_grows_then_overwrites_oldest(self):
        """TEST 1: Al llenarse se sobrescribe lo más viejo"""
        buf = filled(7, capacity=5)
        assert len(buf) == 5
        assert sorted(buf.data["reward"].tolist()) == [2.0, 3.0, 4.0, 5.0, 6.0]

    def test_quantized_raster_storage(self, tmp_path):
        """TEST 2: Rasters crudos en uint8 y recuperados en [0, 1]"""
        buf = ReplayBuffer(10, (3, 4, 4), initial=2)
        flat = transition(0, feature_shape=(48,))
        buf.add(**flat)
        assert buf.data["features"].dtype == np.uint8
        loaded = ReplayBuffer.load(buf.save(tmp_path / "replay.npz"))
        batch = loaded.gather(np.array([0]))
        assert batch.features.shape == (1, 3, 4, 4)
        assert float(batch.features.max()) == pytest.approx(128 / 255)

    def test_save_load(self, tmp_path):
        """TEST 3: Guardar y cargar conserva contenido, tamaño y cursor"""
        buf = filled(12, capacity=10)
        loaded = ReplayBuffer.load(buf.save(tmp_path / "replay.npz"))
        assert (loaded.size, loaded.cursor, loaded.capacity) == (buf.size, buf.cursor, buf.capacity)
        assert np.array_equal(loaded.data["reward"], buf.data["reward"])

    def test_empty_sample_rejected(self):
        """TEST 4: Muestrear un buffer vacío es un error"""
        with pytest.raises(ValueError):
            ReplayBuffer(10, (4,)).sample(2, np.random.default_rng(0))

    def test_demo_is_frozen(self):
        """TEST 5: El buffer de demostración es de solo lectura"""
        demo = DemoBuffer.from_replay(filled(6))
        assert len(demo) == 6
        with pytest.raises(RuntimeError):
            demo.add(**transition(99))


@pytest.mark.unit
class TestMixedBatch:
    """Mitad demostración, mitad en línea"""

    def test_exact_split(self):
        """TEST 6: ⌈n/2⌉ de la demostración y ⌊n/2⌋ en línea"""
        demo = DemoBuffer.from_replay(filled(20, start=1000))
        online = filled(20)
        rng = np.random.default_rng(0)
        even = sample_mixed_batch(online, demo, 8, rng)
        odd = sample_mixed_batch(online, demo, 9, rng)
        assert int(even.from_demo.sum()) == 4 and len(even) == 8
        assert int(odd.from_demo.sum()) == 5 and len(odd) == 9
        assert np.all(even.reward[even.from_demo].numpy() >= 1000)
        assert np.all(even.reward[~even.from_demo].numpy() < 1000)

    def test_no_demo_all_online(self):
        """TEST 7: Sin demostración todo el lote es en línea"""
        batch = sample_mixed_batch(filled(5), None, 6, np.random.default_rng(0))
        assert len(batch) == 6 and not bool(batch.from_demo.any())
        with pytest.raises(ValueError):
            sample_mixed_batch(ReplayBuffer(5, (4,)), None, 2, np.random.default_rng(0))

    @pytest.mark.validation
    def test_uniform_within_buffer(self):
        """TEST 8: El muestreo en línea es uniforme (χ² sobre 10 000 extracciones)"""
        online = filled(10)
        demo = DemoBuffer.from_replay(filled(10, start=1000))
        rng = np.random.default_rng(123)
        counts = np.zeros(10)
        for _ in range(500):
            batch = sample_mixed_batch(online, demo, 40, rng)
            values = batch.reward[~batch.from_demo].numpy().astype(int)
            counts += np.bincount(values, minlength=10)
        stat, p_value = chisquare(counts)
        print(f"\n✅ χ² = {stat:.2f}, p = {p_value:.3f}")
        assert counts.sum() == 10_000
        assert p_value > 0.001
