import numpy as np
import pytest

from m2d.checkpoint import MAGIC, load_sidecar, load_tensors, save_sidecar, save_tensors
from m2d.errors import M2dError


def test_round_trip(tmp_path):
    path = tmp_path / "model.ckpt"
    rng = np.random.default_rng(1)
    tensors = {
        "enc.w": rng.standard_normal((4, 5)).astype(np.float32),
        "enc.b": rng.standard_normal(5).astype(np.float32),
        "scalar": np.array(3.5, dtype=np.float32),
    }
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr)


def test_magic_prefix_and_determinism(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    tensors = {"w": np.ones((2, 3), dtype=np.float32)}
    save_tensors(p1, tensors)
    save_tensors(p2, tensors)
    blob = p1.read_bytes()
    assert blob.startswith(MAGIC)
    assert blob == p2.read_bytes()


def test_f64_payloads(tmp_path):
    path = tmp_path / "m.ckpt"
    t = {"x": np.array([1.0, 2.0], dtype=np.float64)}
    save_tensors(path, t, dtype="<f8")
    back = load_tensors(path)
    assert back["x"].dtype == np.dtype("<f8")
    assert np.array_equal(back["x"], t["x"])


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"{}")
    with pytest.raises(M2dError, match="magic"):
        load_tensors(path)


def test_sidecar_round_trip(tmp_path):
    path = tmp_path / "model.ckpt"
    save_tensors(path, {"w": np.zeros(1, dtype=np.float32)})
    cfg = {"latent_tokens": 2, "latent_dim": 64, "preset": "desk"}
    side = save_sidecar(path, cfg)
    assert side.name == "model.json"
    assert load_sidecar(path) == cfg
