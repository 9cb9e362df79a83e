"""Round-trip and corruption handling for the MJPK single-file format."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mmjepa.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def _sample_arrays():
    rng = np.random.default_rng(3)
    return {
        "weights/w1": rng.normal(size=(4, 7)).astype(np.float32),
        "weights/b1": rng.normal(size=(7,)).astype(np.float64),
        "counts": np.arange(12, dtype=np.int64).reshape(3, 4),
        "flags": np.array([0, 255, 17], dtype=np.uint8),
        "scalarish": np.float32(2.5) * np.ones((), dtype=np.float32),
    }


def test_roundtrip_bit_exact(tmp_path):
    path = tmp_path / "model.mjpk"
    arrays = _sample_arrays()
    meta = {"step": 42, "seed": 7, "note": "unit test"}
    save_checkpoint(path, arrays, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert loaded[name].dtype == np.asarray(arr).dtype
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(loaded[name], arr)
        # bit-exact, not just value-equal
        assert loaded[name].tobytes() == np.asarray(arr).tobytes()


def test_same_input_same_bytes(tmp_path):
    a, b = tmp_path / "a.mjpk", tmp_path / "b.mjpk"
    arrays = _sample_arrays()
    save_checkpoint(a, arrays, {"step": 1})
    save_checkpoint(b, arrays, {"step": 1})
    assert a.read_bytes() == b.read_bytes()


def test_loaded_arrays_are_writable(tmp_path):
    path = tmp_path / "w.mjpk"
    save_checkpoint(path, {"x": np.zeros(3, dtype=np.float32)}, {})
    loaded, _ = load_checkpoint(path)
    loaded["x"][0] = 1.0  # np.frombuffer views are read-only; loads must copy
    assert loaded["x"][0] == 1.0


def test_empty_checkpoint(tmp_path):
    path = tmp_path / "empty.mjpk"
    save_checkpoint(path, {}, {"nothing": True})
    arrays, meta = load_checkpoint(path)
    assert arrays == {}
    assert meta == {"nothing": True}


def test_rejects_unsupported_dtype(tmp_path):
    path = tmp_path / "bad.mjpk"
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        save_checkpoint(path, {"c": np.zeros(2, dtype=np.complex64)}, {})
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        save_checkpoint(path, {"h": np.zeros(2, dtype=np.float16)}, {})


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "not_a_checkpoint"
    path.write_bytes(b"GIF89a" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(path)


def test_rejects_short_file(tmp_path):
    path = tmp_path / "stub"
    path.write_bytes(MAGIC + b"\x01")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_rejects_unknown_version(tmp_path):
    path = tmp_path / "future.mjpk"
    save_checkpoint(path, {"x": np.zeros(1, dtype=np.float32)}, {})
    raw = bytearray(path.read_bytes())
    raw[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_rejects_truncated_header(tmp_path):
    path = tmp_path / "trunc.mjpk"
    save_checkpoint(path, {"x": np.zeros(1, dtype=np.float32)}, {})
    raw = bytearray(path.read_bytes())
    raw[6:10] = (10**6).to_bytes(4, "little")  # header claims to run past EOF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="truncated header"):
        load_checkpoint(path)


def test_rejects_corrupt_header_json(tmp_path):
    path = tmp_path / "garbled.mjpk"
    save_checkpoint(path, {}, {})
    raw = bytearray(path.read_bytes())
    raw[10] = 0xFF  # smash the first header byte
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="corrupt header"):
        load_checkpoint(path)


def test_rejects_truncated_payload(tmp_path):
    path = tmp_path / "cut.mjpk"
    save_checkpoint(path, {"x": np.arange(100, dtype=np.float64)}, {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])  # drop the last element's bytes
    with pytest.raises(CheckpointError, match="truncated payload"):
        load_checkpoint(path)


# sharing tmp_path across examples is fine: each write targets its own file
# and overwriting an existing one still exercises the same roundtrip
@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(
    shapes=st.lists(
        st.lists(st.integers(0, 5), min_size=0, max_size=3), min_size=1, max_size=4
    ),
    dtype=st.sampled_from([np.float32, np.float64, np.int64, np.uint8]),
    seed=st.integers(0, 2**16),
)
def test_roundtrip_property(tmp_path, shapes, dtype, seed):
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, shape in enumerate(shapes):
        if np.issubdtype(dtype, np.floating):
            arr = rng.normal(size=shape).astype(dtype)
        else:
            arr = rng.integers(0, 200, size=shape).astype(dtype)
        arrays[f"a{i}"] = arr
    path = tmp_path / f"prop_{seed}.mjpk"
    save_checkpoint(path, arrays, {"seed": seed})
    loaded, meta = load_checkpoint(path)
    assert meta["seed"] == seed
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr)
