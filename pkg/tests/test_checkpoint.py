import struct

import numpy as np
import pytest

from emonext import checkpoint as C
from emonext.model import build, parameter_shapes, preset
from emonext.train import TrainConfig, load_checkpoint, new_state, restore, save_checkpoint


@pytest.fixture
def state(rng):
    s = new_state(build("micro", rng=5), TrainConfig(seed=5))
    for arr in s.optim.m + s.optim.v + s.ema.shadow:
        arr[...] = rng.standard_normal(arr.shape)
    s.step, s.epoch, s.optim.t = 12, 3, 12
    return s


def test_roundtrip_is_bitwise(state, tmp_path):
    path = tmp_path / "m.emnx"
    save_checkpoint(path, state, {"val_acc": 0.5})
    back = load_checkpoint(path)
    for (n, a), (_, b) in zip(state.model.named_parameters(), back.model.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes(), n
    for x, y in zip(state.optim.m + state.optim.v + state.ema.shadow, back.optim.m + back.optim.v + back.ema.shadow):
        assert x.tobytes() == y.tobytes()
    assert (back.step, back.epoch, back.seed, back.optim.t) == (12, 3, 5, 12)
    assert back.optim.no_decay == state.optim.no_decay
    assert C.load(path).metadata["val_acc"] == 0.5


def test_float64_roundtrip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 2))
    C.save(tmp_path / "x.emnx", {"a": arr, "s": np.float32(2.0).reshape(())})
    back = C.load(tmp_path / "x.emnx").tensors
    assert back["a"].dtype == np.float64 and back["a"].tobytes() == arr.tobytes()
    assert back["s"].shape == ()


def test_layout(tmp_path):
    C.save(tmp_path / "x.emnx", {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"step": 1})
    raw = (tmp_path / "x.emnx").read_bytes()
    assert raw[:4] == b"EMNX" and struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (1,) and raw[14:15] == b"w"
    assert raw[15:17] == bytes([0, 2]) and struct.unpack("<II", raw[17:25]) == (2, 3)
    assert np.frombuffer(raw[25:49], "<f4").tolist() == list(range(6))
    (n,) = struct.unpack("<I", raw[49:53])
    assert raw[53:] == b'{"step": 1}' and n == len(raw) - 53


def _saved(state, tmp_path):
    path = tmp_path / "m.emnx"
    save_checkpoint(path, state)
    return path


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version 2"),
        (lambda b: b[: len(b) // 2], "truncated"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_corruption_is_detected(state, tmp_path, mutate, match):
    path = _saved(state, tmp_path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(C.FormatError, match=match):
        load_checkpoint(path)


def test_no_partial_state_on_failure(state, tmp_path):
    path = _saved(state, tmp_path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    target = build("micro", rng=1)
    before = [p.data.copy() for p in target.parameters()]
    with pytest.raises(C.FormatError):
        restore(target, C.load(path))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, target.parameters()))


def test_mismatch_names_first_bad_tensor(state, tmp_path):
    # a Tiny-shaped checkpoint prefix (STN and stem); STN conv shapes coincide,
    # the first divergence is the STN fc1 weight
    tensors = {}
    for name, shape in parameter_shapes(preset("tiny"))[:12]:
        for key in (name, f"optim/m/{name}", f"optim/v/{name}", f"ema/{name}"):
            tensors[key] = np.zeros(shape, np.float32)
    C.save(tmp_path / "tiny.emnx", tensors, {"config": preset("tiny").to_dict()})
    target = build("micro")
    before = [p.data.copy() for p in target.parameters()]
    with pytest.raises(C.FormatError, match="'stn.fc1_weight'"):
        restore(target, C.load(tmp_path / "tiny.emnx"))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, target.parameters()))


def test_micro_checkpoint_into_tiny_config(state, tmp_path):
    with pytest.raises(C.FormatError, match="stn.fc1_weight"):
        load_checkpoint(_saved(state, tmp_path), config=preset("tiny"))


def test_atomic_write_leaves_no_temp(state, tmp_path):
    _saved(state, tmp_path)
    assert [p.name for p in tmp_path.iterdir()] == ["m.emnx"]
