import struct
import zlib

import numpy as np
import pytest

from fpro.checkpoint import (
    MAGIC,
    CheckpointCorruptError,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    decode,
    encode,
    from_model,
    load_checkpoint,
    load_model,
    save_checkpoint,
)
from fpro.model import ModelConfig, build_model, fpro_forward
from fpro.optim import AdamW
from fpro.tensor import ShapeError


def trained_ish(dtype=np.float64):
    model = build_model(ModelConfig.micro(patch=16), 3, dtype)
    rng = np.random.default_rng(0)
    for _, p in model.named_parameters():
        p.data = (p.data + 0.05 * rng.standard_normal(p.shape)).astype(dtype)
    model.train()
    fpro_forward(model, rng.uniform(0, 1, (2, 16, 16, 3)), "train")  # moves BatchNorm statistics
    return model


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_round_trip_bit_exact(tmp_path, dtype):
    model = trained_ish(dtype)
    x = np.random.default_rng(1).uniform(0, 1, (20, 18, 3))
    before = fpro_forward(model, x).data
    path = tmp_path / "m.fpro"
    save_checkpoint(path, model, iteration=7, meta={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.iteration == 7 and ck.meta["note"] == "x" and ck.config == model.config
    restored = ck.build_model()
    for (n, p), (m, q) in zip(model.named_parameters(), restored.named_parameters()):
        assert n == m and p.data.dtype == q.data.dtype and p.data.tobytes() == q.data.tobytes()
    for (n, b), (m, c) in zip(model.named_buffers(), restored.named_buffers()):
        assert n == m and np.asarray(b).tobytes() == np.asarray(c).tobytes()
    assert fpro_forward(restored, x).data.tobytes() == before.tobytes()


def test_optimizer_and_rng_state_survive():
    model = trained_ish()
    opt = AdamW(model.named_parameters())
    for _, p in model.named_parameters():
        p.grad = np.ones_like(p.data)
    opt.update(1e-3)
    rng = np.random.default_rng(5)
    ck = decode(encode(from_model(model, 1, opt, rng_state=rng.bit_generator.state)))
    assert ck.meta["adam_step"] == "1"
    assert all(np.array_equal(ck.adam_m[n], opt.m[n]) for n in opt.m)
    assert ck.rng_state == rng.bit_generator.state


def good_bytes():
    return encode(from_model(build_model(ModelConfig.micro(patch=16), 0)))


def test_bad_magic():
    buf = bytearray(good_bytes())
    buf[:4] = b"PNG\x00"
    with pytest.raises(CheckpointFormatError):
        decode(bytes(buf))


def test_version_mismatch():
    buf = bytearray(good_bytes())
    buf[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError, match="99"):
        decode(bytes(buf))


@pytest.mark.parametrize("cut", [2, 10, 500, -1])
def test_truncated(cut):
    buf = good_bytes()
    with pytest.raises(CheckpointTruncatedError):
        decode(buf[:cut])


def test_crc_detects_flipped_byte():
    buf = bytearray(good_bytes())
    buf[len(buf) // 2] ^= 0x40
    with pytest.raises(CheckpointCorruptError):
        decode(bytes(buf))


def test_errors_are_distinct():
    kinds = [CheckpointFormatError, CheckpointVersionError, CheckpointTruncatedError, CheckpointShapeError]
    for a in kinds:
        for b in kinds:
            assert (a is b) == issubclass(a, b)


def test_mismatched_config_names_tensor(tmp_path):
    path = tmp_path / "m.fpro"
    save_checkpoint(path, build_model(ModelConfig.micro(patch=16), 0))
    with pytest.raises(CheckpointShapeError, match="shallow.weight") as info:
        load_model(path, ModelConfig.micro(patch=16, channels=16, groups=8))
    assert isinstance(info.value, ShapeError)
    with pytest.raises(CheckpointShapeError, match="gdds"):
        load_model(path, ModelConfig.micro(patch=16, use_hpm=False, use_lpm=False))


def test_layout_header():
    buf = good_bytes()
    assert buf[:4] == MAGIC
    version, n_text = struct.unpack("<II", buf[4:12])
    assert version == 1
    text = buf[12:12 + n_text].decode()
    assert "channels=8" in text and "patch=16" in text
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])
