import struct
import zlib

import numpy as np
import pytest

from ctnet.checkpoint import (Checkpoint, CheckpointError, CheckpointMismatch, TrainState, build_id,
                              dumps, load_checkpoint, loads, save_checkpoint)
from ctnet.config import ModelConfig
from ctnet.model import init_params, params_to_numpy


def _ckpt(cfg=None, state=True):
    cfg = cfg or ModelConfig.tiny()
    params = {k: v.astype(np.float32).astype(np.float64) for k, v in params_to_numpy(init_params(cfg, 4)).items()}
    st = None
    if state:
        st = TrainState(step=7, epoch=2, seed=4,
                        m={k: np.full_like(v, 0.25) for k, v in params.items()},
                        v={k: np.full_like(v, 0.5) for k, v in params.items()})
    return Checkpoint(cfg, params, st, {"seed": 4, "build": build_id(cfg)})


def test_round_trip(tmp_path):
    ck = _ckpt()
    save_checkpoint(tmp_path / "a.ctnt", ck)
    back = load_checkpoint(tmp_path / "a.ctnt", ModelConfig.tiny())
    assert back.config == ck.config and back.provenance == ck.provenance
    assert set(back.params) == set(ck.params)
    assert all(np.array_equal(back.params[k], ck.params[k]) for k in ck.params)
    assert back.state.step == 7 and back.state.epoch == 2
    assert np.all(back.state.m["sb.conv1.w"] == 0.25)


def test_serialization_is_deterministic():
    assert dumps(_ckpt()) == dumps(_ckpt())


def test_without_state():
    back = loads(dumps(_ckpt(state=False)))
    assert back.state is None


def test_truncated_file_crc_error():
    data = dumps(_ckpt())
    with pytest.raises(CheckpointError, match="CRC"):
        loads(data[:-10])


def test_flipped_byte_crc_error():
    data = bytearray(dumps(_ckpt()))
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        loads(bytes(data))


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"NOPE" + bytes(20))


def test_unknown_version():
    data = bytearray(dumps(_ckpt())[:-4])
    data[4:8] = struct.pack("<I", 99)
    data += struct.pack("<I", zlib.crc32(bytes(data)))
    with pytest.raises(CheckpointError, match="version"):
        loads(bytes(data))


def test_mismatch_lists_missing_and_extra():
    ck = _ckpt(ModelConfig.tiny(subnet3_itm=False), state=False)
    with pytest.raises(CheckpointMismatch) as e:
        loads(dumps(ck), ModelConfig.tiny())
    assert "subnet3.itm1.fc_in.w" in e.value.missing
    assert e.value.extra == []
    assert "missing: subnet3.itm2.tm.pos" in str(e.value)


def test_same_names_different_config_reported():
    ck = _ckpt(ModelConfig.tiny(ln_eps=1e-6), state=False)
    with pytest.raises(CheckpointError, match="ln_eps"):
        loads(dumps(ck), ModelConfig.tiny())


def test_tampered_names_rejected():
    ck = _ckpt(state=False)
    ck.params["bogus.w"] = np.zeros(2)
    with pytest.raises(CheckpointMismatch) as e:
        loads(dumps(ck))
    assert e.value.extra == ["bogus.w"]


def test_atomic_save_leaves_no_tmp(tmp_path):
    save_checkpoint(tmp_path / "a.ctnt", _ckpt())
    assert [p.name for p in tmp_path.iterdir()] == ["a.ctnt"]
