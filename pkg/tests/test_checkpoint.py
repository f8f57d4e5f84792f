import struct

import numpy as np
import pytest

from wdis import synth
from wdis.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from wdis.trainer import TrainConfig, run_training

SMALL = dict(d_x=6, hidden=(8,), d_z=5, split=3, n_fg=4, n_bg=3, critic_hidden=(8,), batch_size=16, snapshot_every=1)


@pytest.fixture(scope="module")
def data():
    spec = synth.FactorSpec(n_fg=4, n_bg=3, d_x=6, seed=0)
    ds = synth.make_dataset(spec, synth.CorrelationSpec.unbiased(4, 3), 200, np.random.default_rng(0))
    return ds.x, ds.labels


@pytest.fixture(scope="module")
def trained(data):
    cfg = TrainConfig(iterations=6, seed=5, **SMALL)
    return cfg, run_training(cfg, *data, iterations=3)


def test_bit_exact_round_trip(tmp_path, trained):
    cfg, state = trained
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, state, cfg, {"note": "x"})
    back, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"note": "x"}
    assert back.iteration == state.iteration and back.history == state.history
    assert back.params.arrays.keys() == state.params.arrays.keys()
    for k, v in state.params.arrays.items():
        assert v.tobytes() == back.params[k].tobytes()
    for g, st in state.optim.items():
        assert back.optim[g].step == st.step
        for k in st.m:
            assert back.optim[g].m[k].tobytes() == st.m[k].tobytes()
            assert back.optim[g].v[k].tobytes() == st.v[k].tobytes()
    assert back.rng.bit_generator.state == state.rng.bit_generator.state
    assert encode_checkpoint(back, cfg2, extra) == path.read_bytes()


def test_flipped_byte_detected(trained):
    cfg, state = trained
    blob = bytearray(encode_checkpoint(state, cfg))
    for pos in (20, len(blob) // 2, len(blob) - 40, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0x10
        with pytest.raises(CheckpointError, match="checksum|version|checkpoint"):
            decode_checkpoint(bytes(bad))
    bad = bytearray(blob)
    bad[len(blob) // 2] ^= 1
    with pytest.raises(CheckpointError, match="checksum mismatch"):
        decode_checkpoint(bytes(bad))


def test_unknown_version_refused(trained):
    cfg, state = trained
    blob = bytearray(encode_checkpoint(state, cfg))
    struct.pack_into("<I", blob, len(MAGIC), 99)
    with pytest.raises(CheckpointError, match="unsupported checkpoint version 99"):
        decode_checkpoint(bytes(blob))


def test_bad_magic_and_truncation(trained):
    cfg, state = trained
    blob = encode_checkpoint(state, cfg)
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(blob[:10])


def test_resume_matches_unbroken(tmp_path, data):
    cfg = TrainConfig(iterations=6, seed=5, **SMALL)
    unbroken = run_training(cfg, *data)
    first = run_training(cfg, *data, iterations=4)
    save_checkpoint(tmp_path / "mid.ckpt", first, cfg)
    resumed, cfg2, _ = load_checkpoint(tmp_path / "mid.ckpt")
    resumed = run_training(cfg2, *data, state=resumed, iterations=1)
    a = unbroken.history[4]
    b = resumed.history[4]
    assert a["iteration"] == b["iteration"] == 5
    assert abs(a["extractor"]["total"] - b["extractor"]["total"]) <= 1e-12
    assert abs(a["critic"]["total"] - b["critic"]["total"]) <= 1e-12
    resumed = run_training(cfg2, *data, state=resumed)
    for k, v in unbroken.params.arrays.items():
        assert np.array_equal(v, resumed.params[k])
