import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmtm.checkpoint import Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from cmtm.errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    CorruptFileError,
    TruncatedFileError,
    UnsupportedVersionError,
    UsageError,
)
from cmtm.harness.config import RunConfig, load_config, parse, save_config, serialize


def random_checkpoint(rng, n=4):
    tensors = {}
    for i in range(n):
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rng.integers(1, 4)))
        tensors[f"layer{i}.w"] = rng.normal(size=shape).astype(np.float32)
    return Checkpoint(tensors)


def manual_encoding(tensors):
    """Independent byte-level writer used as the format oracle."""
    out = bytearray(b"CMTM") + struct.pack("<II", 1, len(tensors))
    for name, arr in tensors.items():
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += struct.pack(f"<{arr.size}f", *arr.ravel().tolist())
    return bytes(out)


class TestCheckpointFormat:
    def test_empty_table_is_twelve_bytes(self, tmp_path):
        path = save_checkpoint({}, tmp_path / "e.cmtm")
        assert path.read_bytes() == b"CMTM\x01\x00\x00\x00\x00\x00\x00\x00"

    def test_matches_manual_encoding(self, rng):
        ckpt = random_checkpoint(rng)
        assert to_bytes(ckpt) == manual_encoding(ckpt.tensors)

    def test_round_trip_bitwise(self, rng, tmp_path):
        ckpt = random_checkpoint(rng, 6)
        ckpt.tensors["odd"] = np.array([np.nan, -0.0, np.inf, 1e-45], dtype=np.float32)
        loaded = load_checkpoint(save_checkpoint(ckpt, tmp_path / "a.cmtm"))
        assert list(loaded.tensors) == list(ckpt.tensors)
        for k in ckpt.tensors:
            assert loaded.tensors[k].tobytes() == ckpt.tensors[k].tobytes()

    def test_save_load_save_identical(self, rng, tmp_path):
        first = save_checkpoint(random_checkpoint(rng), tmp_path / "1.cmtm").read_bytes()
        second = save_checkpoint(load_checkpoint(tmp_path / "1.cmtm"), tmp_path / "2.cmtm").read_bytes()
        assert first == second

    def test_unicode_names(self, tmp_path):
        ckpt = Checkpoint({"größe.β": np.ones((2,), np.float32)})
        assert load_checkpoint(save_checkpoint(ckpt, tmp_path / "u.cmtm")) == ckpt

    @pytest.mark.parametrize("cut", [3, 10, 14, 30, -1])
    def test_truncation(self, rng, cut):
        buf = to_bytes(random_checkpoint(rng))
        with pytest.raises(TruncatedFileError):
            from_bytes(buf[:cut])

    def test_bad_magic(self, rng):
        buf = to_bytes(random_checkpoint(rng))
        with pytest.raises(BadMagicError):
            from_bytes(b"CMTX" + buf[4:])

    def test_bad_version(self, rng):
        buf = to_bytes(random_checkpoint(rng))
        with pytest.raises(UnsupportedVersionError):
            from_bytes(buf[:4] + struct.pack("<I", 2) + buf[8:])

    def test_trailing_bytes(self, rng):
        with pytest.raises(CorruptFileError):
            from_bytes(to_bytes(random_checkpoint(rng)) + b"\x00")

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, UnsupportedVersionError, TruncatedFileError, CorruptFileError}
        assert len(kinds) == 4 and all(issubclass(k, CheckpointError) for k in kinds)

    def test_missing_file_is_oserror(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "nope.cmtm")


def mutate(buf, rng):
    buf = bytearray(buf)
    kind = rng.integers(4)
    if kind == 0:
        for _ in range(rng.integers(1, 4)):
            buf[rng.integers(len(buf))] ^= 1 << int(rng.integers(8))
    elif kind == 1:
        buf = buf[: rng.integers(len(buf))]
    elif kind == 2:
        pos = rng.integers(len(buf) + 1)
        buf[pos:pos] = rng.bytes(int(rng.integers(1, 8)))
    else:
        pos = rng.integers(max(1, len(buf) - 4))
        buf[pos:pos + 4] = struct.pack("<I", int(rng.integers(2**32)))
    return bytes(buf)


def test_fuzz_mutated_files(tmp_path):
    rng = np.random.default_rng(1234)
    base = to_bytes(random_checkpoint(rng, 3))
    outcomes = {"loaded": 0, "rejected": 0}
    for i in range(100):
        path = tmp_path / f"m{i}.cmtm"
        path.write_bytes(mutate(base, rng))
        try:
            ckpt = load_checkpoint(path)
        except CheckpointError:
            outcomes["rejected"] += 1
        else:
            # a bit flip inside a payload is still a well-formed file
            assert to_bytes(ckpt) == path.read_bytes()
            outcomes["loaded"] += 1
    assert outcomes["rejected"] > 0


configs = st.builds(
    RunConfig,
    channels=st.sampled_from([8, 16, 64]),
    blocks=st.integers(1, 4),
    heads=st.sampled_from([1, 2, 4]),
    mask_ratio=st.floats(0.0, 0.99),
    apply_to_app=st.booleans(),
    apply_to_mo=st.booleans(),
    lr=st.floats(1e-7, 1.0),
    steps=st.integers(0, 10_000),
    batch_size=st.integers(1, 64),
    beta1=st.floats(0.0, 0.999),
    flow_max_mag=st.floats(0.5, 100.0),
    data_seed=st.integers(0, 2**32),
    seed=st.integers(0, 2**32),
)


class TestConfig:
    @settings(max_examples=100)
    @given(configs)
    def test_round_trip(self, cfg):
        text = serialize(cfg)
        assert parse(text) == cfg
        assert serialize(parse(text)) == text

    def test_file_round_trip(self, tmp_path):
        cfg = RunConfig(lr=1e-5, apply_to_mo=False)
        first = save_config(cfg, tmp_path / "a.cfg").read_bytes()
        assert load_config(tmp_path / "a.cfg") == cfg
        assert save_config(load_config(tmp_path / "a.cfg"), tmp_path / "b.cfg").read_bytes() == first

    def test_comments_and_defaults(self):
        cfg = parse("# header\n\nsteps = 7  # short run\napply_to_mo=false\n")
        assert cfg == RunConfig(steps=7, apply_to_mo=False)

    @pytest.mark.parametrize("text", ["bogus=1", "steps", "steps=1\nsteps=2", "steps=abc", "apply_to_app=maybe"])
    def test_malformed(self, text):
        with pytest.raises(UsageError):
            parse(text)

    @pytest.mark.parametrize("text", ["heads=3", "mask_ratio=1.0", "lr=0", "steps=-1"])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            parse(text)
