import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from infoprune.checkpoint import (
    ALIGN,
    PREAMBLE,
    Checkpoint,
    from_bytes,
    load,
    save,
    to_bytes,
)
from infoprune.errors import BadMagic, CheckpointError, CorruptHeader, TruncatedData, UnsupportedVersion
from infoprune.toymodel import GateSet, ModelConfig, init_model, model_to_checkpoint

names = st.from_regex(r"[a-z][a-z0-9_]{0,6}(\.[a-z0-9_]{1,5}){0,3}", fullmatch=True)
tensors = st.one_of(
    arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=5)),
    arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=5)),
)
metadata = st.dictionaries(
    st.text(max_size=6), st.one_of(st.integers(-1000, 1000), st.text(max_size=8), st.booleans()), max_size=4
)


def sample_checkpoint():
    ckpt = Checkpoint(metadata={"note": "unit", "n": 3})
    ckpt["a.w"] = np.arange(6.0).reshape(2, 3)
    ckpt["b/x"] = np.arange(5, dtype=np.float32)
    ckpt["c"] = np.array(2.5)
    return ckpt


def header_of(buf):
    _, _, n = PREAMBLE.unpack_from(buf)
    return json.loads(buf[PREAMBLE.size : PREAMBLE.size + n]), n


def rebuild(buf, header):
    """Re-emit ``buf`` with a modified header, keeping the data section."""
    old, n = header_of(buf)
    start = -(-(PREAMBLE.size + n) // ALIGN) * ALIGN
    data = buf[start:]
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray(PREAMBLE.pack(b"IPCK", 1, len(raw)) + raw)
    out += bytes(-len(out) % ALIGN)
    return bytes(out) + data


class TestLayout:
    def test_preamble(self):
        buf = to_bytes(sample_checkpoint())
        assert buf[:4] == b"IPCK"
        assert struct.unpack_from("<I", buf, 4)[0] == 1
        header, n = header_of(buf)
        assert set(header) == {"metadata", "tensors"}
        start = -(-(16 + n) // 64) * 64
        for e in header["tensors"]:
            assert e["offset"] % 64 == 0
        last = header["tensors"][-1]
        assert len(buf) == start + last["offset"] + last["nbytes"]

    def test_raw_bytes_little_endian(self):
        buf = to_bytes(sample_checkpoint())
        header, n = header_of(buf)
        start = -(-(16 + n) // 64) * 64
        e = header["tensors"][0]
        raw = buf[start + e["offset"] : start + e["offset"] + e["nbytes"]]
        assert np.frombuffer(raw, "<f8").tolist() == [0, 1, 2, 3, 4, 5]

    def test_empty_table(self):
        buf = to_bytes(Checkpoint())
        assert from_bytes(buf).tensors == {}
        assert len(buf) % 64 == 0

    def test_deterministic(self):
        assert to_bytes(sample_checkpoint()) == to_bytes(sample_checkpoint())


class TestRoundTrip:
    def test_file(self, tmp_path):
        path = tmp_path / "x.ipck"
        save(sample_checkpoint(), path)
        back = load(path)
        assert back.equals(sample_checkpoint())
        assert back["b/x"].dtype == np.float32
        assert back.get("b/x").dtype == np.float64
        np.testing.assert_array_equal(back.get("b/x"), np.arange(5.0))

    def test_toy_model(self):
        model = init_model(ModelConfig())
        ckpt = model_to_checkpoint(model, GateSet.init(ModelConfig()))
        back = from_bytes(to_bytes(ckpt))
        assert back.equals(ckpt)
        for name, arr in ckpt.tensors.items():
            assert np.array_equal(back[name], arr)

    @given(st.dictionaries(names, tensors, max_size=5), metadata)
    def test_property(self, tens, meta):
        ckpt = Checkpoint(metadata=meta)
        for k, v in tens.items():
            ckpt[k] = v
        buf = to_bytes(ckpt)
        back = from_bytes(buf)
        assert to_bytes(back) == buf
        for k, v in tens.items():
            assert back[k].tobytes() == np.ascontiguousarray(v).tobytes()

    def test_no_stray_temp_files(self, tmp_path):
        save(sample_checkpoint(), tmp_path / "a.ipck")
        assert [p.name for p in tmp_path.iterdir()] == ["a.ipck"]


class TestErrors:
    def test_magic(self):
        buf = bytearray(to_bytes(sample_checkpoint()))
        buf[0] = ord("X")
        with pytest.raises(BadMagic) as exc:
            from_bytes(bytes(buf))
        assert exc.value.field == "magic"

    def test_version(self):
        buf = bytearray(to_bytes(sample_checkpoint()))
        buf[4] = 2
        with pytest.raises(UnsupportedVersion):
            from_bytes(bytes(buf))

    def test_offset_past_eof(self):
        buf = to_bytes(sample_checkpoint())
        header, _ = header_of(buf)
        header["tensors"][-1]["offset"] += 64 * 10
        with pytest.raises(TruncatedData) as exc:
            from_bytes(rebuild(buf, header))
        assert exc.value.field.startswith("tensors[2]")

    def test_nbytes_inconsistent(self):
        buf = to_bytes(sample_checkpoint())
        header, _ = header_of(buf)
        header["tensors"][0]["nbytes"] = 40
        with pytest.raises(CorruptHeader) as exc:
            from_bytes(rebuild(buf, header))
        assert exc.value.field == "tensors[0].nbytes"

    def test_misaligned(self):
        buf = to_bytes(sample_checkpoint())
        header, _ = header_of(buf)
        header["tensors"][1]["offset"] += 8
        with pytest.raises(CorruptHeader):
            from_bytes(rebuild(buf, header))

    def test_unknown_dtype(self):
        buf = to_bytes(sample_checkpoint())
        header, _ = header_of(buf)
        header["tensors"][0]["dtype"] = "i4"
        with pytest.raises(CorruptHeader):
            from_bytes(rebuild(buf, header))

    def test_trailing_bytes(self):
        with pytest.raises(CorruptHeader):
            from_bytes(to_bytes(sample_checkpoint()) + b"\0")

    def test_truncated(self):
        buf = to_bytes(sample_checkpoint())
        for cut in (3, 10, 40, len(buf) - 1):
            with pytest.raises(CheckpointError):
                from_bytes(buf[:cut])

    def test_bad_names(self):
        ckpt = Checkpoint()
        ckpt["bad name"] = np.zeros(1)
        with pytest.raises(CorruptHeader):
            to_bytes(ckpt)

    def test_fuzz_typed_errors_only(self):
        base = to_bytes(model_to_checkpoint(init_model(ModelConfig(layers=1)), GateSet.init(ModelConfig(layers=1))))
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            buf = bytearray(base)
            start = int(rng.integers(0, len(buf)))
            span = min(64, len(buf) - start)
            kind = rng.integers(3)
            if kind == 0:
                buf[start : start + span] = rng.integers(0, 256, span, dtype=np.uint8).tobytes()
            elif kind == 1:
                del buf[start:]
            else:
                pos = rng.integers(0, len(buf), 4)
                for p in pos:
                    buf[p] ^= 1 << int(rng.integers(8))
            try:
                from_bytes(bytes(buf))
            except CheckpointError:
                pass
