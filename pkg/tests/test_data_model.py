import math
import os
import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oceanfm.data_model import (CHL, ModelCheckpoint, Tile, band_set,
                                decode_checkpoint, decode_tile, encode_checkpoint, encode_tile,
                                read_checkpoint, read_tile, tile_nbytes, validate_labeled_patch,
                                write_checkpoint, write_tile)
from oceanfm.errors import FormatError, ValidationError
from oceanfm.ingestion import make_labeled_patch


def _tile(c=2, h=4, w=4, seed=0, nan_frac=0.0, **meta):
    rng = np.random.default_rng(seed)
    planes = rng.uniform(0, 0.2, size=(c, h, w)).astype(np.float32)
    planes[rng.random((c, h, w)) < nan_frac] = np.nan
    meta = {"region": "NADR", "year": 2021, "month": 7, "lat": 45.25, "lon": -20.5, **meta}
    return Tile.from_planes(band_set(c), planes, **meta)


def test_roundtrip_all_valid(tmp_path):
    t = _tile()
    n = write_tile(t, tmp_path / "a.oct")
    back = read_tile(tmp_path / "a.oct")
    assert back == t and n == os.path.getsize(tmp_path / "a.oct")
    assert back.planes.tobytes() == t.planes.tobytes()


def test_roundtrip_preserves_nan(tmp_path):
    t = _tile(3, 9, 7, nan_frac=0.3)
    write_tile(t, tmp_path / "b.oct")
    back = read_tile(tmp_path / "b.oct")
    assert np.array_equal(np.isnan(back.planes), ~t.validity)
    assert back == t


def test_file_size_oracle(tmp_path):
    t = _tile(17, 45, 45)
    n = write_tile(t, tmp_path / "c.oct")
    header = 38 + sum(1 + len(b) for b in t.bands)
    assert n == header + 17 * 45 * 45 * 4 + 17 * math.ceil(45 * 45 / 8)
    assert n == tile_nbytes(17, 45, 45, t.bands)


def test_header_layout():
    buf = encode_tile(_tile(2, 4, 5))
    magic, ver, c, h, w, year, month = struct.unpack_from("<4sHHHHhB", buf)
    assert (magic, ver, c, h, w, year, month) == (b"OCT1", 1, 2, 4, 5, 2021, 7)
    assert buf[15:22] == b"NADR   "


def test_bad_magic(tmp_path):
    buf = bytearray(encode_tile(_tile()))
    buf[:8] = b"XXXX0000"
    with pytest.raises(FormatError) as e:
        decode_tile(bytes(buf))
    assert e.value.offset == 0


def test_truncated():
    buf = encode_tile(_tile())
    for n in (0, 10, len(buf) - 1):
        with pytest.raises(FormatError):
            decode_tile(buf[:n])


def test_valid_pixel_storing_nan_is_rejected():
    t = _tile(2, 5, 5)
    buf = bytearray(encode_tile(t))
    off = 38 + sum(1 + len(b) for b in t.bands)
    i = 1 * 25 + 2 * 5 + 3  # band 1, row 2, col 3
    buf[off + 4 * i: off + 4 * i + 4] = struct.pack("<f", float("nan"))
    with pytest.raises(ValidationError) as e:
        decode_tile(bytes(buf))
    assert isinstance(e.value, FormatError) and e.value.offset == off + 4 * i


def test_invalid_pixel_storing_value_is_rejected():
    t = _tile(1, 4, 4, nan_frac=0.5, seed=3)
    i = int(np.flatnonzero(~t.validity.ravel())[0])
    buf = bytearray(encode_tile(t))
    off = 38 + 1 + len(t.bands[0])
    buf[off + 4 * i: off + 4 * i + 4] = struct.pack("<f", 0.1)
    with pytest.raises(FormatError):
        decode_tile(bytes(buf))


def test_header_length_byte_corruption_detected():
    t = _tile(2, 6, 5)
    buf = encode_tile(t)
    length_bytes = list(range(6, 12)) + [38, 38 + 1 + len(t.bands[0])]
    for pos in length_bytes:
        for v in range(256):
            if v == buf[pos]:
                continue
            bad = bytearray(buf)
            bad[pos] = v
            with pytest.raises(FormatError):
                decode_tile(bytes(bad))


def test_tile_validation():
    t = _tile()
    t.validity[0, 0, 0] = False
    with pytest.raises(ValidationError):
        encode_tile(t)
    with pytest.raises(ValidationError):
        encode_tile(_tile(region="TOOLONGX"))
    dup = _tile()
    dup.bands = ("OL1", "OL1")
    with pytest.raises(ValidationError):
        encode_tile(dup)


def test_atomic_write_leaves_no_temp_on_failure(tmp_path):
    t = _tile()
    t.validity[0, 0, 0] = False  # encode fails before any file is touched
    with pytest.raises(ValidationError):
        write_tile(t, tmp_path / "x.oct")
    assert os.listdir(tmp_path) == []
    write_tile(_tile(), tmp_path / "x.oct")
    assert os.listdir(tmp_path) == ["x.oct"]


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 5), h=st.integers(1, 13), w=st.integers(1, 13),
       frac=st.floats(0, 1), seed=st.integers(0, 2 ** 16))
def test_roundtrip_property(c, h, w, frac, seed):
    t = _tile(c, h, w, seed=seed, nan_frac=frac)
    assert decode_tile(encode_tile(t)) == t


def test_band_set():
    assert band_set(16) == tuple(f"OL{i}" for i in range(1, 13)) + ("OL16", "OL17", "OL18", "OL21")
    assert band_set(17, with_sst=True)[-1] == "SST"
    assert len(set(band_set(17, True))) == 17


# -- labeled patches -----------------------------------------------------------


def _patch(value=8.85):
    return make_labeled_patch(_tile(16, 80, 80), value, CHL, "p0")


def test_well_formed_patch_ok():
    assert validate_labeled_patch(_patch()) == []


def test_chlorophyll_max_log_value():
    p = _patch(8.85)
    assert p.value == pytest.approx(0.947, abs=5e-4)
    assert validate_labeled_patch(p) == []


def test_ten_labeled_pixels_rejected():
    p = _patch()
    p.label[0, 0] = p.value
    assert "label block not 3x3" in validate_labeled_patch(p)


def test_nonuniform_or_infinite_labels_rejected():
    p = _patch()
    p.label[39, 39] += 0.1
    assert "labeled values are not uniform" in validate_labeled_patch(p)
    q = _patch()
    q.label[38:41, 38:41] = np.inf
    assert validate_labeled_patch(q)


def test_label_block_centered():
    p = _patch()
    rows, cols = np.nonzero(p.labeled_mask)
    assert set(rows) == set(cols) == {38, 39, 40}


# -- checkpoints -----------------------------------------------------------------


def _ckpt():
    rng = np.random.default_rng(1)
    params = OrderedDict([("encoder.w", rng.normal(size=(3, 4)).astype(np.float32)),
                          ("encoder.b", rng.normal(size=4).astype(np.float32)),
                          ("mask_token", rng.normal(size=(1, 1, 4)).astype(np.float32))])
    return ModelCheckpoint("tiny", np.array([0.1, 0.2], np.float32),
                           np.array([0.01, 0.02], np.float32), params)


def test_checkpoint_roundtrip(tmp_path):
    ck = _ckpt()
    write_checkpoint(ck, tmp_path / "m.ckp")
    back = read_checkpoint(tmp_path / "m.ckp")
    assert back == ck
    assert list(back.params) == list(ck.params)
    for k in ck.params:
        assert back.params[k].tobytes() == ck.params[k].tobytes()


def test_checkpoint_corruption():
    buf = encode_checkpoint(_ckpt())
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        decode_checkpoint(buf[:-1])
    with pytest.raises(FormatError):
        decode_checkpoint(buf + b"\0")


def test_checkpoint_requires_positive_std():
    ck = _ckpt()
    ck.band_std[0] = 0
    with pytest.raises(ValidationError):
        encode_checkpoint(ck)
