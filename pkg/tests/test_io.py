import struct

import numpy as np
import pytest

from neurotse.audio_io import atomic_write, eeg_read, eeg_write, wav_read, wav_write
from neurotse.errors import ChannelMismatchError, DataError, ParseError


@pytest.mark.parametrize("rate", [8000, 16000, 44100])
def test_wav_round_trip(tmp_path, rate):
    x = np.random.default_rng(rate).uniform(-0.99, 0.99, 1234)
    wav_write(tmp_path / "a.wav", x, rate)
    y, r = wav_read(tmp_path / "a.wav")
    assert r == rate
    assert y.shape == x.shape
    assert np.max(np.abs(y - x)) <= 2.0 ** -15


def test_wav_clips_out_of_range(tmp_path):
    wav_write(tmp_path / "c.wav", np.array([-2.0, 2.0, 0.0]), 8000)
    y, _ = wav_read(tmp_path / "c.wav")
    assert y[0] == -1.0 and y[1] == 32767 / 32768 and y[2] == 0.0


def test_wav_rejects_stereo_input(tmp_path):
    with pytest.raises(DataError):
        wav_write(tmp_path / "s.wav", np.zeros((2, 10)), 8000)


def test_wav_truncation_fuzz(tmp_path):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 200)
    wav_write(tmp_path / "full.wav", x, 8000)
    blob = (tmp_path / "full.wav").read_bytes()
    for cut in list(range(0, 60)) + [100, 200, len(blob) - 1]:
        p = tmp_path / f"cut{cut}.wav"
        p.write_bytes(blob[:cut])
        with pytest.raises(ParseError, match="byte offset"):
            wav_read(p)


def test_wav_header_corruption_fuzz(tmp_path):
    x = np.random.default_rng(1).uniform(-0.5, 0.5, 100)
    wav_write(tmp_path / "full.wav", x, 8000)
    blob = bytearray((tmp_path / "full.wav").read_bytes())
    rng = np.random.default_rng(2)
    for trial in range(200):
        b = bytearray(blob)
        pos = int(rng.integers(0, 44))
        b[pos] = int(rng.integers(0, 256))
        p = tmp_path / "bad.wav"
        p.write_bytes(bytes(b))
        try:
            wav_read(p)
        except ParseError:
            pass


def test_eeg_binary_round_trip_bit_identical(tmp_path):
    m = np.random.default_rng(3).standard_normal((5, 77)).astype(np.float32).astype(np.float64)
    eeg_write(tmp_path / "e.nxe", m)
    back = eeg_read(tmp_path / "e.nxe")
    assert back.dtype == np.float64 and np.array_equal(back, m)
    raw = (tmp_path / "e.nxe").read_bytes()
    assert raw[:4] == b"NXE1" and struct.unpack("<II", raw[4:12]) == (5, 77)
    assert len(raw) == 12 + 4 * 5 * 77


def test_eeg_csv_adapter(tmp_path):
    (tmp_path / "e.csv").write_text("1,2,3\n4,5,6\n")
    m = eeg_read(tmp_path / "e.csv")
    assert m.shape == (2, 3) and m[1, 2] == 6.0
    (tmp_path / "one.csv").write_text("1,2,3\n")
    assert eeg_read(tmp_path / "one.csv").shape == (1, 3)


def test_eeg_channel_mismatch_names_both_counts(tmp_path):
    eeg_write(tmp_path / "e.nxe", np.zeros((32, 10)))
    with pytest.raises(ChannelMismatchError, match=r"32 channels.*expects 64"):
        eeg_read(tmp_path / "e.nxe", expected_channels=64)
    assert eeg_read(tmp_path / "e.nxe", expected_channels=32).shape == (32, 10)


def test_eeg_truncated_and_garbage(tmp_path):
    eeg_write(tmp_path / "e.nxe", np.ones((3, 4)))
    blob = (tmp_path / "e.nxe").read_bytes()
    for cut in (6, 12, 20, len(blob) - 1):
        (tmp_path / "t.nxe").write_bytes(blob[:cut])
        with pytest.raises(ParseError):
            eeg_read(tmp_path / "t.nxe")
    (tmp_path / "g.csv").write_text("a,b\nc,d\n")
    with pytest.raises(ParseError):
        eeg_read(tmp_path / "g.csv")
    with pytest.raises(DataError):
        eeg_write(tmp_path / "x.nxe", np.ones(4))


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    target.write_bytes(b"old")
    with pytest.raises(RuntimeError):
        with atomic_write(target) as fh:
            fh.write(b"partial")
            raise RuntimeError("boom")
    assert target.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]
