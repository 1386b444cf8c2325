"""WAV (16-bit PCM mono) and EEG matrix files, with atomic writes."""

from __future__ import annotations

import os
import struct
import tempfile
import wave
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import ChannelMismatchError, DataError, ParseError

EEG_MAGIC = b"NXE1"


@contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temporary sibling, then rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def wav_write(path, waveform, sample_rate: int) -> None:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"expected a mono waveform, got shape {x.shape}")
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with atomic_write(path) as fh:
        with wave.open(fh, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(int(sample_rate))
            w.writeframes(pcm.tobytes())


def wav_read(path):
    """Return (waveform in [-1, 1), sample_rate)."""
    with open(path, "rb") as fh:
        try:
            with wave.open(fh, "rb") as w:
                if w.getnchannels() != 1 or w.getsampwidth() != 2:
                    raise ParseError(f"{path}: only 16-bit mono PCM is supported "
                                     f"(channels={w.getnchannels()}, width={w.getsampwidth()})", 22)
                n = w.getnframes()
                rate = w.getframerate()
                raw = w.readframes(n)
                if len(raw) != 2 * n:
                    raise ParseError(f"{path}: data chunk truncated, header promises {2 * n} bytes, "
                                     f"found {len(raw)}", fh.tell())
        except ParseError:
            raise
        # the stdlib parser signals bad chunk sizes with RuntimeError/ValueError
        except (wave.Error, EOFError, struct.error, RuntimeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed WAV header: {exc}", fh.tell()) from None
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def eeg_write(path, matrix) -> None:
    """NXE1 binary: magic, u32 channels, u32 frames, f32 row-major payload."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise DataError(f"EEG matrix must be 2-D (channels, frames), got shape {m.shape}")
    with atomic_write(path) as fh:
        fh.write(EEG_MAGIC)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def eeg_read(path, expected_channels: int | None = None) -> np.ndarray:
    """Read an NXE1 file, or a headerless CSV with one channel per row."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head == EEG_MAGIC:
            dims = fh.read(8)
            if len(dims) != 8:
                raise ParseError(f"{path}: truncated EEG header", 4)
            C, T = struct.unpack("<II", dims)
            payload = fh.read()
            if len(payload) != 4 * C * T:
                raise ParseError(f"{path}: EEG payload has {len(payload)} bytes, expected {4 * C * T}",
                                 12 + len(payload))
            m = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(C, T)
        else:
            try:
                m = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
            except ValueError as exc:
                raise ParseError(f"{path}: neither NXE1 binary nor numeric CSV ({exc})", 0) from None
    if expected_channels is not None and m.shape[0] != expected_channels:
        raise ChannelMismatchError(f"{path}: EEG has {m.shape[0]} channels but the model expects {expected_channels}")
    return m
