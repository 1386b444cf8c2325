"""Deterministic synthetic corpus: two-talker mixtures with envelope-tracking surrogate EEG.

Every sample is a pure function of (CorpusSpec, index).  Sources are
band-limited noise shaped by a talker-specific formant profile and gated by
a slow (2-8 Hz) random envelope with pauses; each EEG channel is a weighted
copy of the attended source's envelope plus Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import butter, filtfilt, firwin, iirpeak, lfilter, resample_poly, sosfilt

from .audio_io import atomic_write, eeg_read, eeg_write, wav_read, wav_write
from .config import CorpusSpec
from .errors import ContractError, DataError

EEG_RATE = 128
N_TALKERS = 8
SPLITS = ("train", "val", "test")
_PEAK = 0.5


@dataclass
class Sample:
    mixture: np.ndarray
    attended: np.ndarray
    unattended: np.ndarray
    eeg: np.ndarray
    attended_side: int
    seed: int
    index: int = 0


def talker_profile(speaker_id: int):
    """Formant centres (Hz), bandwidths (Hz) and gains for one synthetic talker."""
    rng = np.random.default_rng([7919, speaker_id])
    centres = np.array([rng.uniform(250, 850), rng.uniform(950, 2000), rng.uniform(2200, 3300)])
    bandwidths = rng.uniform(80, 220, 3)
    gains = np.array([1.0, rng.uniform(0.4, 0.8), rng.uniform(0.15, 0.4)])
    return centres, bandwidths, gains


def _modulator(rng, n, sample_rate, n_partials=6):
    t = np.arange(n) / sample_rate
    freqs = rng.uniform(2.0, 8.0, n_partials)
    phases = rng.uniform(0, 2 * np.pi, n_partials)
    amps = rng.uniform(0.5, 1.0, n_partials)
    s = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
    s /= np.sqrt((amps ** 2).sum() / 2)
    return np.maximum(s, 0.0)


def gen_source(seed: int, duration: float, sample_rate: int, speaker_id: int) -> np.ndarray:
    """Unit-RMS speech-like surrogate waveform."""
    if duration < 0.5:
        raise ContractError(f"duration must be >= 0.5 s, got {duration}")
    rng = np.random.default_rng([int(seed), int(speaker_id)])
    n = int(round(duration * sample_rate))
    nyq = sample_rate / 2
    sos = butter(4, [100.0, min(3800.0, 0.95 * nyq)], btype="bandpass", fs=sample_rate, output="sos")
    carrier = sosfilt(sos, rng.standard_normal(n))
    centres, bws, gains = talker_profile(speaker_id)
    voiced = np.zeros(n)
    for f0, bw, g in zip(centres, bws, gains):
        b, a = iirpeak(f0, f0 / bw, fs=sample_rate)
        voiced += g * lfilter(b, a, carrier)
    wav = voiced * _modulator(rng, n, sample_rate)
    rms = np.sqrt(np.mean(wav ** 2))
    return wav / rms


def _lowpass_taps(rate=EEG_RATE, cutoff=8.0, numtaps=33):
    return firwin(numtaps, cutoff, fs=rate, window="hamming")


def extract_envelope(wav, sample_rate: int) -> np.ndarray:
    """|wav|, anti-aliased down to 128 Hz, windowed-sinc low-pass at 8 Hz, unit RMS."""
    wav = np.asarray(wav, dtype=np.float64)
    n_out = int(round(len(wav) / sample_rate * EEG_RATE))
    from math import gcd
    g = gcd(EEG_RATE, int(sample_rate))
    env = resample_poly(np.abs(wav), EEG_RATE // g, int(sample_rate) // g)
    env = np.pad(env, (0, max(0, n_out - len(env))))[:n_out]
    taps = _lowpass_taps()
    if len(env) > 1:
        env = filtfilt(taps, [1.0], env, padtype="even", padlen=min(3 * len(taps), len(env) - 1))
    rms = np.sqrt(np.mean(env ** 2)) if len(env) else 0.0
    return env / rms if rms > 0 else np.zeros_like(env)


def gen_surrogate_eeg(att_env, channels: int, eeg_snr: float, seed: int) -> np.ndarray:
    """(channels, T) matrix: w_c * envelope + noise at ``eeg_snr`` dB per channel."""
    if channels < 1:
        raise ContractError("need at least one EEG channel")
    env = np.asarray(att_env, dtype=np.float64)
    rng = np.random.default_rng([int(seed), 104729])
    w = rng.uniform(0.5, 1.5, channels)
    noise = rng.standard_normal((channels, env.size))
    signal = w[:, None] * env[None, :]
    sig_norm = np.linalg.norm(signal, axis=1, keepdims=True)
    noise_norm = np.linalg.norm(noise, axis=1, keepdims=True)
    sigma = sig_norm / noise_norm * 10 ** (-eeg_snr / 20)
    return signal + sigma * noise


def source_seed(spec: CorpusSpec, index: int, slot: int) -> int:
    return (int(spec.master_seed) * 10_000_000 + int(index)) * 3 + slot


def make_sample(spec: CorpusSpec, index: int) -> Sample:
    if not 0 <= index < spec.n_samples:
        raise ContractError(f"index {index} outside corpus of {spec.n_samples} samples")
    rng = np.random.default_rng([int(spec.master_seed), int(index), 17])
    talkers = rng.choice(N_TALKERS, size=2, replace=False)
    side = int(rng.integers(2))
    snr = rng.uniform(*spec.mix_snr)
    left = gen_source(source_seed(spec, index, 0), spec.duration, spec.sample_rate, int(talkers[0]))
    right = gen_source(source_seed(spec, index, 1), spec.duration, spec.sample_rate, int(talkers[1]))
    att, unatt = (left, right) if side == 0 else (right, left)
    unatt = unatt * 10 ** (-snr / 20)
    gain = _PEAK / np.max(np.abs(att + unatt))
    attended = att * gain
    unattended = unatt * gain
    mixture = attended + unattended
    eeg = gen_surrogate_eeg(extract_envelope(attended, spec.sample_rate), spec.n_channels, spec.eeg_snr,
                            source_seed(spec, index, 2))
    return Sample(mixture, attended, unattended, eeg, side, source_seed(spec, index, 0), index)


def split_indices(spec: CorpusSpec) -> dict:
    n = spec.n_samples
    n_train = int(round(spec.split_fractions[0] * n))
    n_val = int(round(spec.split_fractions[1] * n))
    return {"train": list(range(0, n_train)),
            "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, n))}


def split_of(spec: CorpusSpec, index: int) -> str:
    for name, idx in split_indices(spec).items():
        if index in idx:
            return name
    raise ContractError(f"index {index} is in no split")


# -- corpus on disk ---------------------------------------------------------------

MANIFEST = "manifest.json"


def write_corpus(spec: CorpusSpec, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, indices in split_indices(spec).items():
        for i in indices:
            s = make_sample(spec, i)
            stem = f"{split}/{i:05d}"
            files = {k: f"{stem}_{k}.wav" for k in ("mixture", "attended", "unattended")}
            files["eeg"] = f"{stem}_eeg.nxe"
            for k in ("mixture", "attended", "unattended"):
                wav_write(out / files[k], getattr(s, k), spec.sample_rate)
            eeg_write(out / files["eeg"], s.eeg)
            entries.append({"index": i, "split": split, "attended_side": s.attended_side,
                            "seeds": [source_seed(spec, i, k) for k in range(3)], "files": files})
    manifest = {"corpus_spec": spec.to_dict(), "samples": entries}
    with atomic_write(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out


def load_manifest(corpus_dir) -> dict:
    path = Path(corpus_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_split(corpus_dir, split: str, expected_channels: int | None = None) -> list:
    """Read one split from disk into Samples (audio is 16-bit quantized)."""
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(corpus_dir)
    manifest = load_manifest(root)
    out = []
    for e in manifest["samples"]:
        if e["split"] != split:
            continue
        f = e["files"]
        mix, _ = wav_read(root / f["mixture"])
        att, _ = wav_read(root / f["attended"])
        unatt, _ = wav_read(root / f["unattended"])
        eeg = eeg_read(root / f["eeg"], expected_channels)
        out.append(Sample(mix, att, unatt, eeg, e["attended_side"], e["seeds"][0], e["index"]))
    return out


def generate_split(spec: CorpusSpec, split: str) -> list:
    return [make_sample(spec, i) for i in split_indices(spec)[split]]


def stack(samples) -> tuple:
    """Batch arrays (mixture, attended, unattended, eeg) from equal-length samples."""
    return (np.stack([s.mixture for s in samples]), np.stack([s.attended for s in samples]),
            np.stack([s.unattended for s in samples]), np.stack([s.eeg for s in samples]))
