"""Onset-level audio features (MFCC | BFCC | log-mel | chroma) and augmentation.

Pinned analysis parameters: 22050 Hz, 2048-point Hann STFT with hop 512,
88 mel bands (HTK mel), 64 Bark bands (``6*asinh(f/600)``), log floor -80 dB.
Frame features are averaged over the 0.4 s window following the onset.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.fft import dct

from .score_model import TechniqueLabel

SAMPLE_RATE = 22050
N_FFT = 2048
HOP = 512
N_MELS = 88
N_BARK = 64
N_MFCC = 40
N_BFCC = 40
N_CHROMA = 12
WINDOW = 0.4
LOG_FLOOR_DB = -80.0
CHROMA_FMIN = 27.5
FEATURE_DIM = N_MFCC + N_BFCC + N_MELS + N_CHROMA  # 180

MFCC_SLICE = slice(0, 40)
BFCC_SLICE = slice(40, 80)
MEL_SLICE = slice(80, 168)
CHROMA_SLICE = slice(168, 180)

FEATURE_MAGIC = b"TARTFEAT"


class WavError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(data: bytes) -> AudioClip:
    """Decode RIFF PCM (8/16/32-bit int or 32/64-bit float), 1-2 channels."""
    from scipy.io import wavfile

    try:
        rate, x = wavfile.read(io.BytesIO(data))
    except Exception as e:  # scipy raises ValueError/struct.error/EOFError for bad files
        raise WavError(f"cannot decode WAV: {e}") from None
    if x.ndim == 2:
        if x.shape[1] > 2:
            raise WavError(f"{x.shape[1]} channels; only mono/stereo supported")
    if x.dtype == np.int16:
        y = x / 32768.0
    elif x.dtype == np.int32:
        y = x / 2147483648.0
    elif x.dtype == np.uint8:
        y = (x.astype(np.float64) - 128.0) / 128.0
    elif x.dtype in (np.float32, np.float64):
        y = x.astype(np.float64)
    else:
        raise WavError(f"unsupported sample format {x.dtype}")
    if y.ndim == 2:
        y = y.mean(axis=1)
    return AudioClip(y, float(rate))


def write_wav(clip: AudioClip, float32: bool = False) -> bytes:
    from scipy.io import wavfile

    buf = io.BytesIO()
    if float32:
        wavfile.write(buf, int(round(clip.sample_rate)), clip.samples.astype(np.float32))
    else:
        pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype(np.int16)
        wavfile.write(buf, int(round(clip.sample_rate)), pcm)
    return buf.getvalue()


def resample(clip: AudioClip, target_rate: float) -> AudioClip:
    """Linear-interpolation resampling."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return clip
    n_in = len(clip.samples)
    n_out = int(round(n_in * target_rate / clip.sample_rate))
    if n_in == 0 or n_out == 0:
        return AudioClip(np.zeros(n_out), target_rate)
    src_pos = np.arange(n_out) * (clip.sample_rate / target_rate)
    y = np.interp(src_pos, np.arange(n_in), clip.samples)
    return AudioClip(y, target_rate)


# --- filterbanks -------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def hz_to_bark(f):
    return 6.0 * np.arcsinh(np.asarray(f, dtype=float) / 600.0)


def bark_to_hz(b):
    return 600.0 * np.sinh(np.asarray(b, dtype=float) / 6.0)


def _triangular_bank(edges_hz: np.ndarray, n_fft: int, sr: float) -> np.ndarray:
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    n = len(edges_hz) - 2
    bank = np.zeros((n, len(freqs)))
    for i in range(n):
        lo, mid, hi = edges_hz[i:i + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[i] = np.maximum(0.0, np.minimum(up, down))
    return bank


@lru_cache(maxsize=None)
def mel_filterbank(n_bands: int = N_MELS, n_fft: int = N_FFT, sr: float = SAMPLE_RATE) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sr / 2), n_bands + 2))
    return _triangular_bank(edges, n_fft, sr)


@lru_cache(maxsize=None)
def bark_filterbank(n_bands: int = N_BARK, n_fft: int = N_FFT, sr: float = SAMPLE_RATE) -> np.ndarray:
    edges = bark_to_hz(np.linspace(hz_to_bark(0.0), hz_to_bark(sr / 2), n_bands + 2))
    return _triangular_bank(edges, n_fft, sr)


@lru_cache(maxsize=None)
def chroma_map(n_fft: int = N_FFT, sr: float = SAMPLE_RATE) -> np.ndarray:
    """(12, bins) 0/1 matrix folding each bin onto its nearest pitch class (C=0)."""
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    fold = np.zeros((N_CHROMA, len(freqs)))
    valid = freqs >= CHROMA_FMIN
    midi = 69.0 + 12.0 * np.log2(freqs[valid] / 440.0)
    pcs = np.round(midi).astype(int) % 12
    fold[pcs, np.nonzero(valid)[0]] = 1.0
    return fold


def power_frames(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Power spectra of non-centred Hann frames, normalised so a full-scale sine peaks near -6 dB."""
    if len(samples) < n_fft:
        samples = np.pad(samples, (0, n_fft - len(samples)))
    n_frames = 1 + (len(samples) - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    win = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(samples[idx] * win, axis=1) / win.sum()
    return np.abs(spec) ** 2


def _db(power: np.ndarray) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(power, 10.0 ** (LOG_FLOOR_DB / 10.0)))


def frame_features(power: np.ndarray) -> np.ndarray:
    """Per-frame feature matrix (frames, 180) from power spectra."""
    log_mel = _db(power @ mel_filterbank().T)
    log_bark = _db(power @ bark_filterbank().T)
    mfcc = dct(log_mel, type=2, norm="ortho", axis=1)[:, :N_MFCC]
    bfcc = dct(log_bark, type=2, norm="ortho", axis=1)[:, :N_BFCC]

    chroma = power @ chroma_map().T
    total = chroma.sum(axis=1, keepdims=True)
    silent = total[:, 0] < 10.0 ** (LOG_FLOOR_DB / 10.0)
    chroma = np.where(silent[:, None], 1.0 / N_CHROMA, chroma / np.where(silent[:, None], 1.0, total))
    return np.hstack([mfcc, bfcc, log_mel, chroma])


def extract_onset_features(clip: AudioClip, onset: float, window: float = WINDOW) -> np.ndarray:
    """180-dim feature vector for the ``window`` seconds after ``onset``.

    Layout: ``[MFCC 0-39 | BFCC 40-79 | log-mel dB 80-167 | chroma 168-179]``.
    Audio past the clip end is zero-padded. Silent frames give log energies at
    the -80 dB floor and a uniform chroma of 1/12.
    """
    if not 0 <= onset < clip.duration:
        raise ValueError(f"onset {onset:.3f}s outside clip of {clip.duration:.3f}s")
    clip = resample(clip, SAMPLE_RATE)
    start = int(round(onset * SAMPLE_RATE))
    length = int(round(window * SAMPLE_RATE))
    seg = clip.samples[start:start + length]
    if len(seg) < length:
        seg = np.pad(seg, (0, length - len(seg)))
    feats = frame_features(power_frames(seg)).mean(axis=0)
    # renormalise chroma against rounding in the frame mean
    feats[CHROMA_SLICE] /= feats[CHROMA_SLICE].sum()
    return feats


def extract_features_batch(clip: AudioClip, onsets: Sequence[float], window: float = WINDOW) -> np.ndarray:
    clip = resample(clip, SAMPLE_RATE)
    return np.vstack([extract_onset_features(clip, t, window) for t in onsets]) if len(onsets) else \
        np.zeros((0, FEATURE_DIM))


# --- augmentation ------------------------------------------------------------

AUGMENTATION_KINDS = ("gaussian_snr_db", "time_shift_s", "gain_db", "pitch_shift_semitones")


def augment_audio(clip: AudioClip, spec: Mapping[str, float], seed: int = 0) -> AudioClip:
    """Apply exactly one augmentation, e.g. ``{"gain_db": -3}``.

    * ``gaussian_snr_db``: white noise scaled to the requested SNR (no clipping)
    * ``time_shift_s``: circular shift
    * ``gain_db``: gain with clipping to [-1, 1]
    * ``pitch_shift_semitones``: resample then relabel the rate, so duration changes
    """
    if len(spec) != 1:
        raise ValueError(f"exactly one augmentation per call, got {sorted(spec)}")
    (kind, amount), = spec.items()
    x = clip.samples
    if kind == "gaussian_snr_db":
        rng = np.random.default_rng(seed)
        signal_power = float(np.mean(x ** 2)) if len(x) else 0.0
        noise_power = signal_power / 10.0 ** (amount / 10.0)
        return AudioClip(x + rng.standard_normal(len(x)) * np.sqrt(noise_power), clip.sample_rate)
    if kind == "time_shift_s":
        return AudioClip(np.roll(x, int(round(amount * clip.sample_rate))), clip.sample_rate)
    if kind == "gain_db":
        if amount == 0:
            return clip
        return AudioClip(np.clip(x * 10.0 ** (amount / 20.0), -1.0, 1.0), clip.sample_rate)
    if kind == "pitch_shift_semitones":
        if amount == 0:
            return clip
        ratio = 2.0 ** (amount / 12.0)
        shifted = resample(clip, clip.sample_rate / ratio)
        return AudioClip(shifted.samples, clip.sample_rate)
    raise ValueError(f"unknown augmentation {kind!r}; expected one of {AUGMENTATION_KINDS}")


@dataclass(frozen=True)
class ManifestEntry:
    label: TechniqueLabel
    source: int  # index into the input sample list
    augmentation: Optional[dict] = None
    seed: Optional[int] = None

    @property
    def synthetic(self) -> bool:
        return self.augmentation is not None

    def to_dict(self) -> dict:
        return {"label": self.label.value, "source": self.source,
                "augmentation": self.augmentation, "seed": self.seed}


_AUG_RANGES = {
    "gaussian_snr_db": (10.0, 30.0),
    "time_shift_s": (-0.05, 0.05),
    "gain_db": (-6.0, 6.0),
    "pitch_shift_semitones": (-1.0, 1.0),
}


def balance_classes(labels: Sequence[TechniqueLabel], min_per_class: int = 2000, seed: int = 0,
                    classes: Optional[Sequence[TechniqueLabel]] = None) -> list[ManifestEntry]:
    """Top up under-represented classes with augmented copies.

    ``labels[i]`` is the class of source sample ``i`` (audio or features held by
    the caller). Returns a manifest: every original sample, then for each class
    below ``min_per_class`` enough synthetic entries. Synthetic entry ``j`` of a
    class with ``n`` originals reuses original ``j % n`` with augmentation kind
    ``(j // n) % 4``, so every source cycles through all kinds.
    """
    classes = list(TechniqueLabel) if classes is None else list(classes)
    by_class = {c: [] for c in classes}
    for i, lab in enumerate(labels):
        by_class.setdefault(TechniqueLabel(lab), []).append(i)
    for c in classes:
        if not by_class[c]:
            raise ValueError(f"class {c.value!r} has no samples to augment")

    rng = np.random.default_rng(seed)
    manifest = [ManifestEntry(TechniqueLabel(lab), i) for i, lab in enumerate(labels)]
    for c in by_class:
        members = by_class[c]
        for j in range(max(0, min_per_class - len(members))):
            kind = AUGMENTATION_KINDS[(j // len(members)) % len(AUGMENTATION_KINDS)]
            lo, hi = _AUG_RANGES[kind]
            amount = round(float(rng.uniform(lo, hi)), 6)
            manifest.append(ManifestEntry(c, members[j % len(members)], {kind: amount},
                                          int(rng.integers(0, 2 ** 31))))
    return manifest


def materialize(manifest: Sequence[ManifestEntry], clips: Sequence[AudioClip]) -> list[AudioClip]:
    return [clips[e.source] if e.augmentation is None else augment_audio(clips[e.source], e.augmentation, e.seed)
            for e in manifest]


# --- feature matrix files ----------------------------------------------------


def write_feature_matrix(path: str | Path, features: np.ndarray, labels: Sequence[str]) -> None:
    """Write ``path`` (magic + little-endian f32 rows) and ``path.json`` sidecar."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != FEATURE_DIM:
        raise ValueError(f"expected (n, {FEATURE_DIM}) matrix, got {features.shape}")
    if len(labels) != features.shape[0]:
        raise ValueError("one label per row required")
    path = Path(path)
    path.write_bytes(FEATURE_MAGIC + features.astype("<f4").tobytes())
    sidecar = {"n_rows": int(features.shape[0]), "n_cols": FEATURE_DIM, "labels": list(labels)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def read_feature_matrix(path: str | Path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    raw = path.read_bytes()
    meta = json.loads(Path(str(path) + ".json").read_text())
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    n, m = meta["n_rows"], meta["n_cols"]
    if len(raw) - 8 != n * m * 4:
        raise ValueError(f"{path}: expected {n * m * 4} payload bytes, got {len(raw) - 8}")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, m).astype(np.float64), list(meta["labels"])
