"""Prosody features from mono PCM audio.

Intensity is the Hann-windowed frame RMS in dB, pitch is a normalized
autocorrelation tracker, pauses are long runs of frames 25 dB below the
loudest frame, and syllables are voiced intensity peaks (De Jong & Wempe
style nuclei counting).  All thresholds live in :class:`ProsodyConfig`.
"""

from __future__ import annotations

import wave
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import find_peaks

from .core import PROSODY_FEATURES, ProsodyTable


class AudioFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ProsodyConfig:
    frame_len: float = 0.032
    hop: float = 0.010
    floor_db: float = -96.0
    silence_db: float = 25.0  # below the loudest frame
    min_pause: float = 0.3
    merge_gap: float = 0.1
    min_dip: float = 2.0
    f0_min: float = 75.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.45
    max_duration: float = 30.0


DEFAULT_CONFIG = ProsodyConfig()


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64).ravel()
        if not 8000 <= int(self.sample_rate) <= 48000:
            raise AudioFormatError(f"sample rate {self.sample_rate} outside 8000-48000 Hz")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def truncated(self, max_duration: float = 30.0) -> "AudioClip":
        n = int(round(max_duration * self.sample_rate))
        if len(self.samples) <= n:
            return self
        return AudioClip(self.samples[:n], self.sample_rate)


@dataclass(frozen=True, eq=False)
class IntensityContour:
    frame_times: np.ndarray
    db_values: np.ndarray
    frame_len: float
    hop: float
    duration: float
    floor_db: float = -96.0


@dataclass(frozen=True, eq=False)
class PitchContour:
    frame_times: np.ndarray
    f0_values: np.ndarray
    strength: np.ndarray


@dataclass(frozen=True)
class ProsodyVector:
    spr: float
    nsyll: int
    pnum: int
    plength: float
    f0: float
    nrg: float
    # nsyll / phonation time; kept alongside but not one of the six features
    artrate: float = 0.0

    def as_row(self) -> List[float]:
        return [float(getattr(self, name)) for name in PROSODY_FEATURES]


def load_wav(path, max_duration: float = 30.0) -> AudioClip:
    """Read a 16-bit PCM mono WAV, scale to [-1, 1) and keep the first 30 s."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate, nframes = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            raw = wf.readframes(nframes)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: not a PCM WAV file ({exc})") from None
    except EOFError:
        raise AudioFormatError(f"{path}: truncated WAV header") from None
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if len(raw) < nframes * width:
        raise AudioFormatError(f"{path}: truncated data ({len(raw) // width} of {nframes} frames)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples, rate).truncated(max_duration)


def save_wav(clip: AudioClip, path) -> None:
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def _frames(clip: AudioClip, cfg: ProsodyConfig) -> Tuple[np.ndarray, np.ndarray]:
    sr = clip.sample_rate
    flen = int(round(cfg.frame_len * sr))
    hop = int(round(cfg.hop * sr))
    if len(clip.samples) < flen:
        raise AudioFormatError(f"clip of {len(clip.samples)} samples is shorter than one {flen}-sample frame")
    frames = sliding_window_view(clip.samples, flen)[::hop]
    times = (np.arange(frames.shape[0]) * hop + flen / 2.0) / sr
    return frames, times


def intensity_contour(clip: AudioClip, cfg: ProsodyConfig = DEFAULT_CONFIG) -> IntensityContour:
    frames, times = _frames(clip, cfg)
    win = np.hanning(frames.shape[1])
    # window-normalized so a full-scale sine reads -3 dB
    power = (frames**2 @ win**2) / np.sum(win**2)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power)
    db = np.maximum(db, cfg.floor_db)
    return IntensityContour(times, db, cfg.frame_len, cfg.hop, clip.duration, cfg.floor_db)


def _nccf(frames: np.ndarray, lag_lo: int, lag_hi: int) -> np.ndarray:
    """Normalized cross-correlation of each frame with itself at lags lag_lo..lag_hi."""
    x = frames - frames.mean(axis=1, keepdims=True)
    n = x.shape[1]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(x, nfft, axis=1)
    acf = np.fft.irfft(spec * np.conj(spec), nfft, axis=1)[:, : lag_hi + 1]
    csum = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x**2, axis=1)], axis=1)
    lags = np.arange(lag_lo, lag_hi + 1)
    head = csum[:, n - lags]  # energy of x[0 : n-lag]
    tail = csum[:, n : n + 1] - csum[:, lags]  # energy of x[lag : n]
    denom = np.sqrt(head * tail)
    out = np.zeros((x.shape[0], len(lags)))
    ok = denom > 1e-12
    out[ok] = acf[:, lag_lo : lag_hi + 1][ok] / denom[ok]
    return out


def pitch_contour(clip: AudioClip, cfg: ProsodyConfig = DEFAULT_CONFIG,
                  intensity: Optional[IntensityContour] = None) -> PitchContour:
    """Per-frame f0 from the normalized autocorrelation, 0 where unvoiced.

    The smallest lag whose local peak reaches 90% of the best peak wins, which
    keeps period multiples from being picked; the lag is then refined by
    parabolic interpolation.
    """
    if len(clip.samples) == 0:
        raise AudioFormatError("empty clip")
    if intensity is None:
        intensity = intensity_contour(clip, cfg)
    frames, times = _frames(clip, cfg)
    sr = clip.sample_rate
    lag_min = max(2, int(np.floor(sr / cfg.f0_max)))
    lag_max = int(np.ceil(sr / cfg.f0_min))
    if lag_max + 1 >= frames.shape[1]:
        raise ValueError("frame too short for the lowest pitch in range")
    r = _nccf(frames, lag_min - 1, lag_max + 1)

    max_db = float(np.max(intensity.db_values))
    loud = (intensity.db_values > max_db - cfg.silence_db) & (intensity.db_values > cfg.floor_db)

    f0 = np.zeros(len(times))
    strength = np.zeros(len(times))
    mid = r[:, 1:-1]
    is_peak = (mid >= r[:, :-2]) & (mid > r[:, 2:])
    for i in np.flatnonzero(loud):
        peaks = np.flatnonzero(is_peak[i])
        if peaks.size == 0:
            continue
        vals = mid[i, peaks]
        best = vals.max()
        if best < cfg.voicing_threshold:
            continue
        j = peaks[np.argmax(vals >= 0.9 * best)] + 1  # index into r
        a, b, c = r[i, j - 1], r[i, j], r[i, j + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        lag = lag_min - 1 + j + shift
        f0[i] = min(max(sr / lag, cfg.f0_min), cfg.f0_max)
        strength[i] = b
    return PitchContour(times, f0, strength)


def detect_pauses(intensity: IntensityContour, cfg: ProsodyConfig = DEFAULT_CONFIG) -> List[Tuple[float, float]]:
    """Silent stretches of at least ``min_pause`` seconds.

    A frame is silent below (loudest frame - 25 dB) or at the floor.  Silent
    runs separated by less than ``merge_gap`` of sound are joined first.
    A run covers the union of its frames' analysis windows, clipped to the
    clip; runs touching the clip edge extend to the edge.
    """
    db = intensity.db_values
    if db.size == 0:
        raise ValueError("empty intensity contour")
    silent = (db < db.max() - cfg.silence_db) | (db <= intensity.floor_db)
    edges = np.diff(np.concatenate([[0], silent.astype(np.int8), [0]]))
    starts = list(np.flatnonzero(edges == 1))
    ends = list(np.flatnonzero(edges == -1) - 1)

    runs: List[List[int]] = []
    for s, e in zip(starts, ends):
        if runs and (s - runs[-1][1] - 1) * intensity.hop < cfg.merge_gap:
            runs[-1][1] = e
        else:
            runs.append([s, e])

    times = intensity.frame_times
    last = len(db) - 1
    pauses = []
    for s, e in runs:
        half = intensity.frame_len / 2.0
        start = 0.0 if s == 0 else max(0.0, float(times[s]) - half)
        end = intensity.duration if e == last else min(intensity.duration, float(times[e]) + half)
        if end - start >= cfg.min_pause - 1e-9:
            pauses.append((start, end))
    return pauses


def count_syllables(intensity: IntensityContour, pitch: PitchContour,
                    cfg: ProsodyConfig = DEFAULT_CONFIG) -> int:
    """Count syllable nuclei: voiced intensity peaks above the median with a dip before them.

    Candidate peaks must stand ``min_dip`` dB above their surroundings, which
    drops ripple on rising and falling slopes.
    """
    db = intensity.db_values
    if len(db) != len(pitch.f0_values):
        raise ValueError("intensity and pitch contours must share framing")
    if db.size < 3:
        return 0
    threshold = float(np.median(db))
    # floor padding lets a nucleus touching either clip edge register as a peak
    padded = np.concatenate([[intensity.floor_db], db, [intensity.floor_db]])
    f0 = np.concatenate([[0.0], pitch.f0_values, [0.0]])
    peaks, _ = find_peaks(padded, prominence=cfg.min_dip)
    count = 0
    prev = 0
    for p in peaks:
        if padded[p] <= threshold or f0[p] <= 0:
            continue
        if padded[p] - padded[prev:p + 1].min() < cfg.min_dip:
            continue
        count += 1
        prev = p
    return count


def extract_prosody(clip: AudioClip, cfg: ProsodyConfig = DEFAULT_CONFIG) -> ProsodyVector:
    clip = clip.truncated(cfg.max_duration)
    inten = intensity_contour(clip, cfg)
    pitch = pitch_contour(clip, cfg, intensity=inten)
    pauses = detect_pauses(inten, cfg)
    nsyll = count_syllables(inten, pitch, cfg)
    duration = clip.duration
    plength = float(sum(e - s for s, e in pauses))
    voiced = pitch.f0_values[pitch.f0_values > 0]
    phonation = duration - plength
    return ProsodyVector(
        spr=nsyll / duration if duration > 0 else 0.0,
        nsyll=nsyll,
        pnum=len(pauses),
        plength=plength,
        f0=float(voiced.mean()) if voiced.size else 0.0,
        nrg=float(np.mean(inten.db_values)),
        artrate=nsyll / phonation if phonation > 1e-9 else 0.0,
    )


def extract_table(paths: Iterable, cfg: ProsodyConfig = DEFAULT_CONFIG) -> ProsodyTable:
    """Raw prosody table for WAV files; sample ids are the file stems."""
    ids, rows = [], []
    for path in paths:
        path = Path(path)
        vec = extract_prosody(load_wav(path, cfg.max_duration), cfg)
        ids.append(path.stem)
        rows.append(vec.as_row())
    return ProsodyTable(ids, np.array(rows, dtype=np.float64).reshape(len(ids), len(PROSODY_FEATURES)))


def config_dict(cfg: ProsodyConfig) -> dict:
    return asdict(cfg)
