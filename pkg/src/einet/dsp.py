"""Signal-processing primitives: framing, log-mel spectrogram, YIN pitch, RMS energy.

All numpy functions are pure. Frames are centred on ``t * hop_length`` with
reflection padding, so a signal of ``n`` samples always yields
``n // hop_length + 1`` frames.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from scipy.io import wavfile

from .errors import ConfigError, InputError

_SILENCE_RMS = 1e-6


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    mel_fmin: float = 0.0
    mel_fmax: float | None = None
    eps: float = 1e-5
    # pitch search band and YIN threshold on the normalised difference function
    f0_min: float = 50.0
    f0_max: float = 600.0
    f0_threshold: float = 0.3
    f0_win_length: int = 768

    def validate(self) -> "DspConfig":
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.win_length > self.n_fft:
            raise ConfigError("win_length must not exceed n_fft")
        if self.hop_length < 1:
            raise ConfigError("hop_length must be >= 1")
        if self.f0_min < 20:
            raise ConfigError(f"f0_min must be >= 20 Hz, got {self.f0_min}")
        if self.f0_max > self.sample_rate / 2:
            raise ConfigError("f0_max must not exceed the Nyquist frequency")
        if self.f0_min >= self.f0_max:
            raise ConfigError(f"degenerate pitch band [{self.f0_min}, {self.f0_max}]")
        if math.ceil(self.sample_rate / self.f0_min) >= self.f0_win_length:
            raise ConfigError("f0_win_length too short for the lowest searched period")
        return self


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise InputError(f"empty waveform {self.id!r}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError(f"non-finite samples in waveform {self.id!r}")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [T, n_mels]
    n_mels: int
    hop_length: int
    win_length: int
    sample_rate: int


@dataclass
class PitchTrack:
    f0_hz: np.ndarray  # [T], 0 where unvoiced
    voicing: np.ndarray  # [T] in {0, 1}
    hop_length: int = 256

    @property
    def voiced_f0(self) -> np.ndarray:
        return self.f0_hz[self.voicing > 0]


@dataclass
class EnergyTrack:
    rms: np.ndarray  # [T]
    hop_length: int = 256


def num_frames(n_samples: int, hop_length: int) -> int:
    return n_samples // hop_length + 1


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    freqs = f_sp * m
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), freqs)


def mel_band_edges(cfg: DspConfig) -> np.ndarray:
    """``n_mels + 2`` edge frequencies in Hz; band k peaks at ``edges[k + 1]``."""
    fmax = cfg.mel_fmax if cfg.mel_fmax is not None else cfg.sample_rate / 2
    mels = np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: DspConfig) -> np.ndarray:
    """Triangular, area-normalised filters of shape [n_mels, n_fft // 2 + 1]."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_band_edges(cfg)
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (edges[2:] - edges[:-2])
    return weights * enorm[:, None]


def hann_window(win_length: int) -> np.ndarray:
    n = np.arange(win_length)
    return 0.5 - 0.5 * np.cos(2 * np.pi * n / win_length)


def frame_signal(x: np.ndarray, frame_length: int, hop_length: int) -> np.ndarray:
    """Centred frames with reflection padding, shape [n // hop + 1, frame_length]."""
    pad = frame_length // 2
    mode = "reflect" if x.size > pad else "constant"
    xp = np.pad(x, (pad, frame_length - pad), mode=mode)
    n_frames = num_frames(x.size, hop_length)
    idx = np.arange(frame_length)[None, :] + hop_length * np.arange(n_frames)[:, None]
    return xp[idx]


def clamped_frames(x: np.ndarray, frame_length: int, hop_length: int) -> np.ndarray:
    """Frames centred on ``t * hop`` but shifted to lie inside the signal.

    Used for pitch analysis: reflection padding would break periodicity at
    the edges, so edge frames look slightly inward instead.
    """
    n_frames = num_frames(x.size, hop_length)
    if x.size < frame_length:
        x = np.pad(x, (0, frame_length - x.size))
    centres = hop_length * np.arange(n_frames)
    starts = np.clip(centres - frame_length // 2, 0, x.size - frame_length)
    return x[starts[:, None] + np.arange(frame_length)[None, :]]


def _check_waveform(w: Waveform, cfg: DspConfig, min_len: int):
    if w is None or len(w) == 0:
        raise InputError("empty waveform")
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"waveform {w.id!r} has sample rate {w.sample_rate}, config expects {cfg.sample_rate}")
    if len(w) < min_len:
        raise InputError(f"waveform {w.id!r} shorter than one analysis window ({len(w)} < {min_len})")


def magnitude_spectrogram(x: np.ndarray, cfg: DspConfig) -> np.ndarray:
    frames = frame_signal(x, cfg.n_fft, cfg.hop_length)
    win = np.zeros(cfg.n_fft)
    offset = (cfg.n_fft - cfg.win_length) // 2
    win[offset:offset + cfg.win_length] = hann_window(cfg.win_length)
    return np.abs(np.fft.rfft(frames * win, axis=1))


def mel_spectrogram(w: Waveform, cfg: DspConfig = DspConfig()) -> MelSpectrogram:
    cfg.validate()
    _check_waveform(w, cfg, cfg.win_length)
    mag = magnitude_spectrogram(w.samples, cfg)
    mel = mag @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.eps))
    return MelSpectrogram(frames, cfg.n_mels, cfg.hop_length, cfg.win_length, cfg.sample_rate)


def _yin_difference(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """d(tau) for tau in [0, tau_max], integration window = frame_length - tau_max."""
    n_frames, flen = frames.shape
    width = flen - tau_max
    nfft = 1 << int(math.ceil(math.log2(2 * flen)))
    a = np.fft.rfft(frames[:, :width], nfft, axis=1)
    b = np.fft.rfft(frames, nfft, axis=1)
    corr = np.fft.irfft(np.conj(a) * b, nfft, axis=1)[:, :tau_max + 1]
    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    energy_lag = sq[:, width:width + tau_max + 1] - sq[:, :tau_max + 1]
    energy0 = sq[:, width][:, None]
    return np.maximum(energy0 + energy_lag - 2 * corr, 0.0)


def extract_f0(w: Waveform, cfg: DspConfig = DspConfig()) -> PitchTrack:
    """YIN-style pitch tracker; unvoiced frames get f0 = 0."""
    cfg.validate()
    _check_waveform(w, cfg, 1)
    sr = cfg.sample_rate
    tau_min = max(2, int(math.floor(sr / cfg.f0_max)))
    tau_max = int(math.ceil(sr / cfg.f0_min))
    frames = clamped_frames(w.samples, cfg.f0_win_length, cfg.hop_length)
    n_frames = frames.shape[0]

    d = _yin_difference(frames, tau_max + 1)
    cum = np.cumsum(d[:, 1:], axis=1)
    taus = np.arange(1, d.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd = np.ones_like(d)
        cmnd[:, 1:] = np.where(cum > 0, d[:, 1:] * taus / cum, 1.0)

    band = cmnd[:, tau_min:tau_max + 1]
    below = band < cfg.f0_threshold
    voiced = below.any(axis=1)
    tau = np.argmax(below, axis=1) + tau_min
    rows = np.arange(n_frames)
    # walk down to the bottom of the first dip under the threshold
    for _ in range(tau_max):
        step = (tau < tau_max) & (cmnd[rows, np.minimum(tau + 1, tau_max)] < cmnd[rows, tau])
        if not step.any():
            break
        tau = tau + step

    prev = cmnd[rows, tau - 1]
    cur = cmnd[rows, tau]
    nxt = cmnd[rows, np.minimum(tau + 1, cmnd.shape[1] - 1)]
    denom = prev - 2 * cur + nxt
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.where(np.abs(denom) > 1e-12, 0.5 * (prev - nxt) / denom, 0.0)
    shift = np.clip(shift, -0.5, 0.5)
    period = tau + shift

    frame_rms = np.sqrt(np.mean(frames ** 2, axis=1))
    voiced &= frame_rms > _SILENCE_RMS
    f0 = np.where(voiced, np.clip(sr / period, cfg.f0_min, cfg.f0_max), 0.0)
    return PitchTrack(f0, voiced.astype(np.float64), cfg.hop_length)


def energy_track(w: Waveform, cfg: DspConfig = DspConfig()) -> EnergyTrack:
    cfg.validate()
    _check_waveform(w, cfg, cfg.win_length)
    frames = frame_signal(w.samples, cfg.win_length, cfg.hop_length)
    return EnergyTrack(np.sqrt(np.mean(frames ** 2, axis=1)), cfg.hop_length)


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    """Read a mono 16-bit PCM or float32 WAV file."""
    path = os.fspath(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype} (need int16 or float32)")
    if expected_rate is not None and rate != expected_rate:
        raise ConfigError(f"{path}: sample rate {rate} != expected {expected_rate}")
    stem = os.path.splitext(os.path.basename(path))[0]
    return Waveform(samples, int(rate), stem)


def write_wav(path, w: Waveform):
    """Write float32 WAV; float32 keeps toy-corpus round trips exact."""
    wavfile.write(os.fspath(path), w.sample_rate, w.samples.astype(np.float32))


class TorchLogMel(torch.nn.Module):
    """Differentiable twin of :func:`mel_spectrogram` for batched training losses.

    Input ``[B, n_samples]``, output ``[B, n_mels, n_samples // hop + 1]``.
    """

    def __init__(self, cfg: DspConfig):
        super().__init__()
        self.cfg = cfg
        self.register_buffer("fbank", torch.from_numpy(mel_filterbank(cfg)).float(), persistent=False)
        win = np.zeros(cfg.n_fft)
        offset = (cfg.n_fft - cfg.win_length) // 2
        win[offset:offset + cfg.win_length] = hann_window(cfg.win_length)
        self.register_buffer("window", torch.from_numpy(win).float(), persistent=False)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        pad = cfg.n_fft // 2
        mode = "reflect" if y.shape[-1] > pad else "constant"
        yp = torch.nn.functional.pad(y.unsqueeze(1), (pad, cfg.n_fft - pad), mode=mode).squeeze(1)
        frames = yp.unfold(-1, cfg.n_fft, cfg.hop_length)  # [B, T, n_fft]
        spec = torch.fft.rfft(frames * self.window.to(y.dtype), dim=-1)
        mag = torch.sqrt(spec.real ** 2 + spec.imag ** 2 + 1e-9)
        mel = torch.matmul(mag, self.fbank.to(y.dtype).T)
        return torch.log(torch.clamp(mel, min=cfg.eps)).transpose(1, 2)
