"""Objective metrics (MCD, F0 RMSE, duration difference, diversity) and track dumps."""
from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct
from scipy.spatial.distance import pdist

from .dsp import DspConfig, PitchTrack, Waveform, energy_track, extract_f0, mel_spectrogram
from .errors import InputError, PairingError

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)
N_CEPSTRA = 13


def mel_cepstra(log_mel: np.ndarray, n_ceps: int = N_CEPSTRA) -> np.ndarray:
    """DCT-II (orthonormal) of log-mel frames ``[T, n_mels]`` -> ``[T, n_ceps]``."""
    return dct(np.asarray(log_mel, dtype=np.float64), type=2, norm="ortho", axis=1)[:, :n_ceps]


def dtw_path(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost monotone path through ``cost [T1, T2]`` with steps (1,0), (0,1), (1,1).

    Returns ``[K, 2]`` index pairs from (0, 0) to (T1-1, T2-1).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        raise InputError("DTW needs two non-empty sequences")
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        diag_up = np.minimum(prev[:-1], prev[1:])  # candidates from (i-1, j-1) and (i-1, j)
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(diag_up[j - 1], row[j - 1])
    i, j, path = n, m, []
    while i > 0 and j > 0:
        path.append((i - 1, j - 1))
        steps = (acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
        k = int(np.argmin(steps))
        if k == 0:
            i, j = i - 1, j - 1
        elif k == 1:
            i -= 1
        else:
            j -= 1
    return np.array(path[::-1], dtype=np.int64)


def _frame_distances(a, b):
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def mcd(ref_cep, hyp_cep, align: str = "dtw") -> float:
    """Mel-cepstral distortion in dB; coefficient 0 is ignored."""
    ref = np.asarray(ref_cep, dtype=np.float64)
    hyp = np.asarray(hyp_cep, dtype=np.float64)
    if ref.size == 0 or hyp.size == 0 or len(ref) == 0 or len(hyp) == 0:
        raise InputError("MCD of an empty sequence")
    if ref.ndim != 2 or hyp.ndim != 2 or ref.shape[1] != hyp.shape[1] or ref.shape[1] < 2:
        raise InputError("MCD needs [T, C] inputs with matching C >= 2")
    a, b = ref[:, 1:], hyp[:, 1:]
    if align == "trim":
        n = min(len(a), len(b))
        dist = np.sqrt(((a[:n] - b[:n]) ** 2).sum(-1))
    elif align == "dtw":
        d = _frame_distances(a, b)
        path = dtw_path(d)
        dist = d[path[:, 0], path[:, 1]]
    else:
        raise InputError(f"unknown alignment {align!r}")
    return float(MCD_CONST * dist.mean())


def mel_alignment(ref_mel: np.ndarray, hyp_mel: np.ndarray) -> np.ndarray:
    """DTW path between two log-mel sequences ``[T, n_mels]`` (Euclidean frame cost)."""
    return dtw_path(_frame_distances(np.asarray(ref_mel, float), np.asarray(hyp_mel, float)))


def rmse_f0(ref: PitchTrack, hyp: PitchTrack, domain: str = "hz", path=None):
    """RMSE over frames voiced in both tracks; ``None`` when no such frame exists.

    ``path`` pairs frames (e.g. from :func:`mel_alignment`); without one the
    longer track is trimmed.
    """
    if domain not in ("hz", "log"):
        raise InputError(f"unknown F0 domain {domain!r}")
    rf, hf = np.asarray(ref.f0_hz, float), np.asarray(hyp.f0_hz, float)
    rv, hv = np.asarray(ref.voicing) > 0, np.asarray(hyp.voicing) > 0
    if path is None:
        n = min(len(rf), len(hf))
        idx = np.stack([np.arange(n), np.arange(n)], axis=1)
    else:
        idx = np.asarray(path, dtype=np.int64)
    a, b = rf[idx[:, 0]], hf[idx[:, 1]]
    both = rv[idx[:, 0]] & hv[idx[:, 1]] & (a > 0) & (b > 0)
    if not both.any():
        return None
    a, b = a[both], b[both]
    if domain == "log":
        a, b = np.log(a), np.log(b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def ddur(ref: dict, hyp: dict) -> float:
    """Mean absolute duration difference (seconds) over utterance ids present in both."""
    only_ref = sorted(set(ref) - set(hyp))
    only_hyp = sorted(set(hyp) - set(ref))
    if only_ref or only_hyp:
        raise PairingError(f"unpaired utterances: reference-only {only_ref}, converted-only {only_hyp}")
    if not ref:
        raise InputError("no utterance pairs")
    return float(np.mean([abs(ref[k] - hyp[k]) for k in sorted(ref)]))


def msd(samples) -> float:
    """Mean squared Euclidean distance over all unordered pairs of feature vectors."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise InputError("MSD needs at least two samples")
    return float(pdist(x, "sqeuclidean").mean())


def grouped_msd(groups) -> float:
    """Average of :func:`msd` over groups (e.g. the renderings of one source utterance)."""
    values = [msd(g) for g in groups if len(g) >= 2]
    if not values:
        raise InputError("grouped MSD needs a group with at least two samples")
    return float(np.mean(values))


def utterance_features(w: Waveform, dsp: DspConfig = DspConfig()) -> np.ndarray:
    """Per-band log-mel mean and std, voiced log-F0 mean and std, mean RMS (163 values at 80 bands)."""
    mel = mel_spectrogram(w, dsp).frames
    voiced = extract_f0(w, dsp).voiced_f0
    lf0 = np.log(voiced) if voiced.size else np.zeros(1)
    rms = energy_track(w, dsp).rms
    return np.concatenate([mel.mean(0), mel.std(0), [lf0.mean(), lf0.std(), rms.mean()]])


# ---------------------------------------------------------------------------
# track files

TRACK_COLUMNS = ("frame_time", "f0_hz", "voicing", "rms")


def emit_tracks(w: Waveform, out_path, dsp: DspConfig = DspConfig(), mel_path=None):
    """Write ``frame_time f0_hz voicing rms`` rows (tab separated); optionally dump the mel as .npy."""
    pitch = extract_f0(w, dsp)
    rms = energy_track(w, dsp).rms
    times = np.arange(len(pitch.f0_hz)) * dsp.hop_length / dsp.sample_rate
    with open(out_path, "w") as fh:
        fh.write("\t".join(TRACK_COLUMNS) + "\n")
        for t, f, v, r in zip(times, pitch.f0_hz, pitch.voicing, rms):
            fh.write(f"{float(t)!r}\t{float(f)!r}\t{int(v)}\t{float(r)!r}\n")
    if mel_path is not None:
        np.save(mel_path, mel_spectrogram(w, dsp).frames)
    return len(times)


def read_tracks(path) -> dict:
    with open(path) as fh:
        header = fh.readline().split()
        if tuple(header) != TRACK_COLUMNS:
            raise InputError(f"{path}: unexpected track header {header}")
        rows = [line.split("\t") for line in fh if line.strip()]
    cols = list(zip(*rows)) if rows else [()] * 4
    return {
        "frame_time": np.array([float(x) for x in cols[0]]),
        "f0_hz": np.array([float(x) for x in cols[1]]),
        "voicing": np.array([int(x) for x in cols[2]], dtype=np.int8),
        "rms": np.array([float(x) for x in cols[3]]),
    }


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    mcd_db: float | None = None
    rmse_f0: float | None = None
    rmse_f0_domain: str = "hz"
    ddur_seconds: float | None = None
    msd: dict = field(default_factory=dict)
    acc_cls: float | None = None
    n_samples: int = 0

    def to_kv(self) -> str:
        items = [("mcd_db", self.mcd_db), ("rmse_f0", self.rmse_f0),
                 ("rmse_f0_domain", self.rmse_f0_domain), ("ddur_seconds", self.ddur_seconds),
                 ("acc_cls", self.acc_cls), ("n_samples", self.n_samples)]
        items += [(f"msd.{pair}", v) for pair, v in sorted(self.msd.items())]
        return "".join(f"{k}={_fmt(v)}\n" for k, v in items)

    def to_table(self) -> str:
        rows = [("MCD (dB)", self.mcd_db), (f"RMSE F0 ({self.rmse_f0_domain})", self.rmse_f0),
                ("DDUR (s)", self.ddur_seconds), ("ACC cls", self.acc_cls),
                ("samples", self.n_samples)]
        rows += [(f"MSD {pair}", v) for pair, v in sorted(self.msd.items())]
        width = max(len(r[0]) for r in rows)
        return "".join(f"{name:<{width}}  {_fmt(v, 4)}\n" for name, v in rows)


def _fmt(v, digits=None):
    if v is None:
        return "missing"
    if isinstance(v, float):
        return f"{v:.{digits}f}" if digits else repr(v)
    return str(v)


def classify_external(command: str, wav_paths) -> dict:
    """Run ``command <wav>...``; expects one ``<wav> <label>`` line per input on stdout."""
    proc = subprocess.run(shlex.split(command) + [str(p) for p in wav_paths],
                          capture_output=True, text=True, check=True)
    labels = {}
    for line in proc.stdout.splitlines():
        parts = line.split()
        if len(parts) >= 2:
            labels[parts[0]] = parts[1]
    return labels


def accuracy(predicted: dict, expected: dict) -> float | None:
    keys = [k for k in expected if k in predicted]
    if not keys:
        return None
    return float(np.mean([predicted[k] == expected[k] for k in keys]))
