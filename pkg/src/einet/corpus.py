"""Corpus records, manifest I/O, ESD-layout loading, toy-corpus synthesis and batching."""
from __future__ import annotations

import glob
import os
from dataclasses import dataclass, replace
from typing import Iterator, Mapping

import numpy as np
import torch

from .dsp import DspConfig, Waveform
from .emotion_eval import NEUTRAL_VAD, VadValues
from .errors import ConfigError, InputError, LoadError

EMOTIONS = ("neutral", "angry", "happy", "sad", "surprise")
EMOTION_INDEX = {e: i for i, e in enumerate(EMOTIONS)}
SPLITS = ("train", "valid", "test")
MANIFEST_VERSION = "einet-manifest-v1"

PAIR_CODES = {"Neu": "neutral", "Ang": "angry", "Hap": "happy", "Sad": "sad", "Sur": "surprise"}
ESD_FOLDERS = {"neutral": "Neutral", "angry": "Angry", "happy": "Happy", "sad": "Sad", "surprise": "Surprise"}
# per-emotion split sizes used for every conversion pair
ESD_SPLIT_SIZES = {"train": 300, "valid": 30, "test": 20}


@dataclass(frozen=True)
class Utterance:
    id: str
    audio_path: str
    phonemes: tuple
    emotion: str
    speaker: str
    split: str = "train"
    vad: VadValues | None = None
    durations: tuple | None = None

    def __post_init__(self):
        if not self.phonemes:
            raise InputError(f"utterance {self.id!r} has no phonemes")
        if self.emotion not in EMOTION_INDEX:
            raise InputError(f"unknown emotion {self.emotion!r}")
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")
        if self.durations is not None and len(self.durations) != len(self.phonemes):
            raise InputError(f"utterance {self.id!r}: durations and phonemes differ in length")

    @property
    def emotion_id(self) -> int:
        return EMOTION_INDEX[self.emotion]


@dataclass
class Manifest:
    entries: list
    phoneme_inventory: list
    version: str = MANIFEST_VERSION
    base_dir: str = "."

    def __post_init__(self):
        seen = set()
        n_sym = len(self.phoneme_inventory)
        for u in self.entries:
            if u.id in seen:
                raise LoadError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            if max(u.phonemes) >= n_sym or min(u.phonemes) < 0:
                raise LoadError(f"utterance {u.id!r} has phoneme ids outside inventory of {n_sym}")

    def __len__(self):
        return len(self.entries)

    def split(self, name) -> list:
        return [u for u in self.entries if u.split == name]

    @property
    def speakers(self) -> list:
        return sorted({u.speaker for u in self.entries})

    def by_id(self, uid) -> Utterance:
        for u in self.entries:
            if u.id == uid:
                return u
        raise KeyError(uid)

    def audio_path(self, u: Utterance) -> str:
        if os.path.isabs(u.audio_path):
            return u.audio_path
        return os.path.join(self.base_dir, u.audio_path)


def _fmt_floats(xs) -> str:
    return " ".join(repr(float(x)) for x in xs)


def format_utterance(u: Utterance) -> str:
    vad = _fmt_floats(u.vad.as_array()) if u.vad is not None else ""
    durs = " ".join(str(int(d)) for d in u.durations) if u.durations is not None else ""
    fields = [u.id, u.audio_path, " ".join(str(p) for p in u.phonemes),
              u.emotion, u.speaker, u.split, vad, durs]
    for f in fields:
        if "|" in f or "\n" in f:
            raise InputError(f"field {f!r} contains a reserved character")
    return "|".join(fields)


def write_manifest(manifest: Manifest, path):
    with open(path, "w") as fh:
        fh.write(f"#version={manifest.version}\n")
        fh.write(f"#inventory={' '.join(manifest.phoneme_inventory)}\n")
        for u in manifest.entries:
            fh.write(format_utterance(u) + "\n")


def _parse_line(line: str, lineno: int) -> Utterance:
    parts = line.split("|")
    if len(parts) not in (6, 7, 8):
        raise LoadError(f"malformed record at line {lineno}: expected 6-8 '|' separated fields")
    parts += [""] * (8 - len(parts))
    uid, audio, phon, emotion, speaker, split, vad, durs = parts
    if emotion not in EMOTION_INDEX:
        raise LoadError(f"unknown emotion at line {lineno}: {emotion!r}")
    if split not in SPLITS:
        raise LoadError(f"unknown split at line {lineno}: {split!r}")
    try:
        phonemes = tuple(int(p) for p in phon.split())
        vad_v = VadValues(*[float(x) for x in vad.split()]) if vad.strip() else None
        durations = tuple(int(d) for d in durs.split()) if durs.strip() else None
        return Utterance(uid, audio, phonemes, emotion, speaker, split, vad_v, durations)
    except (ValueError, TypeError, InputError) as exc:
        raise LoadError(f"malformed record at line {lineno}: {exc}") from None


def load_manifest(path) -> Manifest:
    """Parse a manifest; audio files are only referenced, never opened."""
    path = os.fspath(path)
    entries, inventory, version = [], None, MANIFEST_VERSION
    seen = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key == "version":
                    version = value.strip()
                elif key == "inventory":
                    inventory = value.split()
                continue
            u = _parse_line(line, lineno)
            if u.id in seen:
                raise LoadError(f"duplicate id {u.id!r} at line {lineno} (first seen at line {seen[u.id]})")
            seen[u.id] = lineno
            entries.append(u)
    if inventory is None:
        n = max((max(u.phonemes) for u in entries), default=-1) + 1
        inventory = [f"p{i}" for i in range(n)]
    return Manifest(entries, inventory, version, os.path.dirname(os.path.abspath(path)))


def parse_pair(pair: str) -> tuple[str, str]:
    try:
        src, tgt = pair.split("-")
        return PAIR_CODES[src], PAIR_CODES[tgt]
    except (ValueError, KeyError):
        raise ConfigError(f"unknown conversion pair {pair!r}; use e.g. Neu-Ang") from None


def _esd_symbols(root, speaker):
    """utt id -> symbol list, from phonemes.txt if present, else transcript characters."""
    ph_file = os.path.join(root, "phonemes.txt")
    if os.path.exists(ph_file):
        with open(ph_file, encoding="utf-8") as fh:
            return {p[0]: p[1:] for p in (ln.split() for ln in fh) if p}
    table = {}
    tr_file = os.path.join(root, f"{speaker}.txt")
    if os.path.exists(tr_file):
        with open(tr_file, encoding="utf-8", errors="replace") as fh:
            for ln in fh:
                parts = ln.rstrip("\n").split("\t")
                if len(parts) >= 2:
                    table[parts[0]] = [c for c in parts[1] if not c.isspace()]
    return table


def load_esd_layout(root_dir, pair: str) -> Manifest:
    """Build a manifest for one speaker folder of the ESD layout.

    ``root_dir/<Emotion>/**/*.wav``; files are taken in sorted order and each
    emotion of the pair is cut into 300 / 30 / 20 train / valid / test items.
    """
    root_dir = os.fspath(root_dir)
    emotions = parse_pair(pair)
    speaker = os.path.basename(os.path.normpath(root_dir))
    files = {}
    for emo in emotions:
        folder = os.path.join(root_dir, ESD_FOLDERS[emo])
        if not os.path.isdir(folder):
            raise LoadError(f"missing emotion folder {folder}")
        files[emo] = sorted(glob.glob(os.path.join(folder, "**", "*.wav"), recursive=True))
    need = sum(ESD_SPLIT_SIZES.values())
    counts = {e: len(f) for e, f in files.items()}
    if any(c < need for c in counts.values()):
        listing = ", ".join(f"{e}={c}" for e, c in counts.items())
        raise LoadError(f"insufficient utterances (need {need} per emotion): {listing}")

    symbols = _esd_symbols(root_dir, speaker)
    entries, raw = [], []
    for emo in emotions:
        bounds = np.cumsum([0] + list(ESD_SPLIT_SIZES.values()))
        for s, split in enumerate(ESD_SPLIT_SIZES):
            for path in files[emo][bounds[s]:bounds[s + 1]]:
                uid = os.path.splitext(os.path.basename(path))[0]
                raw.append((uid, path, symbols.get(uid, ["<unk>"]), emo, split))
    inventory = sorted({s for r in raw for s in r[2]})
    index = {s: i for i, s in enumerate(inventory)}
    for uid, path, syms, emo, split in raw:
        rel = os.path.relpath(path, root_dir)
        entries.append(Utterance(uid, rel, tuple(index[s] for s in syms), emo, speaker, split))
    return Manifest(entries, inventory, MANIFEST_VERSION, root_dir)


# ---------------------------------------------------------------------------
# toy corpus

TOY_VAD_ANCHORS = {
    "neutral": (0.5, 0.5, 0.5),
    "angry": (0.2, 0.9, 0.8),
    "happy": (0.9, 0.8, 0.6),
    "sad": (0.2, 0.2, 0.3),
    "surprise": (0.6, 0.9, 0.7),
}

TOY_CONFIG = {
    "version": "toy-v1",
    "n_symbols": 32,
    "table_seed": 1234,
    # F0 contour std multiplier, peak-RMS multiplier, duration slope per emotion
    "pitch_gain": {"neutral": 0.0, "angry": 1.0, "happy": 1.2, "sad": 0.6, "surprise": 1.4},
    "energy_gain": {"neutral": 0.0, "angry": 1.4, "happy": 1.0, "sad": 0.6, "surprise": 1.2},
    "duration_slope": {"neutral": 0.0, "angry": -0.15, "happy": -0.2, "sad": 0.5, "surprise": 0.25},
    "sigma_frac": 0.08,  # contour std at intensity 0 as a fraction of base F0
    "rms_base": 0.1,
    "n_harmonics": 24,
    "base_duration_ms": (70, 150),
    "noise_level": 1e-3,
    "glide_ms": 40.0,  # pitch transitions between phonemes
}

TOY_SPEAKERS = {"spk0": 120.0, "spk1": 200.0}


@dataclass(frozen=True)
class ToyUtteranceSpec:
    emotion: str
    intensity: float
    seed: int
    speaker: str = "spk0"
    base_f0: float = 120.0
    n_phonemes: tuple = (4, 8)
    text_seed: int | None = None  # shared text -> parallel utterances across emotions
    utt_id: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.emotion not in EMOTION_INDEX:
            raise InputError(f"unknown emotion {self.emotion!r}")
        if not 0.0 < self.intensity < 1.0:
            raise InputError(f"intensity must lie strictly inside (0, 1), got {self.intensity}")
        lo, hi = self.n_phonemes
        if not 1 <= lo <= hi:
            raise InputError(f"bad phoneme count range {self.n_phonemes}")
        if self.base_f0 <= 0:
            raise InputError("base_f0 must be positive")


def toy_vad(emotion: str, intensity: float) -> VadValues:
    """Linear interpolation from the neutral anchor towards the emotion anchor."""
    n = np.array(TOY_VAD_ANCHORS["neutral"])
    a = np.array(TOY_VAD_ANCHORS[emotion])
    return VadValues.from_array((1 - intensity) * n + intensity * a)


def toy_duration_factor(emotion: str, intensity: float) -> float:
    return 1.0 + TOY_CONFIG["duration_slope"][emotion] * intensity


def _toy_tables():
    rng = np.random.default_rng(TOY_CONFIG["table_seed"])
    n = TOY_CONFIG["n_symbols"]
    lo, hi = TOY_CONFIG["base_duration_ms"]
    return {
        "duration_ms": rng.uniform(lo, hi, n),
        "pitch_offset": rng.normal(0.0, 1.0, n),
        "amplitude": rng.uniform(0.5, 1.0, n),
        "formants": np.stack([rng.uniform(300, 900, n), rng.uniform(1000, 2600, n)], axis=1),
        "harmonic_phase": rng.uniform(0, 2 * np.pi, TOY_CONFIG["n_harmonics"]),
    }


_TABLES = _toy_tables()


def _smooth(x: np.ndarray, width: float) -> np.ndarray:
    n = int(round(width))
    if n < 2:
        return x
    kernel = np.hanning(n + 2)[1:-1]
    kernel /= kernel.sum()
    xp = np.pad(x, (n // 2, n - 1 - n // 2), mode="edge")
    return np.convolve(xp, kernel, mode="valid")


def synth_toy_utterance(spec: ToyUtteranceSpec, dsp: DspConfig = DspConfig()):
    """Harmonic pseudo-speech whose prosody is a fixed function of (emotion, intensity).

    Per frame, F0 = base + sigma_base * (1 + a_e * i) * p_t where p is the
    per-phoneme pitch pattern (with short glides between phonemes) normalised to zero mean and unit std, and the
    frame RMS target is rms_base * (1 + b_e * i) * env_t with max(env) = 1.
    Phoneme durations scale by 1 + c_e * i. Audio length is
    ``sum(durations) * hop - 1`` so the mel has exactly ``sum(durations)`` frames.
    """
    cfg, tab = TOY_CONFIG, _TABLES
    hop, sr = dsp.hop_length, dsp.sample_rate
    text_rng = np.random.default_rng(spec.text_seed if spec.text_seed is not None else spec.seed)
    n_ph = int(text_rng.integers(spec.n_phonemes[0], spec.n_phonemes[1] + 1))
    phonemes = text_rng.integers(0, cfg["n_symbols"], n_ph)
    rng = np.random.default_rng(spec.seed)

    e, i = spec.emotion, spec.intensity
    factor = toy_duration_factor(e, i)
    base = tab["duration_ms"][phonemes] * 1e-3 * sr / hop
    durations = np.maximum(3, np.round(base * factor)).astype(np.int64)
    frame_ph = np.repeat(phonemes, durations)
    n_frames = frame_ph.size

    pattern = _smooth(tab["pitch_offset"][frame_ph], cfg["glide_ms"] * 1e-3 * sr / hop)
    sd = pattern.std()
    pattern = (pattern - pattern.mean()) / sd if sd > 1e-8 else np.zeros_like(pattern)
    sigma = cfg["sigma_frac"] * spec.base_f0 * (1 + cfg["pitch_gain"][e] * i)
    f0_frames = spec.base_f0 + sigma * pattern

    env = tab["amplitude"][frame_ph]
    rms_frames = cfg["rms_base"] * (1 + cfg["energy_gain"][e] * i) * env / env.max()

    k = np.arange(1, cfg["n_harmonics"] + 1)
    form = tab["formants"][frame_ph]  # [T, 2]
    hz = f0_frames[:, None] * k[None, :]
    gains = (np.exp(-0.5 * ((hz - form[:, :1]) / 150.0) ** 2)
             + 0.7 * np.exp(-0.5 * ((hz - form[:, 1:]) / 250.0) ** 2) + 0.05)
    gains = np.where(hz < 0.45 * sr, gains, 0.0)
    gains *= rms_frames[:, None] / np.sqrt(0.5 * np.sum(gains ** 2, axis=1, keepdims=True))

    n_samples = n_frames * hop - 1
    t_frames = np.arange(n_frames) * hop
    n = np.arange(n_samples)
    f0_s = np.interp(n, t_frames, f0_frames)
    phase = 2 * np.pi * np.cumsum(f0_s) / sr
    audio = np.zeros(n_samples)
    for j in range(k.size):
        amp = np.interp(n, t_frames, gains[:, j])
        audio += amp * np.sin(k[j] * phase + tab["harmonic_phase"][j])
    audio += cfg["noise_level"] * rng.standard_normal(n_samples)
    audio = np.clip(audio, -1.0, 1.0)

    uid = spec.utt_id or f"toy_{spec.speaker}_{e}_{int(round(i * 100)):02d}_{spec.seed}"
    utt = Utterance(
        id=uid, audio_path=f"{uid}.wav", phonemes=tuple(int(p) for p in phonemes),
        emotion=e, speaker=spec.speaker, split=spec.split,
        vad=toy_vad(e, i) if e != "neutral" else NEUTRAL_VAD,
        durations=tuple(int(d) for d in durations),
    )
    return Waveform(audio, sr, uid), utt


def toy_inventory() -> list:
    return [f"s{i:02d}" for i in range(TOY_CONFIG["n_symbols"])]


def split_counts(n_total: int) -> tuple[int, int, int]:
    """Train/valid/test sizes in the 300:30:20 ratio."""
    n_train = int(round(n_total * 300 / 350))
    n_valid = int(round(n_total * 30 / 350))
    return n_train, n_valid, n_total - n_train - n_valid


def build_toy_corpus(n_per_emotion: int, intensities, seed: int, dsp: DspConfig = DspConfig()):
    """Parallel toy corpus: ``n_per_emotion`` texts, each rendered for every emotion and intensity.

    Returns ``(manifest, {id: Waveform})``.
    """
    intensities = [float(x) for x in intensities]
    speakers = list(TOY_SPEAKERS)
    specs = []
    for j in range(n_per_emotion):
        text_seed = seed * 100003 + j
        spk = speakers[j % len(speakers)]
        for emo in EMOTIONS:
            for ii, inten in enumerate(intensities):
                uid = f"toy{j:04d}_{emo}_{int(round(inten * 100)):02d}"
                specs.append(ToyUtteranceSpec(
                    emo, inten, seed=text_seed * 31 + EMOTION_INDEX[emo] * 7 + ii, speaker=spk,
                    base_f0=TOY_SPEAKERS[spk], text_seed=text_seed, utt_id=uid))
    order = np.random.default_rng(seed).permutation(len(specs))
    n_train, n_valid, _ = split_counts(len(specs))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[idx] = "train" if rank < n_train else ("valid" if rank < n_train + n_valid else "test")
    entries, audio = [], {}
    for idx, s in enumerate(specs):
        w, u = synth_toy_utterance(replace(s, split=split_of[idx]), dsp)
        entries.append(u)
        audio[u.id] = w
    return Manifest(entries, toy_inventory()), audio


# ---------------------------------------------------------------------------
# batching


@dataclass
class UtteranceFeatures:
    mel: np.ndarray  # [T, n_mels]
    f0: np.ndarray  # [T]
    voicing: np.ndarray  # [T]
    audio: np.ndarray  # [n_samples]
    vad: np.ndarray | None = None  # [3]


@dataclass
class Batch:
    ids: list
    phonemes: torch.Tensor  # [B, L]
    phoneme_lengths: torch.Tensor  # [B]
    mel: torch.Tensor  # [B, n_mels, T]
    mel_lengths: torch.Tensor  # [B]
    f0: torch.Tensor  # [B, T]
    voicing: torch.Tensor  # [B, T]
    audio: torch.Tensor  # [B, T * hop]
    emotion: torch.Tensor  # [B]
    speaker: torch.Tensor  # [B]
    vad: torch.Tensor | None = None  # [B, 3]
    durations: torch.Tensor | None = None  # [B, L] ground truth when known

    def __len__(self):
        return len(self.ids)


def collate(utts, features: Mapping[str, UtteranceFeatures], speakers, hop_length) -> Batch:
    B = len(utts)
    L = max(len(u.phonemes) for u in utts)
    T = max(features[u.id].mel.shape[0] for u in utts)
    n_mels = features[utts[0].id].mel.shape[1]
    phon = torch.zeros(B, L, dtype=torch.long)
    mel = torch.zeros(B, n_mels, T)
    f0 = torch.zeros(B, T)
    voi = torch.zeros(B, T)
    audio = torch.zeros(B, T * hop_length)
    vad = torch.zeros(B, 3)
    durs = torch.zeros(B, L, dtype=torch.long)
    have_vad = all(features[u.id].vad is not None for u in utts)
    have_durs = all(u.durations is not None for u in utts)
    spk_index = {s: i for i, s in enumerate(speakers)}
    for b, u in enumerate(utts):
        ft = features[u.id]
        t = ft.mel.shape[0]
        phon[b, :len(u.phonemes)] = torch.tensor(u.phonemes)
        mel[b, :, :t] = torch.from_numpy(ft.mel.T.astype(np.float32))
        f0[b, :t] = torch.from_numpy(ft.f0.astype(np.float32))
        voi[b, :t] = torch.from_numpy(ft.voicing.astype(np.float32))
        n = min(ft.audio.size, T * hop_length)
        audio[b, :n] = torch.from_numpy(ft.audio[:n].astype(np.float32))
        if have_vad:
            vad[b] = torch.from_numpy(ft.vad.astype(np.float32))
        if have_durs:
            durs[b, :len(u.phonemes)] = torch.tensor(u.durations)
    return Batch(
        ids=[u.id for u in utts], phonemes=phon,
        phoneme_lengths=torch.tensor([len(u.phonemes) for u in utts]),
        mel=mel, mel_lengths=torch.tensor([features[u.id].mel.shape[0] for u in utts]),
        f0=f0, voicing=voi, audio=audio,
        emotion=torch.tensor([u.emotion_id for u in utts]),
        speaker=torch.tensor([spk_index[u.speaker] for u in utts]),
        vad=vad if have_vad else None, durations=durs if have_durs else None,
    )


def make_batches(manifest: Manifest, split: str, batch_size: int, seed: int | None,
                 features: Mapping[str, UtteranceFeatures], hop_length: int = 256,
                 shuffle: bool = True) -> Iterator[Batch]:
    """Yield padded batches of one split; ``seed`` fixes the shuffle order."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    utts = manifest.split(split)
    if not utts:
        raise InputError(f"split {split!r} is empty")
    order = np.arange(len(utts))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(utts))
    speakers = manifest.speakers
    for start in range(0, len(utts), batch_size):
        chunk = [utts[k] for k in order[start:start + batch_size]]
        yield collate(chunk, features, speakers, hop_length)
