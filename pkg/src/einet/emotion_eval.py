"""Utterance-level VAD (valence, arousal, dominance) providers and their frame expansion.

No speech-emotion-recognition model ships with this package. Two providers
stand in for one:

* ``OracleProvider`` returns the ground-truth VAD that toy utterances carry,
  plus optional zero-mean noise (deterministic per utterance id).
* ``FileProvider`` reads precomputed values, one ``id valence arousal dominance``
  line per utterance, e.g. produced by an external SER model on real data.
"""
from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import InputError, LoadError
from .nn_core import WaveNetBlock


@dataclass(frozen=True)
class VadValues:
    valence: float
    arousal: float
    dominance: float

    def __post_init__(self):
        for name in ("valence", "arousal", "dominance"):
            v = getattr(self, name)
            if not math.isfinite(v) or not 0.0 <= v <= 1.0:
                raise InputError(f"{name}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([self.valence, self.arousal, self.dominance], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "VadValues":
        a = np.asarray(a, dtype=np.float64).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))


NEUTRAL_VAD = VadValues(0.5, 0.5, 0.5)


class OracleProvider:
    kind = "oracle"

    def __init__(self, sigma: float = 0.02, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.sigma = sigma
        self.seed = seed

    def __call__(self, utt) -> VadValues:
        if utt.vad is None:
            raise LookupError(f"oracle provider needs ground-truth VAD; utterance {utt.id!r} has none")
        v = utt.vad.as_array()
        if self.sigma > 0:
            rng = np.random.default_rng([self.seed, zlib.crc32(utt.id.encode())])
            v = np.clip(v + rng.normal(0.0, self.sigma, 3), 0.0, 1.0)
        return VadValues.from_array(v)


class FileProvider:
    kind = "file"

    def __init__(self, path):
        self.path = os.fspath(path)
        self.table = read_vad_file(self.path)

    def __call__(self, utt) -> VadValues:
        try:
            return self.table[utt.id]
        except KeyError:
            raise LookupError(f"no VAD for utterance {utt.id!r} in {self.path}") from None


def read_vad_file(path) -> dict[str, VadValues]:
    table = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise LoadError(f"{path}:{lineno}: expected 'id valence arousal dominance'")
            try:
                values = [float(p) for p in parts[1:]]
            except ValueError:
                raise LoadError(f"{path}:{lineno}: non-numeric VAD value") from None
            try:
                table[parts[0]] = VadValues(*values)
            except InputError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
    return table


def write_vad_file(path, table: dict[str, VadValues]):
    with open(path, "w") as fh:
        for uid, v in table.items():
            fh.write(f"{uid} {v.valence!r} {v.arousal!r} {v.dominance!r}\n")


def make_provider(kind: str, source=None, sigma: float = 0.02, seed: int = 0):
    if kind == "oracle":
        return OracleProvider(sigma, seed)
    if kind == "file":
        if source is None:
            raise ValueError("file provider requires a path")
        return FileProvider(source)
    raise ValueError(f"unknown evaluator kind {kind!r}")


def evaluate(utt, provider) -> VadValues:
    return provider(utt)


class EmotionExpander(nn.Module):
    """Maps a VAD triple to per-frame emotion features ``[B, d_emo, T]``.

    The triple is processed at utterance level (two 1x1 convs and a WaveNet
    block on a length-1 sequence) and then broadcast, so every frame of an
    utterance carries the same row regardless of padding.
    """

    def __init__(self, d_emo=192, hidden=64, n_layers=2):
        super().__init__()
        self.conv1 = nn.Conv1d(3, hidden, 1)
        self.conv2 = nn.Conv1d(hidden, hidden, 1)
        self.wn = WaveNetBlock(hidden, kernel_size=3, n_layers=n_layers)
        self.proj = nn.Linear(hidden, d_emo)

    def forward(self, vad: torch.Tensor, n_frames: int, x_mask=None) -> torch.Tensor:
        if n_frames < 1:
            raise InputError(f"n_frames must be >= 1, got {n_frames}")
        h = torch.tanh(self.conv1(vad.unsqueeze(-1)))
        h = torch.tanh(self.conv2(h))
        h = self.wn(h)
        out = self.proj(h.squeeze(-1)).unsqueeze(-1).expand(-1, -1, n_frames)
        if x_mask is not None:
            out = out * x_mask
        return out


def expand_to_frames(vad: VadValues, n_frames: int, expander: EmotionExpander) -> torch.Tensor:
    """Single-utterance convenience wrapper returning ``[T, d_emo]``."""
    dtype = next(expander.parameters()).dtype
    v = torch.as_tensor(vad.as_array(), dtype=dtype).unsqueeze(0)
    return expander(v, n_frames)[0].T
