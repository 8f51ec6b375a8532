"""Run configuration: typed sections, named profiles, flat ``key = value`` files.

Resolution order is defaults < profile < config file < command-line
overrides. Keys are ``section.name``; unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .dsp import DspConfig
from .errors import ConfigError


@dataclass(frozen=True)
class DataConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    f0_min: float = 50.0
    f0_max: float = 600.0
    f0_threshold: float = 0.3
    f0_win_length: int = 768
    batch_size: int = 16
    segment_frames: int = 32
    vad_provider: str = "oracle"
    vad_sigma: float = 0.02
    vad_file: str = ""


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 192
    latent: int = 192
    filter_channels: int = 768
    n_heads: int = 2
    n_fft_blocks: int = 1
    posterior_layers: int = 4
    flow_layers: int = 4
    flow_wavenet_layers: int = 4
    renderer_layers: int = 2
    prior_layers: int = 2
    f0_layers: int = 3
    speaker_dim: int = 64
    emotion_dim: int = 192
    upsample_rates: tuple = (8, 8, 2, 2)
    upsample_channels: int = 256
    n_harmonics: int = 24
    dropout: float = 0.1
    disc_scales: int = 2
    disc_channels: int = 16
    im_hidden: int = 64
    im_flows: int = 4
    im_emb_dim: int = 16
    f0_ref: float = 150.0
    noise_scale: float = 0.667
    n_symbols: int = 32
    n_speakers: int = 2


@dataclass(frozen=True)
class LossConfig:
    cls_weight: float = 45.0
    fm_weight: float = 2.0
    adv_weight: float = 1.0
    f0_weight: float = 1.0
    dur_weight: float = 1.0
    im_weight: float = 1.0
    kl_weight: float = 1.0
    im_anchor_weight: float = 1.0
    f0_prior_weight: float = 0.0
    f0_reading: str = "mse"


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    eps: float = 1e-9
    weight_decay: float = 0.01
    grad_clip: float = 0.0


@dataclass(frozen=True)
class SchedConfig:
    lr_decay: float = 0.999875


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1234
    profile: str = "desk"
    epochs: int = 200
    checkpoint_every: int = 5


@dataclass(frozen=True)
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sched: SchedConfig = field(default_factory=SchedConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def dsp(self) -> DspConfig:
        d = self.data
        return DspConfig(sample_rate=d.sample_rate, n_fft=d.n_fft, win_length=d.win_length,
                         hop_length=d.hop_length, n_mels=d.n_mels, f0_min=d.f0_min,
                         f0_max=d.f0_max, f0_threshold=d.f0_threshold,
                         f0_win_length=d.f0_win_length)

    def to_flat(self) -> dict:
        out = {}
        for sec in fields(self):
            for f in fields(getattr(self, sec.name)):
                out[f"{sec.name}.{f.name}"] = getattr(getattr(self, sec.name), f.name)
        return out

    def validate(self) -> "Config":
        self.dsp().validate()
        m, o, s = self.model, self.optim, self.sched
        prod = 1
        for r in m.upsample_rates:
            prod *= r
        if prod != self.data.hop_length:
            raise ConfigError(f"model.upsample_rates multiply to {prod}, data.hop_length is {self.data.hop_length}")
        if o.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if not 0 < s.lr_decay < 1:
            raise ConfigError("sched.lr_decay must lie in (0, 1)")
        if self.data.batch_size < 1:
            raise ConfigError("data.batch_size must be >= 1")
        if self.loss.f0_reading not in ("mse", "norm"):
            raise ConfigError("loss.f0_reading must be 'mse' or 'norm'")
        if self.run.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.run.profile!r}")
        if m.hidden % m.n_heads:
            raise ConfigError("model.hidden must be divisible by model.n_heads")
        return self


PROFILES = {
    "desk": {},
    "full": {
        "model.speaker_dim": 256, "model.upsample_channels": 512, "model.flow_wavenet_layers": 4,
        "model.posterior_layers": 16, "model.n_fft_blocks": 6, "data.segment_frames": 32,
    },
    "tiny": {
        "data.n_fft": 512, "data.win_length": 512, "data.hop_length": 64,
        "model.hidden": 64, "model.latent": 16, "model.filter_channels": 128,
        "model.emotion_dim": 64, "model.speaker_dim": 16,
        "model.upsample_rates": (4, 4, 4), "model.upsample_channels": 64,
        "model.posterior_layers": 3, "model.flow_wavenet_layers": 2,
        "model.disc_channels": 8, "optim.lr": 2e-3,
    },
}


def _convert(value: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return tuple(int(x) for x in value.replace(",", " ").split())
        return value.strip()
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None


def set_value(cfg: Config, key: str, value) -> Config:
    sec, _, name = key.partition(".")
    if not name or sec not in {f.name for f in fields(cfg)}:
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(cfg, sec)
    if name not in {f.name for f in fields(section)}:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(value, str):
        value = _convert(value, getattr(section, name), key)
    return replace(cfg, **{sec: replace(section, **{name: value})})


def parse_pairs(text: str, origin: str = "<string>") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def parse_overrides(items) -> dict:
    pairs = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def resolve(file_pairs: dict | None = None, overrides: dict | None = None,
            profile: str | None = None) -> Config:
    """Build a validated config: defaults < profile < file < overrides."""
    file_pairs, overrides = dict(file_pairs or {}), dict(overrides or {})
    chosen = profile or overrides.get("run.profile") or file_pairs.get("run.profile") or "desk"
    if chosen not in PROFILES:
        raise ConfigError(f"unknown profile {chosen!r}")
    cfg = Config()
    for k, v in PROFILES[chosen].items():
        cfg = set_value(cfg, k, v)
    for source in (file_pairs, overrides):
        for k, v in source.items():
            cfg = set_value(cfg, k, v)
    cfg = set_value(cfg, "run.profile", chosen)
    return cfg.validate()


def load_config(path=None, overrides=None, profile=None) -> Config:
    pairs = {}
    if path:
        with open(path) as fh:
            pairs = parse_pairs(fh.read(), str(path))
    return resolve(pairs, parse_overrides(overrides) if isinstance(overrides, (list, tuple)) else overrides,
                   profile)


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: Config) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.to_flat().items())


def config_diff(a: Config, b: Config) -> list[str]:
    fa, fb = a.to_flat(), b.to_flat()
    return [f"{k}: {format_value(fa[k])} != {format_value(fb[k])}" for k in fa if fa[k] != fb[k]]


def from_flat(flat: dict) -> Config:
    cfg = Config()
    for k, v in flat.items():
        if isinstance(v, list):
            v = tuple(v)
        cfg = set_value(cfg, k, v)
    return cfg

