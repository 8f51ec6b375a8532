"""Loss assembly, alternating generator/discriminator updates, checkpoints, metrics log.

Determinism: every epoch reseeds torch from ``(run.seed, epoch)`` and shuffles
with ``run.seed + epoch``, so a run resumed from a checkpoint taken at an
epoch boundary replays the remaining epochs exactly.

Checkpoint container (``torch.save`` of a plain dict, loadable with
``weights_only=True``)::

    format      "einet-checkpoint-v1"
    config      flat {key: value} of the resolved run config
    epoch       number of completed epochs
    speakers    speaker names in embedding order
    params      {"generator.<name>": tensor, "discriminator.<name>": tensor}
    buffers     same naming for non-trainable state (mapper anchor geometry)
    optim       {"generator": state_dict, "discriminator": state_dict}
    sched       {"generator": state_dict, "discriminator": state_dict}
    rng         {"torch": byte tensor}
    log         metrics log lines written so far
"""
from __future__ import annotations

import hashlib
import math
import os
import time
import zlib
from dataclasses import dataclass, fields

import numpy as np
import torch

from .config import Config, config_diff, from_flat
from .corpus import Manifest, UtteranceFeatures, make_batches
from .dsp import TorchLogMel, extract_f0, mel_spectrogram, read_wav
from .emotion_eval import make_provider
from .errors import ConfigError, LoadError, NumericError
from .intensity_mapper import feature_matching, gamma_schedule, loss_im
from .model import EINet, MultiScaleDiscriminator, f0_loss, kl_divergence

CHECKPOINT_FORMAT = "einet-checkpoint-v1"


@dataclass
class LossReport:
    l_cls: float = 0.0
    l_fm: float = 0.0
    l_adv_g: float = 0.0
    l_f0: float = 0.0
    l_dur: float = 0.0
    l_im: float = 0.0
    l_kl: float = 0.0
    total: float = 0.0
    l_adv_d: float = 0.0

    GENERATOR_TERMS = ("l_cls", "l_fm", "l_adv_g", "l_f0", "l_dur", "l_im", "l_kl")

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}

    def check_finite(self):
        for name, value in self.as_dict().items():
            if not math.isfinite(value):
                raise NumericError(f"loss component {name} is not finite ({value})")


def assemble(terms: dict) -> tuple[torch.Tensor, LossReport]:
    """Sum already-weighted generator terms; returns the differentiable total and its report."""
    missing = set(LossReport.GENERATOR_TERMS) - set(terms)
    if missing:
        raise KeyError(f"missing loss terms: {sorted(missing)}")
    total = sum(terms[k] for k in LossReport.GENERATOR_TERMS)
    parts = {k: float(terms[k].detach()) for k in LossReport.GENERATOR_TERMS}
    # the logged total is the exact sum of the logged parts, not the float32 tensor sum
    report = LossReport(**parts, total=math.fsum(parts.values()))
    report.check_finite()
    return total, report


def discriminator_loss(real_scores, fake_scores) -> torch.Tensor:
    """Least-squares objective summed over scales: ``mean((r - 1)^2) + mean(f^2)``."""
    loss = 0.0
    for r, f in zip(real_scores, fake_scores):
        loss = loss + torch.mean((r - 1) ** 2) + torch.mean(f ** 2)
    return torch.as_tensor(loss)


def generator_adv_loss(fake_scores) -> torch.Tensor:
    loss = 0.0
    for f in fake_scores:
        loss = loss + torch.mean((1 - f) ** 2)
    return torch.as_tensor(loss)


def duration_loss(log_dur_pred, durations, x_mask) -> torch.Tensor:
    """Masked MSE between predicted log durations and log aligned frame counts."""
    m = x_mask.squeeze(1)
    target = torch.log(durations.clamp(min=1).to(log_dur_pred.dtype))
    err = torch.where(m > 0, (log_dur_pred - target) ** 2, torch.zeros_like(log_dur_pred))
    return err.sum() / m.sum().clamp(min=1)


def masked_l1(a, b, mask) -> torch.Tensor:
    mask = mask.expand_as(a)
    diff = torch.where(mask > 0, (a - b).abs(), torch.zeros_like(a))
    return diff.sum() / mask.sum().clamp(min=1)


def learning_rate(cfg: Config, epoch: int) -> float:
    return cfg.optim.lr * cfg.sched.lr_decay ** epoch


def epoch_seed(seed: int, epoch: int) -> int:
    return zlib.crc32(f"{seed}:{epoch}".encode())


# ---------------------------------------------------------------------------
# features


def _cache_key(uid: str, audio: np.ndarray, cfg: Config, vad) -> str:
    h = hashlib.sha256()
    h.update(uid.encode())
    h.update(np.ascontiguousarray(audio, dtype=np.float32).tobytes())
    h.update(repr(cfg.dsp()).encode())
    h.update(repr(None if vad is None else vad.tolist()).encode())
    return h.hexdigest()[:32]


def compute_features(manifest: Manifest, cfg: Config, audio: dict | None = None,
                     cache_dir: str | None = None) -> dict[str, UtteranceFeatures]:
    """Mel, F0, voicing and VAD per utterance; optionally cached as ``.npz`` under ``cache_dir``."""
    dsp = cfg.dsp()
    provider = make_provider(cfg.data.vad_provider, cfg.data.vad_file or None,
                             sigma=cfg.data.vad_sigma, seed=cfg.run.seed)
    cache_dir = cache_dir if cache_dir is not None else os.environ.get("EINET_CACHE")
    out = {}
    for u in manifest.entries:
        w = audio[u.id] if audio and u.id in audio else read_wav(manifest.audio_path(u), dsp.sample_rate)
        vad = provider(u).as_array()
        path = None
        if cache_dir:
            os.makedirs(cache_dir, exist_ok=True)
            path = os.path.join(cache_dir, _cache_key(u.id, w.samples, cfg, vad) + ".npz")
            if os.path.exists(path):
                with np.load(path) as z:
                    out[u.id] = UtteranceFeatures(z["mel"], z["f0"], z["voicing"], z["audio"], z["vad"])
                continue
        mel = mel_spectrogram(w, dsp).frames
        pitch = extract_f0(w, dsp)
        feats = UtteranceFeatures(mel, pitch.f0_hz, pitch.voicing.astype(np.float64),
                                  np.asarray(w.samples, dtype=np.float32), vad)
        if u.durations is not None and int(np.sum(u.durations)) != mel.shape[0]:
            raise LoadError(f"{u.id}: durations sum to {int(np.sum(u.durations))}, mel has {mel.shape[0]} frames")
        if path:
            np.savez(path, mel=feats.mel, f0=feats.f0, voicing=feats.voicing, audio=feats.audio, vad=vad)
        out[u.id] = feats
    return out


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: Config, manifest: Manifest, features: dict, out_dir: str | None = None):
        self.cfg = cfg.validate()
        self.manifest = manifest
        self.features = features
        self.out_dir = out_dir
        if out_dir is not None:
            _check_writable(out_dir)
        self.speakers = manifest.speakers
        torch.manual_seed(cfg.run.seed)
        self.model = EINet(cfg.model, cfg.data.n_mels, cfg.data.sample_rate)
        self.disc = MultiScaleDiscriminator(cfg.model.disc_scales, cfg.model.disc_channels)
        self.logmel = TorchLogMel(cfg.dsp())
        o = cfg.optim
        kw = dict(lr=o.lr, betas=(o.beta1, o.beta2), eps=o.eps, weight_decay=o.weight_decay)
        self.opt_g = torch.optim.AdamW(self.model.parameters(), **kw)
        self.opt_d = torch.optim.AdamW(self.disc.parameters(), **kw)
        self.sched_g = torch.optim.lr_scheduler.ExponentialLR(self.opt_g, cfg.sched.lr_decay)
        self.sched_d = torch.optim.lr_scheduler.ExponentialLR(self.opt_d, cfg.sched.lr_decay)
        self.epoch = 0
        self.log_lines: list[str] = []
        train = manifest.split("train")
        if not train:
            raise ConfigError("train split is empty")
        vad = torch.tensor(np.stack([features[u.id].vad for u in train]), dtype=torch.float32)
        emo = torch.tensor([u.emotion_id for u in train])
        self.model.mapper.fit_anchors(vad, emo)
        # start the duration head at the corpus-average log frames per phoneme
        ratio = [features[u.id].mel.shape[0] / len(u.phonemes) for u in train]
        with torch.no_grad():
            self.model.duration.proj.bias.fill_(float(np.mean(np.log(ratio))))

    # -- one step ---------------------------------------------------------------

    def _segment_mask(self, batch, starts, n_mel_frames):
        seg = self.cfg.data.segment_frames
        valid = (batch.mel_lengths - starts).clamp(max=seg)
        t = torch.arange(n_mel_frames)
        return (t[None, :] < valid[:, None]).float().unsqueeze(1)

    def generator_terms(self, batch, out, epoch, with_grad_features=True):
        cfg, lw = self.cfg, self.cfg.loss
        mel_hat = self.logmel(out.y_hat)
        mel_real = self.logmel(out.y_seg)
        seg_mask = self._segment_mask(batch, out.seg_start, mel_real.shape[-1])
        fake_scores, fake_feats = self.disc(out.y_hat)
        with torch.no_grad():
            _, real_feats = self.disc(out.y_seg)
        post = out.posterior
        eps = (post.sample - post.mean) * torch.exp(-post.log_scale) * post.mask
        l_f0 = f0_loss(out.speaker.log_f0, out.speaker.voicing_logits, batch.f0, batch.voicing,
                       post.mask.squeeze(1), lw.f0_reading)
        if lw.f0_prior_weight > 0:
            z_prior = self.model.prior_latent(batch, out)
            pf = self.model.predict_f0(z_prior, post.mask, out.spk_emb)
            l_f0 = l_f0 + lw.f0_prior_weight * f0_loss(pf.log_f0, pf.voicing_logits, batch.f0,
                                                       batch.voicing, post.mask.squeeze(1), lw.f0_reading)
        gamma, beta = gamma_schedule(epoch)
        im_fake = None
        if beta > 0:
            y_im = self.model.mapper_branch(batch, out, cfg.data.segment_frames)
            _, im_fake = self.disc(y_im)
        anchor = self.model.mapper.anchor_loss(out.im, batch.vad, batch.emotion)
        l_im = loss_im(out.im.logits, batch.emotion, real_feats, im_fake, epoch,
                       anchor=lw.im_anchor_weight * anchor)
        terms = {
            "l_cls": lw.cls_weight * masked_l1(mel_hat, mel_real, seg_mask),
            "l_fm": lw.fm_weight * feature_matching(real_feats, fake_feats),
            "l_adv_g": lw.adv_weight * generator_adv_loss(fake_scores),
            "l_f0": lw.f0_weight * l_f0,
            "l_dur": lw.dur_weight * duration_loss(out.log_dur_pred, out.durations, out.x_mask),
            "l_im": lw.im_weight * l_im,
            "l_kl": lw.kl_weight * kl_divergence(out.z_p, post.log_scale, out.m_p, out.logs_p,
                                                 post.mask, out.flow_logdet, eps),
        }
        return terms

    def train_step(self, batch, epoch) -> LossReport:
        seg = self.cfg.data.segment_frames
        self.model.train()
        self.disc.train()
        out = self.model(batch, seg)
        real_scores, _ = self.disc(out.y_seg)
        fake_scores, _ = self.disc(out.y_hat.detach())
        l_d = discriminator_loss(real_scores, fake_scores)
        self.opt_d.zero_grad(set_to_none=True)
        l_d.backward()
        self._clip(self.disc)
        self.opt_d.step()

        terms = self.generator_terms(batch, out, epoch)
        total, report = assemble(terms)
        report.l_adv_d = float(l_d.detach())
        report.check_finite()
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self._clip(self.model)
        self.opt_g.step()
        return report

    def _clip(self, module):
        if self.cfg.optim.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(module.parameters(), self.cfg.optim.grad_clip)

    @torch.no_grad()
    def validate(self) -> float:
        """Mel L1 of posterior-mean reconstructions over the whole validation split."""
        self.model.eval()
        total, count = 0.0, 0
        gen = torch.Generator().manual_seed(self.cfg.run.seed)
        split = "valid" if self.manifest.split("valid") else "train"
        for batch in make_batches(self.manifest, split, self.cfg.data.batch_size, None,
                                  self.features, self.cfg.data.hop_length, shuffle=False):
            spk = self.model.speaker_emb(batch.speaker)
            post = self.model.posterior_encode(batch.mel, batch.mel_lengths, batch.emotion,
                                               batch.vad, batch.speaker, temperature=0)
            y = self.model.decode(post.mean, batch.f0, batch.voicing, spk, gen)
            mel_hat = self.logmel(y)[..., :batch.mel.shape[-1]]
            total += float(masked_l1(mel_hat, batch.mel, post.mask)) * len(batch)
            count += len(batch)
        self.model.train()
        return total / max(count, 1)

    # -- epochs -----------------------------------------------------------------

    def run_epoch(self) -> dict:
        epoch = self.epoch
        torch.manual_seed(epoch_seed(self.cfg.run.seed, epoch))
        gamma, beta = gamma_schedule(epoch)
        lr = self.opt_g.param_groups[0]["lr"]
        sums, n = {}, 0
        for batch in make_batches(self.manifest, "train", self.cfg.data.batch_size,
                                  self.cfg.run.seed + epoch, self.features, self.cfg.data.hop_length):
            rep = self.train_step(batch, epoch)
            for k, v in rep.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            n += len(batch)
        metrics = {k: v / n for k, v in sums.items()}
        metrics.update(gamma=gamma, beta=beta, lr=lr, val_l_cls=self.validate())
        self.sched_g.step()
        self.sched_d.step()
        self.epoch += 1
        self.log_lines.append(format_log_line(epoch, metrics))
        return metrics

    def fit(self, epochs: int | None = None, log_path=None, on_epoch=None):
        target = self.cfg.run.epochs if epochs is None else epochs
        every = max(1, self.cfg.run.checkpoint_every)
        while self.epoch < target:
            t0 = time.perf_counter()
            metrics = self.run_epoch()
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(self.log_lines[-1] + "\n")
            if self.out_dir and (self.epoch % every == 0 or self.epoch == target):
                self.save(os.path.join(self.out_dir, f"epoch_{self.epoch:04d}.pt"))
                self.save(os.path.join(self.out_dir, "last.pt"))
            if on_epoch:
                on_epoch(self.epoch - 1, metrics, time.perf_counter() - t0)
        return self.log_lines

    # -- checkpoints --------------------------------------------------------------

    def state(self) -> dict:
        flat = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.cfg.to_flat().items()}
        params, buffers = {}, {}
        for prefix, mod in (("generator", self.model), ("discriminator", self.disc)):
            for name, p in mod.named_parameters():
                params[f"{prefix}.{name}"] = p.detach().clone()
            for name, b in mod.named_buffers():
                buffers[f"{prefix}.{name}"] = b.detach().clone()
        return {
            "format": CHECKPOINT_FORMAT, "config": flat, "epoch": self.epoch,
            "speakers": list(self.speakers), "params": params, "buffers": buffers,
            "optim": {"generator": self.opt_g.state_dict(), "discriminator": self.opt_d.state_dict()},
            "sched": {"generator": self.sched_g.state_dict(), "discriminator": self.sched_d.state_dict()},
            "rng": {"torch": torch.get_rng_state()},
            "log": list(self.log_lines),
        }

    def save(self, path):
        tmp = f"{path}.tmp"
        torch.save(self.state(), tmp)
        os.replace(tmp, path)

    def load_state(self, ck: dict):
        saved = from_flat(ck["config"])
        diff = config_diff(saved, self.cfg)
        if diff:
            raise ConfigError("checkpoint config differs from the requested run:\n  " + "\n  ".join(diff))
        _load_params(self.model, ck, "generator")
        _load_params(self.disc, ck, "discriminator")
        self.opt_g.load_state_dict(ck["optim"]["generator"])
        self.opt_d.load_state_dict(ck["optim"]["discriminator"])
        self.sched_g.load_state_dict(ck["sched"]["generator"])
        self.sched_d.load_state_dict(ck["sched"]["discriminator"])
        torch.set_rng_state(ck["rng"]["torch"])
        self.epoch = int(ck["epoch"])
        self.log_lines = list(ck["log"])

    def resume(self, path):
        self.load_state(read_checkpoint(path))


def _load_params(module, ck, prefix):
    state = {}
    for src in (ck["params"], ck["buffers"]):
        for k, v in src.items():
            if k.startswith(prefix + "."):
                state[k[len(prefix) + 1:]] = v
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise LoadError(f"checkpoint {prefix} blobs do not match the model "
                        f"(missing {missing[:3]}, unexpected {unexpected[:3]})")


def _check_writable(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write-probe")
        with open(probe, "w") as fh:
            fh.write("")
        os.remove(probe)
    except OSError as exc:
        raise ConfigError(f"checkpoint directory {path!r} is not writable: {exc}") from None


def read_checkpoint(path) -> dict:
    try:
        ck = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # corrupt or foreign file
        raise LoadError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(ck, dict) or ck.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    return ck


def load_model(path) -> tuple[EINet, Config, list]:
    """Generator, config and speaker list from a checkpoint, in eval mode."""
    ck = read_checkpoint(path)
    cfg = from_flat(ck["config"])
    model = EINet(cfg.model, cfg.data.n_mels, cfg.data.sample_rate)
    _load_params(model, ck, "generator")
    model.eval()
    return model, cfg, list(ck["speakers"])


def format_log_line(epoch: int, metrics: dict) -> str:
    return f"{epoch} " + " ".join(f"{k}={float(v)!r}" for k, v in metrics.items())


def parse_log_line(line: str) -> tuple[int, dict]:
    head, *rest = line.split()
    return int(head), {k: float(v) for k, v in (item.split("=", 1) for item in rest)}
