"""The conditional VAE: posterior, flow, prior, F0 predictor, decoder, discriminator.

Data flow during training::

    mel --posterior--> z_q --flow--> z_p   <--KL-->   prior(text, VAD) expanded by MAS
    z_q --F0 predictor--> (log F0, voicing)
    z_q segment + ground-truth F0 --decoder--> waveform segment --discriminator

At inference the intensity mapper turns (emotion, intensity) into VAD, the
prior is expanded by predicted durations, the flow runs backwards, and the
decoder is driven by predicted F0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig
from .emotion_eval import EmotionExpander
from .errors import ContractError, InputError
from .intensity_mapper import IntensityMapper
from .nn_core import (CouplingStack, FFTBlock, WaveNetBlock, batch_monotonic_align,
                      sequence_mask, sinusoidal_positions)

LOG_2PI = math.log(2 * math.pi)


@dataclass
class FrameLatent:
    mean: torch.Tensor  # [B, D, T]
    log_scale: torch.Tensor
    sample: torch.Tensor
    mask: torch.Tensor  # [B, 1, T]


@dataclass
class SpeakerFeatures:
    log_f0: torch.Tensor  # [B, T]
    voicing_logits: torch.Tensor  # [B, T]
    speaker_embedding: torch.Tensor  # [B, S]


def reparameterize(mean, log_scale, generator=None, temperature=1.0):
    if temperature == 0:
        return mean
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + eps * torch.exp(log_scale) * temperature


def expand_by_durations(x: torch.Tensor, durations: torch.Tensor, n_frames: int | None = None):
    """Repeat phoneme-level ``[B, C, L]`` features by integer ``durations [B, L]``."""
    ends = torch.cumsum(durations, dim=1)
    total = int(ends[:, -1].max()) if n_frames is None else n_frames
    if n_frames is not None and bool((ends[:, -1] > n_frames).any()):
        raise ContractError("durations exceed the frame count")
    t = torch.arange(total, device=x.device)
    starts = ends - durations
    path = ((t[None, None, :] >= starts[..., None]) & (t[None, None, :] < ends[..., None])).to(x.dtype)
    return torch.bmm(x, path), path  # [B, C, T], [B, L, T]


def durations_from_log(log_durations: torch.Tensor, x_mask: torch.Tensor) -> torch.Tensor:
    d = torch.clamp(torch.round(torch.exp(log_durations)), min=1)
    return (d * x_mask.squeeze(1)).long()


# ---------------------------------------------------------------------------
# encoders


class ContentEncoder(nn.Module):
    """Phoneme ids -> ``h_text``: embedding, fully connected layer, FFT blocks, projection."""

    def __init__(self, n_symbols, hidden, filter_channels, n_heads=2, n_blocks=1, p_dropout=0.1):
        super().__init__()
        self.hidden = hidden
        self.emb = nn.Embedding(n_symbols, hidden)
        nn.init.normal_(self.emb.weight, 0.0, hidden ** -0.5)
        self.fc = nn.Linear(hidden, hidden)
        self.blocks = nn.ModuleList([
            FFTBlock(hidden, n_heads, filter_channels, 3, p_dropout) for _ in range(n_blocks)])
        self.proj = nn.Conv1d(hidden, hidden, 1)

    def forward(self, phonemes, x_mask):
        if phonemes.shape[1] == 0 or bool((x_mask.sum(-1) == 0).any()):
            raise InputError("content encoder got an empty phoneme sequence")
        if bool((phonemes >= self.emb.num_embeddings).any()) or bool((phonemes < 0).any()):
            raise InputError("phoneme id outside the inventory")
        h = self.fc(self.emb(phonemes) * math.sqrt(self.hidden)).transpose(1, 2)
        h = h + sinusoidal_positions(h.shape[-1], self.hidden, h.dtype).to(h.device)
        h = h * x_mask
        for blk in self.blocks:
            h = blk(h, x_mask)
        return self.proj(h) * x_mask


class EmotionRenderer(nn.Module):
    """Broadcast VAD -> phoneme-level emotion features ``h_emo``."""

    def __init__(self, hidden, n_layers=2, p_dropout=0.0):
        super().__init__()
        self.pre = nn.Conv1d(3, hidden, 1)
        self.wn = WaveNetBlock(hidden, kernel_size=3, n_layers=n_layers, p_dropout=p_dropout)
        self.proj = nn.Conv1d(hidden, hidden, 1)

    def forward(self, vad, n_phonemes, x_mask=None):
        if n_phonemes < 1:
            raise InputError(f"renderer needs at least one phoneme, got {n_phonemes}")
        if x_mask is None:
            x_mask = torch.ones(vad.shape[0], 1, n_phonemes, dtype=vad.dtype, device=vad.device)
        h = torch.tanh(self.pre(vad.unsqueeze(-1))).expand(-1, -1, n_phonemes) * x_mask
        h = self.wn(h, x_mask)
        return self.proj(h) * x_mask


class DurationPredictor(nn.Module):
    """Five pointwise convs, two dilated convs, linear projection -> log durations."""

    def __init__(self, hidden, filter_channels=None, p_dropout=0.1):
        super().__init__()
        fc = filter_channels or hidden
        self.pointwise = nn.ModuleList(
            [nn.Conv1d(hidden if i == 0 else fc, fc, 1) for i in range(5)])
        self.dilated = nn.ModuleList(
            [nn.Conv1d(fc, fc, 3, dilation=d, padding=d) for d in (2, 4)])
        self.drop = nn.Dropout(p_dropout)
        self.proj = nn.Linear(fc, 1)

    def forward(self, h_text, h_emo, x_mask):
        if h_text.shape != h_emo.shape:
            raise ContractError(f"h_text {tuple(h_text.shape)} and h_emo {tuple(h_emo.shape)} differ")
        h = (h_text + h_emo) * x_mask
        for conv in list(self.pointwise) + list(self.dilated):
            h = self.drop(F.relu(conv(h * x_mask)))
        out = self.proj(h.transpose(1, 2)).transpose(1, 2)
        return (out * x_mask).squeeze(1)


class PriorNetwork(nn.Module):
    """Phoneme-level Gaussian from ``h_text`` gated by ``h_emo``."""

    def __init__(self, hidden, latent, n_layers=2):
        super().__init__()
        self.wn = WaveNetBlock(hidden, kernel_size=3, n_layers=n_layers, cond_channels=hidden)
        self.proj = nn.Conv1d(hidden, 2 * latent, 1)
        self.latent = latent

    def forward(self, h_text, h_emo, x_mask):
        h = h_text + self.wn(h_text, x_mask, cond=h_emo)
        stats = self.proj(h) * x_mask
        return stats[:, :self.latent], stats[:, self.latent:]


class PosteriorEncoder(nn.Module):
    """Log-mel frames -> frame-level Gaussian. Inputs are recentred first so the
    gated units start out of saturation (log-mel of speech sits near -5, spread ~2.5)."""

    MEL_CENTER, MEL_SCALE = -5.0, 2.5

    def __init__(self, n_mels, hidden, latent, n_layers, cond_channels):
        super().__init__()
        self.pre = nn.Conv1d(n_mels, hidden, 1)
        self.wn = WaveNetBlock(hidden, kernel_size=5, n_layers=n_layers, cond_channels=cond_channels)
        self.proj = nn.Conv1d(hidden, 2 * latent, 1)
        self.latent = latent

    def forward(self, mel, y_mask, cond):
        h = self.pre((mel - self.MEL_CENTER) / self.MEL_SCALE) * y_mask
        h = self.wn(h, y_mask, cond)
        stats = self.proj(h) * y_mask
        return stats[:, :self.latent], stats[:, self.latent:]


class F0Predictor(nn.Module):
    """Latent frames + speaker embedding -> log F0 and voicing logits."""

    def __init__(self, latent, hidden, speaker_dim, n_layers=3, f0_ref=150.0):
        super().__init__()
        self.pre = nn.Conv1d(latent, hidden, 1)
        self.spk = nn.Linear(speaker_dim, hidden)
        self.convs = nn.ModuleList([nn.Conv1d(hidden, hidden, 3, padding=1) for _ in range(n_layers)])
        self.proj = nn.Conv1d(hidden, 2, 1)
        self.log_f0_ref = math.log(f0_ref)

    def forward(self, z, z_mask, spk_emb):
        h = (self.pre(z) + self.spk(spk_emb).unsqueeze(-1)) * z_mask
        for conv in self.convs:
            h = h + F.leaky_relu(conv(h), 0.1) * z_mask
        out = self.proj(h) * z_mask
        return out[:, 0] + self.log_f0_ref, out[:, 1]


def f0_loss(log_f0_pred, voicing_logits, f0_target, voicing_target, mask=None, reading="mse"):
    """Log-F0 error over target-voiced frames plus voicing error over all valid frames.

    ``reading="mse"`` averages squared errors; ``"norm"`` takes the plain L2
    norm of each error vector. With no voiced frame only the voicing term
    remains.
    """
    if mask is None:
        mask = torch.ones_like(f0_target)
    mask = mask.to(log_f0_pred.dtype)
    voiced = (voicing_target > 0.5).to(mask.dtype) * mask * (f0_target > 0).to(mask.dtype)
    safe_f0 = torch.where(voiced > 0, f0_target, torch.ones_like(f0_target))
    d_f0 = torch.where(voiced > 0, log_f0_pred - torch.log(safe_f0), torch.zeros_like(log_f0_pred))
    d_v = torch.where(mask > 0, torch.sigmoid(voicing_logits) - voicing_target, torch.zeros_like(log_f0_pred))
    if reading == "mse":
        return (d_f0 ** 2).sum() / voiced.sum().clamp(min=1) + (d_v ** 2).sum() / mask.sum().clamp(min=1)
    if reading == "norm":
        return _safe_norm(d_f0) + _safe_norm(d_v)
    raise ValueError(f"unknown reading {reading!r}")


def _safe_norm(x):
    sq = (x ** 2).sum()
    return torch.where(sq > 0, torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), torch.zeros_like(sq))


# ---------------------------------------------------------------------------
# decoder


class HarmonicDecoder(nn.Module):
    """Transposed-conv upsampling to sample rate, then harmonic-plus-noise synthesis.

    The upsampling stack turns latent frames into a per-sample spectral
    envelope on ``env_bins`` linearly spaced frequencies plus a noise gain.
    Each of the ``n_harmonics`` partials of the given F0 takes its amplitude
    from the envelope at its own frequency; the sum is squashed by tanh so
    output stays in [-1, 1].
    """

    def __init__(self, latent, channels, upsample_rates, speaker_dim, n_harmonics=24,
                 sample_rate=16000, env_bins=48):
        super().__init__()
        self.hop = int(np.prod(upsample_rates))
        self.sample_rate = sample_rate
        self.n_harmonics = n_harmonics
        self.env_bins = env_bins
        self.pre = nn.Conv1d(latent, channels, 7, padding=3)
        self.spk = nn.Linear(speaker_dim, channels)
        self.ups = nn.ModuleList()
        self.res = nn.ModuleList()
        ch = channels
        for r in upsample_rates:
            out = max(ch // 2, 32)
            self.ups.append(nn.ConvTranspose1d(ch, out, 2 * r, stride=r, padding=r // 2))
            self.res.append(nn.Conv1d(out, out, 3, padding=1))
            ch = out
        self.post = nn.Conv1d(ch, env_bins + 1, 7, padding=3)
        # smooth frame-rate envelope; the upsampled branch adds sample-level detail
        self.frame_head = nn.Conv1d(channels, env_bins + 1, 3, padding=1)
        self.register_buffer("harmonic_numbers", torch.arange(1, n_harmonics + 1).float())

    def envelope(self, z, spk_emb):
        """Per-sample envelope ``[B, env_bins, N]`` and noise gain ``[B, N]``, both positive."""
        h = self.pre(z) + self.spk(spk_emb).unsqueeze(-1)
        smooth = F.interpolate(self.frame_head(F.leaky_relu(h, 0.1)), scale_factor=self.hop,
                               mode="linear", align_corners=False)
        for up, res in zip(self.ups, self.res):
            h = up(F.leaky_relu(h, 0.1))
            h = h + res(F.leaky_relu(h, 0.1))
        a = F.softplus(smooth + self.post(F.leaky_relu(h, 0.1)) - 3.0)
        return a[:, :self.env_bins], a[:, self.env_bins]

    def sample_envelope(self, env, freqs):
        """Linear interpolation of ``env [B, E, N]`` at ``freqs [B, K, N]`` Hz."""
        pos = (freqs / (self.sample_rate / 2)).clamp(0, 1) * (self.env_bins - 1)
        lo = pos.floor().clamp(max=self.env_bins - 2)
        w = pos - lo
        lo = lo.long()
        return torch.gather(env, 1, lo) * (1 - w) + torch.gather(env, 1, lo + 1) * w

    def upsample_frames(self, x):
        """Frame-rate ``[B, T]`` -> sample-rate ``[B, T * hop]`` by linear interpolation."""
        return F.interpolate(x.unsqueeze(1), scale_factor=self.hop, mode="linear",
                             align_corners=False).squeeze(1)

    def forward(self, z, f0_hz, voicing, spk_emb, generator=None):
        """``z [B, D, T]``, ``f0_hz``/``voicing`` ``[B, T]`` -> waveform ``[B, T * hop]``."""
        T = z.shape[-1]
        if f0_hz.shape[-1] != T or voicing.shape[-1] != T:
            raise ContractError("F0/voicing frames must match latent frames")
        env, noise_amp = self.envelope(z, spk_emb)
        filled = torch.where(voicing > 0.5, f0_hz, torch.full_like(f0_hz, 150.0)).detach()
        f0_up = self.upsample_frames(filled)
        gate = self.upsample_frames(voicing.to(z.dtype).detach())
        phase = 2 * math.pi * torch.cumsum(f0_up / self.sample_rate, dim=-1)
        k = self.harmonic_numbers.to(z.dtype).view(1, -1, 1)
        freqs = k * f0_up.unsqueeze(1)
        alias = (freqs < self.sample_rate / 2).to(z.dtype)
        harm_amp = self.sample_envelope(env, freqs)
        harmonics = (harm_amp * alias * torch.sin(k * phase.unsqueeze(1))).sum(1) * gate
        noise = torch.rand(noise_amp.shape, generator=generator, dtype=z.dtype, device=z.device) * 2 - 1
        return torch.tanh(harmonics + noise_amp * noise)


# ---------------------------------------------------------------------------
# discriminator


class ScaleDiscriminator(nn.Module):
    def __init__(self, channels=16):
        super().__init__()
        c = channels
        self.convs = nn.ModuleList([
            nn.Conv1d(1, c, 15, 1, padding=7),
            nn.Conv1d(c, 2 * c, 41, 4, groups=4, padding=20),
            nn.Conv1d(2 * c, 4 * c, 41, 4, groups=min(16, 4 * c // 2), padding=20),
            nn.Conv1d(4 * c, 4 * c, 5, 1, padding=2),
        ])
        self.post = nn.Conv1d(4 * c, 1, 3, 1, padding=1)

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.1)
            feats.append(x)
        return self.post(x).flatten(1), feats


class MultiScaleDiscriminator(nn.Module):
    """Scores and per-layer feature maps of a waveform at several resolutions."""

    MIN_SAMPLES = 256

    def __init__(self, n_scales=2, channels=16):
        super().__init__()
        self.scales = nn.ModuleList([ScaleDiscriminator(channels) for _ in range(n_scales)])
        self.n_layers = len(self.scales[0].convs)

    def forward(self, y):
        if y.dim() == 2:
            y = y.unsqueeze(1)
        if y.shape[-1] < self.MIN_SAMPLES:
            raise InputError(f"segment of {y.shape[-1]} samples is shorter than the "
                             f"discriminator minimum {self.MIN_SAMPLES}")
        scores, feats = [], []
        for i, d in enumerate(self.scales):
            if i:
                y = F.avg_pool1d(y, 4, 2, padding=2)
            s, f = d(y)
            scores.append(s)
            feats.append(f)
        return scores, feats


# ---------------------------------------------------------------------------
# full model


@dataclass
class TrainOutputs:
    posterior: FrameLatent
    z_p: torch.Tensor
    flow_logdet: torch.Tensor  # [B]
    m_p: torch.Tensor  # frame-level prior mean [B, D, T]
    logs_p: torch.Tensor
    x_mask: torch.Tensor
    durations: torch.Tensor  # MAS [B, L]
    log_dur_pred: torch.Tensor  # [B, L]
    speaker: SpeakerFeatures
    y_hat: torch.Tensor  # [B, seg * hop]
    y_seg: torch.Tensor
    seg_start: torch.Tensor  # [B] frame index
    im: object  # IntensityOutput
    h_text: torch.Tensor
    spk_emb: torch.Tensor


class EINet(nn.Module):
    def __init__(self, cfg: ModelConfig, n_mels=80, sample_rate=16000):
        super().__init__()
        self.cfg = cfg
        H, D = cfg.hidden, cfg.latent
        self.hop = int(np.prod(cfg.upsample_rates))
        self.speaker_emb = nn.Embedding(cfg.n_speakers, cfg.speaker_dim)
        self.emotion_emb = nn.Embedding(5, cfg.emotion_dim)
        self.expander = EmotionExpander(cfg.emotion_dim, hidden=min(64, H))
        self.cond_proj = nn.Conv1d(2 * cfg.emotion_dim + cfg.speaker_dim, H, 1)
        self.posterior = PosteriorEncoder(n_mels, H, D, cfg.posterior_layers, H)
        self.flow = CouplingStack(D, cfg.flow_layers, hidden=H, cond_channels=cfg.speaker_dim,
                                  subnet="wavenet", kernel_size=5, n_layers=cfg.flow_wavenet_layers)
        self.content = ContentEncoder(cfg.n_symbols, H, cfg.filter_channels, cfg.n_heads,
                                      cfg.n_fft_blocks, cfg.dropout)
        self.renderer = EmotionRenderer(H, cfg.renderer_layers)
        self.prior = PriorNetwork(H, D, cfg.prior_layers)
        self.duration = DurationPredictor(H, H, cfg.dropout)
        self.f0 = F0Predictor(D, H, cfg.speaker_dim, cfg.f0_layers, cfg.f0_ref)
        self.decoder = HarmonicDecoder(D, cfg.upsample_channels, cfg.upsample_rates,
                                       cfg.speaker_dim, cfg.n_harmonics, sample_rate)
        self.mapper = IntensityMapper(5, cfg.im_emb_dim, cfg.im_hidden, cfg.im_flows)

    # -- pieces ---------------------------------------------------------------

    def posterior_encode(self, mel, mel_lengths, emotion, vad, speaker, generator=None,
                         temperature=1.0) -> FrameLatent:
        T = mel.shape[-1]
        if T == 0:
            raise InputError("posterior needs at least one frame")
        y_mask = sequence_mask(mel_lengths, T).unsqueeze(1).to(mel.dtype)
        spk = self.speaker_emb(speaker)
        cond = torch.cat([
            self.emotion_emb(emotion).unsqueeze(-1).expand(-1, -1, T),
            self.expander(vad, T),
            spk.unsqueeze(-1).expand(-1, -1, T)], dim=1)
        m, logs = self.posterior(mel, y_mask, self.cond_proj(cond) * y_mask)
        z = reparameterize(m, logs, generator, temperature) * y_mask
        return FrameLatent(m, logs, z, y_mask)

    def prior_inputs(self, phonemes, phoneme_lengths, vad):
        x_mask = sequence_mask(phoneme_lengths, phonemes.shape[1]).unsqueeze(1).to(vad.dtype)
        h_text = self.content(phonemes, x_mask)
        h_emo = self.renderer(vad, phonemes.shape[1], x_mask)
        log_dur = self.duration(h_text.detach(), h_emo.detach(), x_mask)
        return h_text, h_emo, log_dur, x_mask

    def prior_encode(self, h_text, h_emo, x_mask, durations, n_frames=None):
        m_p, logs_p = self.prior(h_text, h_emo, x_mask)
        m_f, path = expand_by_durations(m_p, durations, n_frames)
        logs_f, _ = expand_by_durations(logs_p, durations, n_frames)
        return m_f, logs_f, m_p, logs_p

    def predict_f0(self, z, z_mask, spk_emb) -> SpeakerFeatures:
        log_f0, v_logits = self.f0(z, z_mask, spk_emb)
        return SpeakerFeatures(log_f0, v_logits, spk_emb)

    def f0_track(self, feats: SpeakerFeatures, z_mask):
        voiced = (feats.voicing_logits > 0).to(feats.log_f0.dtype) * z_mask.squeeze(1)
        return torch.exp(feats.log_f0) * voiced, voiced

    def decode(self, z, f0_hz, voicing, spk_emb, generator=None):
        return self.decoder(z, f0_hz, voicing, spk_emb, generator)

    @staticmethod
    def alignment_loglik(z_p, m_p, logs_p, x_mask, y_mask):
        """``loglik[b, i, t] = log N(z_p[t]; m_p[i], exp(logs_p[i]))`` summed over channels."""
        s_p_sq_r = torch.exp(-2 * logs_p)  # [B, D, L]
        t1 = torch.sum(-0.5 * LOG_2PI - logs_p, 1, keepdim=True)  # [B, 1, L]
        t2 = torch.matmul(-0.5 * (z_p ** 2).transpose(1, 2), s_p_sq_r)  # [B, T, L]
        t3 = torch.matmul(z_p.transpose(1, 2), m_p * s_p_sq_r)
        t4 = torch.sum(-0.5 * (m_p ** 2) * s_p_sq_r, 1, keepdim=True)
        ll = (t1 + t2 + t3 + t4).transpose(1, 2)  # [B, L, T]
        mask = x_mask.transpose(1, 2) * y_mask  # [B, L, T]
        return torch.where(mask > 0, ll, torch.full_like(ll, -1e9))

    @staticmethod
    def slice_segments(x, starts, size):
        out = x.new_zeros(x.shape[:-1] + (size,))
        for b, s in enumerate(starts.tolist()):
            chunk = x[b, ..., s:s + size]
            out[b, ..., :chunk.shape[-1]] = chunk
        return out

    # -- training forward -----------------------------------------------------

    def forward(self, batch, segment_frames, generator=None):
        vad = batch.vad
        spk_emb = self.speaker_emb(batch.speaker)
        post = self.posterior_encode(batch.mel, batch.mel_lengths, batch.emotion, vad,
                                     batch.speaker, generator)
        y_mask = post.mask
        z_p, logdet = self.flow(post.sample, y_mask, cond=spk_emb.unsqueeze(-1))
        h_text, h_emo, log_dur, x_mask = self.prior_inputs(batch.phonemes, batch.phoneme_lengths, vad)
        m_ph, logs_ph = self.prior(h_text, h_emo, x_mask)
        with torch.no_grad():
            ll = self.alignment_loglik(z_p, m_ph, logs_ph, x_mask, y_mask)
            durations = batch_monotonic_align(ll, batch.phoneme_lengths, batch.mel_lengths)
        T = batch.mel.shape[-1]
        m_p, _ = expand_by_durations(m_ph, durations, T)
        logs_p, _ = expand_by_durations(logs_ph, durations, T)
        speaker = self.predict_f0(post.sample, y_mask, spk_emb)

        max_start = (batch.mel_lengths - segment_frames).clamp(min=0)
        u = torch.rand(len(max_start), generator=generator)
        starts = torch.floor(u * (max_start + 1).to(u.dtype)).long()
        z_seg = self.slice_segments(post.sample, starts, segment_frames)
        f0_seg = self.slice_segments(batch.f0, starts, segment_frames)
        v_seg = self.slice_segments(batch.voicing, starts, segment_frames)
        y_hat = self.decode(z_seg, f0_seg, v_seg, spk_emb, generator)
        y_seg = self.slice_segments(batch.audio, starts * self.hop, segment_frames * self.hop)
        im = self.mapper(vad, batch.emotion)
        return TrainOutputs(post, z_p, logdet, m_p, logs_p, x_mask, durations, log_dur, speaker,
                            y_hat, y_seg, starts, im, h_text, spk_emb)

    def mapper_branch(self, batch, out: TrainOutputs, segment_frames, generator=None):
        """Waveform segment synthesised from the mapper's reconstructed VAD.

        The mapper's predicted category and intensity are inverted back to VAD,
        rendered through the prior (with the training alignment) and decoded
        with predicted F0, so discriminator features of the result can be
        compared with the real segment.
        """
        im = self.mapper(batch.vad)
        intensity = im.intensity.clamp(1e-5, 1 - 1e-5)
        vad_hat = self.mapper.inverse(im.emotion, intensity, warn=False)
        h_emo = self.renderer(vad_hat, batch.phonemes.shape[1], out.x_mask)
        T = batch.mel.shape[-1]
        m_f, _, _, _ = self.prior_encode(out.h_text, h_emo, out.x_mask, out.durations, T)
        y_mask = out.posterior.mask
        cond = out.spk_emb.unsqueeze(-1)
        z, _ = self.flow(m_f * y_mask, y_mask, cond=cond, reverse=True)
        z_seg = self.slice_segments(z, out.seg_start, segment_frames)
        seg_mask = self.slice_segments(y_mask, out.seg_start, segment_frames)
        feats = self.predict_f0(z_seg, seg_mask, out.spk_emb)
        f0_hz, voiced = self.f0_track(feats, seg_mask)
        return self.decode(z_seg, f0_hz.detach(), voiced.detach(), out.spk_emb, generator)

    def prior_latent(self, batch, out: TrainOutputs):
        """Flow-inverted prior mean with training durations (used by the optional prior F0 loss)."""
        h_emo = self.renderer(batch.vad, batch.phonemes.shape[1], out.x_mask)
        m_f, _, _, _ = self.prior_encode(out.h_text, h_emo, out.x_mask, out.durations,
                                         batch.mel.shape[-1])
        y_mask = out.posterior.mask
        z, _ = self.flow(m_f * y_mask, y_mask, cond=out.spk_emb.unsqueeze(-1), reverse=True)
        return z

    # -- inference -------------------------------------------------------------

    @torch.no_grad()
    def convert(self, phonemes, speaker: int, emotion: int, intensity: float, seed: int = 0,
                temperature: float | None = None, residual=None, return_details=False):
        """Synthesize ``phonemes`` in ``speaker``'s voice with the requested emotion intensity."""
        if not 0.0 < float(intensity) < 1.0:
            raise InputError(f"intensity must lie strictly inside (0, 1), got {intensity}")
        was_training = self.training
        self.eval()
        try:
            gen = torch.Generator().manual_seed(int(seed))
            dtype = self.speaker_emb.weight.dtype
            phon = torch.as_tensor(list(phonemes), dtype=torch.long).unsqueeze(0)
            lengths = torch.tensor([phon.shape[1]])
            vad = self.mapper.inverse(torch.tensor([emotion]), torch.tensor([float(intensity)], dtype=dtype),
                                      residual=residual)
            h_text, h_emo, log_dur, x_mask = self.prior_inputs(phon, lengths, vad)
            durations = durations_from_log(log_dur, x_mask)
            T = int(durations.sum())
            m_f, logs_f, _, _ = self.prior_encode(h_text, h_emo, x_mask, durations, T)
            temp = self.cfg.noise_scale if temperature is None else temperature
            z_p = reparameterize(m_f, logs_f, gen, temp)
            y_mask = torch.ones(1, 1, T, dtype=dtype)
            spk_emb = self.speaker_emb(torch.tensor([speaker]))
            z, _ = self.flow(z_p, y_mask, cond=spk_emb.unsqueeze(-1), reverse=True)
            feats = self.predict_f0(z, y_mask, spk_emb)
            f0_hz, voiced = self.f0_track(feats, y_mask)
            wav = self.decode(z, f0_hz, voiced, spk_emb, gen)[0]
        finally:
            self.train(was_training)
        if return_details:
            return wav, {"vad": vad[0], "durations": durations[0], "f0_hz": f0_hz[0],
                         "voicing": voiced[0]}
        return wav


def kl_divergence(z_p, logs_q, m_p, logs_p, y_mask, logdet, eps=None):
    """Single-sample estimate of KL(q || p) per valid frame.

    ``log q(z_q) - log p(f(z_q)) - log|det df/dz|`` with the Gaussian
    normalisers cancelled. When ``eps`` (the reparameterisation noise) is
    given its squared norm replaces the constant 1/2 per dimension, so the
    estimate is exactly zero when posterior and prior coincide.
    """
    q_term = 0.5 * eps ** 2 if eps is not None else 0.5 * torch.ones_like(z_p)
    kl = logs_p - logs_q - q_term + 0.5 * (z_p - m_p) ** 2 * torch.exp(-2 * logs_p)
    kl = torch.where(y_mask > 0, kl, torch.zeros_like(kl)).sum() - logdet.sum()
    return kl / y_mask.sum().clamp(min=1)
