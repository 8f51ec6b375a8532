"""Invertible VAD <-> (emotion category, intensity) mapping.

The flow works on centered VAD (``v - 0.5``) and is conditioned on an
emotion embedding. Latent coordinate 0 is the intensity axis
(``intensity = sigmoid(z[0])``); the other two coordinates hold whatever
the intensity does not explain. Categories come from a separate classifier
on the raw VAD triple so that the flow stays exactly invertible.

Going backwards, ``inverse(e, e_i)`` pins ``z = (logit(e_i), 0, 0)`` and
undoes the flow under ``embedding(e)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ContractError, DivergenceWarning, InputError, NumericError
from .nn_core import CouplingStack

N_EMOTIONS = 5
NEUTRAL_ID = 0
PSEUDO_LABEL_RANGE = (0.01, 0.99)


def gamma_schedule(epoch: int) -> tuple[float, float]:
    """Weight of the classification term and of the feature-matching term."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    gamma = max(0.30, round(1.0 - 0.01 * (epoch // 5), 10))
    return gamma, 1.0 - gamma


@dataclass
class IntensityOutput:
    logits: torch.Tensor  # [B, K]
    intensity: torch.Tensor  # [B], in (0, 1)
    latent: torch.Tensor  # [B, 3]
    logdet: torch.Tensor  # [B]
    emotion: torch.Tensor  # [B], category used to condition the flow


class IntensityMapper(nn.Module):
    def __init__(self, n_emotions=N_EMOTIONS, emb_dim=16, hidden=64, n_flows=4, scale_limit=4.0):
        super().__init__()
        self.n_emotions = n_emotions
        self.emb = nn.Embedding(n_emotions, emb_dim)
        self.flow = CouplingStack(3, n_flows=n_flows, hidden=hidden, cond_channels=emb_dim,
                                  subnet="mlp", scale_limit=scale_limit)
        self.classifier = nn.Sequential(
            nn.Linear(3, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(),
            nn.Linear(hidden, n_emotions))
        # pseudo-label geometry, fitted on training VADs by fit_anchors()
        self.register_buffer("neutral_center", torch.full((3,), 0.5))
        self.register_buffer("directions", torch.zeros(n_emotions, 3))
        self.register_buffer("spans", torch.ones(n_emotions))

    def _cond(self, emotion):
        return self.emb(emotion).unsqueeze(-1)

    def _check_emotion(self, emotion, batch):
        emotion = torch.as_tensor(emotion, dtype=torch.long, device=self.emb.weight.device)
        if emotion.dim() == 0:
            emotion = emotion.expand(batch)
        if emotion.shape != (batch,):
            raise ContractError("one emotion id per batch item expected")
        if bool(((emotion < 0) | (emotion >= self.n_emotions)).any()):
            raise InputError("emotion id outside the inventory")
        return emotion

    def forward(self, vad: torch.Tensor, emotion=None) -> IntensityOutput:
        """``vad`` is ``[B, 3]``; without ``emotion`` the classifier's argmax conditions the flow."""
        for p in self.parameters():
            if not torch.isfinite(p).all():
                raise NumericError("intensity mapper holds non-finite parameters")
        logits = self.classifier(vad)
        if emotion is None:
            emotion = logits.detach().argmax(-1)
        emotion = self._check_emotion(emotion, vad.shape[0])
        z, logdet = self.flow((vad - 0.5).unsqueeze(-1), cond=self._cond(emotion))
        z = z.squeeze(-1)
        # sigmoid rounds to exactly 0 or 1 for large |z|; keep the interval open
        eps = torch.finfo(z.dtype).eps
        intensity = torch.sigmoid(z[:, 0]).clamp(eps, 1 - eps)
        return IntensityOutput(logits, intensity, z, logdet, emotion)

    def inverse(self, emotion, intensity, residual=None, warn=True) -> torch.Tensor:
        """VAD ``[B, 3]`` for target categories and intensities in the open interval (0, 1)."""
        intensity = torch.as_tensor(intensity, dtype=self.emb.weight.dtype,
                                    device=self.emb.weight.device).reshape(-1)
        if not bool(((intensity > 0) & (intensity < 1)).all()):
            raise InputError(f"intensity must lie strictly inside (0, 1), got {intensity.tolist()}")
        emotion = self._check_emotion(emotion, intensity.shape[0])
        z = torch.zeros(intensity.shape[0], 3, dtype=intensity.dtype, device=intensity.device)
        z = z.index_put((torch.arange(len(z)), torch.zeros(len(z), dtype=torch.long)),
                        torch.logit(intensity))
        if residual is not None:
            z = z + F.pad(torch.as_tensor(residual, dtype=z.dtype).reshape(-1, 2), (1, 0))
        v, _ = self.flow(z.unsqueeze(-1), cond=self._cond(emotion), reverse=True)
        v = v.squeeze(-1) + 0.5
        if warn and bool(((v < -0.1) | (v > 1.1)).any()):
            warnings.warn("inverted VAD left [-0.1, 1.1]; the mapper is probably undertrained",
                          DivergenceWarning, stacklevel=2)
        return v

    # -- pseudo labels -------------------------------------------------------

    @torch.no_grad()
    def fit_anchors(self, vad: torch.Tensor, emotion: torch.Tensor):
        """Fix the neutral center, one direction per emotion, and each emotion's span.

        The pseudo intensity of an utterance is its projection onto the
        direction from the neutral center towards its emotion's centroid,
        divided by the largest such projection seen in training.
        """
        vad = vad.to(self.neutral_center.dtype)
        neutral = emotion == NEUTRAL_ID
        center = vad[neutral].mean(0) if neutral.any() else torch.full((3,), 0.5, dtype=vad.dtype)
        self.neutral_center.copy_(center)
        for e in range(self.n_emotions):
            sel = emotion == e
            if e == NEUTRAL_ID or not sel.any():
                continue
            d = vad[sel].mean(0) - center
            norm = d.norm()
            if norm < 1e-8:
                continue
            d = d / norm
            self.directions[e] = d
            self.spans[e] = ((vad[sel] - center) @ d).max().clamp(min=1e-3)

    def pseudo_intensity(self, vad: torch.Tensor, emotion: torch.Tensor) -> torch.Tensor:
        proj = ((vad - self.neutral_center) * self.directions[emotion]).sum(-1)
        t = proj / self.spans[emotion]
        t = torch.where(emotion == NEUTRAL_ID, torch.full_like(t, 0.5), t)
        return t.clamp(*PSEUDO_LABEL_RANGE)

    def anchor_loss(self, out: IntensityOutput, vad: torch.Tensor, emotion: torch.Tensor) -> torch.Tensor:
        """Negative log-likelihood of the latent under ``N((logit(pseudo label), 0, 0), I)``.

        The ``-logdet`` part stops the flow from shrinking the residual
        directions, which would make :meth:`inverse` blow up small errors.
        Constant terms are dropped, so the identity flow at the target gives 0.
        """
        target = torch.logit(self.pseudo_intensity(vad, emotion)).detach()
        sq = (out.latent[:, 0] - target) ** 2 + (out.latent[:, 1:] ** 2).sum(-1)
        return (0.5 * sq - out.logdet).mean()


def _flatten(feats):
    out = []
    for f in feats:
        out.extend(f if isinstance(f, (list, tuple)) else [f])
    return out


def feature_matching(real_feats, fake_feats) -> torch.Tensor:
    """``sum_l mean|D_l(real) - D_l(fake)|`` over nested per-scale feature lists."""
    real_flat, fake_flat = _flatten(real_feats), _flatten(fake_feats)
    if len(real_flat) != len(fake_flat):
        raise ContractError(f"feature lists differ in layer count ({len(real_flat)} vs {len(fake_flat)})")
    if not real_flat:
        return torch.zeros(())
    total = 0.0
    for r, g in zip(real_flat, fake_flat):
        if r.shape != g.shape:
            raise ContractError(f"feature map shapes differ: {tuple(r.shape)} vs {tuple(g.shape)}")
        total = total + (r.detach() - g).abs().mean()
    return total


def loss_im(logits, labels, real_feats, fake_feats, epoch: int, anchor=None) -> torch.Tensor:
    """``gamma * CE + beta * FM`` with ``(gamma, beta) = gamma_schedule(epoch)``.

    ``fake_feats`` may be None when beta is 0. ``anchor`` is an optional
    extra term (already weighted) added unchanged.
    """
    gamma, beta = gamma_schedule(epoch)
    ce = F.cross_entropy(logits, labels)
    total = gamma * ce
    if fake_feats is not None:
        total = total + beta * feature_matching(real_feats, fake_feats)
    if anchor is not None:
        total = total + anchor
    return total
