"""Differentiable building blocks: affine coupling flows, FFT block, WaveNet block, MAS.

Tensors use the ``[B, C, T]`` layout throughout; masks are ``[B, 1, T]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ContractError, InputError


def sequence_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    if max_len is None:
        max_len = int(lengths.max())
    pos = torch.arange(max_len, device=lengths.device)
    return pos[None, :] < lengths[:, None]


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``x`` over positions where ``mask`` is set; padded values never leak in."""
    mask = mask.to(x.dtype).expand_as(x)
    return torch.where(mask > 0, x, torch.zeros_like(x)).sum() / mask.sum().clamp(min=1.0)


class LayerNorm(nn.Module):
    """Channel-wise layer norm for ``[B, C, T]`` tensors."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        x = x.transpose(1, -1)
        x = F.layer_norm(x, (self.channels,), self.gamma, self.beta, self.eps)
        return x.transpose(1, -1)


class WaveNetBlock(nn.Module):
    """Gated dilated-convolution residual stack; conditioning is added before the gate."""

    def __init__(self, channels, kernel_size=5, n_layers=4, cond_channels=0,
                 p_dropout=0.0, zero_out=False):
        super().__init__()
        assert kernel_size % 2 == 1
        self.channels = channels
        self.n_layers = n_layers
        self.cond_channels = cond_channels
        self.in_layers = nn.ModuleList()
        self.res_skip_layers = nn.ModuleList()
        self.drop = nn.Dropout(p_dropout)
        if cond_channels:
            self.cond_layer = nn.Conv1d(cond_channels, 2 * channels * n_layers, 1)
        for i in range(n_layers):
            dilation = 2 ** i
            padding = (kernel_size * dilation - dilation) // 2
            self.in_layers.append(nn.Conv1d(channels, 2 * channels, kernel_size,
                                            dilation=dilation, padding=padding))
            res_skip = 2 * channels if i < n_layers - 1 else channels
            self.res_skip_layers.append(nn.Conv1d(channels, res_skip, 1))
        self.out_proj = nn.Conv1d(channels, channels, 1)
        if zero_out:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)

    def forward(self, x, x_mask=None, cond=None):
        if x_mask is None:
            x_mask = torch.ones_like(x[:, :1])
        if x.shape[1] != self.channels:
            raise ContractError(f"WaveNetBlock expects {self.channels} channels, got {x.shape[1]}")
        if cond is not None:
            if not self.cond_channels or cond.shape[1] != self.cond_channels:
                raise ContractError("conditioning width does not match WaveNetBlock")
            if cond.shape[-1] not in (1, x.shape[-1]):
                raise ContractError("conditioning length does not match input length")
            cond = self.cond_layer(cond)
        output = torch.zeros_like(x)
        c = self.channels
        for i in range(self.n_layers):
            x_in = self.in_layers[i](x)
            if cond is not None:
                x_in = x_in + cond[:, i * 2 * c:(i + 1) * 2 * c]
            acts = torch.tanh(x_in[:, :c]) * torch.sigmoid(x_in[:, c:])
            acts = self.drop(acts)
            res_skip = self.res_skip_layers[i](acts)
            if i < self.n_layers - 1:
                x = (x + res_skip[:, :c]) * x_mask
                output = output + res_skip[:, c:]
            else:
                output = output + res_skip
        return self.out_proj(output * x_mask) * x_mask


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, channels, n_heads, p_dropout=0.0):
        super().__init__()
        assert channels % n_heads == 0
        self.n_heads = n_heads
        self.k_channels = channels // n_heads
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.out = nn.Conv1d(channels, channels, 1)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, x_mask):
        b, c, t = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=1)
        q = q.view(b, self.n_heads, self.k_channels, t).transpose(2, 3)
        k = k.view(b, self.n_heads, self.k_channels, t)
        v = v.view(b, self.n_heads, self.k_channels, t).transpose(2, 3)
        scores = torch.matmul(q, k) / math.sqrt(self.k_channels)  # [b, h, t, t]
        key_mask = x_mask.unsqueeze(1) > 0  # [b, 1, 1, t]
        scores = scores.masked_fill(~key_mask, float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = torch.matmul(attn, v).transpose(2, 3).reshape(b, c, t)
        return self.out(out)


class FFTBlock(nn.Module):
    """Feed-Forward Transformer block: self-attention + conv feed-forward, post-norm residuals."""

    def __init__(self, channels, n_heads=2, filter_channels=None, kernel_size=3, p_dropout=0.0):
        super().__init__()
        filter_channels = filter_channels or 4 * channels
        self.attn = MultiHeadSelfAttention(channels, n_heads, p_dropout)
        self.norm1 = LayerNorm(channels)
        self.conv1 = nn.Conv1d(channels, filter_channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_channels, channels, kernel_size, padding=kernel_size // 2)
        self.norm2 = LayerNorm(channels)
        self.drop = nn.Dropout(p_dropout)

    def forward(self, x, x_mask):
        if not bool((x_mask.sum(dim=-1) > 0).all()):
            raise InputError("FFTBlock received a sequence with no valid positions")
        x = x * x_mask
        x = self.norm1(x + self.drop(self.attn(x, x_mask)))
        x = x * x_mask
        y = self.conv2(self.drop(torch.relu(self.conv1(x))) * x_mask)
        x = self.norm2(x + self.drop(y * x_mask))
        return x * x_mask


def sinusoidal_positions(length, channels, dtype=torch.float32):
    pos = torch.arange(length, dtype=dtype)[:, None]
    div = torch.exp(torch.arange(0, channels, 2, dtype=dtype) * (-math.log(10000.0) / channels))
    pe = torch.zeros(length, channels, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, :channels // 2]
    return pe.T.unsqueeze(0)  # [1, C, T]


def coupling_masks(channels: int, n_flows: int) -> list[list[int]]:
    """Conditioning masks (1 = passes through, conditions the rest).

    Three or fewer channels rotate a single conditioning coordinate;
    wider inputs alternate between the two halves.
    """
    masks = []
    for i in range(n_flows):
        if channels <= 3:
            m = [0] * channels
            m[i % channels] = 1
        else:
            half = channels // 2
            m = [1] * half + [0] * (channels - half)
            if i % 2:
                m = m[::-1]
        masks.append(m)
    return masks


class _MLPNet(nn.Module):
    def __init__(self, in_channels, hidden, out_channels, cond_channels):
        super().__init__()
        self.l1 = nn.Conv1d(in_channels + cond_channels, hidden, 1)
        self.l2 = nn.Conv1d(hidden, hidden, 1)
        self.out = nn.Conv1d(hidden, out_channels, 1)

    def forward(self, x, x_mask, cond):
        if cond is not None:
            x = torch.cat([x, cond.expand(-1, -1, x.shape[-1])], dim=1)
        h = torch.tanh(self.l1(x))
        h = torch.tanh(self.l2(h))
        return self.out(h) * x_mask


class _WaveNetNet(nn.Module):
    def __init__(self, in_channels, hidden, out_channels, cond_channels, kernel_size, n_layers, p_dropout):
        super().__init__()
        self.pre = nn.Conv1d(in_channels, hidden, 1)
        self.wn = WaveNetBlock(hidden, kernel_size, n_layers, cond_channels, p_dropout)
        self.out = nn.Conv1d(hidden, out_channels, 1)

    def forward(self, x, x_mask, cond):
        h = self.pre(x) * x_mask
        h = self.wn(h, x_mask, cond)
        return self.out(h) * x_mask


class AffineCoupling(nn.Module):
    """y_b = x_b;  y_rest = x_rest * exp(s(x_b)) + t(x_b).

    The scale/shift network sees only the pass-through coordinates (plus
    conditioning), so the Jacobian is triangular and ``log|det|`` is the sum
    of log-scales over transformed coordinates and valid frames. The output
    projection is zero-initialised, making a fresh layer the identity.
    """

    def __init__(self, channels, mask, hidden=64, cond_channels=0, subnet="wavenet",
                 kernel_size=5, n_layers=4, p_dropout=0.0, scale_limit=4.0):
        super().__init__()
        if len(mask) != channels:
            raise ContractError("coupling mask length must equal channel count")
        self.channels = channels
        self.cond_channels = cond_channels
        self.scale_limit = scale_limit
        self.register_buffer("mask", torch.tensor(mask, dtype=torch.float32).view(1, -1, 1))
        if subnet == "mlp":
            self.net = _MLPNet(channels, hidden, 2 * channels, cond_channels)
        elif subnet == "wavenet":
            self.net = _WaveNetNet(channels, hidden, 2 * channels, cond_channels,
                                   kernel_size, n_layers, p_dropout)
        else:
            raise ValueError(f"unknown subnet {subnet!r}")
        nn.init.zeros_(self.net.out.weight)
        nn.init.zeros_(self.net.out.bias)

    def _params(self, x, x_mask, cond):
        if cond is not None and (not self.cond_channels or cond.shape[1] != self.cond_channels):
            raise ContractError("coupling conditioning width mismatch")
        if cond is not None and cond.shape[0] != x.shape[0]:
            raise ContractError("coupling conditioning batch mismatch")
        b = self.mask.to(x.dtype)
        st = self.net(x * b, x_mask, cond)
        shift, raw = st[:, :self.channels], st[:, self.channels:]
        # soft clamp keeps exp() bounded without breaking invertibility
        logs = self.scale_limit * torch.tanh(raw / self.scale_limit)
        keep = (1 - b) * x_mask
        return shift * keep, logs * keep, b

    def forward(self, x, x_mask=None, cond=None, reverse=False):
        if x.shape[1] != self.channels:
            raise ContractError(f"coupling expects {self.channels} channels, got {x.shape[1]}")
        if x_mask is None:
            x_mask = torch.ones_like(x[:, :1])
        shift, logs, b = self._params(x, x_mask, cond)
        if not reverse:
            y = b * x + (1 - b) * (x * torch.exp(logs) + shift)
            logdet = logs.sum(dim=(1, 2))
        else:
            y = b * x + (1 - b) * (x - shift) * torch.exp(-logs)
            logdet = -logs.sum(dim=(1, 2))
        return y * x_mask, logdet


class CouplingStack(nn.Module):
    def __init__(self, channels, n_flows=4, hidden=64, cond_channels=0, subnet="wavenet",
                 kernel_size=5, n_layers=4, p_dropout=0.0, masks=None, scale_limit=4.0):
        super().__init__()
        masks = masks or coupling_masks(channels, n_flows)
        self.flows = nn.ModuleList([
            AffineCoupling(channels, m, hidden, cond_channels, subnet, kernel_size,
                           n_layers, p_dropout, scale_limit)
            for m in masks
        ])

    def forward(self, x, x_mask=None, cond=None, reverse=False):
        logdet = torch.zeros(x.shape[0], dtype=x.dtype, device=x.device)
        flows = reversed(self.flows) if reverse else self.flows
        for flow in flows:
            x, ld = flow(x, x_mask, cond, reverse=reverse)
            logdet = logdet + ld
        return x, logdet


@dataclass
class AlignmentPath:
    durations: np.ndarray  # [L], frames per phoneme
    score: float

    def path_matrix(self) -> np.ndarray:
        L, T = len(self.durations), int(self.durations.sum())
        path = np.zeros((L, T))
        ends = np.cumsum(self.durations)
        starts = ends - self.durations
        for i, (s, e) in enumerate(zip(starts, ends)):
            path[i, s:e] = 1
        return path


def path_score(loglik: np.ndarray, durations) -> float:
    """Sum of ``loglik`` along the path implied by ``durations``, accumulated in frame order."""
    rows = np.repeat(np.arange(len(durations)), durations)
    return float(np.sum(loglik[rows, np.arange(rows.size)]))


def monotonic_align(loglik) -> AlignmentPath:
    """Best monotone, non-skipping path through an [L, T] log-likelihood lattice.

    Ties prefer staying on the current phoneme while backtracking, which
    places each transition at the earliest frame consistent with optimality
    (last transition decided first).
    """
    loglik = np.asarray(loglik, dtype=np.float64)
    if loglik.ndim != 2:
        raise ContractError("loglik must be a 2-D [L, T] array")
    L, T = loglik.shape
    if L == 0 or L > T:
        raise InputError(f"no monotone alignment for L={L} phonemes over T={T} frames")
    if np.any(np.isnan(loglik)) or np.any(np.isposinf(loglik)):
        raise InputError("loglik must be finite or -inf")

    neg = -np.inf
    q = np.full((L, T), neg)
    q[0, 0] = loglik[0, 0]
    for t in range(1, T):
        stay = q[:, t - 1]
        advance = np.concatenate([[neg], q[:-1, t - 1]])
        q[:, t] = np.maximum(stay, advance) + loglik[:, t]
    durations = np.zeros(L, dtype=np.int64)
    i = L - 1
    for t in range(T - 1, -1, -1):
        durations[i] += 1
        if t == 0:
            break
        if i == 0:
            continue
        # frames 0..t-1 must still cover phonemes 0..i-1, hence the forced move at i == t
        if i == t or q[i - 1, t - 1] > q[i, t - 1]:
            i -= 1
    assert i == 0 and durations.min() >= 1
    return AlignmentPath(durations, path_score(loglik, durations))


def batch_monotonic_align(loglik: torch.Tensor, text_lengths, frame_lengths) -> torch.Tensor:
    """Per-utterance MAS over a padded ``[B, L, T]`` batch; returns integer durations ``[B, L]``."""
    ll = loglik.detach().cpu().double().numpy()
    out = np.zeros(ll.shape[:2], dtype=np.int64)
    for b in range(ll.shape[0]):
        lb, tb = int(text_lengths[b]), int(frame_lengths[b])
        out[b, :lb] = monotonic_align(ll[b, :lb, :tb]).durations
    return torch.from_numpy(out).to(loglik.device)
