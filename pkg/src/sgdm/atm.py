"""EEG encoder: channel embedding, channel-wise attention, temporal-spatial
convolution and a residual MLP projector into the semantic space.

Tensor layout inside the encoder is ``[batch, channels, time, features]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sgdm.clip import info_nce_loss
from sgdm.errors import InvalidInput


@dataclass
class AtmConfig:
    n_channels: int = 64
    n_samples: int = 250
    embed_dim: int = 64  # D, shared semantic space
    feature_dim: int = 8  # d
    embed_kernel: int = 25
    embed_stride: int = 25
    conv_bias: bool = False
    positional: str = "learned"  # or "sinusoidal"
    key_dim: int = 16  # d_k
    temporal_kernel: int = 3
    hidden_dim: int = 256
    dropout: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.5
    tau: float = 0.07

    @property
    def n_steps(self) -> int:
        """T', the embedded sequence length."""
        if self.n_samples < self.embed_kernel:
            raise InvalidInput(f"{self.n_samples} samples shorter than the {self.embed_kernel}-tap kernel")
        return (self.n_samples - self.embed_kernel) // self.embed_stride + 1


def sinusoidal_encoding(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(d, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)) / d)
    return torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle)).float()


class ChannelEmbedding(nn.Module):
    """H_c = Conv1D(e_c) + P_t with one kernel shared by all channels."""

    def __init__(self, cfg: AtmConfig):
        super().__init__()
        self.conv = nn.Conv1d(1, cfg.feature_dim, cfg.embed_kernel, stride=cfg.embed_stride,
                              bias=cfg.conv_bias)
        pe = sinusoidal_encoding(cfg.n_steps, cfg.feature_dim)
        if cfg.positional == "learned":
            self.pos = nn.Parameter(pe * 0.1)
        elif cfg.positional == "sinusoidal":
            self.register_buffer("pos", pe)
        else:
            raise InvalidInput(f"unknown positional encoding {cfg.positional!r}")
        self.kernel = cfg.embed_kernel

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, t = x.shape
        if t < self.kernel:
            raise InvalidInput(f"{t} samples shorter than the {self.kernel}-tap kernel")
        h = self.conv(x.reshape(b * c, 1, t))  # [b*c, d, T']
        h = h.reshape(b, c, h.shape[1], h.shape[2]).transpose(2, 3)
        return h + self.pos


class ChannelAttention(nn.Module):
    """Self-attention across channels; each channel's token is its flattened T' x d embedding."""

    def __init__(self, n_steps: int, feature_dim: int, key_dim: int):
        super().__init__()
        width = n_steps * feature_dim
        self.key_dim = key_dim
        self.w_q = nn.Linear(width, key_dim, bias=False)
        self.w_k = nn.Linear(width, key_dim, bias=False)
        self.w_v = nn.Linear(width, width, bias=False)
        nn.init.normal_(self.w_v.weight, std=0.02 / math.sqrt(width))

    def weights(self, h: torch.Tensor) -> torch.Tensor:
        tokens = h.flatten(2)
        scores = self.w_q(tokens) @ self.w_k(tokens).transpose(1, 2) / math.sqrt(self.key_dim)
        return scores.softmax(dim=-1)

    def forward(self, h: torch.Tensor, return_weights: bool = False):
        tokens = h.flatten(2)
        attn = self.weights(h)
        out = (attn @ self.w_v(tokens)).reshape(h.shape) + h
        return (out, attn) if return_weights else out


class TemporalSpatialConv(nn.Module):
    """F = ReLU(W_t * H' + W_s * H' + b).

    The temporal kernel runs along time (features in, features out); the
    spatial kernel spans the whole channel axis.
    """

    def __init__(self, n_channels: int, feature_dim: int, temporal_kernel: int):
        super().__init__()
        if temporal_kernel % 2 == 0:
            raise InvalidInput("temporal kernel must have odd length")
        self.w_t = nn.Conv1d(feature_dim, feature_dim, temporal_kernel,
                             padding=temporal_kernel // 2, bias=False)
        self.w_s = nn.Parameter(torch.randn(n_channels, n_channels) / math.sqrt(n_channels))
        self.b = nn.Parameter(torch.zeros(feature_dim))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, c, t, d = h.shape
        temporal = self.w_t(h.reshape(b * c, t, d).transpose(1, 2)).transpose(1, 2).reshape(b, c, t, d)
        spatial = torch.einsum("oc,bctd->botd", self.w_s, h)
        return F.relu(temporal + spatial + self.b)


class Projector(nn.Module):
    """Z = W_2 r + b_2 with r = LayerNorm(GELU(h) + h), h = W_1 LayerNorm(Flatten(F)) + b_1."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, dropout: float = 0.0):
        super().__init__()
        self.in_dim = in_dim
        self.drop = nn.Dropout(dropout)
        self.ln_in = nn.LayerNorm(in_dim)
        self.w1 = nn.Linear(in_dim, hidden_dim)
        self.ln_post = nn.LayerNorm(hidden_dim)
        self.w2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = f.flatten(1)
        if x.shape[1] != self.in_dim:
            raise InvalidInput(f"flattened features have {x.shape[1]} dims, projector expects {self.in_dim}")
        h = self.w1(self.drop(self.ln_in(x)))
        return self.w2(self.ln_post(self.drop(F.gelu(h)) + h))


class EEGFrontEnd(nn.Module):
    """Embedding plus channel attention; shared architecture with the structure predictor."""

    def __init__(self, cfg: AtmConfig):
        super().__init__()
        self.embed = ChannelEmbedding(cfg)
        self.attention = ChannelAttention(cfg.n_steps, cfg.feature_dim, cfg.key_dim)

    def forward(self, x):
        return self.attention(self.embed(x))


class ATM(nn.Module):
    def __init__(self, cfg: AtmConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or AtmConfig()
        if cfg.lambda1 < 0 or cfg.lambda2 < 0 or cfg.lambda1 + cfg.lambda2 == 0:
            raise InvalidInput("loss weights must be non-negative and not both zero")
        self.front = EEGFrontEnd(cfg)
        self.conv = TemporalSpatialConv(cfg.n_channels, cfg.feature_dim, cfg.temporal_kernel)
        self.projector = Projector(cfg.n_channels * cfg.n_steps * cfg.feature_dim, cfg.hidden_dim,
                                   cfg.embed_dim, cfg.dropout)
        self.losses: list[float] = []

    # stage-wise access mirrors the four published steps
    def embed_channels(self, x):
        return self.front.embed(x)

    def channel_attention(self, h):
        return self.front.attention(h)

    def temporal_spatial_conv(self, h):
        return self.conv(h)

    def project_semantic(self, f):
        return self.projector(f)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Raw (unnormalized) Z_E for a batch ``[B, C, T]``."""
        return self.projector(self.conv(self.front(x)))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self(x), dim=-1)

    @torch.no_grad()
    def embed(self, data, batch_size: int = 256) -> np.ndarray:
        data = torch.as_tensor(np.asarray(data), dtype=next(self.parameters()).dtype)
        out = [self.encode(data[i:i + batch_size]) for i in range(0, len(data), batch_size)]
        return torch.cat(out).numpy().astype(np.float64)

    def meta(self) -> dict:
        return {"config": asdict(self.cfg), "losses": self.losses}

    @classmethod
    def from_meta(cls, meta: dict) -> "ATM":
        m = cls(AtmConfig(**meta["config"]))
        m.losses = list(meta.get("losses", []))
        return m


def semantic_loss(z_e: torch.Tensor, z_i: torch.Tensor, lambda1: float, lambda2: float,
                  tau: float) -> torch.Tensor:
    """lambda1 * InfoNCE + lambda2 * mean squared L2 distance, on normalized Z_E."""
    z_e = F.normalize(z_e, dim=-1)
    loss = z_e.new_zeros(())
    if lambda1:
        loss = loss + lambda1 * info_nce_loss(z_e, z_i, tau)
    if lambda2:
        loss = loss + lambda2 * ((z_e - z_i) ** 2).sum(-1).mean()
    return loss


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    noise_aug: float = 0.0  # std of Gaussian noise added to training inputs
    seed: int = 0
    losses: list = field(default_factory=list)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        idx = perm[i:i + batch_size]
        if len(idx) >= 2:
            yield idx


def train_semantic(data, targets, model: ATM, config: TrainConfig | None = None,
                   lambda1: float | None = None, lambda2: float | None = None) -> ATM:
    """Fit the encoder to unit-norm image embeddings ``targets``.

    ``data`` is ``[N, C, T]`` EEG. The curve in ``model.losses`` starts with
    the full-data loss before any update, then one entry per epoch.
    """
    config = config or TrainConfig()
    l1 = model.cfg.lambda1 if lambda1 is None else lambda1
    l2 = model.cfg.lambda2 if lambda2 is None else lambda2
    if len(data) == 0:
        raise InvalidInput("no training data")
    if l1 < 0 or l2 < 0 or l1 + l2 == 0:
        raise InvalidInput("loss weights must be non-negative and not both zero")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(data), dtype=dtype)
    y = torch.as_tensor(np.asarray(targets), dtype=dtype)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    def full_loss():
        with torch.no_grad():
            return float(semantic_loss(model(x), y, l1, l2, model.cfg.tau)) if len(x) >= 2 else float("nan")

    model.train()
    curve = [full_loss()]
    for _ in range(config.epochs):
        tot, n = 0.0, 0
        for idx in _batches(len(x), config.batch_size, gen):
            xb = x[idx]
            if config.noise_aug:
                xb = xb + config.noise_aug * torch.randn(xb.shape, generator=gen, dtype=dtype)
            loss = semantic_loss(model(xb), y[idx], l1, l2, model.cfg.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            n += len(idx)
        curve.append(tot / max(n, 1))
    model.eval()
    model.losses = curve
    config.losses[:] = curve
    return model


def epochs_to_array(epochs: Sequence) -> np.ndarray:
    return np.stack([e.data for e in epochs]).astype(np.float32)
