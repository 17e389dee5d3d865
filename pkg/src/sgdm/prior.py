"""Diffusion prior in the semantic embedding space.

Noising is variance-exploding: ``z_t = z + sigma_t * eps``, with no signal
attenuation. The denoiser predicts ``eps`` from ``[z_t, timestep embedding,
Z_E]``; sampling walks the schedule downwards with the deterministic update
``z <- z - (sigma_t - sigma_{t-1}) * eps_hat`` (``sigma_0 = 0``).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sgdm.errors import InvalidInput


class NoiseSchedule:
    """sigma_t for t = 1..T_steps, stored 0-based."""

    def __init__(self, sigmas):
        s = torch.as_tensor(np.asarray(sigmas, dtype=np.float64))
        if s.ndim != 1 or len(s) < 1:
            raise InvalidInput("schedule must be a non-empty vector")
        if torch.any(s < 0) or torch.any(s[1:] < s[:-1]):
            raise InvalidInput("sigmas must be non-negative and non-decreasing")
        self.sigmas = s

    @classmethod
    def geometric(cls, sigma_min: float = 0.05, sigma_max: float = 5.0, steps: int = 50) -> "NoiseSchedule":
        if not 0 < sigma_min <= sigma_max:
            raise InvalidInput("need 0 < sigma_min <= sigma_max")
        return cls(np.geomspace(sigma_min, sigma_max, steps))

    def __len__(self) -> int:
        return len(self.sigmas)

    def sigma(self, t) -> torch.Tensor:
        """sigma_t for 1-based step(s) ``t``; ``t = 0`` maps to 0."""
        t = torch.as_tensor(t)
        padded = torch.cat([self.sigmas.new_zeros(1), self.sigmas])
        return padded[t]


def add_noise(z: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > len(schedule)):
        raise InvalidInput(f"step must be in 1..{len(schedule)}")
    sigma = schedule.sigma(t).to(z.dtype)
    if sigma.ndim:
        sigma = sigma[:, None]
    return z + sigma * eps


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


@dataclass
class PriorConfig:
    embed_dim: int = 64
    time_dim: int = 32
    hidden_dim: int = 512
    n_layers: int = 3
    sigma_min: float = 0.05
    sigma_max: float = 5.0
    steps: int = 50


class DiffusionPrior(nn.Module):
    def __init__(self, cfg: PriorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PriorConfig()
        self.schedule = NoiseSchedule.geometric(cfg.sigma_min, cfg.sigma_max, cfg.steps)
        layers, width = [], 2 * cfg.embed_dim + cfg.time_dim
        for _ in range(cfg.n_layers - 1):
            layers += [nn.Linear(width, cfg.hidden_dim), nn.SiLU()]
            width = cfg.hidden_dim
        layers.append(nn.Linear(width, cfg.embed_dim))
        self.net = nn.Sequential(*layers)
        self.losses: list[float] = []

    @property
    def in_dim(self) -> int:
        return 2 * self.cfg.embed_dim + self.cfg.time_dim

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, z_e: torch.Tensor) -> torch.Tensor:
        """Predicted noise for noisy embeddings ``z_t`` at 1-based steps ``t``."""
        sigma = self.schedule.sigma(t).to(z_t.dtype)[:, None]
        c_in = 1.0 / torch.sqrt(1.0 + sigma ** 2)
        temb = timestep_embedding(t, self.cfg.time_dim).to(z_t.dtype)
        return self.net(torch.cat([z_t * c_in, temb, z_e], dim=-1))

    def meta(self) -> dict:
        return {"config": asdict(self.cfg), "sigmas": self.schedule.sigmas.tolist(),
                "losses": self.losses}

    @classmethod
    def from_meta(cls, meta: dict) -> "DiffusionPrior":
        m = cls(PriorConfig(**meta["config"]))
        m.schedule = NoiseSchedule(meta["sigmas"])
        m.losses = list(meta.get("losses", []))
        return m


def prior_loss(z_i: torch.Tensor, z_e: torch.Tensor, denoiser, schedule: NoiseSchedule,
               generator: torch.Generator | None = None, t=None, eps=None) -> torch.Tensor:
    """Monte-Carlo estimate of E_{t, eps} ||eps_hat - eps||^2 over the batch.

    ``denoiser(z_t, t, z_e)`` may be any callable; ``t`` (1-based) and
    ``eps`` are drawn uniformly / from N(0, I) unless supplied.
    """
    if z_i.shape[0] == 0:
        raise InvalidInput("empty batch")
    b = z_i.shape[0]
    if t is None:
        t = torch.randint(1, len(schedule) + 1, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(z_i.shape, generator=generator, dtype=z_i.dtype)
    z_t = add_noise(z_i, t, eps, schedule)
    return ((denoiser(z_t, t, z_e) - eps) ** 2).sum(-1).mean()


@torch.no_grad()
def sample_prior(z_e, model: DiffusionPrior, n_sample_steps: int | None = None, seed: int = 0) -> np.ndarray:
    """Deterministic strided sampler; returns L2-normalized embeddings.

    ``z_e`` may be one ``[D]`` vector or a ``[B, D]`` batch; each row gets its
    own starting noise drawn from ``seed``.
    """
    steps = len(model.schedule) if n_sample_steps is None else n_sample_steps
    if steps < 1:
        raise InvalidInput("need at least one sampling step")
    dtype = next(model.parameters()).dtype
    z_e = torch.as_tensor(np.asarray(z_e), dtype=dtype)
    single = z_e.ndim == 1
    if single:
        z_e = z_e[None]
    gen = torch.Generator().manual_seed(seed)
    T = len(model.schedule)
    ts = np.unique(np.round(np.linspace(T, 1, min(steps, T))).astype(int))[::-1]
    z = torch.randn(z_e.shape, generator=gen, dtype=torch.float64).to(dtype) * model.schedule.sigma(T).to(dtype)
    for k, t in enumerate(ts):
        t_prev = int(ts[k + 1]) if k + 1 < len(ts) else 0
        tt = torch.full((len(z),), int(t), dtype=torch.long)
        eps_hat = model(z, tt, z_e)
        z = z - (model.schedule.sigma(int(t)) - model.schedule.sigma(t_prev)).to(dtype) * eps_hat
    out = F.normalize(z, dim=-1).numpy().astype(np.float64)
    return out[0] if single else out


@dataclass
class PriorTrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    losses: list = field(default_factory=list)


def train_prior(z_i, z_e, model: DiffusionPrior, config: PriorTrainConfig | None = None) -> DiffusionPrior:
    """Fit the denoiser on paired (image embedding, EEG embedding) rows."""
    config = config or PriorTrainConfig()
    dtype = next(model.parameters()).dtype
    z_i = torch.as_tensor(np.asarray(z_i), dtype=dtype)
    z_e = torch.as_tensor(np.asarray(z_e), dtype=dtype)
    if len(z_i) == 0 or len(z_i) != len(z_e):
        raise InvalidInput("need equal, non-zero numbers of image and EEG embeddings")
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    curve = []
    for _ in range(config.epochs):
        perm = torch.randperm(len(z_i), generator=gen)
        tot = 0.0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss = prior_loss(z_i[idx], z_e[idx], model, model.schedule, gen)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        curve.append(tot / len(perm))
    model.eval()
    model.losses = curve
    config.losses[:] = curve
    return model
