"""Dual-conditioned latent diffusion generator.

The denoiser is a three-level U-Net over structure-shaped latents. The
semantic embedding enters every level through its own cross-attention term
(key/value from the embedding projected to a few tokens, added next to the
ordinary self-attention). The structure map drives a trainable copy of the
encoder half whose features reach the U-Net skips through zero-initialized
1x1 projections, each scaled by ``control_rate``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sgdm.errors import InvalidInput, InvalidState
from sgdm.prior import timestep_embedding


@dataclass
class GenConfig:
    latent_channels: int = 4
    latent_size: int = 64
    channels: tuple = (32, 64, 128)
    embed_dim: int = 64
    n_tokens: int = 4
    attn_dim: int = 64
    self_attn_max_tokens: int = 256
    train_steps: int = 100  # T_gen
    structural: bool = True
    global_semantic: bool = False  # also add the embedding to the timestep embedding
    control_rate: float = 0.5
    semantic_dropout: float = 0.1
    structure_dropout: float = 0.1

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if not 0.0 <= self.control_rate <= 1.0:
            raise InvalidInput("control_rate must lie in [0, 1]")


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.n1 = nn.GroupNorm(_groups(c_in), c_in)
        self.c1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t = nn.Linear(t_dim, c_out)
        self.n2 = nn.GroupNorm(_groups(c_out), c_out)
        self.c2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.c1(F.silu(self.n1(x))) + self.t(temb)[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return h + self.skip(x)


class SemanticAttention(nn.Module):
    """Self-attention (small maps only) plus a decoupled image-embedding cross-attention term."""

    def __init__(self, ch: int, attn_dim: int, ctx_dim: int, use_self: bool):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, attn_dim, bias=False)
        self.use_self = use_self
        if use_self:
            self.k = nn.Linear(ch, attn_dim, bias=False)
            self.v = nn.Linear(ch, attn_dim, bias=False)
            self.out = nn.Linear(attn_dim, ch)
        self.k_ip = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.v_ip = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.out_ip = nn.Linear(attn_dim, ch)
        nn.init.zeros_(self.out_ip.weight)
        nn.init.zeros_(self.out_ip.bias)
        self.scale = attn_dim ** -0.5

    def forward(self, x, ctx, sem_keep):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        q = self.q(tokens)
        out = x.new_zeros(b, h * w, c)
        if self.use_self:
            a = (q @ self.k(tokens).transpose(1, 2) * self.scale).softmax(-1)
            out = out + self.out(a @ self.v(tokens))
        a_ip = (q @ self.k_ip(ctx).transpose(1, 2) * self.scale).softmax(-1)
        out = out + sem_keep[:, None, None] * self.out_ip(a_ip @ self.v_ip(ctx))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Encoder(nn.Module):
    """Encoder half: returns one feature map per level plus the middle block output."""

    def __init__(self, cfg: GenConfig, t_dim: int):
        super().__init__()
        chs = cfg.channels
        self.inp = nn.Conv2d(cfg.latent_channels, chs[0], 3, padding=1)
        self.res = nn.ModuleList()
        self.attn = nn.ModuleList()
        self.down = nn.ModuleList()
        size, prev = cfg.latent_size, chs[0]
        for i, ch in enumerate(chs):
            self.res.append(ResBlock(prev, ch, t_dim))
            self.attn.append(SemanticAttention(ch, cfg.attn_dim, cfg.attn_dim, size * size <= cfg.self_attn_max_tokens))
            self.down.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(chs) - 1 else nn.Identity())
            if i < len(chs) - 1:
                size //= 2
            prev = ch
        self.mid = ResBlock(prev, prev, t_dim)
        self.mid_attn = SemanticAttention(prev, cfg.attn_dim, cfg.attn_dim, size * size <= cfg.self_attn_max_tokens)

    def forward(self, h, temb, ctx, sem_keep):
        feats = []
        for res, attn, down in zip(self.res, self.attn, self.down):
            h = attn(res(h, temb), ctx, sem_keep)
            feats.append(h)
            h = down(h)
        h = self.mid_attn(self.mid(h, temb), ctx, sem_keep)
        return feats, h


class StructuralBranch(nn.Module):
    """Trainable encoder copy driven by x_t plus an embedding of S; zero 1x1 outputs."""

    def __init__(self, encoder: Encoder, cfg: GenConfig):
        super().__init__()
        self.copy = copy.deepcopy(encoder)
        c0 = cfg.channels[0]
        self.hint = nn.Sequential(nn.Conv2d(cfg.latent_channels, c0, 3, padding=1), nn.SiLU(),
                                  nn.Conv2d(c0, c0, 3, padding=1))
        self.zero = nn.ModuleList(nn.Conv2d(ch, ch, 1) for ch in cfg.channels)
        self.zero_mid = nn.Conv2d(cfg.channels[-1], cfg.channels[-1], 1)
        for conv in list(self.zero) + [self.zero_mid]:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, x_t, s, temb, ctx, sem_keep):
        h = self.copy.inp(x_t) + self.hint(s)
        feats, mid = self.copy(h, temb, ctx, sem_keep)
        return [z(f) for z, f in zip(self.zero, feats)], self.zero_mid(mid)


class DualCondUNet(nn.Module):
    def __init__(self, cfg: GenConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GenConfig()
        chs = cfg.channels
        t_dim = 4 * chs[0]
        self.t_dim = t_dim
        self.time = nn.Sequential(nn.Linear(chs[0], t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.ctx = nn.Sequential(nn.Linear(cfg.embed_dim, cfg.n_tokens * cfg.attn_dim))
        self.ctx_norm = nn.LayerNorm(cfg.attn_dim)
        self.z_time = None
        if cfg.global_semantic:
            self.z_time = nn.Linear(cfg.embed_dim, t_dim)
            nn.init.zeros_(self.z_time.weight)
            nn.init.zeros_(self.z_time.bias)
        self.encoder = Encoder(cfg, t_dim)
        self.branch = StructuralBranch(self.encoder, cfg) if cfg.structural else None
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        size = cfg.latent_size // 2 ** (len(chs) - 1)
        prev = chs[-1]
        for i in reversed(range(len(chs))):
            ch = chs[i]
            self.up.append(nn.Upsample(scale_factor=2, mode="nearest") if i < len(chs) - 1 else nn.Identity())
            if i < len(chs) - 1:
                size *= 2
            self.dec.append(ResBlock(prev + ch, ch, t_dim))
            self.dec_attn.append(SemanticAttention(ch, cfg.attn_dim, cfg.attn_dim, size * size <= cfg.self_attn_max_tokens))
            prev = ch
        self.out = nn.Sequential(nn.GroupNorm(_groups(chs[0]), chs[0]), nn.SiLU(),
                                 nn.Conv2d(chs[0], cfg.latent_channels, 3, padding=1))

    def context(self, z):
        return self.ctx_norm(self.ctx(z).reshape(len(z), self.cfg.n_tokens, self.cfg.attn_dim))

    def forward(self, x_t, t, z, s=None, control_rate=None, sem_keep=None, struct_keep=None,
                return_residuals: bool = False):
        """Predicted noise. ``control_rate`` scales every structural residual."""
        b = x_t.shape[0]
        rate = self.cfg.control_rate if control_rate is None else control_rate
        rate = torch.as_tensor(rate, dtype=x_t.dtype)
        if torch.any(rate < 0) or torch.any(rate > 1):
            raise InvalidInput("control_rate must lie in [0, 1]")
        rate = rate.expand(b) if rate.ndim == 0 else rate
        sem_keep = x_t.new_ones(b) if sem_keep is None else sem_keep
        temb = self.time(timestep_embedding(t, self.cfg.channels[0]).to(x_t.dtype))
        ctx = self.context(z)
        if self.z_time is not None:
            temb = temb + sem_keep[:, None] * self.z_time(z)
        feats, h = self.encoder(self.encoder.inp(x_t), temb, ctx, sem_keep)
        residuals = None
        if self.branch is not None:
            if s is None:
                s = torch.zeros_like(x_t)
            if s.shape != x_t.shape:
                raise InvalidInput(f"structure map {tuple(s.shape)} does not match latent {tuple(x_t.shape)}")
            scale = rate if struct_keep is None else rate * struct_keep
            res_feats, res_mid = self.branch(x_t, s, temb, ctx, sem_keep)
            residuals = res_feats + [res_mid]
            feats = [f + scale[:, None, None, None] * r for f, r in zip(feats, res_feats)]
            h = h + scale[:, None, None, None] * res_mid
        for up, dec, attn, skip in zip(self.up, self.dec, self.dec_attn, reversed(feats)):
            h = attn(dec(torch.cat([up(h), skip], dim=1), temb), ctx, sem_keep)
        eps = self.out(h)
        return (eps, residuals) if return_residuals else eps


# ---------------------------------------------------------------- diffusion

def alphas_cumprod(train_steps: int) -> torch.Tensor:
    """Scaled-linear schedule (the 1000-step latent-diffusion one) resampled to ``train_steps``."""
    betas = torch.linspace(0.00085 ** 0.5, 0.012 ** 0.5, 1000, dtype=torch.float64) ** 2
    ac = torch.cumprod(1.0 - betas, 0)
    idx = torch.round(torch.linspace(0, 999, train_steps)).long()
    return ac[idx]


class Generator(nn.Module):
    """U-Net plus its diffusion schedule and latent normalization."""

    def __init__(self, cfg: GenConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GenConfig()
        self.unet = DualCondUNet(cfg)
        self.register_buffer("alphas_cumprod", alphas_cumprod(cfg.train_steps).float())
        self.latent_scale = 1.0
        self.clip_range = 4.0
        self.losses: list[float] = []

    def meta(self) -> dict:
        c = asdict(self.cfg)
        c["channels"] = list(c["channels"])
        return {"config": c, "latent_scale": self.latent_scale, "clip_range": self.clip_range,
                "losses": self.losses}

    @classmethod
    def from_meta(cls, meta: dict) -> "Generator":
        g = cls(GenConfig(**meta["config"]))
        g.latent_scale = meta.get("latent_scale", 1.0)
        g.clip_range = meta.get("clip_range", 4.0)
        g.losses = list(meta.get("losses", []))
        return g

    def sampling_timesteps(self, n_steps: int) -> list[int]:
        T = self.cfg.train_steps
        return [int(t) for t in np.round(np.linspace(T - 1, 0, n_steps, endpoint=False)).astype(int)]

    def denoise_step(self, x_t, t: int, t_prev: int, z, s, control_rate, guidance: float = 1.0):
        """One deterministic update from step ``t`` to ``t_prev`` (``-1`` means clean).

        ``guidance`` != 1 applies classifier-free guidance to the semantic
        condition: eps = eps_u + guidance * (eps_c - eps_u), where eps_u drops
        only the semantic term.
        """
        if x_t.shape[1:] != (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size):
            raise InvalidInput(f"latent shape {tuple(x_t.shape[1:])} does not match the generator")
        if z.shape[-1] != self.cfg.embed_dim:
            raise InvalidInput("semantic embedding has the wrong dimension")
        b = x_t.shape[0]
        s_scaled = None if s is None else s * self.latent_scale
        tt = torch.full((b,), t, dtype=torch.long)
        eps = self.unet(x_t, tt, z, s_scaled, control_rate)
        if guidance != 1.0:
            eps_u = self.unet(x_t, tt, z, s_scaled, control_rate, sem_keep=x_t.new_zeros(b))
            eps = eps_u + guidance * (eps - eps_u)
        a_t = self.alphas_cumprod[t].to(x_t.dtype)
        a_prev = self.alphas_cumprod[t_prev].to(x_t.dtype) if t_prev >= 0 else x_t.new_tensor(1.0)
        x0 = ((x_t - torch.sqrt(1 - a_t) * eps) / torch.sqrt(a_t)).clamp(-self.clip_range, self.clip_range)
        eps = (x_t - torch.sqrt(a_t) * x0) / torch.sqrt(1 - a_t)
        return torch.sqrt(a_prev) * x0 + torch.sqrt(1 - a_prev) * eps


def _tensor(a, dtype):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


@torch.no_grad()
def denoise_step(x_t, t: int, z, s, control_rate: float, gen: Generator, t_prev: int | None = None,
                 guidance: float = 1.0):
    """Public single-step API on numpy/torch inputs (batched ``[B, ...]`` or single)."""
    dtype = next(gen.parameters()).dtype
    x = _tensor(x_t, dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    zz = _tensor(z, dtype).reshape(len(x), -1)
    ss = None
    if s is not None:
        ss = _tensor(s, dtype)
        if ss.shape[-3:] != x.shape[-3:] or ss.numel() != x.numel():
            raise InvalidInput("structure map shape does not match the latent")
        ss = ss.reshape(x.shape)
    if t_prev is None:
        t_prev = t - 1
    out = gen.denoise_step(x, t, t_prev, zz, ss, control_rate, guidance).numpy()
    return out[0] if single else out


@torch.no_grad()
def generate_latents(z, s, n_steps: int, control_rate: float, gen: Generator, seed: int = 0,
                     guidance: float = 1.0) -> np.ndarray:
    if n_steps < 1:
        raise InvalidInput("need at least one denoising step")
    if guidance < 0:
        raise InvalidInput("guidance scale must be >= 0")
    if not 0.0 <= control_rate <= 1.0:
        raise InvalidInput("control_rate must lie in [0, 1]")
    dtype = next(gen.parameters()).dtype
    z = _tensor(z, dtype)
    single = z.ndim == 1
    if single:
        z = z[None]
    b = len(z)
    shape = (b, gen.cfg.latent_channels, gen.cfg.latent_size, gen.cfg.latent_size)
    ss = None
    if s is not None:
        ss = _tensor(s, dtype)
        if tuple(ss.shape[-3:]) != shape[1:] or ss.numel() != int(np.prod(shape)):
            raise InvalidInput("structure map shape does not match the latent")
        ss = ss.reshape(shape)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g, dtype=torch.float32).to(dtype)
    ts = gen.sampling_timesteps(n_steps)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else -1
        x = gen.denoise_step(x, t, t_prev, z, ss, control_rate, guidance)
    out = (x / gen.latent_scale).numpy()
    return out[0] if single else out


def generate(z, s, n_steps: int, control_rate: float, gen: Generator, vae, seed: int = 0,
             batch_size: int = 32, guidance: float = 1.0) -> np.ndarray:
    """Images in [0, 1] decoded through the frozen reference VAE."""
    from sgdm.structure import vae_decode

    if vae is None or not getattr(vae, "trained", False):
        raise InvalidState("a trained reference VAE decoder is required")
    z = np.asarray(z)
    single = z.ndim == 1
    zb = z[None] if single else z
    sb = None if s is None else np.asarray(s).reshape(len(zb), *np.asarray(s).shape[-3:])
    out = []
    for i in range(0, len(zb), batch_size):
        lat = generate_latents(zb[i:i + batch_size], None if sb is None else sb[i:i + batch_size],
                               n_steps, control_rate, gen, seed + i, guidance)
        out.append(np.clip(vae_decode(lat, vae), 0.0, 1.0))
    images = np.concatenate(out).astype(np.float32)
    return images[0] if single else images


@dataclass
class GenTrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    zero_structure: bool = False
    losses: list = field(default_factory=list)


def train_generator(latents, z, s, gen: Generator, vae, dual_encoder=None,
                    config: GenTrainConfig | None = None) -> Generator:
    """Epsilon-prediction training on image latents conditioned on (z_I, S_gt).

    Upstream modules must be frozen. Each condition is dropped per sample with
    its configured probability: the semantic term and the structural residuals
    are multiplied by zero for those samples.
    """
    for name, mod in (("reference VAE", vae), ("dual encoder", dual_encoder)):
        if mod is not None and any(p.requires_grad for p in mod.parameters()):
            raise InvalidState(f"{name} must be frozen before generator training")
    if vae is not None and not getattr(vae, "trained", False):
        raise InvalidState("reference VAE has not been trained")
    config = config or GenTrainConfig()
    dtype = next(gen.parameters()).dtype
    x0 = _tensor(latents, dtype)
    zz = _tensor(z, dtype)
    ss = _tensor(s, dtype) if s is not None else torch.zeros_like(x0)
    if config.zero_structure:
        ss = torch.zeros_like(x0)
    if not len(x0) == len(zz) == len(ss) or len(x0) == 0:
        raise InvalidInput("latents, embeddings and structure maps must align")
    scale = gen.latent_scale = float(1.0 / (x0.std() + 1e-8))
    gen.clip_range = float(max(1.0, (x0.abs().max() * scale).item() * 1.05))
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(gen.unet.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1))
    ac = gen.alphas_cumprod.to(dtype)
    T = gen.cfg.train_steps
    gen.train()
    curve = []
    for _ in range(config.epochs):
        perm = torch.randperm(len(x0), generator=g)
        tot = 0.0
        for i in range(0, len(x0), config.batch_size):
            idx = perm[i:i + config.batch_size]
            b = len(idx)
            xb = x0[idx] * scale
            t = torch.randint(0, T, (b,), generator=g)
            eps = torch.randn(xb.shape, generator=g, dtype=dtype)
            a = ac[t][:, None, None, None]
            x_t = torch.sqrt(a) * xb + torch.sqrt(1 - a) * eps
            sem_keep = (torch.rand(b, generator=g) >= gen.cfg.semantic_dropout).to(dtype)
            struct_keep = (torch.rand(b, generator=g) >= gen.cfg.structure_dropout).to(dtype)
            pred = gen.unet(x_t, t, zz[idx], ss[idx] * scale, 1.0, sem_keep, struct_keep)
            loss = F.mse_loss(pred, eps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * b
        sched.step()
        curve.append(tot / len(x0))
    gen.eval()
    for p in gen.parameters():
        p.requires_grad_(False)
    gen.losses = curve
    config.losses[:] = curve
    return gen
