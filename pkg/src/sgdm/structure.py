"""Structure pathway.

``RefVAE`` stands in for the latent autoencoder whose posterior means are the
reference structure maps S_gt. ``StructurePredictor`` maps EEG to S through
the shared EEG front end, a 1x1 bottleneck and a transposed-convolution stack
(six stride-2 doublings that halve channels, then two stride-1 refiners).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sgdm.atm import AtmConfig, EEGFrontEnd
from sgdm.errors import InvalidInput, InvalidState
from sgdm.metrics import to_gray


@dataclass
class VaeConfig:
    image_size: int = 64
    latent_channels: int = 4
    hidden: int = 16
    downsample: int = 0  # stride-2 stages; 0 keeps the latent at image resolution
    kl_weight: float = 1e-4

    @classmethod
    def paper(cls) -> "VaeConfig":
        """512 x 512 images to a 4 x 64 x 64 latent (8x spatial factor)."""
        return cls(image_size=512, latent_channels=4, hidden=16, downsample=3)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.image_size // (2 ** self.downsample)
        return (self.latent_channels, s, s)


class RefVAE(nn.Module):
    """Three-conv encoder/decoder with a diagonal Gaussian posterior."""

    def __init__(self, cfg: VaeConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or VaeConfig()
        h, c = cfg.hidden, cfg.latent_channels
        enc = [nn.Conv2d(3, h, 3, padding=1), nn.SiLU()]
        for _ in range(cfg.downsample):
            enc += [nn.Conv2d(h, h, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(h, h, 3, padding=1), nn.SiLU(), nn.Conv2d(h, 2 * c, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(c, h, 3, padding=1), nn.SiLU(), nn.Conv2d(h, h, 3, padding=1), nn.SiLU()]
        for _ in range(cfg.downsample):
            dec += [nn.ConvTranspose2d(h, h, 4, stride=2, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(h, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.trained = False
        self.recon_mse = float("nan")
        self.latent_scale = 1.0
        self.losses: list[float] = []

    def posterior(self, x: torch.Tensor):
        mu, logvar = self.encoder(x * 2.0 - 1.0).chunk(2, dim=1)
        return mu, logvar.clamp(-20.0, 10.0)

    def decode(self, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(s))

    def forward(self, x, generator=None):
        mu, logvar = self.posterior(x)
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * noise
        return self.decode(z), mu, logvar

    def freeze(self) -> "RefVAE":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def meta(self) -> dict:
        return {"config": asdict(self.cfg), "trained": self.trained, "recon_mse": self.recon_mse,
                "latent_scale": self.latent_scale, "losses": self.losses}

    @classmethod
    def from_meta(cls, meta: dict) -> "RefVAE":
        m = cls(VaeConfig(**meta["config"]))
        m.trained = bool(meta.get("trained"))
        m.recon_mse = meta.get("recon_mse", float("nan"))
        m.latent_scale = meta.get("latent_scale", 1.0)
        m.losses = list(meta.get("losses", []))
        return m.freeze()


def _images(images, dtype) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    return x[None] if x.ndim == 3 else x


@torch.no_grad()
def vae_encode_reference(images, vae: RefVAE) -> np.ndarray:
    """Posterior-mean structure maps for one image ``[3,H,W]`` or a batch."""
    if not vae.trained:
        raise InvalidState("reference VAE has not been trained")
    single = np.asarray(images).ndim == 3
    x = _images(images, next(vae.parameters()).dtype)
    mu = torch.cat([vae.posterior(x[i:i + 64])[0] for i in range(0, len(x), 64)])
    out = mu.numpy()
    return out[0] if single else out


@torch.no_grad()
def vae_decode(latents, vae: RefVAE) -> np.ndarray:
    s = torch.as_tensor(np.asarray(latents), dtype=next(vae.parameters()).dtype)
    single = s.ndim == 3
    if single:
        s = s[None]
    out = torch.cat([vae.decode(s[i:i + 64]) for i in range(0, len(s), 64)]).numpy()
    return out[0] if single else out


@dataclass
class VaeTrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 2e-3
    seed: int = 0
    losses: list = field(default_factory=list)


def train_vae(images, vae: RefVAE, config: VaeTrainConfig | None = None) -> RefVAE:
    """Fit the autoencoder, record its reconstruction MSE and latent scale, then freeze it."""
    config = config or VaeTrainConfig()
    dtype = next(vae.parameters()).dtype
    x = _images(images, dtype)
    if len(x) == 0:
        raise InvalidInput("no training images")
    gen = torch.Generator().manual_seed(config.seed)
    for p in vae.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(vae.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(config.epochs, 1))
    vae.train()
    curve = []
    for _ in range(config.epochs):
        perm = torch.randperm(len(x), generator=gen)
        tot = 0.0
        for i in range(0, len(x), config.batch_size):
            xb = x[perm[i:i + config.batch_size]]
            recon, mu, logvar = vae(xb, gen)
            kl = 0.5 * (mu ** 2 + logvar.exp() - 1.0 - logvar).mean()
            loss = F.mse_loss(recon, xb) + vae.cfg.kl_weight * kl
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(xb)
        sched.step()
        curve.append(tot / len(x))
    vae.freeze()
    vae.trained = True
    mu = torch.as_tensor(vae_encode_reference(x.numpy(), vae))
    with torch.no_grad():
        vae.recon_mse = float(F.mse_loss(vae.decode(mu), x))
    vae.latent_scale = float(1.0 / (mu.std() + 1e-8))
    vae.losses = curve
    config.losses[:] = curve
    return vae


def structure_to_mask(s, vae: RefVAE, threshold: float = 0.5) -> np.ndarray:
    """Decode a structure map and mark dark pixels (luminance < threshold) as foreground."""
    image = vae_decode(s, vae)
    return image_to_mask(image, threshold)


def image_to_mask(image, threshold: float = 0.5) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 4:
        return np.stack([to_gray(im) < threshold for im in image])
    return to_gray(image) < threshold


def struct_loss(s: torch.Tensor, s_gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every entry of the structure maps."""
    if tuple(s.shape) != tuple(s_gt.shape):
        raise InvalidInput(f"structure map shapes differ: {tuple(s.shape)} vs {tuple(s_gt.shape)}")
    return ((s - s_gt) ** 2).mean()


# ---------------------------------------------------------------- predictor

@dataclass
class StructConfig:
    eeg: AtmConfig = field(default_factory=AtmConfig)
    latent_channels: int = 4
    n_doublings: int = 6
    code_conditioning: bool = False
    code_weight: float = 0.1

    @property
    def bottleneck_channels(self) -> int:
        return self.latent_channels * 2 ** self.n_doublings

    @property
    def output_size(self) -> int:
        return 2 ** self.n_doublings


class StructurePredictor(nn.Module):
    def __init__(self, cfg: StructConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or StructConfig()
        c0 = cfg.bottleneck_channels
        if c0 // 2 ** cfg.n_doublings != cfg.latent_channels:
            raise InvalidInput("bottleneck channels must equal latent channels * 2**n_doublings")
        e = cfg.eeg
        self.front = EEGFrontEnd(e)
        self.to_bottleneck = nn.Linear(e.n_channels * e.n_steps * e.feature_dim, c0)
        self.code_head = nn.Linear(49, c0, bias=False)
        nn.init.zeros_(self.code_head.weight)
        ups, c = [], c0
        for _ in range(cfg.n_doublings):
            ups.append(nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1))
            c //= 2
        self.up = nn.ModuleList(ups)
        self.refine = nn.ModuleList([nn.ConvTranspose2d(c, c, 3, stride=1, padding=1) for _ in range(2)])
        self.code_readout = nn.Conv2d(c, 1, 1)
        self.losses: list[float] = []

    def forward(self, x: torch.Tensor, code: torch.Tensor | None = None, return_sizes: bool = False):
        h = self.to_bottleneck(self.front(x).flatten(1))
        if self.cfg.code_conditioning and code is not None:
            h = h + self.code_head(code.reshape(len(h), 49))
        s = h[:, :, None, None]
        sizes, channels = [s.shape[-1]], [s.shape[1]]
        for layer in self.up:
            s = F.silu(layer(s))
            sizes.append(s.shape[-1])
            channels.append(s.shape[1])
        s = self.refine[1](F.silu(self.refine[0](s)))
        return (s, sizes, channels) if return_sizes else s

    def read_code(self, s: torch.Tensor) -> torch.Tensor:
        """7x7 occupancy estimate pooled from a structure map."""
        return torch.sigmoid(self.code_readout(F.adaptive_avg_pool2d(s, 7)))[:, 0]

    def meta(self) -> dict:
        d = asdict(self.cfg)
        return {"config": d, "losses": self.losses}

    @classmethod
    def from_meta(cls, meta: dict) -> "StructurePredictor":
        c = dict(meta["config"])
        c["eeg"] = AtmConfig(**c["eeg"])
        m = cls(StructConfig(**c))
        m.losses = list(meta.get("losses", []))
        return m


@torch.no_grad()
def predict_structure(data, model: StructurePredictor, code=None, batch_size: int = 128) -> np.ndarray:
    """Structure maps for EEG ``[C, T]`` or ``[B, C, T]``; ``code`` optional 7x7 grid(s)."""
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(data), dtype=dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    c = None
    if code is not None:
        c = torch.as_tensor(np.asarray(code), dtype=dtype)
        if c.shape[-2:] != (7, 7):
            raise InvalidInput("cognitive code must be 7x7")
        c = c.reshape(-1, 7, 7).expand(len(x), 7, 7) if c.ndim == 2 or len(c) == 1 else c
    out = []
    for i in range(0, len(x), batch_size):
        out.append(model(x[i:i + batch_size], None if c is None else c[i:i + batch_size]))
    s = torch.cat(out).numpy()
    return s[0] if single else s


@dataclass
class StructTrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    noise_aug: float = 0.0  # std of Gaussian noise added to training inputs
    seed: int = 0
    use_code_input: bool = False
    losses: list = field(default_factory=list)


def train_structure(data, s_gt, codes, model: StructurePredictor, vae: RefVAE,
                    config: StructTrainConfig | None = None) -> StructurePredictor:
    """Minimize struct_loss plus ``code_weight`` x MSE of the pooled 7x7 readout.

    The reference VAE must already be trained and frozen.
    """
    if not vae.trained or not vae.frozen:
        raise InvalidState("reference VAE must be trained and frozen before structure training")
    config = config or StructTrainConfig()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(data), dtype=dtype)
    y = torch.as_tensor(np.asarray(s_gt), dtype=dtype)
    code = torch.as_tensor(np.asarray(codes), dtype=dtype).reshape(-1, 7, 7)
    if len(x) == 0 or not len(x) == len(y) == len(code):
        raise InvalidInput("need matching non-empty EEG, structure and code arrays")
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=config.lr,
                            weight_decay=config.weight_decay)
    w = model.cfg.code_weight
    model.train()
    curve = []
    for _ in range(config.epochs):
        perm = torch.randperm(len(x), generator=gen)
        tot = 0.0
        for i in range(0, len(x), config.batch_size):
            idx = perm[i:i + config.batch_size]
            xb = x[idx]
            if config.noise_aug:
                xb = xb + config.noise_aug * torch.randn(xb.shape, generator=gen, dtype=dtype)
            s = model(xb, code[idx] if config.use_code_input else None)
            loss = struct_loss(s, y[idx])
            if w:
                loss = loss + w * F.mse_loss(model.read_code(s), code[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        curve.append(tot / len(x))
    model.eval()
    model.losses = curve
    config.losses[:] = curve
    return model
