"""Toy text-image dual encoder defining the shared semantic space."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sgdm.errors import InvalidInput

PAD, START, END, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<start>", "<end>", "<unk>")
_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 0.01, 1.0


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Word/punctuation vocabulary; ids are assigned in sorted token order."""

    def __init__(self, tokens: Sequence[str] = ()):
        words = sorted(set(tokens) - set(SPECIALS))
        self.tokens = list(SPECIALS) + words
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_corpus(cls, texts) -> "Vocabulary":
        return cls([w for t in texts for w in split_words(t)])

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple
    end_index: int

    def __post_init__(self):
        if self.token_ids.count(END) != 1 or self.token_ids[self.end_index] != END:
            raise InvalidInput("token sequence must contain exactly one end sentinel")

    def __len__(self) -> int:
        return len(self.token_ids)


def tokenize(text: str, vocab: Vocabulary, max_len: int = 77) -> TokenSequence:
    """``<start> words... <end> <pad>...`` padded/truncated to ``max_len``."""
    if not text or not text.strip():
        raise InvalidInput("cannot tokenize empty text")
    if max_len < 3:
        raise InvalidInput("max_len must leave room for the sentinels")
    words = [vocab.id(w) for w in split_words(text)][:max_len - 2]
    ids = [START] + words + [END]
    ids += [PAD] * (max_len - len(ids))
    return TokenSequence(tuple(ids), len(words) + 1)


@dataclass
class DualEncoderConfig:
    embed_dim: int = 64
    max_len: int = 77
    text_layers: int = 4
    text_width: int = 64
    text_heads: int = 4
    image_layers: int = 4
    image_width: int = 64
    image_heads: int = 4
    image_size: int = 64
    patch_size: int = 8
    causal: bool = False

    @classmethod
    def paper(cls) -> "DualEncoderConfig":
        """ViT-H/14-sized preset (too large to train here; kept for shape checks)."""
        return cls(embed_dim=1024, max_len=77, text_layers=12, text_width=768, text_heads=12,
                   image_layers=32, image_width=1280, image_heads=16, image_size=224, patch_size=14)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads:
            raise InvalidInput("width must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)

    def forward(self, x, key_mask=None, causal=False):
        b, n, w = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, w // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(w // self.heads)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if causal:
            tri = torch.ones(n, n, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(tri, float("-inf"))
        y = scores.softmax(-1) @ v
        return self.out(y.transpose(1, 2).reshape(b, n, w))


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x, key_mask=None, causal=False):
        x = x + self.attn(self.ln1(x), key_mask, causal)
        return x + self.mlp(self.ln2(x))


class TextEncoder(nn.Module):
    def __init__(self, cfg: DualEncoderConfig, vocab_size: int):
        super().__init__()
        self.causal = cfg.causal
        self.token = nn.Embedding(vocab_size, cfg.text_width)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.text_width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.text_width, cfg.text_heads) for _ in range(cfg.text_layers))
        self.ln_final = nn.LayerNorm(cfg.text_width)
        self.proj = nn.Linear(cfg.text_width, cfg.embed_dim, bias=False)

    def forward(self, ids: torch.Tensor, end_index: torch.Tensor) -> torch.Tensor:
        n = ids.shape[1]
        x = self.token(ids) + self.pos[:n]
        valid = torch.arange(n, device=ids.device)[None, :] <= end_index[:, None]
        for blk in self.blocks:
            x = blk(x, valid, self.causal)
        h_end = self.ln_final(x[torch.arange(ids.shape[0]), end_index])
        return F.normalize(self.proj(h_end), dim=-1)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: DualEncoderConfig):
        super().__init__()
        self.patch_size = cfg.patch_size
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch = nn.Conv2d(3, cfg.image_width, cfg.patch_size, stride=cfg.patch_size)
        self.cls = nn.Parameter(torch.randn(cfg.image_width) * 0.02)
        self.pos = nn.Parameter(torch.randn(n_patches + 1, cfg.image_width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.image_width, cfg.image_heads) for _ in range(cfg.image_layers))
        self.ln_final = nn.LayerNorm(cfg.image_width)
        self.proj = nn.Linear(cfg.image_width, cfg.embed_dim, bias=False)

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        """Patch tokens with the CLS token prepended, before the transformer."""
        h, w = images.shape[-2:]
        if h % self.patch_size or w % self.patch_size:
            raise InvalidInput(f"image {h}x{w} not divisible by patch size {self.patch_size}")
        x = self.patch(images * 2.0 - 1.0).flatten(2).transpose(1, 2)
        if x.shape[1] + 1 != self.pos.shape[0]:
            raise InvalidInput(f"image {h}x{w} does not match the configured size")
        cls = self.cls.expand(x.shape[0], 1, -1)
        return torch.cat([cls, x], dim=1) + self.pos

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.tokens(images)
        for blk in self.blocks:
            x = blk(x)
        return F.normalize(self.proj(self.ln_final(x[:, 0])), dim=-1)


class DualEncoder(nn.Module):
    def __init__(self, cfg: DualEncoderConfig | None = None, vocab: Vocabulary | None = None):
        super().__init__()
        self.cfg = cfg or DualEncoderConfig()
        self.vocab = vocab or Vocabulary()
        self.text = TextEncoder(self.cfg, len(self.vocab))
        self.image = ImageEncoder(self.cfg)
        self.log_tau = nn.Parameter(torch.tensor(math.log(TAU_INIT)))
        self.k_frozen: int | None = None

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.clamp(math.log(TAU_MIN), math.log(TAU_MAX)).exp()

    def _param(self):
        return next(self.parameters())

    def tokenize(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        seqs = [tokenize(t, self.vocab, self.cfg.max_len) for t in texts]
        ids = torch.tensor([s.token_ids for s in seqs], dtype=torch.long)
        end = torch.tensor([s.end_index for s in seqs], dtype=torch.long)
        return ids, end

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        ids, end = self.tokenize(texts)
        return self.text(ids, end)

    def encode_image(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images,
                            dtype=self._param().dtype)
        if x.ndim == 3:
            x = x[None]
        if x.min() < 0 or x.max() > 1:
            raise InvalidInput("image values must lie in [0, 1]")
        return self.image(x)

    @torch.no_grad()
    def embed_images(self, images, batch_size: int = 128) -> np.ndarray:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        out = [self.encode_image(images[i:i + batch_size]).cpu().numpy()
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out).astype(np.float64)

    @torch.no_grad()
    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return self.encode_text(texts).cpu().numpy().astype(np.float64)

    def meta(self) -> dict:
        return {"config": asdict(self.cfg), "vocab": self.vocab.tokens[len(SPECIALS):],
                "k_frozen": self.k_frozen, "tau": float(self.tau)}

    @classmethod
    def from_meta(cls, meta: dict) -> "DualEncoder":
        model = cls(DualEncoderConfig(**meta["config"]), Vocabulary(meta["vocab"]))
        model.k_frozen = meta.get("k_frozen")
        return model


def info_nce_loss(z_t: torch.Tensor, z_i: torch.Tensor, tau) -> torch.Tensor:
    """Text-to-image InfoNCE over in-batch negatives; rows must be unit vectors."""
    if z_t.ndim != 2 or z_t.shape != z_i.shape:
        raise InvalidInput(f"embedding batches must share a B x D shape, got {tuple(z_t.shape)}, {tuple(z_i.shape)}")
    if z_t.shape[0] < 2:
        raise InvalidInput("InfoNCE needs a batch of at least 2")
    tau_t = torch.as_tensor(tau, dtype=z_t.dtype)
    if not bool(tau_t > 0):
        raise InvalidInput("temperature must be positive")
    logits = z_t @ z_i.T / tau_t
    target = torch.arange(z_t.shape[0])
    return F.cross_entropy(logits, target)


# ---------------------------------------------------------------- training

@dataclass
class DualTrainConfig:
    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    k_trainable: int = 3
    seed: int = 0
    fixed_batch: bool = False
    losses: list = field(default_factory=list)


def _trainable_groups(model: DualEncoder, k: int, embeddings: bool = False) -> list[nn.Parameter]:
    n_layers = min(len(model.text.blocks), len(model.image.blocks))
    if k < 0 or k > n_layers:
        raise InvalidInput(f"cannot fine-tune {k} layers of a {n_layers}-layer encoder")
    for p in model.parameters():
        p.requires_grad_(False)
    enc: nn.Module
    for enc in (model.text, model.image):
        n = len(enc.blocks)
        for blk in list(enc.blocks)[n - k:]:
            for p in blk.parameters():
                p.requires_grad_(True)
        for p in list(enc.ln_final.parameters()) + list(enc.proj.parameters()):
            p.requires_grad_(True)
    if embeddings:
        for p in (model.text.token.weight, model.text.pos, model.image.patch.weight,
                  model.image.patch.bias, model.image.cls, model.image.pos):
            p.requires_grad_(True)
    model.log_tau.requires_grad_(True)
    return [p for p in model.parameters() if p.requires_grad]


def finetune_dual(pairs: Sequence[tuple], model: DualEncoder, config: DualTrainConfig | None = None,
                  *, embeddings: bool = False) -> DualEncoder:
    """Contrastively train the last ``k_trainable`` blocks of both encoders plus heads.

    ``pairs`` holds ``(image [3 x H x W], text)`` tuples. Earlier weights are
    left bitwise untouched; the per-step loss is appended to ``config.losses``.
    """
    config = config or DualTrainConfig()
    if not pairs:
        raise InvalidInput("no training pairs")
    params = _trainable_groups(model, config.k_trainable, embeddings)
    images = torch.as_tensor(np.stack([np.asarray(p[0]) for p in pairs]), dtype=model._param().dtype)
    ids, end = model.tokenize([p[1] for p in pairs])
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(params, lr=config.lr)
    bsz = min(config.batch_size, len(pairs))
    fixed = torch.randperm(len(pairs), generator=gen)[:bsz]
    model.train()
    for _ in range(config.steps):
        idx = fixed if config.fixed_batch else torch.randperm(len(pairs), generator=gen)[:bsz]
        loss = info_nce_loss(model.text(ids[idx], end[idx]), model.image(images[idx]), model.tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
        config.losses.append(loss.item())
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    model.k_frozen = config.k_trainable
    return model


def train_dual(pairs, model: DualEncoder, config: DualTrainConfig | None = None) -> DualEncoder:
    """Train every layer (the stand-in for pretraining before partial fine-tuning)."""
    config = replace(config or DualTrainConfig(), k_trainable=len(model.text.blocks))
    return finetune_dual(pairs, model, config, embeddings=True)


def stimulus_text(annotations: Sequence[str]) -> str:
    return ", ".join(annotations)
