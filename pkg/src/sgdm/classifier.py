"""Small category classifier used as the desk-scale Inception Score network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from sgdm.errors import InvalidInput


@dataclass
class ClassifierConfig:
    n_classes: int = 3
    channels: tuple = (16, 32, 64)
    image_size: int = 64

    def __post_init__(self):
        self.channels = tuple(self.channels)


class CategoryClassifier(nn.Module):
    """Three stride-2 conv layers, global average pooling, linear head."""

    def __init__(self, cfg: ClassifierConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ClassifierConfig()
        layers, prev = [], 3
        for ch in cfg.channels:
            layers += [nn.Conv2d(prev, ch, 3, stride=2, padding=1), nn.ReLU()]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, cfg.n_classes)
        self.accuracy = float("nan")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x).mean(dim=(2, 3)))

    @torch.no_grad()
    def predict_proba(self, images, batch_size: int = 256) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images), dtype=next(self.parameters()).dtype)
        if x.ndim == 3:
            x = x[None]
        out = [F.softmax(self(x[i:i + batch_size]), dim=-1).double() for i in range(0, len(x), batch_size)]
        p = torch.cat(out).numpy()
        return p / p.sum(axis=1, keepdims=True)

    def __call__(self, x, *args, **kwargs):
        if isinstance(x, np.ndarray):
            return self.predict_proba(x)
        return super().__call__(x, *args, **kwargs)

    def meta(self) -> dict:
        c = asdict(self.cfg)
        c["channels"] = list(c["channels"])
        return {"config": c, "accuracy": self.accuracy}

    @classmethod
    def from_meta(cls, meta: dict) -> "CategoryClassifier":
        m = cls(ClassifierConfig(**meta["config"]))
        m.accuracy = meta.get("accuracy", float("nan"))
        return m


def train_classifier(images, labels, model: CategoryClassifier, epochs: int = 15,
                     batch_size: int = 64, lr: float = 2e-3, seed: int = 0) -> CategoryClassifier:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(x) == 0 or len(x) != len(y):
        raise InvalidInput("need matching non-empty images and labels")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            idx = perm[i:i + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def accuracy(model: CategoryClassifier, images, labels) -> float:
    return float(np.mean(model.predict_proba(images).argmax(1) == np.asarray(labels)))
