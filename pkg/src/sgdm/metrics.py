"""Structural and image metrics, plus the metric report container."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from sgdm.errors import InvalidInput
from sgdm.stats import bh_fdr, bootstrap_ci, paired_t_test, sem


def _masks(a, b):
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise InvalidInput(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    """Intersection over union; two empty masks score 1."""
    a, b = _masks(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def translate(mask, dx: int, dy: int) -> np.ndarray:
    """Shift a 2-D mask by ``dx`` columns and ``dy`` rows, filling with zeros."""
    mask = np.asarray(mask)
    out = np.zeros_like(mask)
    h, w = mask.shape
    if abs(dx) >= w or abs(dy) >= h:
        return out
    src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def default_max_shift(shape) -> int:
    return max(0, int(round(0.1 * min(shape))))


def shift_iou(a, b, max_shift: int | None = None) -> float:
    """Best IoU over integer translations of ``b`` within ``max_shift`` pixels per axis."""
    a, b = _masks(a, b)
    if max_shift is None:
        max_shift = default_max_shift(a.shape)
    if max_shift < 0:
        raise InvalidInput("max_shift must be >= 0")
    best = 0.0
    for dy in range(-max_shift, max_shift + 1):
        for dx in range(-max_shift, max_shift + 1):
            best = max(best, iou(a, translate(b, dx, dy)))
    return best


def to_gray(image) -> np.ndarray:
    """Luminance (ITU-R 601) of a 3 x H x W image; 2-D input passes through."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[0] == 3:
        return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    raise InvalidInput(f"expected a 3 x H x W or H x W image, got {image.shape}")


def _box_mean(x: np.ndarray, k: int) -> np.ndarray:
    c = np.pad(np.cumsum(np.cumsum(x, axis=0), axis=1), ((1, 0), (1, 0)))
    s = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
    return s / (k * k)


def ssim(x, y, window: int = 7, K1: float = 0.01, K2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-contained ``window x window`` uniform windows."""
    x = to_gray(x)
    y = to_gray(y)
    if x.shape != y.shape:
        raise InvalidInput(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise InvalidInput(f"image {x.shape} smaller than the {window}x{window} window")
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _box_mean(x, window), _box_mean(y, window)
    # unbiased local (co)variances as in the reference implementation
    norm = window * window / (window * window - 1.0)
    vx = norm * (_box_mean(x * x, window) - mx * mx)
    vy = norm * (_box_mean(y * y, window) - my * my)
    cxy = norm * (_box_mean(x * y, window) - mx * my)
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def inception_score_from_probs(probs, n_splits: int = 1) -> tuple[float, float]:
    """exp(E_x KL(p(y|x) || p(y))) per split; returns mean and std over splits."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2:
        raise InvalidInput("probabilities must be an N x C table")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise InvalidInput("each row must be a probability simplex")
    if n_splits < 1 or p.shape[0] < n_splits:
        raise InvalidInput(f"need at least n_splits={n_splits} images")
    scores = []
    for part in np.array_split(p, n_splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(images, classifier, n_splits: int = 1) -> tuple[float, float]:
    """Inception score with ``classifier(images) -> N x C`` probabilities."""
    return inception_score_from_probs(classifier(images), n_splits)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a, feats_b, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    tr((S_a S_b)^(1/2)) is evaluated as tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)),
    which only needs symmetric eigendecompositions.
    """
    a = np.asarray(feats_a, dtype=float)
    b = np.asarray(feats_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise InvalidInput(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + ridge * np.eye(d)
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + ridge * np.eye(d)
    ra = _sqrt_psd(cov_a)
    w = np.linalg.eigvalsh(ra @ cov_b @ ra)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    fd = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt
    return float(max(fd, 0.0))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def embedding_similarity(gen, target, dual_encoder) -> float:
    """Cosine similarity of the dual encoder's image embeddings."""
    z = dual_encoder.embed_images(np.stack([np.asarray(gen), np.asarray(target)]))
    return float(np.clip(cosine(z[0], z[1]), -1.0, 1.0))


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    per_item: list = field(default_factory=list)  # dicts: stimulus_id, subject_id, method, metrics
    aggregate: dict = field(default_factory=dict)  # method -> metric -> stats
    comparisons: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, stimulus_id: str, subject_id: str, values: dict, method: str = "sgdm") -> None:
        self.per_item.append({"stimulus_id": stimulus_id, "subject_id": subject_id,
                              "method": method, "metrics": {k: float(v) for k, v in values.items()}})

    def methods(self) -> list[str]:
        return sorted({r["method"] for r in self.per_item})

    def values(self, metric: str, method: str = "sgdm") -> np.ndarray:
        return np.array([r["metrics"][metric] for r in self.per_item
                         if r["method"] == method and metric in r["metrics"]])

    def keyed(self, metric: str, method: str) -> dict:
        return {(r["stimulus_id"], r["subject_id"]): r["metrics"][metric]
                for r in self.per_item if r["method"] == method and metric in r["metrics"]}

    def summarize(self, n_resamples: int = 1000, level: float = 0.95, seed: int = 0) -> None:
        for method in self.methods():
            names = sorted({k for r in self.per_item if r["method"] == method for k in r["metrics"]})
            agg = self.aggregate.setdefault(method, {})
            for name in names:
                x = self.values(name, method)
                lo, hi = bootstrap_ci(x, n_resamples, level, seed)
                mean = float(x.mean())
                agg[name] = {"mean": mean, "sem": sem(x), "ci_low": min(lo, mean),
                             "ci_high": max(hi, mean), "n": int(x.size)}

    def compare(self, metric: str, methods=None, q: float = 0.05) -> list[dict]:
        """Paired t-tests between every pair of methods on shared items, BH-adjusted."""
        methods = list(methods or self.methods())
        rows = []
        for a, b in combinations(methods, 2):
            ka, kb = self.keyed(metric, a), self.keyed(metric, b)
            keys = sorted(set(ka) & set(kb))
            t, p = paired_t_test([ka[k] for k in keys], [kb[k] for k in keys])
            rows.append({"metric": metric, "method_a": a, "method_b": b, "n": len(keys),
                         "mean_a": float(np.mean([ka[k] for k in keys])),
                         "mean_b": float(np.mean([kb[k] for k in keys])), "t": t, "p_raw": p})
        if rows:
            adj, rej = bh_fdr([r["p_raw"] for r in rows], q)
            for r, pa, flag in zip(rows, adj, rej):
                r["p_fdr"] = float(pa)
                r["significant"] = bool(flag)
        self.comparisons.extend(rows)
        return rows

    def adjust_all(self, q: float = 0.05) -> None:
        """Re-apply BH over every comparison in the report as one family."""
        if self.comparisons:
            adj, rej = bh_fdr([r["p_raw"] for r in self.comparisons], q)
            for r, pa, flag in zip(self.comparisons, adj, rej):
                r["p_fdr"] = float(pa)
                r["significant"] = bool(flag)

    def to_json(self) -> dict:
        return {"per_item": self.per_item, "aggregate": self.aggregate,
                "comparisons": self.comparisons, "meta": self.meta}

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        return cls(d.get("per_item", []), d.get("aggregate", {}), d.get("comparisons", []), d.get("meta", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True, allow_nan=True))
        return path

    def to_csv(self, path) -> Path:
        names = sorted({k for r in self.per_item for k in r["metrics"]})
        lines = [",".join(["stimulus_id", "subject_id", "method"] + names)]
        for r in self.per_item:
            vals = [repr(r["metrics"].get(n, "")) if n in r["metrics"] else "" for n in names]
            lines.append(",".join([r["stimulus_id"], r["subject_id"], r["method"]] + vals))
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)
