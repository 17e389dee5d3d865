"""Spatiotemporal analysis: time windows, channel regions, abstraction
correlation and a 2-D embedding projection.

Sweeps train the EEG-side stages once per window (or region) and score the
generated images against their stimuli with the dual encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from sgdm.data import EEGEpoch
from sgdm.errors import IntegrityError, InvalidInput
from sgdm.stats import pearson_r, sem

REGIONS = ("frontal", "central", "parietal", "temporal", "occipital")


@dataclass(frozen=True)
class RegionMap:
    regions: dict  # name -> tuple of channel names

    def __post_init__(self):
        regions = {k: tuple(v) for k, v in self.regions.items()}
        seen: set = set()
        for name, chans in regions.items():
            if not chans:
                raise InvalidInput(f"region {name!r} is empty")
            if seen & set(chans):
                raise InvalidInput(f"region {name!r} overlaps another region")
            seen |= set(chans)
        object.__setattr__(self, "regions", regions)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.regions)

    def channels(self) -> tuple[str, ...]:
        return tuple(ch for chans in self.regions.values() for ch in chans)

    @classmethod
    def load(cls, path=None) -> "RegionMap":
        """Montage JSON with a ``regions`` object; the shipped 64-channel file by default."""
        if path is None:
            from sgdm.synth import default_montage
            return cls(default_montage())
        raw = json.loads(Path(path).read_text())
        return cls(raw.get("regions", raw))


def window_slice(epoch: EEGEpoch, window: Sequence[float]) -> EEGEpoch:
    """Sub-epoch covering ``window = (start_ms, end_ms)`` relative to stimulus onset."""
    start, end = float(window[0]), float(window[1])
    if not start < end:
        raise InvalidInput(f"window start {start} must precede end {end}")
    eps = 1e-6
    if start < epoch.t0_offset - eps or end > epoch.end_ms + eps:
        raise InvalidInput(f"window ({start}, {end}) ms outside epoch [{epoch.t0_offset}, {epoch.end_ms}]")
    rate = epoch.sampling_rate
    i0 = int(round((start - epoch.t0_offset) * rate / 1000.0))
    n = int(round((end - start) * rate / 1000.0))
    if n < 1 or i0 + n > epoch.n_samples:
        raise InvalidInput(f"window ({start}, {end}) ms selects no complete samples")
    return EEGEpoch(epoch.data[:, i0:i0 + n], rate, epoch.channel_names, epoch.subject_id,
                    epoch.stimulus_id, epoch.t0_offset + i0 * 1000.0 / rate)


def region_subset(epoch: EEGEpoch, region: str, region_map: RegionMap) -> EEGEpoch:
    """Epoch restricted to one region's channels, in the epoch's channel order."""
    if region not in region_map.regions:
        raise InvalidInput(f"unknown region {region!r}")
    wanted = set(region_map.regions[region])
    missing = wanted - set(epoch.channel_names)
    if missing:
        raise InvalidInput(f"channels {sorted(missing)} not present in the epoch")
    idx = [i for i, ch in enumerate(epoch.channel_names) if ch in wanted]
    return EEGEpoch(epoch.data[idx], epoch.sampling_rate, tuple(epoch.channel_names[i] for i in idx),
                    epoch.subject_id, epoch.stimulus_id, epoch.t0_offset)


@dataclass
class WindowPlan:
    mode: str = "sliding"  # or "cumulative"
    width: float = 200.0
    stride: float = 100.0
    endpoints: list = field(default_factory=list)
    t0: float = 0.0
    t_end: float = 1000.0

    def __post_init__(self):
        if self.mode not in ("sliding", "cumulative"):
            raise InvalidInput(f"unknown window mode {self.mode!r}")
        if self.mode == "sliding" and not self.width > 0:
            raise InvalidInput("sliding window width must be positive")
        if self.stride <= 0:
            raise InvalidInput("stride must be positive")

    def windows(self) -> list[tuple[float, float]]:
        if self.mode == "sliding":
            out, start = [], self.t0
            while start + self.width <= self.t_end + 1e-9:
                out.append((start, start + self.width))
                start += self.stride
            return out
        ends = self.endpoints or list(np.arange(self.t0 + self.stride, self.t_end + 1e-9, self.stride))
        for e in ends:
            if not self.t0 < e <= self.t_end:
                raise InvalidInput(f"endpoint {e} outside ({self.t0}, {self.t_end}]")
        return [(self.t0, float(e)) for e in ends]


def _curve_point(label, values) -> dict:
    v = np.asarray(values, dtype=float)
    return {"label": label, "mean": float(v.mean()), "sem": sem(v) if len(v) > 1 else 0.0, "n": int(len(v))}


def run_window_sweep(config, plan: WindowPlan, split: str = "test", retrain: bool = True) -> list[dict]:
    """Similarity curve over the plan's windows.

    ``retrain`` trains the EEG encoder, prior and structure predictor per
    window; otherwise the full-epoch models see inputs with everything outside
    the window zeroed.
    """
    from sgdm.pipeline import Pipeline, with_overrides

    base = Pipeline(config)
    base.require("train-gen")
    curve = []
    for w in plan.windows():
        if retrain:
            pipe = Pipeline(with_overrides(config, window_ms=list(w)))
        else:
            pipe = Pipeline(with_overrides(config, mask_ms=list(w)))
        pipe.ensure_eeg_stages()
        result = pipe.generate(split)
        point = _curve_point(list(w), result["metrics"]["clip"])
        curve.append(point)
    return curve


def run_region_sweep(config, region_map: RegionMap | None = None, split: str = "test") -> list[dict]:
    from sgdm.pipeline import Pipeline, with_overrides

    region_map = region_map or RegionMap.load(getattr(config, "montage", None))
    base = Pipeline(config)
    base.require("train-gen")
    curve = []
    for region in region_map.names:
        pipe = Pipeline(with_overrides(config, region=region))
        pipe.ensure_eeg_stages()
        result = pipe.generate(split)
        curve.append(_curve_point(region, result["metrics"]["clip"]))
    return curve


def per_stimulus_mean(report, metric: str, method: str = "sgdm") -> dict:
    groups: dict = {}
    for row in report.per_item:
        if row.get("method", "sgdm") != method or metric not in row["metrics"]:
            continue
        groups.setdefault(row["stimulus_id"], []).append(row["metrics"][metric])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def abstraction_correlation(report, stimuli, metric: str = "clip", method: str = "sgdm") -> tuple[float, float]:
    """Pearson r between per-stimulus mean ``metric`` and abstraction level."""
    levels = {s.stimulus_id: getattr(s, "abstraction_level", None) for s in stimuli}
    sims = per_stimulus_mean(report, metric, method)
    x, y = [], []
    for sid, v in sorted(sims.items()):
        a = levels.get(sid)
        if a is None or not np.isfinite(a):
            raise IntegrityError(f"stimulus {sid} has no abstraction level")
        x.append(v)
        y.append(a)
    return pearson_r(x, y)


def project_2d(embeddings, perplexity: float = 15.0, seed: int = 0) -> np.ndarray:
    """t-SNE layout of ``[N, D]`` embeddings (perplexity capped below N)."""
    from sklearn.manifold import TSNE

    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 5:
        raise InvalidInput("need an N x D array with N >= 5")
    perp = min(perplexity, (len(x) - 1) / 3.0)
    tsne = TSNE(n_components=2, perplexity=perp, random_state=seed, init="pca", method="exact")
    return tsne.fit_transform(x)


def save_curve(path, curve: list[dict], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"meta": meta or {}, "curve": curve}, indent=1, sort_keys=True))
    return path


def plot_curve(path, curve: list[dict], xlabel: str) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [c["label"] for c in curve]
    x = [np.mean(l) if isinstance(l, (list, tuple)) else i for i, l in enumerate(labels)]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.errorbar(x, [c["mean"] for c in curve], yerr=[c["sem"] for c in curve], marker="o")
    if not isinstance(labels[0], (list, tuple)):
        ax.set_xticks(x, labels)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("similarity")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
