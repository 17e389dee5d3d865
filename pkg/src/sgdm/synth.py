"""Synthetic tangram stimuli and a forward EEG model.

The forward model is built so that the time course carries two kinds of
information at different latencies: a local-shape component (a linear readout
of the 7x7 cognitive code, 100-250 ms, mostly occipital) and a categorical
component (one spatial pattern per subject-perceived category, 350-650 ms,
mostly temporal then parietal). Everything is a pure function of its inputs
and seeds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

import numpy as np
from matplotlib.path import Path as MplPath

from sgdm.data import EEGEpoch, StimulusRecord
from sgdm.errors import InvalidInput

CATEGORIES = ("human", "animal", "object")
AMBIGUITY_TIERS = (0.0, 0.2, 0.4, 0.6, 0.8)
SAMPLING_RATE = 250.0
N_SAMPLES = 250
LOCAL_WINDOW_MS = (100.0, 250.0)
CATEGORY_WINDOW_MS = (350.0, 650.0)
TANGRAM_SCALE = 0.5

# relative loading of each component per region
LOCAL_LOADING = {"occipital": 1.0, "parietal": 0.3, "central": 0.15, "temporal": 0.15, "frontal": 0.1}
CATEGORY_LOADING = {"temporal": 1.0, "parietal": 0.55, "occipital": 0.25, "central": 0.15, "frontal": 0.1}

_LOCAL_SEED = 7001
_CATEGORY_SEED = 7002
_PROBE_SEED = 7003

VOCABULARY = {
    "human": ("person", "dancer", "man", "woman", "runner", "monk"),
    "animal": ("dog", "cat", "bird", "rabbit", "fox", "horse"),
    "object": ("house", "boat", "lamp", "chair", "cup", "hat"),
}
PART_NAMES = {
    "human": ("torso", "torso", "leg", "arm", "arm", "head", "leg"),
    "animal": ("body", "body", "tail", "leg", "leg", "head", "neck"),
    "object": ("base", "base", "roof", "handle", "handle", "top", "side"),
}


def stable_seed(*parts) -> int:
    """Platform-independent 63-bit seed from arbitrary printable parts."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ---------------------------------------------------------------- montage

@lru_cache(maxsize=None)
def default_montage() -> dict[str, tuple[str, ...]]:
    """Five-region 64-channel montage shipped with the package."""
    raw = json.loads(resources.files("sgdm").joinpath("montage_64.json").read_text())
    return {k: tuple(v) for k, v in raw["regions"].items()}


def default_channel_names() -> tuple[str, ...]:
    return tuple(ch for names in default_montage().values() for ch in names)


def _region_weights(loading: dict) -> np.ndarray:
    return np.concatenate([np.full(len(names), loading[region])
                           for region, names in default_montage().items()])


# ---------------------------------------------------------------- tangrams

def _piece_polygons() -> list[tuple[str, np.ndarray]]:
    """The seven tangram pieces, centroid at the origin, tangram side = 1."""
    def centred(v):
        v = np.asarray(v, dtype=float)
        return v - v.mean(axis=0)

    large = centred([(-0.5, 0.0), (0.5, 0.0), (0.0, 0.5)])
    medium = large * np.sqrt(0.5)
    small = large * 0.5
    side = np.sqrt(0.125)
    square = centred([(0, 0), (side, 0), (side, side), (0, side)])
    para = centred([(0, 0), (0.5, 0), (0.75, 0.25), (0.25, 0.25)])
    return [("large_triangle", large), ("large_triangle", large), ("medium_triangle", medium),
            ("small_triangle", small), ("small_triangle", small), ("square", square),
            ("parallelogram", para)]


# (x, y, rotation in degrees) per piece; y grows downwards like image rows
TEMPLATES = {
    "human": [(0.50, 0.42, 180), (0.50, 0.58, 0), (0.40, 0.82, 90), (0.24, 0.36, 45),
              (0.76, 0.36, -45), (0.50, 0.16, 45), (0.60, 0.82, 90)],
    "animal": [(0.42, 0.50, 0), (0.62, 0.50, 180), (0.88, 0.40, 30), (0.38, 0.72, 180),
               (0.66, 0.72, 180), (0.16, 0.30, 0), (0.24, 0.44, 60)],
    "object": [(0.50, 0.62, 45), (0.50, 0.62, 225), (0.50, 0.30, 180), (0.20, 0.60, 90),
               (0.80, 0.60, -90), (0.50, 0.14, 0), (0.50, 0.86, 0)],
}


@dataclass(frozen=True)
class TangramSpec:
    """Polygons in unit-square canvas coordinates (x right, y down)."""

    pieces: tuple  # of (vertices array [k x 2], piece_type)
    category: str
    part_labels: tuple = ()  # of (piece index tuple, label)
    ambiguity: float = 0.0

    def __post_init__(self):
        if not 1 <= len(self.pieces) <= 7:
            raise InvalidInput(f"a tangram has 1..7 pieces, got {len(self.pieces)}")
        if self.category not in CATEGORIES:
            raise InvalidInput(f"unknown category {self.category!r}")
        for verts, _ in self.pieces:
            v = np.asarray(verts, dtype=float)
            x, y = v[:, 0], v[:, 1]
            area = 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))
            if v.shape[0] < 3 or area < 1e-9:
                raise InvalidInput("degenerate polygon")
        seen = [i for idx, _ in self.part_labels for i in idx]
        if len(seen) != len(set(seen)):
            raise InvalidInput("a piece is referenced by more than one part label")


def rasterize(spec: TangramSpec, size: int = 64) -> np.ndarray:
    """Boolean size x size foreground mask; a pixel is set when its centre is inside a piece."""
    c = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(c, c)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    mask = np.zeros(size * size, dtype=bool)
    for verts, _ in spec.pieces:
        mask |= MplPath(np.asarray(verts, dtype=float)).contains_points(pts, radius=1e-12)
    return mask.reshape(size, size)


def cognitive_code(mask: np.ndarray) -> np.ndarray:
    """Fraction of foreground pixels in each cell of a 7x7 partition.

    Pixel ``p`` of an ``n``-pixel axis falls in cell ``floor(7 p / n)``.
    """
    mask = np.asarray(mask, dtype=float)
    h, w = mask.shape
    ri = (np.arange(h) * 7) // h
    ci = (np.arange(w) * 7) // w
    sums = np.zeros((7, 7))
    np.add.at(sums, (ri[:, None], ci[None, :]), mask)
    counts = np.zeros((7, 7))
    np.add.at(counts, (ri[:, None], ci[None, :]), 1.0)
    return sums / counts


def shape_moments(mask: np.ndarray) -> np.ndarray:
    """Low-order geometric moments of a foreground mask."""
    mask = np.asarray(mask, dtype=float)
    h, w = mask.shape
    area = mask.sum()
    if area == 0:
        return np.zeros(8)
    yy, xx = np.mgrid[0:h, 0:w]
    xx = (xx + 0.5) / w
    yy = (yy + 0.5) / h
    cx = (mask * xx).sum() / area
    cy = (mask * yy).sum() / area
    sxx = (mask * (xx - cx) ** 2).sum() / area
    syy = (mask * (yy - cy) ** 2).sum() / area
    sxy = (mask * (xx - cx) * (yy - cy)).sum() / area
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return np.array([area / (h * w), cx, cy, sxx, syy, sxy,
                     (cols[-1] - cols[0] + 1) / w, (rows[-1] - rows[0] + 1) / h])


def _layout(category: str, piece_idx: Sequence[int], ambiguity: float, rng) -> list:
    polys = _piece_polygons()
    template = TEMPLATES[category]
    pieces = []
    for i in piece_idx:
        ptype, local = polys[i]
        tx, ty, trot = template[i]
        target = rng.uniform(0.2, 0.8, size=2)
        pos = (1 - ambiguity) * np.array([tx, ty]) + ambiguity * target + rng.normal(0, 0.015, 2)
        rot = np.deg2rad(trot) + ambiguity * rng.uniform(-np.pi, np.pi) + rng.normal(0, 0.05)
        r = np.array([[np.cos(rot), -np.sin(rot)], [np.sin(rot), np.cos(rot)]])
        pieces.append((local @ r.T * TANGRAM_SCALE + pos, ptype))
    return pieces


def _draw_tangram(seed: int, n_pieces: int, category: str | None, ambiguity: float | None):
    if not 1 <= n_pieces <= 7:
        raise InvalidInput(f"n_pieces must be in 1..7, got {n_pieces}")
    rng = np.random.default_rng(stable_seed("tangram", seed))
    if category is None:
        category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    if ambiguity is None:
        ambiguity = AMBIGUITY_TIERS[int(rng.integers(len(AMBIGUITY_TIERS)))]
    idx = np.sort(rng.choice(7, size=n_pieces, replace=False))
    pieces = _layout(category, idx, float(ambiguity), rng)
    groups: dict[str, list[int]] = {}
    for k, i in enumerate(idx):
        groups.setdefault(PART_NAMES[category][i], []).append(k)
    part_labels = tuple((tuple(v), name) for name, v in groups.items())
    spec = TangramSpec(tuple(pieces), category, part_labels, float(ambiguity))
    return spec, rng


@lru_cache(maxsize=8)
def _probe(size: int):
    """Linear category probe on shape moments, fitted once on prototype tangrams."""
    from sklearn.linear_model import LogisticRegression

    feats, labels = [], []
    for k in range(450):
        cat = CATEGORIES[k % 3]
        spec, _ = _draw_tangram(stable_seed("probe", _PROBE_SEED, k), 7 - (k // 3) % 3, cat, 0.0)
        feats.append(shape_moments(rasterize(spec, size)))
        labels.append(k % 3)
    feats = np.array(feats)
    mu, sd = feats.mean(0), feats.std(0) + 1e-12
    clf = LogisticRegression(C=1.0, max_iter=2000).fit((feats - mu) / sd, labels)
    return clf, mu, sd


def abstraction_level(mask: np.ndarray, category: str) -> float:
    """1 - (true-class probability minus best other-class probability), clipped to [0, 1]."""
    clf, mu, sd = _probe(mask.shape[0])
    p = clf.predict_proba(((shape_moments(mask) - mu) / sd)[None])[0]
    k = CATEGORIES.index(category)
    margin = p[k] - np.delete(p, k).max()
    return float(np.clip(1.0 - margin, 0.0, 1.0))


def render_stimulus(spec: TangramSpec, stimulus_id: str, size: int = 64,
                    annotations: Sequence[str] | None = None) -> StimulusRecord:
    """Rasterize a tangram black-on-white and attach its code and abstraction level."""
    mask = rasterize(spec, size)
    image = np.repeat((1.0 - mask.astype(np.float32))[None], 3, axis=0)
    if annotations is None:
        annotations = [f"a {VOCABULARY[spec.category][0]}"] + [name for _, name in spec.part_labels]
    return StimulusRecord(
        stimulus_id=stimulus_id,
        image=image,
        annotations=annotations,
        cognitive_code=cognitive_code(mask),
        abstraction_level=abstraction_level(mask, spec.category),
        dataset_tag="synthetic",
        category=spec.category,
        extra={"ambiguity": spec.ambiguity, "n_pieces": len(spec.pieces)},
    )


def make_tangram(seed: int, n_pieces: int = 7, *, category: str | None = None,
                 ambiguity: float | None = None, size: int = 64,
                 stimulus_id: str | None = None) -> tuple[TangramSpec, StimulusRecord]:
    """Deterministically draw one tangram and its stimulus record.

    ``ambiguity`` in [0, 1] moves pieces from the category template towards
    random placements; it is drawn from :data:`AMBIGUITY_TIERS` when omitted.
    """
    spec, rng = _draw_tangram(seed, n_pieces, category, ambiguity)
    words = VOCABULARY[spec.category]
    annotations = [f"a {words[int(rng.integers(len(words)))]}"]
    annotations += [name for _, name in spec.part_labels]
    if spec.ambiguity >= 0.4:
        # ambiguous figures collect a competing reading
        others = [c for c in CATEGORIES if c != spec.category]
        alt = others[int(rng.integers(len(others)))]
        annotations.append(f"maybe a {VOCABULARY[alt][int(rng.integers(len(VOCABULARY[alt])))]}")
    sid = stimulus_id or f"tangram-{seed}"
    return spec, render_stimulus(spec, sid, size, annotations)


# ---------------------------------------------------------------- subjects & EEG

@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    semantic_bias: dict  # category -> preferred annotation word
    response_gain: np.ndarray  # per channel, positive
    noise_sigma: float = 1.0
    reinterpret_rate: float = 0.6
    category_preference: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        gain = np.asarray(self.response_gain, dtype=float)
        if not (np.all(np.isfinite(gain)) and np.all(gain > 0)):
            raise InvalidInput("response gains must be finite and positive")
        if not self.noise_sigma >= 0:
            raise InvalidInput("noise_sigma must be >= 0")
        object.__setattr__(self, "response_gain", gain)


def make_subjects(n_subjects: int, noise_sigma: float = 1.0, seed: int = 0,
                  n_channels: int = 64) -> list[SubjectProfile]:
    subjects = []
    for k in range(n_subjects):
        sid = f"sub-{k + 1:02d}"
        rng = np.random.default_rng(stable_seed("subject", seed, sid))
        bias = {c: VOCABULARY[c][int(rng.integers(len(VOCABULARY[c])))] for c in CATEGORIES}
        pref = rng.dirichlet(np.ones(len(CATEGORIES)) * 2.0)
        subjects.append(SubjectProfile(
            subject_id=sid,
            semantic_bias=bias,
            response_gain=np.exp(rng.normal(0.0, 0.1, n_channels)),
            noise_sigma=noise_sigma,
            category_preference=tuple(float(p) for p in pref),
        ))
    return subjects


def perceived_category(stimulus: StimulusRecord, profile: SubjectProfile) -> str:
    """The category a subject reads into a stimulus.

    Ambiguous figures are re-interpreted with probability
    ``reinterpret_rate * abstraction_level``, towards the subject's preferred
    categories.
    """
    if stimulus.category not in CATEGORIES:
        raise InvalidInput(f"stimulus {stimulus.stimulus_id} has no synthetic category")
    rng = np.random.default_rng(stable_seed("perceive", profile.subject_id, stimulus.stimulus_id))
    if rng.random() >= profile.reinterpret_rate * stimulus.abstraction_level:
        return stimulus.category
    others = [c for c in CATEGORIES if c != stimulus.category]
    w = np.array([profile.category_preference[CATEGORIES.index(c)] for c in others])
    return others[int(rng.choice(len(others), p=w / w.sum()))]


def _bump(times_ms: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    lo, hi = window
    u = (times_ms - lo) / (hi - lo)
    return np.where((u >= 0) & (u <= 1), np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)


@lru_cache(maxsize=None)
def _local_mixing() -> np.ndarray:
    rng = np.random.default_rng(_LOCAL_SEED)
    return rng.normal(size=(64, 49)) * _region_weights(LOCAL_LOADING)[:, None] / np.sqrt(7.0)


@lru_cache(maxsize=None)
def _category_patterns(subject_id: str) -> np.ndarray:
    w = _region_weights(CATEGORY_LOADING)
    base = np.random.default_rng(_CATEGORY_SEED).normal(size=(len(CATEGORIES), 64))
    own = np.random.default_rng(stable_seed("pattern", subject_id)).normal(size=(len(CATEGORIES), 64))
    return (base + 0.3 * own) * w


def _pink_noise(rng, n_channels: int, n_samples: int) -> np.ndarray:
    spec = rng.normal(size=(n_channels, n_samples // 2 + 1)) + 1j * rng.normal(size=(n_channels, n_samples // 2 + 1))
    f = np.arange(n_samples // 2 + 1, dtype=float)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n=n_samples, axis=1)
    return x / (x.std(axis=1, keepdims=True) + 1e-12)


@dataclass(frozen=True)
class ForwardModel:
    # the categorical component carries more decodable image information than the local one
    local_amplitude: float = 0.5
    category_amplitude: float = 1.5
    sampling_rate: float = SAMPLING_RATE
    n_samples: int = N_SAMPLES
    channel_names: tuple = field(default_factory=default_channel_names)


def simulate_eeg(stimulus: StimulusRecord, profile: SubjectProfile, seed: int,
                 model: ForwardModel | None = None) -> EEGEpoch:
    """One 64-channel, 1000 ms, 250 Hz epoch for ``stimulus`` seen by ``profile``.

    With ``noise_sigma == 0`` the epoch is a deterministic function of the
    cognitive code, the perceived category and the subject.
    """
    model = model or ForwardModel()
    times = np.arange(model.n_samples) * 1000.0 / model.sampling_rate
    code = np.asarray(stimulus.cognitive_code, dtype=float).ravel()
    local = model.local_amplitude * np.outer(_local_mixing() @ code, _bump(times, LOCAL_WINDOW_MS))
    cat = CATEGORIES.index(perceived_category(stimulus, profile))
    categorical = model.category_amplitude * np.outer(_category_patterns(profile.subject_id)[cat],
                                                      _bump(times, CATEGORY_WINDOW_MS))
    signal = profile.response_gain[:, None] * (local + categorical)
    if profile.noise_sigma > 0:
        rng = np.random.default_rng(stable_seed("eeg", seed, profile.subject_id, stimulus.stimulus_id))
        n_ch = signal.shape[0]
        signal = signal + profile.noise_sigma * (_pink_noise(rng, n_ch, model.n_samples)
                                                 + rng.normal(size=(n_ch, model.n_samples)))
    return EEGEpoch(signal.astype(np.float32), model.sampling_rate, model.channel_names,
                    profile.subject_id, stimulus.stimulus_id, 0.0)


def make_synthetic_dataset(n_stimuli: int, n_subjects: int, noise_sigma: float = 1.0,
                           seed: int = 0, size: int = 64, model: ForwardModel | None = None):
    """Balanced stimuli (category x ambiguity tier) plus one epoch per subject and stimulus."""
    stimuli = []
    for i in range(n_stimuli):
        cat = CATEGORIES[i % len(CATEGORIES)]
        tier = AMBIGUITY_TIERS[(i // len(CATEGORIES)) % len(AMBIGUITY_TIERS)]
        s = stable_seed("stimulus", seed, i) % (2 ** 31)
        n_pieces = 5 + int(np.random.default_rng(s).integers(3))
        _, rec = make_tangram(s, n_pieces, category=cat, ambiguity=tier, size=size,
                              stimulus_id=f"stim-{i:04d}")
        stimuli.append(rec)
    subjects = make_subjects(n_subjects, noise_sigma, seed)
    epochs = [simulate_eeg(st, sub, seed, model) for sub in subjects for st in stimuli]
    return stimuli, epochs, subjects


def make_corpus(n_images: int, seed: int = 0, size: int = 64) -> list[StimulusRecord]:
    """Extra annotated tangrams for pretraining; ids never collide with dataset stimuli."""
    out = []
    for i in range(n_images):
        s = stable_seed("corpus", seed, i) % (2 ** 31)
        rng = np.random.default_rng(s)
        cat = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
        tier = AMBIGUITY_TIERS[int(rng.integers(len(AMBIGUITY_TIERS)))]
        _, rec = make_tangram(s, 5 + int(rng.integers(3)), category=cat, ambiguity=tier, size=size,
                              stimulus_id=f"corpus-{i:05d}")
        out.append(rec)
    return out
