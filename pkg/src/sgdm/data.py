"""Dataset model, on-disk layout and image-level splitting.

A dataset root looks like::

    root/
      manifest.json
      images/<stimulus_id>.png
      eeg/<subject_id>/<stimulus_id>.arr

``.arr`` files hold one little-endian float32 array behind a small header:
the magic ``b"SGDM"``, a u32 rank, one u32 per dimension, zero padding up to
the next multiple of 16 bytes (so a 2-D EEG array has exactly 16 bytes of
header).
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from sgdm.errors import IntegrityError, InvalidInput

DATASET_TAGS = ("kilogram", "things", "synthetic")
MAGIC = b"SGDM"
MANIFEST = "manifest.json"


def _frozen(a, dtype=np.float32) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EEGEpoch:
    """One trial: ``data`` is channels x samples in microvolts.

    ``t0_offset`` is the time (ms) of sample 0 relative to stimulus onset.
    """

    data: np.ndarray
    sampling_rate: float
    channel_names: tuple[str, ...]
    subject_id: str
    stimulus_id: str
    t0_offset: float = 0.0

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 2:
            raise InvalidInput(f"EEG data must be C x T with C>=1, T>=2, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidInput("EEG data contains NaN/Inf")
        names = tuple(self.channel_names)
        if len(names) != data.shape[0]:
            raise InvalidInput(f"{len(names)} channel names for {data.shape[0]} channels")
        if len(set(names)) != len(names):
            raise InvalidInput("channel names must be unique")
        if not self.sampling_rate > 0:
            raise InvalidInput("sampling_rate must be positive")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "sampling_rate", float(self.sampling_rate))
        object.__setattr__(self, "t0_offset", float(self.t0_offset))

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_ms(self) -> float:
        return self.n_samples * 1000.0 / self.sampling_rate

    @property
    def end_ms(self) -> float:
        return self.t0_offset + self.duration_ms

    def sample_time(self, index) -> np.ndarray:
        """Time in ms of sample ``index``."""
        return self.t0_offset + np.asarray(index) * 1000.0 / self.sampling_rate


@dataclass(frozen=True, eq=False)
class StimulusRecord:
    stimulus_id: str
    image: np.ndarray  # 3 x H x W in [0, 1]
    annotations: tuple[str, ...]
    cognitive_code: np.ndarray  # 7 x 7
    abstraction_level: float
    dataset_tag: str = "synthetic"
    category: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        image = _frozen(self.image)
        if image.ndim != 3 or image.shape[0] != 3 or min(image.shape[1:]) < 16:
            raise InvalidInput(f"image must be 3 x H x W with H, W >= 16, got {image.shape}")
        if image.min() < 0 or image.max() > 1:
            raise InvalidInput("image values must lie in [0, 1]")
        code = _frozen(self.cognitive_code)
        if code.shape != (7, 7):
            raise InvalidInput(f"cognitive_code must be 7x7, got {code.shape}")
        if not np.isfinite(self.abstraction_level):
            raise InvalidInput("abstraction_level must be finite")
        if self.dataset_tag not in DATASET_TAGS:
            raise InvalidInput(f"unknown dataset tag {self.dataset_tag!r}")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "cognitive_code", code)
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "abstraction_level", float(self.abstraction_level))


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset

    def __post_init__(self):
        if self.train & self.val or self.train & self.test or self.val & self.test:
            raise IntegrityError("split sets overlap")

    def of(self, stimulus_id: str) -> str:
        for name in ("train", "val", "test"):
            if stimulus_id in getattr(self, name):
                return name
        raise KeyError(stimulus_id)

    def to_json(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("train", "val", "test")}

    @classmethod
    def from_json(cls, d: dict) -> "SplitAssignment":
        return cls(frozenset(d["train"]), frozenset(d["val"]), frozenset(d["test"]))


def split_dataset(stimulus_ids: Sequence[str], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Split stimulus ids (never subjects) into train/val/test.

    Val and test get ``floor(n * ratio)`` ids each; the remainder goes to
    train. Ids are sorted before the seeded shuffle so the result does not
    depend on input order.
    """
    ids = list(stimulus_ids)
    if not ids:
        raise InvalidInput("stimulus_ids is empty")
    if len(set(ids)) != len(ids):
        raise InvalidInput("stimulus_ids contains duplicates")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInput(f"ratios must be 3 non-negative values summing to 1, got {ratios}")
    n = len(ids)
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    order = sorted(ids)
    random.Random(seed).shuffle(order)
    test = frozenset(order[:n_test])
    val = frozenset(order[n_test:n_test + n_val])
    train = frozenset(order[n_test + n_val:])
    return SplitAssignment(train, val, test)


def check_leakage(split: SplitAssignment, epochs: Iterable[EEGEpoch] = ()) -> dict:
    """Report pairwise overlaps between split sets (all zero when clean)."""
    report = {
        "train_val": len(split.train & split.val),
        "train_test": len(split.train & split.test),
        "val_test": len(split.val & split.test),
    }
    assigned = split.train | split.val | split.test
    report["unassigned_epochs"] = sum(1 for e in epochs if e.stimulus_id not in assigned)
    return report


# ---------------------------------------------------------------- array files

def write_array(path, array) -> None:
    a = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    header += b"\0" * (-len(header) % 16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(a.tobytes())


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    offset += -offset % 16
    n = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != 4 * n:
        raise IntegrityError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4", offset=offset).reshape(shape).astype(np.float32)


def write_png(path, image) -> None:
    """Write a 3 x H x W [0,1] image as 8-bit RGB PNG."""
    a = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(a.transpose(1, 2, 0), mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    a = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / np.float32(255.0)
    return a.transpose(2, 0, 1).copy()


# ---------------------------------------------------------------- dataset I/O

def save_dataset(root, stimuli: Sequence[StimulusRecord], epochs: Sequence[EEGEpoch],
                 dataset_tag: str = "synthetic", extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stim_entries = []
    for s in stimuli:
        rel = f"images/{s.stimulus_id}.png"
        write_png(root / rel, s.image)
        entry = {
            "id": s.stimulus_id,
            "image": rel,
            "annotations": list(s.annotations),
            "abstraction_level": s.abstraction_level,
            "cognitive_code": s.cognitive_code.astype(float).tolist(),
        }
        if s.category is not None:
            entry["category"] = s.category
        if s.extra:
            entry["extra"] = s.extra
        stim_entries.append(entry)
    epoch_entries = []
    for e in epochs:
        rel = f"eeg/{e.subject_id}/{e.stimulus_id}.arr"
        write_array(root / rel, e.data)
        epoch_entries.append({
            "subject_id": e.subject_id,
            "stimulus_id": e.stimulus_id,
            "file": rel,
            "sampling_rate": e.sampling_rate,
            "t0_offset": e.t0_offset,
            "channel_names": list(e.channel_names),
        })
    manifest = {"dataset_tag": dataset_tag, "stimuli": stim_entries, "epochs": epoch_entries}
    if extra:
        manifest.update(extra)
    (root / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} under {root}")
    return json.loads(path.read_text())


def load_dataset(root, dataset_tag: str | None = None) -> tuple[list[StimulusRecord], list[EEGEpoch]]:
    """Load every stimulus and epoch listed in ``root/manifest.json``.

    Raises ``FileNotFoundError`` when the manifest is missing and
    :class:`IntegrityError` when an epoch points at an unknown stimulus.
    """
    root = Path(root)
    manifest = read_manifest(root)
    tag = dataset_tag or manifest.get("dataset_tag", "synthetic")
    stimuli = []
    for entry in manifest["stimuli"]:
        stimuli.append(StimulusRecord(
            stimulus_id=entry["id"],
            image=read_png(root / entry["image"]),
            annotations=entry.get("annotations", []),
            cognitive_code=np.asarray(entry["cognitive_code"], dtype=np.float32),
            abstraction_level=entry["abstraction_level"],
            dataset_tag=tag,
            category=entry.get("category"),
            extra=entry.get("extra", {}),
        ))
    known = {s.stimulus_id for s in stimuli}
    default_names = manifest.get("channel_names")
    epochs = []
    for entry in manifest["epochs"]:
        if entry["stimulus_id"] not in known:
            raise IntegrityError(f"epoch references unknown stimulus_id {entry['stimulus_id']!r}")
        data = read_array(root / entry["file"])
        names = entry.get("channel_names") or default_names
        epochs.append(EEGEpoch(
            data=data,
            sampling_rate=entry["sampling_rate"],
            channel_names=names,
            subject_id=entry["subject_id"],
            stimulus_id=entry["stimulus_id"],
            t0_offset=entry.get("t0_offset", 0.0),
        ))
    return stimuli, epochs
