"""Staged training, generation and evaluation.

Every stage reads its upstream checkpoints from ``out_dir/checkpoints`` and
writes one checkpoint plus a JSON run record. A stage's hash covers only the
config sections it (and its upstream stages) depend on, so window, region and
ablation variants reuse the shared stages and get their own checkpoint names.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from sgdm.analysis import RegionMap, region_subset, window_slice
from sgdm.atm import ATM, AtmConfig, TrainConfig, epochs_to_array, train_semantic
from sgdm.checkpoint import load_module, save_module
from sgdm.classifier import CategoryClassifier, ClassifierConfig, accuracy, train_classifier
from sgdm.clip import DualEncoder, DualEncoderConfig, DualTrainConfig, Vocabulary, finetune_dual, \
    stimulus_text, train_dual
from sgdm.data import SplitAssignment, check_leakage, load_dataset, read_manifest, save_dataset, \
    split_dataset
from sgdm.errors import IntegrityError, InvalidInput, InvalidState
from sgdm.generator import GenConfig, Generator, GenTrainConfig, generate, train_generator
from sgdm.metrics import MetricReport, frechet_distance, inception_score, iou, shift_iou, ssim
from sgdm.prior import DiffusionPrior, PriorConfig, PriorTrainConfig, sample_prior, train_prior
from sgdm.structure import RefVAE, StructConfig, StructTrainConfig, StructurePredictor, VaeConfig, \
    VaeTrainConfig, image_to_mask, predict_structure, train_structure, train_vae, vae_encode_reference
from sgdm.synth import CATEGORIES, ForwardModel, make_corpus, make_synthetic_dataset, stable_seed

STAGES = ("make-synth", "train-vae", "train-clip", "train-eeg", "train-prior", "train-struct", "train-gen")
DEPENDS = {
    "make-synth": (),
    "train-vae": ("make-synth",),
    "train-clip": ("make-synth",),
    "train-eeg": ("make-synth", "train-clip"),
    "train-prior": ("train-eeg",),
    "train-struct": ("make-synth", "train-vae"),
    "train-gen": ("train-vae", "train-clip"),
}
# config fields each stage reads directly
SECTIONS = {
    "make-synth": ("seed", "dataset_root", "synth", "classifier"),
    "train-vae": ("vae",),
    "train-clip": ("clip",),
    "train-eeg": ("eeg", "window_ms", "region", "montage"),
    "train-prior": ("prior",),
    "train-struct": ("struct", "window_ms", "region", "montage", "structure_mode"),
    "train-gen": ("gen", "mode"),
}
MODES = ("full", "no_component", "zero_information")
CONTROL_RATES = (0.0, 0.25, 0.5, 0.75, 1.0)


def _default(d: dict):
    return field(default_factory=lambda: json.loads(json.dumps(d)))


@dataclass
class RunConfig:
    out_dir: str = "runs/sgdm"
    dataset_root: str | None = None
    seed: int = 0
    control_rate: float = 0.5
    n_steps: int = 4
    guidance: float = 3.0
    mode: str = "full"
    window_ms: list | None = None
    region: str | None = None
    montage: str | None = None
    mask_ms: list | None = None
    synth: dict = _default({"n_stimuli": 200, "n_subjects": 3, "noise_sigma": 1.0, "image_size": 64,
                            "corpus_size": 1200, "split": [0.8, 0.1, 0.1], "local_amplitude": 0.5,
                            "category_amplitude": 1.5})
    classifier: dict = _default({"epochs": 25})
    vae: dict = _default({"model": {"downsample": 2, "hidden": 32}, "train": {"epochs": 20},
                          "corpus_images": 200})
    clip: dict = _default({"model": {"max_len": 24}, "pretrain_steps": 600, "finetune_steps": 150,
                           "k_trainable": 3, "batch_size": 64, "lr": 1e-3})
    eeg: dict = _default({"model": {"lambda2": 2.0}, "train": {"epochs": 30, "noise_aug": 1.0}})
    prior: dict = _default({"model": {}, "train": {"epochs": 200}})
    struct: dict = _default({"model": {"n_doublings": 4}, "train": {"epochs": 40, "weight_decay": 3.0, "noise_aug": 3.0}})
    gen: dict = _default({"model": {"latent_size": 16, "global_semantic": True, "structure_dropout": 0.5},
                          "train": {"epochs": 40}, "corpus_images": 480})

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInput(f"unknown ablation mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.control_rate <= 1.0:
            raise InvalidInput("control_rate must lie in [0, 1]")
        if self.n_steps < 1:
            raise InvalidInput("n_steps must be >= 1")
        if self.guidance < 0:
            raise InvalidInput("guidance must be >= 0")

    @property
    def structure_mode(self) -> str:
        """Structural supervision differs only for the zero-information ablation."""
        return "zero_information" if self.mode == "zero_information" else "full"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = asdict(cls())
        unknown = set(d) - set(base)
        if unknown:
            raise InvalidInput(f"unknown config fields {sorted(unknown)}")
        merged = {}
        for k, v in base.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                merged[k] = _merge(v, d[k])
            else:
                merged[k] = d.get(k, v)
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hash(self) -> str:
        """Hash of every field that can change a result (output location excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        return _digest(d)

    def stage_seed(self, stage: str) -> int:
        return stable_seed(self.seed, stage) % (2 ** 31)


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge(a[k], v) if isinstance(a.get(k), dict) and isinstance(v, dict) else v
    return out


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **kw)


def stage_hash(config: RunConfig, stage: str) -> str:
    fields = {name: getattr(config, name) for name in SECTIONS[stage]}
    upstream = {dep: stage_hash(config, dep) for dep in DEPENDS[stage]}
    return _digest({"stage": stage, "fields": fields, "upstream": upstream})


def variant_name(config: RunConfig, stage: str) -> str:
    name = stage
    if stage in ("train-eeg", "train-prior", "train-struct"):
        if config.window_ms is not None:
            name += "@w{:g}-{:g}".format(*config.window_ms)
        if config.region is not None:
            name += f"@r{config.region}"
    if stage == "train-struct" and config.structure_mode != "full":
        name += f"@{config.structure_mode}"
    if stage == "train-gen" and config.mode != "full":
        name += f"@{config.mode}"
    return name


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Pipeline:
    """Lazy access to one run directory's dataset, split and trained modules."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out_dir)
        self._cache: dict = {}
        torch.use_deterministic_algorithms(True)

    # ------------------------------------------------------------ paths
    @property
    def dataset_dir(self) -> Path:
        return Path(self.config.dataset_root) if self.config.dataset_root else self.out / "dataset"

    def checkpoint_path(self, stage: str) -> Path:
        return self.out / "checkpoints" / f"{variant_name(self.config, stage)}.ckpt"

    def record_path(self, stage: str) -> Path:
        return self.out / "records" / f"{variant_name(self.config, stage)}.json"

    def is_current(self, stage: str) -> bool:
        path = self.checkpoint_path(stage)
        if not path.exists() or not self.record_path(stage).exists():
            return False
        rec = json.loads(self.record_path(stage).read_text())
        return rec.get("stage_hash") == stage_hash(self.config, stage)

    def require(self, stage: str) -> None:
        if not self.checkpoint_path(stage).exists():
            raise InvalidState(f"stage {stage!r} has not been run ({self.checkpoint_path(stage)} missing)")

    # ------------------------------------------------------------ data
    def dataset(self):
        if "dataset" not in self._cache:
            if not (self.dataset_dir / "manifest.json").exists():
                raise InvalidState("stage 'make-synth' has not been run (no dataset manifest)")
            self._cache["dataset"] = load_dataset(self.dataset_dir)
        return self._cache["dataset"]

    def split(self) -> SplitAssignment:
        path = self.out / "split.json"
        if not path.exists():
            raise InvalidState("stage 'make-synth' has not been run (no split.json)")
        return SplitAssignment.from_json(json.loads(path.read_text()))

    def stimuli_by_id(self) -> dict:
        return {s.stimulus_id: s for s in self.dataset()[0]}

    def select(self, part: str):
        """(stimuli, epochs) of one split part, sorted by (subject, stimulus)."""
        if part not in ("train", "val", "test"):
            raise InvalidInput(f"unknown split {part!r}")
        split = self.split()
        ids = getattr(split, part)
        stimuli, epochs = self.dataset()
        st = sorted((s for s in stimuli if s.stimulus_id in ids), key=lambda s: s.stimulus_id)
        ep = sorted((e for e in epochs if e.stimulus_id in ids), key=lambda e: (e.subject_id, e.stimulus_id))
        return st, ep

    def eeg_array(self, epochs) -> np.ndarray:
        c = self.config
        if c.region is not None:
            rmap = RegionMap.load(c.montage)
            epochs = [region_subset(e, c.region, rmap) for e in epochs]
        if c.window_ms is not None:
            epochs = [window_slice(e, c.window_ms) for e in epochs]
        x = epochs_to_array(epochs)
        if c.mask_ms is not None:
            e0 = epochs[0]
            t = e0.sample_time(np.arange(e0.n_samples))
            keep = (t >= c.mask_ms[0]) & (t < c.mask_ms[1])
            x = x * keep[None, None, :].astype(x.dtype)
        return x

    def corpus(self, n: int):
        key = ("corpus", n)
        if key not in self._cache:
            s = self.config.synth
            self._cache[key] = make_corpus(n, stable_seed(self.config.seed, "corpus") % (2 ** 31), s["image_size"])
        return self._cache[key]

    # ------------------------------------------------------------ modules
    def _load(self, stage: str, factory):
        key = ("module", variant_name(self.config, stage))
        if key not in self._cache:
            self.require(stage)
            path = self.checkpoint_path(stage)
            from sgdm.checkpoint import load_arrays
            _, meta = load_arrays(path)
            module = factory(meta["module"])
            load_module(path, module)
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
            self._cache[key] = module
        return self._cache[key]

    def classifier(self) -> CategoryClassifier:
        return self._load("make-synth", CategoryClassifier.from_meta)

    def vae(self) -> RefVAE:
        return self._load("train-vae", RefVAE.from_meta)

    def dual_encoder(self) -> DualEncoder:
        return self._load("train-clip", DualEncoder.from_meta)

    def atm(self) -> ATM:
        return self._load("train-eeg", ATM.from_meta)

    def prior(self) -> DiffusionPrior:
        return self._load("train-prior", DiffusionPrior.from_meta)

    def structure(self) -> StructurePredictor:
        return self._load("train-struct", StructurePredictor.from_meta)

    def generator(self) -> Generator:
        return self._load("train-gen", Generator.from_meta)

    # ------------------------------------------------------------ stages
    def run_stage(self, stage: str) -> Path:
        if stage not in STAGES:
            raise InvalidInput(f"unknown stage {stage!r}; expected one of {STAGES}")
        for dep in DEPENDS[stage]:
            if not self.checkpoint_path(dep).exists():
                raise InvalidState(f"stage {stage!r} needs {dep!r} first", )
        seed = self.config.stage_seed(stage)
        torch.manual_seed(seed)
        start = time.perf_counter()
        module, meta, extra = getattr(self, "_stage_" + stage.replace("-", "_"))(seed)
        path = self.checkpoint_path(stage)
        s_hash = stage_hash(self.config, stage)
        save_module(path, module, {"stage": stage, "variant": variant_name(self.config, stage),
                                   "stage_hash": s_hash, "seed": seed, "module": meta})
        record = {"stage": stage, "variant": variant_name(self.config, stage), "stage_hash": s_hash,
                  "config_hash": self.config.hash(), "seed": seed, "checkpoint": path.name,
                  "checkpoint_sha256": sha256_file(path), "losses": meta.get("losses", []),
                  "wall_time_s": time.perf_counter() - start, **extra}
        self.record_path(stage).parent.mkdir(parents=True, exist_ok=True)
        self.record_path(stage).write_text(json.dumps(record, indent=1, sort_keys=True))
        self._cache.pop(("module", variant_name(self.config, stage)), None)
        return path

    def ensure(self, stage: str) -> Path:
        for dep in DEPENDS[stage]:
            self.ensure(dep)
        if not self.is_current(stage):
            return self.run_stage(stage)
        return self.checkpoint_path(stage)

    def ensure_all(self) -> None:
        for stage in STAGES:
            self.ensure(stage)

    def ensure_eeg_stages(self) -> None:
        for stage in ("train-eeg", "train-prior", "train-struct"):
            self.ensure(stage)

    def _stage_make_synth(self, seed: int):
        c = self.config
        s = c.synth
        if c.dataset_root and (self.dataset_dir / "manifest.json").exists():
            stimuli, epochs = load_dataset(self.dataset_dir)
        else:
            model = ForwardModel(local_amplitude=s["local_amplitude"], category_amplitude=s["category_amplitude"])
            stimuli, epochs, _ = make_synthetic_dataset(s["n_stimuli"], s["n_subjects"], s["noise_sigma"],
                                                        c.seed, s["image_size"], model)
            save_dataset(self.dataset_dir, stimuli, epochs, "synthetic", {"config_hash": stage_hash(c, "make-synth")})
        self._cache.pop("dataset", None)
        split = split_dataset([st.stimulus_id for st in stimuli], tuple(s["split"]), seed)
        leak = check_leakage(split, epochs)
        if any(leak.values()):
            raise IntegrityError(f"split leakage detected: {leak}")
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "split.json").write_text(json.dumps(split.to_json(), indent=1, sort_keys=True))
        corpus = self.corpus(s["corpus_size"])
        clf = CategoryClassifier(ClassifierConfig(n_classes=len(CATEGORIES), image_size=s["image_size"]))
        train_classifier(np.stack([r.image for r in corpus]), [CATEGORIES.index(r.category) for r in corpus],
                         clf, epochs=c.classifier["epochs"], seed=seed)
        clear = [st for st in stimuli if st.category in CATEGORIES and st.extra.get("ambiguity", 0.0) == 0.0]
        if clear:
            clf.accuracy = accuracy(clf, np.stack([st.image for st in clear]),
                                    [CATEGORIES.index(st.category) for st in clear])
        return clf, clf.meta(), {"leakage": leak,
                                 "classifier_accuracy": clf.accuracy}

    def _stage_train_vae(self, seed: int):
        c = self.config.vae
        train, _ = self.select("train")
        images = [st.image for st in train] + [r.image for r in self.corpus(self.config.synth["corpus_size"])[:c["corpus_images"]]]
        cfg = VaeConfig(image_size=self.config.synth["image_size"], **c["model"])
        vae = RefVAE(cfg)
        train_vae(np.stack(images), vae, VaeTrainConfig(seed=seed, **c["train"]))
        return vae, vae.meta(), {"recon_mse": vae.recon_mse}

    def _stage_train_clip(self, seed: int):
        c = self.config.clip
        corpus = self.corpus(self.config.synth["corpus_size"])
        train, _ = self.select("train")
        texts = [stimulus_text(r.annotations) for r in corpus + train]
        model = DualEncoder(DualEncoderConfig(image_size=self.config.synth["image_size"], **c["model"]),
                            Vocabulary.from_corpus(texts))
        pre = DualTrainConfig(steps=c["pretrain_steps"], batch_size=c["batch_size"], lr=c["lr"], seed=seed)
        train_dual([(r.image, stimulus_text(r.annotations)) for r in corpus], model, pre)
        fine = DualTrainConfig(steps=c["finetune_steps"], batch_size=c["batch_size"], lr=c["lr"] / 2,
                               k_trainable=c["k_trainable"], seed=seed + 1)
        finetune_dual([(st.image, stimulus_text(st.annotations)) for st in train], model, fine)
        meta = model.meta()
        meta["losses"] = pre.losses + fine.losses
        return model, meta, {}

    def _image_targets(self, stimuli) -> np.ndarray:
        return self.dual_encoder().embed_images(np.stack([st.image for st in stimuli]))

    def _eeg_training_set(self):
        train, epochs = self.select("train")
        by_id = {st.stimulus_id: i for i, st in enumerate(train)}
        x = self.eeg_array(epochs)
        rows = [by_id[e.stimulus_id] for e in epochs]
        return train, epochs, x, rows

    def _atm_config(self, x: np.ndarray) -> AtmConfig:
        return AtmConfig(n_channels=x.shape[1], n_samples=x.shape[2], **self.config.eeg["model"])

    def _stage_train_eeg(self, seed: int):
        train, _, x, rows = self._eeg_training_set()
        z_i = self._image_targets(train)[rows]
        model = ATM(self._atm_config(x))
        train_semantic(x, z_i, model, TrainConfig(seed=seed, **self.config.eeg["train"]))
        return model, model.meta(), {}

    def _stage_train_prior(self, seed: int):
        train, _, x, rows = self._eeg_training_set()
        z_i = self._image_targets(train)[rows]
        z_e = self.atm().embed(x)
        model = DiffusionPrior(PriorConfig(**self.config.prior["model"]))
        train_prior(z_i, z_e, model, PriorTrainConfig(seed=seed, **self.config.prior["train"]))
        return model, model.meta(), {}

    def _stage_train_struct(self, seed: int):
        train, _, x, rows = self._eeg_training_set()
        vae = self.vae()
        s_gt = vae_encode_reference(np.stack([st.image for st in train]), vae)[rows]
        if self.config.structure_mode == "zero_information":
            s_gt = np.zeros_like(s_gt)
        codes = np.stack([train[i].cognitive_code for i in rows])
        cfg = StructConfig(eeg=self._atm_config(x), latent_channels=vae.cfg.latent_channels,
                           **self.config.struct["model"])
        if cfg.output_size != s_gt.shape[-1]:
            raise InvalidInput(f"structure predictor emits {cfg.output_size}px maps, VAE latents are {s_gt.shape[-1]}px")
        model = StructurePredictor(cfg)
        train_structure(x, s_gt, codes, model, vae, StructTrainConfig(seed=seed, **self.config.struct["train"]))
        return model, model.meta(), {"zero_structure": self.config.structure_mode == "zero_information"}

    def _stage_train_gen(self, seed: int):
        c = self.config.gen
        vae, clip = self.vae(), self.dual_encoder()
        train, _ = self.select("train")
        records = train + self.corpus(self.config.synth["corpus_size"])[-c["corpus_images"]:] if c["corpus_images"] else train
        images = np.stack([r.image for r in records])
        latents = vae_encode_reference(images, vae)
        z = clip.embed_images(images)
        cfg = GenConfig(latent_channels=vae.cfg.latent_channels, embed_dim=clip.cfg.embed_dim,
                        structural=self.config.mode != "no_component", **c["model"])
        if cfg.latent_size != latents.shape[-1]:
            raise InvalidInput(f"generator latent size {cfg.latent_size} does not match VAE latents {latents.shape[-1]}")
        gen = Generator(cfg)
        zero = self.config.mode == "zero_information"
        s = np.zeros_like(latents) if zero else latents
        train_generator(latents, z, s, gen, vae, clip, GenTrainConfig(seed=seed, zero_structure=zero, **c["train"]))
        return gen, gen.meta(), {"mode": self.config.mode, "n_images": len(images)}

    # ------------------------------------------------------------ inference
    def conditions(self, part: str = "test") -> dict:
        """Semantic embeddings (through the prior) and structure maps for a split part."""
        key = ("conditions", part)
        if key in self._cache:
            return self._cache[key]
        stimuli, epochs = self.select(part)
        x = self.eeg_array(epochs)
        z_e = self.atm().embed(x)
        z = sample_prior(z_e, self.prior(), seed=self.config.stage_seed("sample-prior"))
        s = None
        if self.config.mode != "no_component":
            s = predict_structure(x, self.structure())
            if self.config.mode == "zero_information":
                s = np.zeros_like(s)
        by_id = {st.stimulus_id: st for st in stimuli}
        out = {"items": [(e.stimulus_id, e.subject_id) for e in epochs], "z": z, "s": s,
               "targets": np.stack([by_id[e.stimulus_id].image for e in epochs])}
        self._cache[key] = out
        return out

    def generate(self, part: str = "test", control_rate: float | None = None, n_steps: int | None = None,
                 metrics: bool = True) -> dict:
        rate = self.config.control_rate if control_rate is None else control_rate
        steps = self.config.n_steps if n_steps is None else n_steps
        cond = self.conditions(part)
        images = generate(cond["z"], cond["s"], steps, rate, self.generator(), self.vae(),
                          seed=self.config.stage_seed("generate"), guidance=self.config.guidance)
        out = {"items": cond["items"], "images": images, "control_rate": rate, "n_steps": steps}
        if metrics:
            out["metrics"] = self.item_metrics(images, cond["targets"])
        return out

    def item_metrics(self, images, targets, names=("iou", "shift_iou", "ssim", "clip")) -> dict:
        gm, tm = image_to_mask(images), image_to_mask(targets)
        out = {}
        if "iou" in names:
            out["iou"] = np.array([iou(a, b) for a, b in zip(gm, tm)])
        if "shift_iou" in names:
            out["shift_iou"] = np.array([shift_iou(a, b) for a, b in zip(gm, tm)])
        if "ssim" in names:
            out["ssim"] = np.array([ssim(a, b) for a, b in zip(images, targets)])
        if "clip" in names:
            clip = self.dual_encoder()
            za, zb = clip.embed_images(images), clip.embed_images(targets)
            out["clip"] = np.clip(np.sum(za * zb, axis=1), -1.0, 1.0)
        return out

    def set_metrics(self, images, reference) -> dict:
        clip = self.dual_encoder()
        is_mean, is_std = inception_score(images, self.classifier())
        fid = frechet_distance(clip.embed_images(images), clip.embed_images(reference))
        return {"is": is_mean, "is_std": is_std, "fid": fid}

    def provenance(self) -> dict:
        hashes = {}
        for stage in STAGES:
            if self.record_path(stage).exists():
                hashes[variant_name(self.config, stage)] = json.loads(self.record_path(stage).read_text())["stage_hash"]
        return {"config_hash": self.config.hash(), "stage_hashes": hashes}


def run_stage(stage: str, config: RunConfig) -> Path:
    return Pipeline(config).run_stage(stage)


def evaluation_report(pipe: Pipeline, result: dict, method: str = "sgdm", report: MetricReport | None = None) -> MetricReport:
    report = report or MetricReport()
    names = list(result["metrics"])
    for i, (sid, sub) in enumerate(result["items"]):
        report.add(sid, sub, {n: result["metrics"][n][i] for n in names}, method)
    return report


def run_ablation(config: RunConfig, modes=("full", "zero_information"), metrics=("iou", "shift_iou", "ssim", "clip"),
                 part: str = "test", control_rates=CONTROL_RATES) -> MetricReport:
    """Per-mode metrics with paired tests, plus the control-rate sweep of the full model."""
    for m in modes:
        if m not in MODES:
            raise InvalidInput(f"unknown ablation mode {m!r}")
    report = MetricReport()
    report.meta["modes"] = list(modes)
    report.meta["provenance"] = {}
    for m in modes:
        pipe = Pipeline(with_overrides(config, mode=m))
        pipe.ensure_all()
        res = pipe.generate(part)
        res["metrics"] = {k: v for k, v in res["metrics"].items() if k in metrics}
        evaluation_report(pipe, res, m, report)
        report.meta["provenance"][m] = pipe.provenance()
        report.meta.setdefault("zero_structure", {})[m] = m == "zero_information"
    for metric in metrics:
        report.compare(metric, list(modes))
    report.adjust_all()
    if control_rates:
        report.meta["control_rate_sweep"] = control_rate_sweep(config, control_rates, part)
    report.summarize(seed=config.stage_seed("bootstrap"))
    return report


def control_rate_sweep(config: RunConfig, rates=CONTROL_RATES, part: str = "test") -> list[dict]:
    pipe = Pipeline(with_overrides(config, mode="full"))
    pipe.ensure_all()
    cond = pipe.conditions(part)
    rows = []
    for r in rates:
        res = pipe.generate(part, control_rate=r)
        row = {"control_rate": r, "ssim": float(np.mean(res["metrics"]["ssim"])),
               "iou": float(np.mean(res["metrics"]["iou"])), "clip": float(np.mean(res["metrics"]["clip"]))}
        row.update(pipe.set_metrics(res["images"], cond["targets"]))
        rows.append(row)
    return rows


def verify_outputs(out_dir) -> dict:
    """Check every run record against its checkpoint bytes and header hash."""
    from sgdm.checkpoint import load_arrays

    out = Path(out_dir)
    records = sorted((out / "records").glob("*.json"))
    if not records:
        raise InvalidState(f"no run records under {out}")
    problems = []
    for rec_path in records:
        rec = json.loads(rec_path.read_text())
        ckpt = out / "checkpoints" / rec["checkpoint"]
        if not ckpt.exists():
            problems.append(f"{rec_path.name}: missing {ckpt.name}")
            continue
        if sha256_file(ckpt) != rec["checkpoint_sha256"]:
            problems.append(f"{rec_path.name}: checkpoint bytes changed")
        _, meta = load_arrays(ckpt)
        if meta.get("stage_hash") != rec["stage_hash"]:
            problems.append(f"{rec_path.name}: stage hash mismatch")
    known = {json.loads(p.read_text())["stage_hash"] for p in records}
    for rep in sorted((out / "reports").glob("*.json")) if (out / "reports").exists() else []:
        meta = json.loads(rep.read_text()).get("meta", {})
        prov = meta.get("provenance", {})
        groups = prov.values() if prov and "stage_hashes" not in prov else [prov]
        for g in groups:
            for name, h in g.get("stage_hashes", {}).items():
                if h not in known:
                    problems.append(f"{rep.name}: {name} hash {h} has no matching record")
    if problems:
        raise IntegrityError("; ".join(problems))
    return {"records": len(records), "ok": True}
