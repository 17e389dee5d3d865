"""``sgdm`` command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 invalid state (missing upstream
stage), 4 integrity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from sgdm.errors import InvalidInput, SgdmError

log = logging.getLogger("sgdm")

TRAIN_STAGES = ("train-vae", "train-clip", "train-eeg", "train-prior", "train-struct", "train-gen")


def _window(text: str):
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("window must be START,END in ms")
    return [a, b]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--run", help="run directory (overrides the config's out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    variant = argparse.ArgumentParser(add_help=False)
    variant.add_argument("--mode", choices=("full", "no_component", "zero_information"))
    variant.add_argument("--window", type=_window, help="START,END in ms (EEG-side stages)")
    variant.add_argument("--region", help="restrict EEG to one montage region")
    variant.add_argument("--montage", help="montage JSON for --region")

    p = argparse.ArgumentParser(prog="sgdm", description="EEG-to-image reconstruction pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-synth", parents=[common], help="synthesize a dataset, split it, train the IS classifier")
    s.add_argument("--n-stimuli", type=int)
    s.add_argument("--n-subjects", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--out", help="run directory; the dataset root is written inside it")

    for stage in TRAIN_STAGES:
        s = sub.add_parser(stage, parents=[common, variant], help=f"run the {stage} stage")
        s.add_argument("--out", help="run directory")

    s = sub.add_parser("train-all", parents=[common, variant], help="run every stage that is missing or stale")
    s.add_argument("--out", help="run directory")

    s = sub.add_parser("generate", parents=[common, variant], help="generate images for a split")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--steps", type=int)
    s.add_argument("--control-rate", type=float)
    s.add_argument("--guidance", type=float, help="classifier-free guidance scale on the semantic condition")
    s.add_argument("--out", help="output directory for PNGs and index.json")

    s = sub.add_parser("evaluate", parents=[common], help="score generated images")
    s.add_argument("--gen", required=True, help="directory written by `sgdm generate`")
    s.add_argument("--dataset", help="dataset root (defaults to the run's dataset)")
    s.add_argument("--metrics", default="iou,shift_iou,ssim,is,fid,clip")
    s.add_argument("--report", default=None, help="output JSON path")
    s.add_argument("--csv", default=None, help="optional per-item CSV path")

    s = sub.add_parser("ablate", parents=[common], help="ablation modes plus control-rate sweep")
    s.add_argument("--modes", default="full,zero_information")
    s.add_argument("--report", default=None)

    s = sub.add_parser("analyze-time", parents=[common], help="time-window sweep")
    s.add_argument("--mode", default="sliding", choices=("sliding", "cumulative"))
    s.add_argument("--width", type=float, default=200.0)
    s.add_argument("--stride", type=float, default=100.0)
    s.add_argument("--endpoints", default=None, help="comma-separated cumulative endpoints (ms)")
    s.add_argument("--masking", action="store_true", help="mask inputs instead of retraining per window")
    s.add_argument("--out", help="output directory for the curve JSON and plot")

    s = sub.add_parser("analyze-space", parents=[common], help="five-region channel sweep")
    s.add_argument("--montage", default=None)
    s.add_argument("--out", help="output directory for the curve JSON and plot")

    sub.add_parser("verify", parents=[common], help="check run records against checkpoints")
    return p


def load_config(args):
    from sgdm.pipeline import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    run_dir = args.run or (getattr(args, "out", None) if args.command in ("make-synth", "train-all") + TRAIN_STAGES else None)
    if run_dir:
        over["out_dir"] = run_dir
    if getattr(args, "mode", None) in ("full", "no_component", "zero_information"):
        over["mode"] = args.mode
    for name, key in (("window", "window_ms"), ("region", "region")):
        if getattr(args, name, None) is not None:
            over[key] = getattr(args, name)
    if args.command != "analyze-space" and getattr(args, "montage", None):
        over["montage"] = args.montage
    if args.command == "make-synth":
        synth = dict(cfg.synth)
        for flag, key in (("n_stimuli", "n_stimuli"), ("n_subjects", "n_subjects"), ("noise", "noise_sigma")):
            if getattr(args, flag) is not None:
                synth[key] = getattr(args, flag)
        over["synth"] = synth
    if args.command == "generate":
        if args.steps is not None:
            over["n_steps"] = args.steps
        if args.control_rate is not None:
            over["control_rate"] = args.control_rate
        if args.guidance is not None:
            over["guidance"] = args.guidance
    d = cfg.to_dict()
    d.update(over)
    return RunConfig.from_dict(d)


def _save_png_batch(out: Path, images, items) -> list[dict]:
    from sgdm.data import write_png

    rows = []
    for img, (sid, sub) in zip(images, items):
        name = f"{sid}_{sub}.png"
        write_png(out / name, img)
        rows.append({"stimulus_id": sid, "subject_id": sub, "file": name})
    return rows


def cmd_generate(cfg, args) -> dict:
    from sgdm.pipeline import Pipeline

    pipe = Pipeline(cfg)
    for stage in ("train-eeg", "train-prior", "train-gen") + (() if cfg.mode == "no_component" else ("train-struct",)):
        pipe.require(stage)
    res = pipe.generate(args.split, metrics=False)
    out = Path(args.out or Path(cfg.out_dir) / "generated" / args.split)
    out.mkdir(parents=True, exist_ok=True)
    rows = _save_png_batch(out, res["images"], res["items"])
    by_stim: dict = {}
    for r in rows:
        by_stim.setdefault(r["stimulus_id"], []).append(r["file"])
    index = {"run_dir": str(Path(cfg.out_dir).resolve()), "split": args.split, "mode": cfg.mode,
             "control_rate": res["control_rate"], "n_steps": res["n_steps"], "guidance": cfg.guidance, "items": rows,
             "by_stimulus": by_stim, **pipe.provenance()}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return {"out": str(out), "n_images": len(rows)}


def cmd_evaluate(cfg, args) -> dict:
    from sgdm.data import load_dataset, read_png
    from sgdm.metrics import MetricReport
    from sgdm.pipeline import Pipeline, RunConfig

    gen_dir = Path(args.gen)
    index_path = gen_dir / "index.json"
    if not index_path.exists():
        raise InvalidInput(f"{index_path} not found; run `sgdm generate` first")
    index = json.loads(index_path.read_text())
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    allowed = {"iou", "shift_iou", "ssim", "is", "fid", "clip"}
    bad = set(wanted) - allowed
    if bad:
        raise InvalidInput(f"unknown metrics {sorted(bad)}")
    if not args.run and not args.config:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "out_dir": index["run_dir"]})
    pipe = Pipeline(cfg)
    stimuli, _ = load_dataset(args.dataset) if args.dataset else pipe.dataset()
    by_id = {s.stimulus_id: s for s in stimuli}
    items = [(r["stimulus_id"], r["subject_id"]) for r in index["items"]]
    missing = [sid for sid, _ in items if sid not in by_id]
    if missing:
        raise InvalidInput(f"generated items reference unknown stimuli: {missing[:3]}")
    images = np.stack([read_png(gen_dir / r["file"]) for r in index["items"]])
    targets = np.stack([by_id[sid].image for sid, _ in items])
    per = pipe.item_metrics(images, targets, [m for m in wanted if m in ("iou", "shift_iou", "ssim", "clip")])
    report = MetricReport(meta={"gen_index": str(index_path), "control_rate": index.get("control_rate"),
                                "mode": index.get("mode"), "provenance": {k: index.get(k) for k in ("config_hash", "stage_hashes")}})
    for i, (sid, sub) in enumerate(items):
        report.add(sid, sub, {k: v[i] for k, v in per.items()})
    if per:
        report.summarize(seed=cfg.stage_seed("bootstrap"))
    set_m = pipe.set_metrics(images, targets) if {"is", "fid"} & set(wanted) else {}
    report.meta["set_metrics"] = {k: v for k, v in set_m.items() if k.split("_")[0] in wanted}
    path = Path(args.report or Path(cfg.out_dir) / "reports" / "evaluate.json")
    report.save(path)
    if args.csv:
        report.to_csv(args.csv)
    return {"report": str(path), "aggregate": report.aggregate.get("sgdm", {}), **report.meta["set_metrics"]}


def cmd_analyze(cfg, args) -> dict:
    from sgdm.analysis import RegionMap, WindowPlan, plot_curve, run_region_sweep, run_window_sweep, save_curve
    from sgdm.pipeline import Pipeline

    out = Path(args.out or Path(cfg.out_dir) / "analysis")
    out.mkdir(parents=True, exist_ok=True)
    prov = Pipeline(cfg).provenance()
    if args.command == "analyze-time":
        ends = [float(e) for e in args.endpoints.split(",")] if args.endpoints else []
        plan = WindowPlan(mode=args.mode, width=args.width, stride=args.stride, endpoints=ends)
        curve = run_window_sweep(cfg, plan, retrain=not args.masking)
        name = f"time_{args.mode}"
        meta = {"plan": vars(plan), "retrain": not args.masking, "provenance": prov}
        xlabel = "window (ms)"
    else:
        rmap = RegionMap.load(args.montage)
        curve = run_region_sweep(cfg, rmap)
        name = "space"
        meta = {"montage": args.montage or "default-64", "provenance": prov}
        xlabel = "region"
    save_curve(out / f"{name}.json", curve, meta)
    plot_curve(out / f"{name}.png", curve, xlabel)
    return {"curve": curve, "out": str(out / f"{name}.json")}


def dispatch(args) -> dict:
    from sgdm import pipeline as pl

    cfg = load_config(args)
    cmd = args.command
    if cmd == "make-synth":
        path = pl.Pipeline(cfg).run_stage("make-synth")
        return {"checkpoint": str(path), "dataset": str(pl.Pipeline(cfg).dataset_dir)}
    if cmd in TRAIN_STAGES:
        return {"checkpoint": str(pl.Pipeline(cfg).run_stage(cmd))}
    if cmd == "train-all":
        pl.Pipeline(cfg).ensure_all()
        return {"ok": True}
    if cmd == "generate":
        return cmd_generate(cfg, args)
    if cmd == "evaluate":
        return cmd_evaluate(cfg, args)
    if cmd == "ablate":
        report = pl.run_ablation(cfg, tuple(m.strip() for m in args.modes.split(",")))
        path = report.save(args.report or Path(cfg.out_dir) / "reports" / "ablation.json")
        return {"report": str(path), "comparisons": report.comparisons}
    if cmd in ("analyze-time", "analyze-space"):
        return cmd_analyze(cfg, args)
    if cmd == "verify":
        return pl.verify_outputs(cfg.out_dir)
    raise InvalidInput(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = dispatch(args)
    except SgdmError as e:
        print(f"sgdm: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, json.JSONDecodeError) as e:
        print(f"sgdm: invalid input: {e}", file=sys.stderr)
        return InvalidInput.exit_code
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
