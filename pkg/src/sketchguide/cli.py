"""Command-line entry point.

Subcommands: make-shapes, train-backbone, train-lep, generate, simplify, eval.
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .errors import ConfigError, SketchGuideError

log = logging.getLogger("sketchguide")

CONFIG_NAME = "config.yaml"
INPUTS_NAME = "inputs.json"


def _dims(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like 32x32, got {text!r}")
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("dims must be positive")
    return [h, w]


def _jsonl(rows) -> bytes:
    return ("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)).encode()


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def record_run(out: Path, cfg: C.RunConfig, args, inputs: dict) -> None:
    """Echo the resolved config plus the input files (with digests) that the run consumed."""
    from .data import atomic_write

    cfg.write(out / CONFIG_NAME)
    flags = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "set", "verbose")}
    files = {k: {"path": str(v), "sha256": _sha256(Path(v))} for k, v in inputs.items() if v}
    payload = {"command": args.command, "flags": flags, "inputs": files}
    atomic_write(out / INPUTS_NAME, (json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n").encode())


def resolve_config(args, flag_map: dict) -> C.RunConfig:
    """Defaults <- --config file <- --set overrides <- dedicated flags."""
    cfg = C.load_config(args.config) if args.config else C.RunConfig()
    for assignment in args.set or []:
        cfg = C.apply_override(cfg, assignment)
    for attr, dotted in flag_map.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if dotted == "seed":
            cfg.seed = int(value)
        else:
            section, key = dotted.split(".")
            merged = cfg.to_dict()
            merged[section][key] = value
            cfg = C.from_dict(merged)
    return cfg


def _schedule_from(cfg: C.RunConfig):
    from .schedule import make_schedule

    s = cfg.schedule
    return make_schedule(s.T, s.kind, s.beta_start, s.beta_end)


def _schedule_from_backbone(meta: dict, cfg: C.RunConfig):
    """Samplers and LEP training must use the schedule the backbone was trained with."""
    stored = meta.get("schedule")
    if stored:
        cfg.schedule = C.ScheduleSection(int(stored["T"]), stored["kind"], float(stored["beta_start"]),
                                         float(stored["beta_end"]))
    return _schedule_from(cfg)


# commands -----------------------------------------------------------------

def cmd_make_shapes(args) -> int:
    from .data import build_triplet_dataset

    cfg = resolve_config(args, {"n": "data.n", "dims": "data.dims", "seed": "seed"})
    seed = cfg.require_seed()
    out = build_triplet_dataset(cfg.data.n, tuple(cfg.data.dims), seed, args.out)
    record_run(out, cfg, args, {})
    print(out)
    return 0


def cmd_train_backbone(args) -> int:
    from .backbone import BackboneConfig, IdentityCodec, save_backbone, train_toy_backbone
    from .data import atomic_write, load_triplet_dataset
    from .plotting import plot_loss_history

    cfg = resolve_config(args, {"epochs": "backbone.epochs", "lr": "backbone.lr", "seed": "seed",
                                "condition_drop_rate": "backbone.condition_drop_rate"})
    seed = cfg.require_seed()
    sched = _schedule_from(cfg)
    data = load_triplet_dataset(args.data)
    codec = IdentityCodec(1)
    images = codec.encode(torch.from_numpy(np.stack([tr.x for tr in data])).float().unsqueeze(1))
    b = cfg.backbone
    arch = BackboneConfig(image_size=images.shape[-1], channels=1, widths=tuple(b.widths),
                          mid_blocks=b.mid_blocks, emb_dim=b.emb_dim)
    if images.shape[-1] != images.shape[-2]:
        raise ConfigError("the toy backbone needs square images")
    model, info = train_toy_backbone(images, [tr.y for tr in data], sched, b.epochs, b.condition_drop_rate,
                                     config=arch, lr=b.lr, batch_size=b.batch_size, seed=seed, log=log.info)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = save_backbone(model, out / "backbone.ckpt", codec, sched, info)
    atomic_write(out / "loss_history.jsonl",
                 _jsonl({"epoch": i + 1, "loss": v} for i, v in enumerate(info["loss_history"])))
    if info["loss_history"]:
        plot_loss_history({"loss": info["loss_history"]}, out / "loss.png")
    record_run(out, cfg, args, {"data": args.data})
    if not info["cfg_reliable"]:
        log.warning("condition_drop_rate is 0: the unconditional branch is untrained, CFG with w != 1 is unreliable")
    print(path)
    return 0


def cmd_train_lep(args) -> int:
    from .backbone import load_backbone
    from .data import atomic_write, load_triplet_dataset
    from .lep import build_lep, save_lep
    from .plotting import plot_loss_history
    from .training import TrainConfig, feature_layout_for, train_lep

    cfg = resolve_config(args, {"arch": "lep.arch", "epochs": "training.epochs", "lr": "training.lr",
                                "batch_size": "training.batch_size", "seed": "seed"})
    seed = cfg.require_seed()
    backbone, codec, meta = load_backbone(args.backbone)
    sched = _schedule_from_backbone(meta, cfg)
    data = load_triplet_dataset(args.data)
    L = cfg.lep
    layout = feature_layout_for(backbone, backbone.default_taps(), L.p_max)
    torch.manual_seed(seed)
    if L.arch == "unet":
        model = build_lep("unet", layout.channels, codec.channels, widths=tuple(L.unet_widths),
                          bottleneck=L.unet_bottleneck)
    else:
        model = build_lep(L.arch, layout.channels, codec.channels, hidden=tuple(L.mlp_hidden))
    T = cfg.training
    tcfg = TrainConfig(epochs=T.epochs, batch_size=T.batch_size, lr=T.lr, seed=seed, p_max=L.p_max,
                       normalize_t=L.normalize_t, holdout_fraction=T.holdout_fraction, patience=T.patience)
    model, history = train_lep(model, backbone, codec, data, sched, tcfg, log=log.info)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {"training": history["config"], "loss_history": history["loss"],
                  "heldout_history": history["heldout"], "optimizer": "adam", "normalize_t": L.normalize_t,
                  "backbone": str(Path(args.backbone).name), "schedule": sched.to_dict()}
    path = save_lep(model, out / "lep.ckpt", layout, provenance)
    atomic_write(out / "loss_history.jsonl",
                 _jsonl({"epoch": i + 1, "loss": v} for i, v in enumerate(history["loss"])))
    if history["loss"]:
        plot_loss_history(history, out / "loss.png", label=L.arch)
    record_run(out, cfg, args, {"backbone": args.backbone, "data": args.data})
    print(path)
    return 0


def _generate_one(job: dict) -> dict:
    """Run one seed; top-level so worker processes can import it."""
    from .backbone import load_backbone
    from .data import atomic_write, save_gray
    from .lep import load_lep
    from .plotting import plot_diagnostics
    from .sampler import GuidanceConfig, diagnostics_lines, sample_batch
    from .schedule import make_schedule

    torch.set_num_threads(job.get("threads", torch.get_num_threads()))
    backbone, codec, _ = load_backbone(job["backbone"])
    sched = make_schedule(**job["schedule"])
    gcfg = GuidanceConfig(**job["guidance"])
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    if job["guided"]:
        lep, _ = load_lep(job["lep"])
        target = torch.from_numpy(np.asarray(job["sketch"], dtype=np.float32))[None, None]
        target = codec.encode(target)
    else:
        lep, target = None, None
    res = sample_batch(backbone, codec, lep, target, job["label"], [gcfg.seed], gcfg, sched,
                       guided=job["guided"])[0]
    image = res.image.detach().numpy()[0]
    save_gray(out / f"{job['stem']}.png", np.clip(image, 0.0, 1.0))
    atomic_write(out / "diagnostics.jsonl", diagnostics_lines(res.diagnostics).encode())
    atomic_write(out / "timing.jsonl", _jsonl({"step": r.step, "wall_time": r.wall_time} for r in res.diagnostics))
    plot_diagnostics(res.diagnostics, out / "diagnostics.png", title=f"seed {gcfg.seed}")
    return {"seed": gcfg.seed, "image": str(out / f"{job['stem']}.png")}


def cmd_generate(args) -> int:
    from .backbone import load_backbone
    from .data import load_sketch, simplify_sketch
    from .lep import load_lep

    cfg = resolve_config(args, {"T": "guidance.T", "S": "guidance.S", "beta": "guidance.beta",
                                "cfg_scale": "guidance.cfg_scale", "seed": "seed"})
    if args.simplify:
        cfg.guidance.simplify = True
    seed = cfg.require_seed()
    backbone, codec, meta = load_backbone(args.backbone)
    sched = _schedule_from_backbone(meta, cfg)
    sketch = load_sketch(args.sketch)
    size = backbone.config.image_size
    if sketch.data.shape != (size, size):
        raise ConfigError(f"sketch is {sketch.data.shape[0]}x{sketch.data.shape[1]} but the backbone expects "
                          f"{size}x{size} latents; resize the sketch to {size}x{size}")
    sketch.require_usable()
    if cfg.guidance.simplify:
        sketch = simplify_sketch(sketch, cfg.guidance.simplifier)

    guided = not args.unguided
    p_max, normalize_t = cfg.lep.p_max, cfg.lep.normalize_t
    if guided:
        if not args.lep:
            raise ConfigError("--lep is required for guided generation (or pass --unguided)")
        lep, lep_meta = load_lep(args.lep)
        a, b = lep.layout.range_of("p")
        p_max = b - a - 1
        normalize_t = bool(lep_meta.get("provenance", {}).get("normalize_t", False))
        cfg.lep.p_max, cfg.lep.normalize_t, cfg.lep.arch = p_max, normalize_t, lep.arch
        from .training import check_compatibility

        check_compatibility(lep, backbone, backbone.default_taps(), p_max)

    g = cfg.guidance
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i in range(args.num_samples):
        gcfg = {"T": g.T, "S": g.S, "beta_strength": g.beta, "cfg_scale": g.cfg_scale, "seed": seed + i,
                "grad_eps": g.grad_eps, "p_max": p_max, "normalize_t": normalize_t,
                "clip_denoised": tuple(g.clip_denoised) if g.clip_denoised else None}
        jobs.append({"backbone": str(args.backbone), "lep": str(args.lep) if args.lep else None,
                     "schedule": {"T": cfg.schedule.T, "kind": cfg.schedule.kind,
                                  "beta_start": cfg.schedule.beta_start, "beta_end": cfg.schedule.beta_end},
                     "guidance": gcfg, "guided": guided, "sketch": sketch.data.tolist(), "label": args.label,
                     "stem": Path(args.sketch).stem, "out": str(out / f"seed_{seed + i}")})
    if args.jobs > 1 and len(jobs) > 1:
        for job in jobs:
            job["threads"] = 1
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_generate_one, jobs))
    else:
        results = [_generate_one(job) for job in jobs]
    record_run(out, cfg, args, {"backbone": args.backbone, "lep": args.lep, "sketch": args.sketch})
    for r in results:
        print(r["image"])
    return 0


def cmd_simplify(args) -> int:
    from .data import load_sketch, save_binary, simplify_sketch

    cfg = resolve_config(args, {})
    sketch = load_sketch(args.sketch)
    out = simplify_sketch(sketch, args.simplifier or cfg.guidance.simplifier)
    save_binary(args.out, out.data)
    print(args.out)
    return 0


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def cmd_eval(args) -> int:
    from .data import load_gray, load_sketch
    from .evaluation import evaluate_corpus
    from .plotting import plot_recall

    cfg = resolve_config(args, {"threshold": "evaluation.threshold", "extractor": "evaluation.extractor"})
    if args.no_erode:
        cfg.evaluation.erode = False
    images = {p.stem: p for p in sorted(Path(args.images).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    sketches = {p.stem: p for p in sorted(Path(args.sketches).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    matched = sorted(set(images) & set(sketches))
    unmatched = sorted(set(images) ^ set(sketches))
    for stem in unmatched:
        log.warning("no counterpart for %s; skipped", stem)
    if not matched:
        raise SketchGuideError("no generated image matches any sketch by filename stem")
    E = cfg.evaluation
    report = evaluate_corpus(((s, load_gray(images[s]), load_sketch(sketches[s])) for s in matched),
                             E.extractor, E.threshold, E.erode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.jsonl")
    plot_recall(report, out / "recall.png")
    record_run(out, cfg, args, {"images": args.images, "sketches": args.sketches})
    summary = report.summary()
    print(f"mean_recall={summary['mean_recall']} count={summary['count']} exclusions={summary['exclusions']}")
    return 0


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults are used for missing keys)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sketchguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-shapes", parents=[common], help="write a synthetic triplet dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--dims", type=_dims)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_shapes)

    p = sub.add_parser("train-backbone", parents=[common], help="train the toy conditional denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--condition-drop-rate", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train-lep", parents=[common], help="train a latent edge predictor")
    p.add_argument("--arch", choices=["unet", "mlp"])
    p.add_argument("--backbone", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_lep)

    p = sub.add_parser("generate", parents=[common], help="sketch-guided (or unguided) sampling")
    p.add_argument("--backbone", required=True)
    p.add_argument("--lep")
    p.add_argument("--sketch", required=True)
    p.add_argument("--label", required=True, help="condition label, e.g. circle")
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int)
    p.add_argument("--S", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--num-samples", type=int, default=1, help="runs with seeds seed, seed+1, ...")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--simplify", action="store_true", help="simplify the sketch before guidance")
    p.add_argument("--unguided", action="store_true", help="skip sketch guidance entirely")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simplify", parents=[common], help="thin and smooth a sketch")
    p.add_argument("--sketch", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--simplifier")
    p.set_defaults(func=cmd_simplify)

    p = sub.add_parser("eval", parents=[common], help="recall of generated images against sketches")
    p.add_argument("--images", required=True)
    p.add_argument("--sketches", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--extractor")
    p.add_argument("--no-erode", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SketchGuideError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
