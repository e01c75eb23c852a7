"""Command-line surface.

Subcommands: gen-data, train-adapter, train-backbone, sample, compose, eval,
render, ablate.  Every command reads a JSON config (``--config``) with
``--set key.path=value`` overrides, writes its artifacts under an output
directory, records a manifest (config hash, checkpoint hashes, seed), and
prints one JSON summary line.

Exit codes: 0 ok, 2 usage, 3 invalid config, 4 runtime failure.  The
``MOTION_ADAPTER_OUT`` environment variable overrides the output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from pathlib import Path

from .config import ConfigError, RunConfig, load_config


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(cfg: RunConfig, args) -> Path:
    out = cfg.out_dir
    if getattr(args, "out", None):
        out = args.out
    env = os.environ.get("MOTION_ADAPTER_OUT")
    if env:
        out = env
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _ckpt_path(out: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out / "checkpoints" / p


def _write_manifest(out: Path, command: str, cfg: RunConfig, seed: int,
                    artifacts: list[Path], checkpoints: dict[str, Path]) -> Path:
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": hashlib.sha256(cfg.to_json().encode()).hexdigest(),
        "config": cfg.to_dict(),
        "checkpoint_hashes": {
            k: _sha256_file(p) for k, p in checkpoints.items() if p.exists()
        },
        "artifacts": [str(p) for p in artifacts],
    }
    dest = out / command / "manifest.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return dest


def _summary(**kv) -> None:
    print(json.dumps(kv, sort_keys=True))


def _dataset(cfg: RunConfig):
    from .synthdata import build_dataset, load_dataset

    if cfg.data.path:
        return load_dataset(cfg.data.path)
    return build_dataset(seed=cfg.data.seed, per_action=cfg.data.per_action)


def _load_backbone(out: Path, cfg: RunConfig):
    from .backbone import Backbone

    path = _ckpt_path(out, cfg.checkpoints.backbone)
    if not path.exists():
        raise FileNotFoundError(f"backbone checkpoint missing: {path} (run train-backbone)")
    return Backbone.load(path), path


def _load_adapter(out: Path, cfg: RunConfig):
    from .adapter import Adapter

    path = _ckpt_path(out, cfg.checkpoints.adapter)
    if not path.exists():
        raise FileNotFoundError(f"adapter checkpoint missing: {path} (run train-adapter)")
    return Adapter.load(path), path


def _composer(cfg: RunConfig, backbone, adapter):
    from .composer import Composer

    return Composer(
        backbone,
        adapter,
        window=cfg.mask_window(),
        masking_enabled=cfg.masking_enabled,
        branch_mode=cfg.branch_mode,
        x0_clamp=cfg.x0_clamp,
    )


def _parse_prompt(text: str):
    from .synthdata import lexicon_words
    from .text import parse_prompt

    return parse_prompt(text, lexicon_words())


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, args) -> None:
    from .synthdata import write_dataset

    out = _out_dir(cfg, args)
    ds = _dataset(cfg)
    data_dir = out / "data"
    write_dataset(ds, data_dir)
    _write_manifest(out, "gen-data", cfg, cfg.data.seed, [data_dir], {})
    _summary(command="gen-data", items=len(ds.items), path=str(data_dir))


def cmd_train_adapter(cfg: RunConfig, args) -> None:
    from .adapter import clean_reconstruction_mse, train_adapter

    out = _out_dir(cfg, args)
    ds = _dataset(cfg)
    path = _ckpt_path(out, cfg.checkpoints.adapter)
    path.parent.mkdir(parents=True, exist_ok=True)
    model, report = train_adapter(
        ds,
        epochs=cfg.adapter.epochs,
        batch=cfg.adapter.batch,
        lr=cfg.adapter.lr,
        seed=cfg.adapter.seed,
        noise_max=cfg.adapter.noise_max,
        attn_guide=cfg.adapter.attn_guide,
        checkpoint_path=path,
        log_every=args.log_every,
    )
    held = ds.subset(split="val", kind="single") or ds.subset(split="train", kind="single")
    mse = clean_reconstruction_mse(model, held)
    report_path = out / "train-adapter" / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps({
        "steps": report.steps,
        "final_train_mse": report.final_mse,
        "clean_val_mse": mse,
        "loss_curve": report.loss_curve,
    }, indent=2) + "\n")
    _write_manifest(out, "train-adapter", cfg, cfg.adapter.seed, [path, report_path],
                    {"adapter": path})
    _summary(command="train-adapter", steps=report.steps, clean_val_mse=round(mse, 6),
             checkpoint=str(path))


def cmd_train_backbone(cfg: RunConfig, args) -> None:
    from .backbone import make_schedule, train_backbone

    out = _out_dir(cfg, args)
    ds = _dataset(cfg)
    path = _ckpt_path(out, cfg.checkpoints.backbone)
    path.parent.mkdir(parents=True, exist_ok=True)
    model, report = train_backbone(
        ds,
        epochs=cfg.backbone.epochs,
        batch=cfg.backbone.batch,
        lr=cfg.backbone.lr,
        seed=cfg.backbone.seed,
        p_uncond=cfg.backbone.p_uncond,
        schedule=make_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end),
        checkpoint_path=path,
        log_every=args.log_every,
    )
    report_path = out / "train-backbone" / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps({
        "steps": report.steps,
        "loss_curve": report.loss_curve,
        "val_curve": report.val_curve,
    }, indent=2) + "\n")
    _write_manifest(out, "train-backbone", cfg, cfg.backbone.seed, [path, report_path],
                    {"backbone": path})
    _summary(command="train-backbone", steps=report.steps,
             final_loss=round(report.loss_curve[-1], 6) if report.loss_curve else None,
             checkpoint=str(path))


def cmd_sample(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg, args)
    backbone, ckpt = _load_backbone(out, cfg)
    prompt = _parse_prompt(args.prompt)
    seed = args.seed if args.seed is not None else cfg.seed
    from .motion import MotionSequence

    motion = MotionSequence(backbone.sample([prompt.tokens], seed=seed)[0])
    dest = out / "sample" / f"motion_{seed}.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    motion.save(dest)
    _write_manifest(out, "sample", cfg, seed, [dest], {"backbone": ckpt})
    _summary(command="sample", prompt=args.prompt, seed=seed, motion=str(dest))


def _compose_once(cfg: RunConfig, args, command: str) -> None:
    out = _out_dir(cfg, args)
    backbone, bb_path = _load_backbone(out, cfg)
    ckpts = {"backbone": bb_path}
    adapter = None
    if cfg.masking_enabled:
        adapter, ad_path = _load_adapter(out, cfg)
        ckpts["adapter"] = ad_path
    composer = _composer(cfg, backbone, adapter)
    prompt = _parse_prompt(args.prompt)
    seed = args.seed if args.seed is not None else cfg.seed
    motion, run = composer.sample_compound(prompt, seed)
    dest = out / command / f"motion_{seed}.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    motion.save(dest)
    log_path = out / command / f"run_{seed}.json"
    log_path.write_text(run.to_json() + "\n")
    _write_manifest(out, command, cfg, seed, [dest, log_path], ckpts)
    _summary(command=command, prompt=args.prompt, seed=seed, motion=str(dest),
             run_log=str(log_path), warnings=len(run.warnings))


def cmd_compose(cfg: RunConfig, args) -> None:
    _compose_once(cfg, args, "compose")


def cmd_ablate(cfg: RunConfig, args) -> None:
    if args.no_adapter:
        cfg = RunConfig.from_dict({**cfg.to_dict(), "masking_enabled": False})
    _compose_once(cfg, args, "ablate")


def cmd_eval(cfg: RunConfig, args) -> None:
    from .metrics import FeatureExtractor, eval_protocol, train_extractor
    from .motion import MotionSequence
    from .text import tokenize

    out = _out_dir(cfg, args)
    ds = _dataset(cfg)
    ext_path = _ckpt_path(out, cfg.checkpoints.extractor)
    if ext_path.exists():
        extractor = FeatureExtractor.load(ext_path)
    else:
        extractor = train_extractor(ds, epochs=cfg.extractor.epochs,
                                    batch=cfg.extractor.batch, lr=cfg.extractor.lr,
                                    seed=cfg.extractor.seed)
        ext_path.parent.mkdir(parents=True, exist_ok=True)
        extractor.save(ext_path)
    backbone, bb_path = _load_backbone(out, cfg)

    reference = ds.subset(split="eval", kind="single") or ds.subset(split="val", kind="single")
    ref_feats = extractor.features([it.motion for it in reference])
    captions = sorted({it.caption for it in reference})

    def sample_fn(rep_seed: int):
        motions = [
            MotionSequence(m)
            for m in backbone.sample([tuple(tokenize(c)) for c in captions], seed=rep_seed)
        ]
        return motions, captions

    report = eval_protocol(sample_fn, ref_feats, extractor, reps=args.reps, seed=cfg.seed)
    report.meta["captions"] = captions
    dest = Path(args.report) if args.report else out / "eval" / "report.json"
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(report.to_json() + "\n")
    print(report.table())
    _write_manifest(out, "eval", cfg, cfg.seed, [dest],
                    {"backbone": bb_path, "extractor": ext_path})
    _summary(command="eval", report=str(dest), reps=args.reps)


def cmd_render(cfg: RunConfig, args) -> None:
    from .motion import MotionSequence
    from .render import render_svg

    out = _out_dir(cfg, args)
    motion = MotionSequence.load(args.motion)
    svg = render_svg(motion, stride=args.stride)
    dest = Path(args.svg) if args.svg else out / "render" / (Path(args.motion).stem + ".svg")
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(svg)
    _write_manifest(out, "render", cfg, cfg.seed, [dest], {})
    _summary(command="render", svg=str(dest), frames=len(motion.data), stride=args.stride)


# ---------------------------------------------------------------------------
# dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compoundmotion",
        description="Compound motion generation via attention-derived body-part masks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path")
        p.add_argument("--out", help="output directory (MOTION_ADAPTER_OUT wins)")
        return p

    common(sub.add_parser("gen-data", help="generate and write the synthetic corpus"))

    for name in ("train-adapter", "train-backbone"):
        p = common(sub.add_parser(name, help=f"{name.replace('-', ' ')} and checkpoint it"))
        p.add_argument("--log-every", type=int, default=0)

    p = common(sub.add_parser("sample", help="plain backbone sampling"))
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("compose", help="compound sampling with masking"))
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int)

    p = common(sub.add_parser("ablate", help="compose with masking disabled"))
    p.add_argument("--prompt", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-adapter", action="store_true",
                   help="force masking off regardless of config")

    p = common(sub.add_parser("eval", help="repeated-run metric report"))
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--report", help="report JSON destination")

    p = common(sub.add_parser("render", help="render a motion file to SVG"))
    p.add_argument("--motion", required=True)
    p.add_argument("--stride", type=int, default=28)
    p.add_argument("--svg", help="SVG destination")

    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-adapter": cmd_train_adapter,
    "train-backbone": cmd_train_backbone,
    "sample": cmd_sample,
    "compose": cmd_compose,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    try:
        _COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        if os.environ.get("COMPOUNDMOTION_DEBUG"):
            traceback.print_exc()
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
