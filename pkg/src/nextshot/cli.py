"""Command-line entry points.

Subcommands: synth-data, train-teacher, distill, generate, serve, eval.
Set NEXTSHOT_LOG to control verbosity. Config files are JSON with explicit
sections; when a config file is supplied, every hyperparameter of each
section it contains must be present (no hidden defaults in release mode)
unless --allow-defaults is passed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

logger = logging.getLogger("nextshot.cli")


def _load_config(path: str | None, allow_defaults: bool) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    cfg["_strict"] = not allow_defaults
    return cfg


def _world_from(cfg: dict):
    from .toyworld import WorldConfig
    strict = cfg.get("_strict", False)
    return WorldConfig.from_dict(cfg["world"], strict=strict) if "world" in cfg else WorldConfig()


def _model_from(cfg: dict, world):
    from .model import ModelConfig
    if "model" in cfg:
        return ModelConfig.from_dict(cfg["model"])
    return ModelConfig(channels=world.channels, height=world.height, width=world.width,
                       vocab_size=world.vocab_size, chunk_frames=world.chunk_frames)


def _load_script(path: str, world):
    from .toyworld import ShotScript, make_script
    doc = json.loads(Path(path).read_text())
    if "global_caption" in doc:
        return ShotScript.from_dict(doc)
    shots = [(s["scene_id"], s["subject_id"], s.get("action_id", 0), s["length_frames"])
             for s in doc["shots"]]
    return make_script(world, shots)


def cmd_synth_data(args) -> int:
    from .toyworld import build_dataset, save_dataset
    cfg = _load_config(args.config, args.allow_defaults)
    world = _world_from(cfg)
    clips, scripts = build_dataset(world, n_clips=args.clips, seed=args.seed,
                                   noise_level=args.noise,
                                   n_shots_range=(args.min_shots, args.max_shots),
                                   shot_frames=args.shot_frames)
    save_dataset(args.out, clips, scripts,
                 meta={"seed": args.seed, "noise_level": args.noise,
                       "world": world.to_dict()})
    logger.info("wrote %d clips to %s", len(clips), args.out)
    return 0


def cmd_train_teacher(args) -> int:
    from .model import save_checkpoint
    from .teacher import TeacherConfig, train_teacher
    from .toyworld import WorldConfig, load_dataset

    clips, scripts, meta = load_dataset(args.data)
    cfg = _load_config(args.config, args.allow_defaults)
    strict = cfg.get("_strict", False)
    world = (_world_from(cfg) if "world" in cfg
             else WorldConfig.from_dict(meta.get("world", {})))
    model_cfg = _model_from(cfg, world)
    tcfg = TeacherConfig.from_dict(cfg.get("teacher", {}), strict=strict and "teacher" in cfg)
    params, history = train_teacher(clips, scripts, model_cfg, tcfg)
    save_checkpoint(args.out, params, extra={"role": "teacher", "world": world.to_dict(),
                                             "teacher_config": tcfg.to_dict(),
                                             "history": history})
    logger.info("teacher saved to %s (final loss %.4g)", args.out, history["loss"][-1])
    return 0


def cmd_distill(args) -> int:
    from .distill import (DistillConfig, collect_ode_pairs, make_dmd_state,
                          regression_init, stage1_intra, stage2_inter)
    from .model import load_checkpoint, save_checkpoint
    from .teacher import DenoiseSchedule
    from .toyworld import WorldConfig, load_dataset

    teacher, extra = load_checkpoint(args.teacher)
    world = WorldConfig.from_dict(extra.get("world", {}))
    cfg = _load_config(args.config, args.allow_defaults)
    dcfg = DistillConfig.from_dict(cfg.get("distill", {}),
                                   strict=cfg.get("_strict", False) and "distill" in cfg)
    log: dict = {"stages": []}

    student = teacher.copy()
    if args.stage in ("init", "all"):
        clips, scripts, _ = load_dataset(args.data)
        pairs = collect_ode_pairs(teacher, clips, scripts, dcfg.ode_pairs, dcfg.seed,
                                  DenoiseSchedule.uniform(dcfg.ode_schedule_steps),
                                  dcfg.f_context)
        student, hist = regression_init(student, pairs, dcfg)
        log["stages"].append({"stage": "init", "history": hist})

    state = make_dmd_state(student, teacher, dcfg)
    if args.stage in ("intra", "all"):
        clips, scripts, _ = load_dataset(args.data)
        state, s1 = stage1_intra(state, clips, scripts, dcfg)
        log["stages"].append({"stage": "intra",
                              "ratio_counts": s1["ratio_counts"],
                              "critic_loss": s1.get("critic_loss", []),
                              "cache_traces": s1["traces"][:8]})
    if args.stage in ("inter", "all"):
        _, scripts, _ = load_dataset(args.data)
        state, s2 = stage2_inter(state, scripts, dcfg)
        log["stages"].append({"stage": "inter",
                              "ratio_counts": s2["ratio_counts"],
                              "critic_loss": s2.get("critic_loss", []),
                              "cache_traces": [t["chunks"] for t in s2["traces"][:4]]})
        state.generator.merge_lora()

    save_checkpoint(args.out, state.generator,
                    extra={"role": "student", "world": world.to_dict(),
                           "distill_config": dcfg.to_dict(), "stage": args.stage})
    if args.log:
        Path(args.log).write_text(json.dumps(log, indent=1))
    logger.info("student saved to %s", args.out)
    return 0


def _engine_from_ckpt(ckpt_path: str, seed: int | None = None, preview: bool = True):
    from .engine import Engine, EngineConfig
    from .model import load_checkpoint
    from .toyworld import WorldConfig

    params, extra = load_checkpoint(ckpt_path)
    world = WorldConfig.from_dict(extra.get("world", {}))
    cfg = EngineConfig(preview=preview)
    if seed is not None:
        cfg.seed = seed
    return Engine(params, world, cfg)


def cmd_generate(args) -> int:
    from .engine import EngineConfig, generate_script
    from .model import load_checkpoint
    from .toyworld import WorldConfig, save_clip

    params, extra = load_checkpoint(args.ckpt)
    world = WorldConfig.from_dict(extra.get("world", {}))
    script = _load_script(args.script, world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clip, session = generate_script(params, world, script,
                                    EngineConfig(seed=args.seed, preview=False),
                                    seed=args.seed)
    save_clip(out / "clip.bin", clip)
    (out / "events.ndjson").write_text(
        "\n".join(json.dumps(e) for e in session.events))
    (out / "metrics.json").write_text(json.dumps(session.metrics.snapshot(), indent=1))
    logger.info("wrote clip + events + metrics to %s", out)
    return 0


def cmd_serve(args) -> int:
    from .server import serve
    engine = _engine_from_ckpt(args.ckpt, seed=args.seed)
    serve(engine, host=args.host, port=args.port)
    return 0


def cmd_eval(args) -> int:
    from .evalsuite import EvalConfig, format_report, run_eval
    from .model import load_checkpoint
    from .toyworld import WorldConfig, random_script

    params, extra = load_checkpoint(args.ckpt)
    world = WorldConfig.from_dict(extra.get("world", {}))
    if args.scripts:
        docs = json.loads(Path(args.scripts).read_text())
        from .toyworld import ShotScript
        scripts = [ShotScript.from_dict(d) for d in docs]
    else:
        rng = np.random.default_rng(args.seed)
        scripts = [random_script(world, rng, 3, args.shot_frames)
                   for _ in range(args.n_scripts)]
    report = run_eval(params, world, scripts,
                      EvalConfig(seed=args.seed, n_scripts=len(scripts)),
                      out_path=args.out)
    print(format_report(report))
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("NEXTSHOT_LOG", "INFO").upper())
    parser = argparse.ArgumentParser(prog="nextshot")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic multi-shot dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--min-shots", type=int, default=3)
    p.add_argument("--max-shots", type=int, default=5)
    p.add_argument("--shot-frames", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--allow-defaults", action="store_true")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train-teacher", help="train the bidirectional next-shot model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--allow-defaults", action="store_true")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill the teacher into the causal student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=["init", "intra", "inter", "all"], default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--log", default=None, help="write a JSON training log")
    p.add_argument("--allow-defaults", action="store_true")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("generate", help="offline batch generation from a script")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("serve", help="run the streaming generation service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8694)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("eval", help="score generated clips against scripts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scripts", default=None, help="JSON list of scripts")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-scripts", type=int, default=32)
    p.add_argument("--shot-frames", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
