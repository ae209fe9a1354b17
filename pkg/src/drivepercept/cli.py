"""Command-line entry point: ``drivepercept {gen-data,train,eval,infer}``.

Exit codes: 0 success, 1 usage/contract/config error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("drivepercept")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class RunManifest:
    """``run_manifest.json``: written atomically when a run starts and again when it ends."""

    def __init__(self, out: Path, command: str, config: dict, seed: int, argv: list[str]):
        self.path = Path(out) / "run_manifest.json"
        self.data = {
            "command": command,
            "argv": argv,
            "config": config,
            "config_hash": _config_hash(config),
            "seed": seed,
            "version": __version__,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        self._write()

    def _write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    def finish(self, status: str, outputs=()):
        self.data["finished"] = _now()
        self.data["status"] = status
        self.data["outputs"] = sorted(str(p) for p in outputs)
        self._write()


def _load_json(path) -> dict:
    if path is None:
        return {}
    from .training import ConfigError

    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args, argv) -> list[Path]:
    from .worldsim import WorldConfig, build_world, generate_episodes, write_dataset

    cfg = WorldConfig.from_dict(_load_json(args.config))
    world_seed = args.seed if args.world_seed is None else args.world_seed
    out = Path(args.out)
    manifest = RunManifest(
        out, "gen-data",
        {"world": cfg.to_dict(), "episodes": args.episodes, "length": args.length, "world_seed": world_seed},
        args.seed, argv,
    )
    try:
        world = build_world(world_seed, cfg)
        seeds = [args.seed * 100_003 + k for k in range(args.episodes)]
        episodes = generate_episodes(world, seeds, args.length, cfg, workers=args.workers)
        write_dataset(episodes, out)
        (out / "world.json").write_text(world.to_json())
    except BaseException:
        manifest.finish("failed")
        raise
    outputs = [out / "dataset.json", out / "world.json"] + [out / f"episode_{k:05d}" for k in range(len(episodes))]
    manifest.finish("ok", outputs)
    return outputs


def cmd_train(args, argv) -> list[Path]:
    from .plotting import plot_training_curves
    from .training import TrainConfig, TrainingData, canonical_variant, train

    raw = _load_json(args.config)
    if args.variant is not None:
        raw["variant"] = canonical_variant(args.variant)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.iterations is not None:
        raw["total_iterations"] = args.iterations
    cfg = TrainConfig.from_dict(raw)
    out = Path(args.out)
    manifest = RunManifest(out, "train", cfg.to_dict(), cfg.seed, argv)
    try:
        data = TrainingData.from_directory(args.data, cfg.grid)
        result = train(cfg, data, out)
        outputs = [out / "metrics.csv"] + list(result.checkpoints)
        if result.metrics:
            outputs.append(plot_training_curves(result.metrics, out / "training_curves.png"))
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.finish("ok", outputs)
    return outputs


def _eval_config(args):
    from .evaluation import EvalConfig

    return EvalConfig(mode=args.mode, seed=args.seed, min_score=args.min_score, nms_iou=args.nms_iou,
                      max_candidates=args.max_candidates, cell_size=args.cell_size)


def cmd_eval(args, argv) -> list[Path]:
    from .evaluation import evaluate, filter_rollout, write_report
    from .geometry import GridSpec
    from .latentmodel import load_checkpoint, read_checkpoint_header
    from .plotting import plot_frame_comparison, plot_pr_curves
    from .worldsim import read_dataset

    model, meta = load_checkpoint(args.checkpoint)
    model.eval()
    ecfg = _eval_config(args)
    variant = meta.get("train_config", {}).get("variant", "")
    out = Path(args.out)
    header, _ = read_checkpoint_header(args.checkpoint)
    manifest = RunManifest(
        out, "eval",
        {"eval": {k: getattr(ecfg, k) for k in ecfg.__dataclass_fields__}, "checkpoint_config_hash": header["config_hash"],
         "checkpoint": str(args.checkpoint), "data": str(args.data)},
        args.seed, argv,
    )
    try:
        episodes = read_dataset(args.data)
        result = evaluate(model, episodes, ecfg, variant=variant)
        outputs = write_report(result, out)
        outputs.append(plot_pr_curves(result.curves, out / "pr_curves.png", f"PR curves ({variant or 'model'})"))
        if args.dump_frames:
            grid = GridSpec(model.cfg.image_size, args.cell_size)
            outs = filter_rollout(model, episodes[0], ecfg.mode, ecfg.seed, grid, ecfg.min_score, ecfg.nms_iou,
                                  ecfg.max_candidates, keep_images=True)
            for t in range(min(args.dump_frames, len(outs))):
                outputs.append(plot_frame_comparison(episodes[0].frames[t], outs[t], grid, out / "frames" / f"frame_{t:04d}.png",
                                                     f"episode {episodes[0].seed} step {t}"))
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.finish("ok", outputs)
    return outputs


def cmd_infer(args, argv) -> list[Path]:
    from .evaluation import filter_rollout
    from .geometry import GridSpec
    from .latentmodel import load_checkpoint
    from .plotting import plot_frame_comparison
    from .worldsim import read_episode

    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    out = Path(args.out)
    manifest = RunManifest(out, "infer", {"checkpoint": str(args.checkpoint), "input": str(args.input), "mode": args.mode},
                           args.seed, argv)
    try:
        episode = read_episode(args.input)
        grid = GridSpec(model.cfg.image_size, args.cell_size)
        outs = filter_rollout(model, episode, args.mode, args.seed, grid, args.score_threshold, args.nms_iou, keep_images=True)
        records, outputs = [], []
        for t, (frame, o) in enumerate(zip(episode.frames, outs)):
            outputs.append(plot_frame_comparison(frame, o, grid, out / "frames" / f"frame_{t:04d}.png", f"step {t}"))
            records.append({
                "step": t,
                "pose": [float(v) for v in o.pose],
                "boxes": [[b.cx, b.cy, b.heading, b.length, b.width, b.score] for b in o.boxes],
            })
        (out / "outputs.json").write_text(json.dumps(records, indent=1))
        outputs.append(out / "outputs.json")
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.finish("ok", outputs)
    return outputs


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drivepercept", description="Sequential latent perception for a synthetic driving world.")
    p.add_argument("--version", action="version", version=f"drivepercept {__version__}")
    p.add_argument("--workers", type=int, default=1, help="worker processes for parallel-safe stages")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate an episode dataset")
    g.add_argument("--config", help="world config JSON")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--world-seed", type=int, default=None, help="map seed (default: --seed)")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train the latent model")
    t.add_argument("--config", help="train config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["full", "no-input", "no-roadmap"], default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iterations", type=int, default=None, help="override total_iterations")

    for name in ("eval", "infer"):
        e = sub.add_parser(name, help="evaluate a checkpoint" if name == "eval" else "decode one episode")
        e.add_argument("--checkpoint", required=True)
        if name == "eval":
            e.add_argument("--data", required=True)
            e.add_argument("--dump-frames", type=int, default=0)
            e.add_argument("--min-score", type=float, default=0.01)
            e.add_argument("--max-candidates", type=int, default=300)
        else:
            e.add_argument("--input", required=True)
            e.add_argument("--score-threshold", type=float, default=0.5)
        e.add_argument("--out", required=True)
        e.add_argument("--mode", choices=["mean", "sample"], default="mean")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--nms-iou", type=float, default=0.1)
        e.add_argument("--cell-size", type=float, default=0.5)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    from .geometry import InvalidBoxError
    from .latentmodel import CheckpointError, ContractError
    from .training import ConfigError
    from .worldsim import DatasetFormatError, InvalidConfigError

    try:
        COMMANDS[args.command](args, argv)
    except (ConfigError, InvalidConfigError, ContractError, DatasetFormatError, CheckpointError, InvalidBoxError, FileNotFoundError) as exc:
        print(f"drivepercept {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime abort
        print(f"drivepercept {args.command}: aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
