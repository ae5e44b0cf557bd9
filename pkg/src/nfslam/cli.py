"""Command-line entry points: ``run``, ``reconstruct`` and ``eval``.

Exit codes: 0 success, 1 runtime failure, 2 bad configuration, 3 unreadable
dataset, 4 corrupt map file, 5 evaluation failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

import yaml

from .atlas import DEFAULT_OVERLAP, DEFAULT_SIDE, Atlas, map_size_report
from .dataset import DatasetError, desk_room_config, load_tum, synthetic_frames, synthetic_from_config
from .evaluate import (EvaluationError, Trajectory, read_trajectory, trajectory_ate, write_metrics,
                       write_trajectory_csv)
from .field import EMBED_SIGMA, EMBED_SIZE, FieldFormatError
from .odometry import RegistrationConfig
from .reconstruct import BlendConfig, export_cloud, export_region_cloud
from .render import RenderConfig
from .slam import NeuralSlam, SlamConfig
from .tracker import OptimConfig

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_FORMAT = 4
EXIT_EVAL = 5

log = logging.getLogger("nfslam")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class DatasetSource:
    tum: Optional[str] = None
    synthetic: Optional[dict] = None  # inline scene mapping; None with tum=None -> built-in desk room
    max_dt: float = 0.02
    max_frames: Optional[int] = None


@dataclasses.dataclass(frozen=True)
class AtlasConfig:
    side: float = DEFAULT_SIDE
    overlap: float = DEFAULT_OVERLAP


@dataclasses.dataclass(frozen=True)
class FieldConfig:
    embed_size: int = EMBED_SIZE
    embed_sigma: float = EMBED_SIGMA


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "stepped"
    output: str = "run"
    dataset: DatasetSource = DatasetSource()
    registration: RegistrationConfig = RegistrationConfig()
    optim: OptimConfig = OptimConfig()
    render: RenderConfig = RenderConfig()
    atlas: AtlasConfig = AtlasConfig()
    field: FieldConfig = FieldConfig()
    blend: BlendConfig = BlendConfig()

    def slam_config(self) -> SlamConfig:
        return SlamConfig(seed=self.seed, region_side=self.atlas.side, overlap=self.atlas.overlap,
                          embed_size=self.field.embed_size, embed_sigma=self.field.embed_sigma,
                          mode=self.mode, registration=self.registration, optim=self.optim,
                          render=self.render)


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, data, where: str):
    """Instantiate a (nested) config dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif name == "synthetic":
            kwargs[name] = value
        else:
            kwargs[name] = _tuplify(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    data = {}
    if path is not None:
        try:
            with open(path) as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    if (overrides or {}).get("dataset.tum") is not None and isinstance(data.get("dataset"), dict):
        data["dataset"].pop("synthetic", None)  # a TUM path on the command line replaces the scene
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    cfg = _build(RunConfig, data, "config")
    if cfg.mode not in ("stepped", "pipelined"):
        raise ConfigError(f"config.mode: expected 'stepped' or 'pipelined', got {cfg.mode!r}")
    if cfg.dataset.tum is not None and cfg.dataset.synthetic is not None:
        raise ConfigError("config.dataset: give either 'tum' or 'synthetic', not both")
    return cfg


def open_dataset(src: DatasetSource):
    """Returns ``(frames iterator, ground truth trajectory or None, frame count)``."""
    if src.tum is not None:
        seq = load_tum(src.tum, src.max_dt)
        n = len(seq) if src.max_frames is None else min(len(seq), src.max_frames)
        gt = seq.groundtruth()
        gt_traj = None
        if gt:
            gt_traj = Trajectory.from_pairs(gt)
        return (seq.frame(i) for i in range(n)), gt_traj, n
    scene_cfg = src.synthetic if src.synthetic is not None else desk_room_config()
    try:
        scene, intrinsics = synthetic_from_config(scene_cfg)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config.dataset.synthetic: {exc}") from exc
    n = len(scene) if src.max_frames is None else min(len(scene), src.max_frames)
    gt_traj = Trajectory(scene.timestamps[:n], scene.trajectory[:n])
    frames = synthetic_frames(scene, intrinsics)
    return (next(frames) for _ in range(n)), gt_traj, n


def cmd_run(cfg: RunConfig) -> dict:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        frames, gt, n = open_dataset(cfg.dataset)
        log.info("run: %d frames, mode=%s, seed=%d", n, cfg.mode, cfg.seed)
        t0 = time.perf_counter()
        slam = NeuralSlam(cfg.slam_config())
        try:
            slam.run(frames, progress=lambda i, rec, dt: log.info(
                "frame %d t=%.3f loss=%.4f region=%s %.2fs", i, rec.timestamp, rec.loss, rec.working, dt))
        finally:
            slam.close()
        runtime = time.perf_counter() - t0
        traj = Trajectory.from_pairs(slam.trajectory())
        paths = {"trajectory": out / "trajectory.csv", "map": out / "map.nfm",
                 "metrics": out / "metrics.json", "log": out / "run.log", "manifest": out / "manifest.json"}
        write_trajectory_csv(paths["trajectory"], traj)
        map_bytes = slam.atlas.save(paths["map"])
        metrics = {"frames": len(traj), "regions": len(slam.atlas.regions), "map_size_bytes": map_bytes,
                   "runtime_s": runtime, "ate_rmse_m": None, "pairs": 0}
        if gt is not None and len(traj) >= 3:
            try:
                metrics["ate_rmse_m"], metrics["pairs"] = trajectory_ate(traj, gt, cfg.dataset.max_dt)
            except EvaluationError as exc:
                log.warning("ATE not computed: %s", exc)
        write_metrics(paths["metrics"], metrics)
        with open(paths["manifest"], "w") as fh:
            json.dump({k: str(v) for k, v in paths.items()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info("done: %s", json.dumps(metrics, sort_keys=True))
        return metrics
    finally:
        root.removeHandler(handler)
        handler.close()


def cmd_reconstruct(map_path, output, blend: BlendConfig = BlendConfig(), per_region: bool = False):
    """Export the blended map to ``output`` (a PLY path); with ``per_region`` also one PLY per region."""
    atlas = Atlas.load(map_path)
    written = []
    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    cloud = export_cloud(atlas, blend, output)
    written.append((str(output), len(cloud)))
    if per_region:
        for key in sorted(atlas.regions):
            name = output.with_name(f"{output.stem}_region_{key[0]}_{key[1]}_{key[2]}{output.suffix or '.ply'}")
            c = export_region_cloud(atlas, key, blend, name)
            written.append((str(name), len(c)))
    return written


def cmd_eval(trajectory_path, groundtruth_path, map_path=None, max_dt: float = 0.02, output=None) -> dict:
    est = read_trajectory(trajectory_path)
    gt = read_trajectory(groundtruth_path)
    ate, pairs = trajectory_ate(est, gt, max_dt)
    metrics = {"ate_rmse_m": ate, "pairs": pairs, "map_size_bytes": None, "runtime_s": None}
    if map_path is not None:
        atlas = Atlas.load(map_path)
        report = map_size_report(atlas)
        actual = Path(map_path).stat().st_size
        if report["total_bytes"] != actual:
            raise FieldFormatError(f"map file is {actual} bytes but its contents account for "
                                   f"{report['total_bytes']}")
        metrics["map_size_bytes"] = actual
        metrics["regions"] = len(atlas.regions)
    if output is not None:
        write_metrics(output, metrics)
    return metrics


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nfslam", description="Region-partitioned neural-field RGB-D SLAM.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="track and map a sequence")
    r.add_argument("config", nargs="?", help="YAML run configuration")
    r.add_argument("--tum", help="TUM RGB-D sequence directory (overrides the config)")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=("stepped", "pipelined"))
    r.add_argument("--output", "-o")
    r.add_argument("--frames", type=int, help="process at most this many frames")

    c = sub.add_parser("reconstruct", help="export a PLY point cloud from a map file")
    c.add_argument("map")
    c.add_argument("output")
    c.add_argument("--config", help="YAML run configuration; only its blend section is used")
    c.add_argument("--resolution", type=float)
    c.add_argument("--sigma-min", type=float)
    c.add_argument("--decay", type=float)
    c.add_argument("--per-region", action="store_true")

    e = sub.add_parser("eval", help="ATE and map size")
    e.add_argument("trajectory")
    e.add_argument("groundtruth")
    e.add_argument("--map")
    e.add_argument("--max-dt", type=float, default=0.02)
    e.add_argument("--output", "-o", help="metrics JSON path")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            overrides = {"seed": args.seed, "mode": args.mode, "output": args.output,
                         "dataset.tum": args.tum, "dataset.max_frames": args.frames}
            cfg = load_config(args.config, overrides)
            metrics = cmd_run(cfg)
            print(json.dumps(metrics, indent=2, sort_keys=True))
        elif args.command == "reconstruct":
            cfg = load_config(args.config, {"blend.resolution": args.resolution,
                                            "blend.sigma_min": args.sigma_min, "blend.decay": args.decay})
            for path, n in cmd_reconstruct(args.map, args.output, cfg.blend, args.per_region):
                print(f"{path}: {n} points")
        else:
            metrics = cmd_eval(args.trajectory, args.groundtruth, args.map, args.max_dt, args.output)
            print(json.dumps(metrics, indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except FieldFormatError as exc:
        print(f"map format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATASET if args.command == "run" else EXIT_EVAL if args.command == "eval" else EXIT_FORMAT
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        logging.getLogger("nfslam").exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
