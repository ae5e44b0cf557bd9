"""Track and map the built-in synthetic box room, then score trajectory and surface.

    python demos/synthetic_room.py --frames 40 --out /tmp/room

``--frames`` takes a prefix of the 100-frame sequence, so the camera speed
stays the same. The full sequence takes several minutes on a desktop CPU.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from nfslam.dataset import desk_room_config, synthetic_frames, synthetic_from_config
from nfslam.evaluate import EvaluationError, Trajectory, trajectory_ate, write_trajectory_csv
from nfslam.reconstruct import BlendConfig, export_cloud
from nfslam.slam import NeuralSlam, SlamConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--frames", type=int, default=100)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="room_demo")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene, intrinsics = synthetic_from_config(desk_room_config())
    n = min(args.frames, len(scene))
    slam = NeuralSlam(SlamConfig(seed=args.seed))

    def progress(i, rec, dt):
        if i % 10 == 0:
            print(f"frame {i:3d}  region {rec.working}  loss {rec.loss:.3f}  {dt:.1f}s")

    start = time.perf_counter()
    frames = synthetic_frames(scene, intrinsics)
    slam.run((next(frames) for _ in range(n)), progress)
    print(f"slam: {time.perf_counter() - start:.0f}s, {len(slam.atlas.regions)} regions")

    est = Trajectory.from_pairs(slam.trajectory())
    write_trajectory_csv(out / "trajectory.csv", est)
    print(f"map {slam.atlas.save(out / 'map.nfm')} bytes")
    try:
        ate, pairs = trajectory_ate(est, Trajectory(scene.timestamps[:n], scene.trajectory[:n]))
        print(f"ATE RMSE {ate * 100:.2f} cm over {pairs} frames")
    except EvaluationError as exc:  # the first leg of the sweep is a straight line
        print(f"ATE not defined yet: {exc}")

    cloud = export_cloud(slam.atlas, BlendConfig(), out / "surface.ply")
    # the map lives in the first camera's frame; move the points into room coordinates to score them
    dist = scene.surface_distance(scene.trajectory[0].transform(cloud.points))
    print(f"{len(cloud)} surface points, distance to true walls p50 {np.median(dist) * 100:.2f} cm, "
          f"p95 {np.percentile(dist, 95) * 100:.2f} cm")


if __name__ == "__main__":
    main()
