"""Blended density along a line through the overlap of two neighbouring regions.

Two regions are trained on the same eight views of a wall, then the density is
sampled every millimetre along a line that crosses both cube faces. The
printout compares the blended field with each region's own output.

    python demos/seam_blending.py --steps 300
"""

import argparse

import numpy as np

from nfslam.atlas import Atlas, region_transform
from nfslam.dataset import SyntheticScene, default_intrinsics, desk_room_config, look_at, render_synthetic
from nfslam.field import EmbeddingBasis, field_forward, init_params
from nfslam.reconstruct import blended_query
from nfslam.render import RenderConfig
from nfslam.tracker import OptimConfig, map_step, maybe_add_keyframe


def train_pair(steps):
    room = desk_room_config()
    poses = [look_at([x, 0.2, 0.1], [x + 0.3, -1.2, -0.8]) for x in (0.95, 1.1, 1.25, 1.4, 1.55)]
    poses += [look_at([x, 0.2, 0.1], [x - 0.3, -1.2, -0.3]) for x in (1.0, 1.3, 1.6)]
    scene = SyntheticScene(room["room_min"], room["room_max"], poses)
    frames = [render_synthetic(scene, default_intrinsics(), i) for i in range(len(poses))]
    atlas = Atlas(EmbeddingBasis.create(0))
    rng = np.random.default_rng(0)
    atlas.initialize(np.zeros(3), init_params(rng))
    atlas.update_working_region([atlas.pitch, 0.0, 0.0])
    cfg = OptimConfig(keyframe_every=1)
    for key in sorted(atlas.regions):
        region = atlas.regions[key]
        for f, p in zip(frames, poses):
            maybe_add_keyframe(rng, f, p, region, cfg, fixed=True)
        for i in range(steps):
            j = i % len(frames)
            map_step(rng, region, frames[j], poses[j], atlas.basis, cfg, RenderConfig(), update_poses=False)
        print(f"trained region {key}")
    return atlas


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=300, help="mapping steps per region")
    args = parser.parse_args()

    atlas = train_pair(args.steps)
    a, b = atlas.regions[(0, 0, 0)], atlas.regions[(1, 0, 0)]
    lo, hi = b.box[0][0], a.box[1][0]
    xs = np.arange(lo - 0.05, hi + 0.05, 0.001)
    line = np.column_stack([xs, np.full(len(xs), -1.2), np.full(len(xs), -0.3)])  # on the wall surface
    _, blended = blended_query(line, atlas)
    own = [field_forward(r.params, atlas.basis, region_transform(line, r.origin, r.side))[1] for r in (a, b)]
    print(f"overlap x in [{lo:.3f}, {hi:.3f}] m, line on the -y wall at z = -0.3 m")
    print("     x   blended   region0   region1")
    for i in range(0, len(xs), 50):
        print(f"{xs[i]:6.3f}  {blended[i]:8.2f}  {own[0][i] if a.contains(line[i])[0] else np.nan:8.2f}  "
              f"{own[1][i] if b.contains(line[i])[0] else np.nan:8.2f}")
    span = blended.max() - blended.min()
    print(f"largest 1 mm step: {np.abs(np.diff(blended)).max() / span:.4f} of the line's range")


if __name__ == "__main__":
    main()
