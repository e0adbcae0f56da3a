"""Render a procedural splat object from a camera ring and write PPM files."""

import pathlib

from texsplat import render, render_depth, render_mask, synth_scene
from texsplat.imageio import write_depth, write_ppm

out = pathlib.Path("demo_out/render")
out.mkdir(parents=True, exist_ok=True)

scene, poses = synth_scene("sphere-blob", seed=3, ring_count=8,
                           width=64, height=64)
print(f"{scene.num_splats} splats, {len(poses)} poses")

for i, pose in enumerate(poses):
    image, alpha = render(scene, pose)
    write_ppm(out / f"view_{i}.ppm", image)
    if i == 0:
        depth = render_depth(scene, pose)
        mask = render_mask(scene, pose, 0.05)
        write_depth(out / "depth_0.bin", depth)
        print(f"view 0: {int(mask.sum())} object pixels, "
              f"depth range [{depth[depth > 0].min():.2f}, {depth.max():.2f}], "
              f"alpha peak {alpha.max():.3f}")

print(f"wrote {len(poses)} views to {out}/")
