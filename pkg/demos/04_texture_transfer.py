"""Full texture transfer on a small scene: the complete pipeline in one call.

Synthesizes an 8-view ring around a gray-blue blob, trains the denoiser,
pastes a green checker texture into the reference view, learns the texture
token, and runs two edit/fine-tune rounds. Expect the similarity score to
rise above its baseline while the object picks up the reference's color.
"""

import pathlib

from texsplat import ExperimentConfig, run_experiment

cfg = ExperimentConfig(
    scene="sphere-blob",
    seed=0,
    views=8,
    render_size=32,          # desk demo; the shipped config uses 64
    num_splats=48,
    prompt="solid-green",    # deliberately coarse: the token fills the gap
    patch="checker-green",
    train_steps=600,
    tune_steps=300,
    outer_iterations=2,
    finetune_iterations=80,
    output_dir=str(pathlib.Path("demo_out/transfer")),
)

root, report = run_experiment(cfg)
print(report.to_text())
print(f"artifacts in {root}/ (renders, edits, traces, scene files)")
print("re-running this script is a no-op: the manifest marks every stage done")
