"""Inspect the guided prediction's term structure on a single view edit.

Each denoising step evaluates five conditioning signatures once each; the
trace records their norms plus the three difference-term norms, which is the
first place to look when guidance blows up or does nothing.
"""

import numpy as np

from texsplat import (GuidanceWeights, build_schedule, prompt_from_names,
                      synth_scene)
from texsplat.denoiser import DenoiserConfig, Denoiser, init_params, PromptTokens
from texsplat.latent import masked_encode
from texsplat.progressive import acquire_reference, build_reference_set, edit_view, order_views
from texsplat.render import make_view_record
from texsplat.textures import texture_patch

scene, poses = synth_scene("sphere-blob", 0, ring_count=8, width=32, height=32)
views = {i: make_view_record(scene, p, i) for i, p in enumerate(poses)}
ordering = order_views({i: v.pose for i, v in views.items()}, 0)

# untrained weights are fine for tracing the call structure
cfg = DenoiserConfig()
model = Denoiser(init_params(cfg, 0), cfg)
schedule = build_schedule(50, 1e-4, 0.02)
patch = texture_patch("checker-green", size=32, seed=0)
acq = acquire_reference("crop-paste", views[0], None, None, patch=patch)
refs = build_reference_set(1, 0, ordering, {0: acq.image}, views, False, 0.4)

view = views[1]
view.latent = masked_encode(view.rendered, view.mask)
rng = np.random.default_rng(0)
token = PromptTokens(rng.normal(size=(1, 16)))
_, trace = edit_view(view, refs, prompt_from_names("solid-green"), token,
                     GuidanceWeights(4.0, 1.5, 1.0), kappa=6,
                     schedule=schedule, denoiser=model,
                     background=scene.background)

print(trace.to_text())
print(f"{len(trace.steps)} steps, "
      f"{len(trace.steps[0].calls)} denoiser signatures per step")
