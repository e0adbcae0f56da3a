"""Photometric fine-tuning of a splat scene against edited views.

Plain gradient descent on the masked L2 error between renders and edited
images, with backtracking so the recorded loss sequence never increases.
After every accepted step the scene is re-projected onto its invariants:
opacities clamped to [0,1], scales floored, quaternions renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .render import ViewRecord, photometric_loss_and_grads
from .scene import GaussianScene

SCALE_FLOOR = 1e-4


@dataclass
class FinetuneResult:
    scene: GaussianScene
    losses: list[float]


def _total_loss_and_grads(scene, views, want_grads=True, optimize_scale=False):
    total = 0.0
    agg = None
    for view in views:
        loss, grads, _ = photometric_loss_and_grads(
            scene, view.pose, view.edited, view.mask,
            want_position=want_grads, want_scale=optimize_scale and want_grads)
        total += loss
        if want_grads:
            if agg is None:
                agg = grads
            else:
                for key in agg:
                    agg[key] += grads[key]
    return total / len(views), agg


def _project_invariants(scene: GaussianScene) -> None:
    np.clip(scene.opacities, 0.0, 1.0, out=scene.opacities)
    np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
    np.maximum(scene.scales, SCALE_FLOOR, out=scene.scales)
    scene.rotations /= np.linalg.norm(scene.rotations, axis=1, keepdims=True)


def finetune(scene: GaussianScene, views: list[ViewRecord], iterations: int,
             step_size: float, optimize_scale: bool = False) -> FinetuneResult:
    """Descend the mean masked photometric error over all edited views.

    Every view must carry an edited image. Steps that would increase the loss
    are retried with a halved step, so the final loss never exceeds the
    initial one. Raises DivergenceError if the loss turns non-finite.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    for view in views:
        if view.edited is None:
            raise ValueError(f"view {view.id} has no edited image")

    current = scene.copy()
    loss, grads = _total_loss_and_grads(current, views, optimize_scale=optimize_scale)
    if not np.isfinite(loss):
        raise DivergenceError("initial photometric loss is not finite")
    losses = [loss]
    lr = step_size

    for _ in range(iterations):
        accepted = False
        trial_lr = lr
        for _attempt in range(20):
            trial = current.copy()
            trial.colors -= trial_lr * grads["colors"]
            trial.opacities -= trial_lr * grads["opacities"]
            trial.positions -= trial_lr * grads["positions"]
            if optimize_scale:
                trial.scales -= trial_lr * grads["scales"]
            _project_invariants(trial)
            trial_loss, trial_grads = _total_loss_and_grads(
                trial, views, optimize_scale=optimize_scale)
            if not np.isfinite(trial_loss):
                raise DivergenceError("photometric loss diverged during fine-tuning")
            if trial_loss <= loss:
                current, loss, grads = trial, trial_loss, trial_grads
                lr = trial_lr
                accepted = True
                break
            trial_lr *= 0.5
        if not accepted:
            break  # no admissible step left; keep the best scene so far
        losses.append(loss)
    return FinetuneResult(scene=current, losses=losses)
