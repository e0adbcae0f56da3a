"""Progressive per-view editing: acquisition, ordering, reference sets, loop.

Editing starts at the reference view and walks outward along both azimuth
arcs, so every view's reference set contains an already-edited neighbor with
maximal visual overlap, plus the reference view itself and optionally its
horizontal mirror.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .denoiser import Denoiser, PromptTokens, RefEntry, ReferenceSet
from .embedder import embed_image, make_projector
from .errors import EmptyMaskError
from .guidance import GuidanceTermTrace, GuidanceWeights, ViewConditioning, guided_denoise_view
from .latent import decode_latent, downsample_to_latent_grid, masked_encode
from .prompt_tune import TokenEmbedding
from .render import ViewRecord
from .schedule import NoiseSchedule, ddim_denoise_step, partial_invert
from .scene import CameraPose


@dataclass(frozen=True)
class ViewOrdering:
    """Edit order: the reference view first, then alternating arc expansion."""

    sequence: tuple[int, ...]
    azimuths: dict[int, float]
    tau: int
    adjacency: str = "azimuth-degrees"

    def predecessor(self, view_id: int) -> int:
        """The already-edited neighbor on view_id's own arc, toward the reference."""
        if view_id == self.tau:
            raise ValueError("the reference view has no predecessor")
        d, side = self._dist_side(view_id)
        best, best_d = self.tau, 0.0
        for other in self.sequence:
            if other in (view_id, self.tau):
                continue
            od, oside = self._dist_side(other)
            if oside == side and od < d and od > best_d:
                best, best_d = other, od
        return best

    def _dist_side(self, view_id: int) -> tuple[float, int]:
        d = (self.azimuths[view_id] - self.azimuths[self.tau]) % 360.0
        return (d, 0) if d <= 180.0 else (360.0 - d, 1)


def order_views(poses: dict[int, CameraPose] | list[CameraPose], tau: int) -> ViewOrdering:
    """Alternating left/right expansion from the reference view.

    Views are ranked by circular azimuth distance; ties between the two arcs
    break toward increasing azimuth. Duplicate azimuths (mod 360) are an error.
    """
    if isinstance(poses, list):
        poses = dict(enumerate(poses))
    az = {i: p.azimuth % 360.0 for i, p in poses.items()}
    if tau not in az:
        raise ValueError(f"reference view {tau} not among poses")
    values = sorted(az.values())
    for a, b in zip(values, values[1:]):
        if abs(a - b) < 1e-9:
            raise ValueError("duplicate azimuths in the camera ring")

    def key(i):
        d = (az[i] - az[tau]) % 360.0
        dist, side = (d, 0) if d <= 180.0 else (360.0 - d, 1)
        return (dist, side)

    others = sorted((i for i in az if i != tau), key=key)
    return ViewOrdering(sequence=(tau, *others), azimuths=az, tau=tau)


@dataclass(frozen=True)
class ReferenceAcquisition:
    mode: str                       # "crop-paste" | "generative"
    candidates: tuple[np.ndarray, ...]
    chosen: int

    @property
    def image(self) -> np.ndarray:
        return self.candidates[self.chosen]


def _tile_patch(patch: np.ndarray, h: int, w: int) -> np.ndarray:
    reps = (int(np.ceil(h / patch.shape[0])), int(np.ceil(w / patch.shape[1])), 1)
    return np.tile(patch, reps)[:h, :w]


def _surface_paste(view: ViewRecord, patch: np.ndarray) -> np.ndarray:
    """Paste the texture anchored to the object surface, not the screen.

    Mask pixels are unprojected through the depth map and sample the patch by
    cylindrical world coordinates (azimuth around the object's vertical axis,
    height). The pasted texture therefore has a surface identity: a different
    view of the same object would see the same texel on the same point, which
    is what makes the reference meaningful for cross-view consistency.
    """
    h, w = view.rendered.shape[:2]
    vs, us = np.nonzero(view.mask & (view.depth > 0))
    world = view.pose.unproject(us + 0.5, vs + 0.5, view.depth[vs, us])
    ph, pw = patch.shape[:2]
    azimuth = np.arctan2(world[:, 1], world[:, 0]) / (2.0 * np.pi) + 0.5
    s = np.floor(azimuth * 2.0 * pw).astype(int) % pw
    t = np.floor(world[:, 2] * pw).astype(int) % ph
    image = view.rendered.copy()
    image[vs, us] = patch[t, s]
    return image


def refine_depth(depth: np.ndarray, mask: np.ndarray, dilate_radius: int = 3,
                 blur_size: int = 5) -> np.ndarray:
    """Smooth the depth across a dilated boundary band to kill edge artifacts.

    Only pixels inside the band (dilated minus eroded mask) change.
    """
    m = mask.astype(bool)
    dilated = ndimage.binary_dilation(m, iterations=dilate_radius)
    eroded = ndimage.binary_erosion(m, iterations=dilate_radius)
    band = dilated & ~eroded
    support = dilated.astype(np.float64)
    num = ndimage.uniform_filter(depth * support, size=blur_size)
    den = ndimage.uniform_filter(support, size=blur_size)
    blurred = np.divide(num, den, out=np.zeros_like(num), where=den > 1e-9)
    return np.where(band, blurred, depth)


def acquire_reference(mode: str, view: ViewRecord, denoiser: Denoiser | None,
                      schedule: NoiseSchedule | None,
                      prompt: PromptTokens | None = None,
                      patch: np.ndarray | None = None,
                      num_candidates: int = 4,
                      candidate_index: int | None = None,
                      kappa_gen: int = 30,
                      text_scale: float = 4.0,
                      candidate_jitter: float = 0.3,
                      seed: int = 0) -> ReferenceAcquisition:
    """Produce the edited reference image for view tau.

    crop-paste tiles the texture patch into the object mask over the unedited
    render. generative partially denoises the view latent conditioned on the
    refined depth, producing several candidates; the chosen one is either the
    explicit index or the candidate whose embedding best matches the prompt
    token through the fixed projector.
    """
    if not view.mask.any():
        raise EmptyMaskError("reference view has an empty object mask")
    h, w = view.rendered.shape[:2]

    if mode == "crop-paste":
        if patch is None:
            raise ValueError("crop-paste acquisition requires a texture patch")
        image = _surface_paste(view, patch)
        return ReferenceAcquisition(mode=mode, candidates=(image,), chosen=0)

    if mode != "generative":
        raise ValueError(f"unknown acquisition mode {mode!r}")
    if denoiser is None or schedule is None:
        raise ValueError("generative acquisition requires a trained denoiser and schedule")
    if prompt is None:
        raise ValueError("generative acquisition requires a prompt")

    refined = refine_depth(view.depth, view.mask)
    dmax = refined.max()
    cond = downsample_to_latent_grid(refined / dmax if dmax > 0 else refined)
    z0 = masked_encode(view.rendered, view.mask)

    def eps_uncond(z, t):
        return denoiser.predict_noise(z, t, None, None, "theta-hat", cond=cond)

    kappa_gen = min(kappa_gen, schedule.t_max)
    z_up = partial_invert(z0, kappa_gen, schedule, eps_uncond)
    rng = np.random.default_rng(seed)
    spread = candidate_jitter * np.sqrt(1.0 - schedule.alphas[kappa_gen])
    candidates = []
    for _ in range(num_candidates):
        z = z_up + spread * rng.normal(size=z_up.shape)
        for t in range(kappa_gen, 0, -1):
            e_un = denoiser.predict_noise(z, t, None, None, "theta-hat", cond=cond)
            e_tx = denoiser.predict_noise(z, t, prompt, None, "theta-hat", cond=cond)
            eps = e_un + text_scale * (e_tx - e_un)
            z = ddim_denoise_step(z, eps, t, schedule)
        candidates.append(decode_latent(z) * view.mask[..., None])

    if candidate_index is not None:
        chosen = int(candidate_index)
        if not (0 <= chosen < len(candidates)):
            raise ValueError(f"candidate index {chosen} out of range")
    else:
        projector = make_projector(prompt.tokens.shape[1])
        target = projector @ prompt.tokens.mean(axis=0)
        target = target / np.linalg.norm(target)
        sims = [float(embed_image(c, view.mask) @ target) for c in candidates]
        chosen = int(np.argmax(sims))
    return ReferenceAcquisition(mode=mode, candidates=tuple(candidates), chosen=chosen)


def build_reference_set(i: int, tau: int, ordering: ViewOrdering,
                        edited: dict[int, np.ndarray],
                        views: dict[int, ViewRecord],
                        symmetric: bool, lam: float,
                        weights: tuple[float, float, float] = (0.5, 0.4, 0.1),
                        propagate: bool = True) -> ReferenceSet:
    """Sparse conditioning set for editing view i.

    Entries: the edited reference view, the already-edited predecessor on i's
    arc, and optionally the horizontally flipped reference. Latents are
    encoded with backgrounds removed; weights renormalize over the entries
    present, and a predecessor identical to the reference merges into one
    entry keeping the total weight.
    """
    if tau not in edited:
        raise ValueError("the acquired reference must be installed before building sets")
    w_ref, w_prev, w_flip = weights
    mask_tau = views[tau].mask
    entries: list[tuple[str, np.ndarray, float]] = []

    if i == tau:
        entries.append(("reference", masked_encode(edited[tau], mask_tau), 1.0))
    else:
        entries.append(("reference", masked_encode(edited[tau], mask_tau), w_ref))
        if propagate:
            pred = ordering.predecessor(i)
            if pred not in edited:
                raise ValueError(f"predecessor view {pred} of {i} not edited yet")
            if pred == tau:
                entries[0] = ("reference", entries[0][1], w_ref + w_prev)
            else:
                entries.append(("previous",
                                masked_encode(edited[pred], views[pred].mask), w_prev))
        if symmetric:
            flipped = np.ascontiguousarray(edited[tau][:, ::-1])
            fmask = np.ascontiguousarray(mask_tau[:, ::-1])
            entries.append(("flipped", masked_encode(flipped, fmask), w_flip))

    total = sum(w for _, _, w in entries)
    return ReferenceSet(
        entries=tuple(RefEntry(latent=z, weight=w / total, tag=tag)
                      for tag, z, w in entries),
        lam=lam)


@dataclass
class EditSettings:
    """Per-run knobs of the progressive edit loop.

    jitter seeds a small per-view Gaussian perturbation of the inverted
    latent, standing in for the per-view sampling stochasticity a full
    diffusion model would have; neighbor propagation exists to correlate
    exactly this kind of independent variation away. Deterministic given
    (seed, view id).
    """

    weights: GuidanceWeights
    lam: float = 0.6
    ref_weights: tuple[float, float, float] = (0.5, 0.4, 0.1)
    symmetric: bool = False
    propagate: bool = True
    subtrahend_mode: str = "token-isolating"
    edit_reference_view: bool = True
    jitter: float = 0.15
    seed: int = 0


def edit_view(view: ViewRecord, refs: ReferenceSet, prompt: PromptTokens,
              token, weights: GuidanceWeights, kappa: int,
              schedule: NoiseSchedule, denoiser: Denoiser,
              background: np.ndarray,
              subtrahend_mode: str = "token-isolating",
              init_noise: np.ndarray | None = None
              ) -> tuple[np.ndarray, GuidanceTermTrace]:
    """Partial-invert the view latent, denoise it back under full guidance,
    decode, and re-apply the view mask so background pixels stay exact.

    init_noise, when given, perturbs the inverted latent before the guided
    reverse pass (scaled to the noise level at kappa).
    """
    if view.latent is None:
        raise ValueError(f"view {view.id} has no encoded latent")
    if isinstance(token, TokenEmbedding):
        token = token.as_prompt()

    def eps_uncond(z, t):
        return denoiser.predict_noise(z, t, None, None, "theta-hat")

    z_k = partial_invert(view.latent, kappa, schedule, eps_uncond)
    if init_noise is not None:
        z_k = z_k + np.sqrt(1.0 - schedule.alphas[kappa]) * init_noise
    conditioning = ViewConditioning(
        prompt=prompt, refs=refs, token=token,
        weights=weights, subtrahend_mode=subtrahend_mode)
    z_out, trace = guided_denoise_view(denoiser, z_k, kappa, schedule, conditioning)
    image = decode_latent(z_out)
    image = np.where(view.mask[..., None], image, background)
    return image, trace


def edit_all(views: dict[int, ViewRecord], tau: int, acquired: np.ndarray,
             prompt: PromptTokens, token, kappas, schedule: NoiseSchedule,
             denoiser: Denoiser, settings: EditSettings,
             background: np.ndarray
             ) -> tuple[dict[int, np.ndarray], dict[int, GuidanceTermTrace]]:
    """Edit every view in propagation order, reference view first.

    The acquired reference is installed as the reference view's edited image;
    with more than one view, the reference view itself is then re-edited from
    the acquired image (lightly, it has the smallest partial depth) and each
    remaining view is edited with its reference set of already-edited
    neighbors. A single-view scene keeps the acquisition untouched.
    """
    ordering = order_views({i: v.pose for i, v in views.items()}, tau)
    edited: dict[int, np.ndarray] = {tau: acquired}
    traces: dict[int, GuidanceTermTrace] = {}
    if len(views) == 1:
        return edited, traces

    for i in ordering.sequence:
        view = views[i]
        if i == tau:
            if not settings.edit_reference_view:
                continue
            source = acquired
        else:
            source = view.rendered
        view.latent = masked_encode(source, view.mask)
        refs = build_reference_set(i, tau, ordering, edited, views,
                                   settings.symmetric, settings.lam,
                                   settings.ref_weights, settings.propagate)
        init_noise = None
        if settings.jitter > 0.0:
            view_rng = np.random.default_rng((settings.seed, 7919, i))
            init_noise = settings.jitter * view_rng.normal(size=view.latent.shape)
        image, trace = edit_view(view, refs, prompt, token, settings.weights,
                                 kappas[i], schedule, denoiser, background,
                                 settings.subtrahend_mode,
                                 init_noise=init_noise)
        edited[i] = image
        traces[i] = trace
    return edited, traces
