"""Cross-view consistency by depth reprojection, and embedder similarity.

Consistency reprojects masked pixels between nearby views using the unedited
geometry's depth maps and accumulates the mean absolute color difference over
mutually visible pixels. Similarity is the mean embedder cosine between each
rendered view and the reference image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedder import embed_image
from .errors import EmptyMaskError, TexsplatError
from .render import ViewRecord

MAX_PAIR_GAP_DEG = 90.0
OCCLUSION_TOL = 0.5   # scene units
SOLID_ALPHA = 0.8     # pixels below this coverage are partially background


class NoOverlapError(TexsplatError):
    """No view pair shares any mutually visible pixels."""


def _azimuth_gap(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def _solid(view: ViewRecord) -> np.ndarray:
    """Pixels solidly covered by the object; partial-coverage pixels blend the
    background in a view-dependent way and are excluded from visibility."""
    m = view.mask & (view.depth > 0)
    if view.alpha is not None:
        m = m & (view.alpha >= SOLID_ALPHA)
    return m


def reproject_pair_error(render_i: np.ndarray, render_j: np.ndarray,
                         view_i: ViewRecord, view_j: ViewRecord,
                         occlusion_tol: float = OCCLUSION_TOL) -> tuple[float, int]:
    """Mean absolute color difference of view i's masked pixels seen from j.

    Returns (error, count); count is the number of mutually visible pixels.
    """
    vs, us = np.nonzero(_solid(view_i))
    if len(vs) == 0:
        return 0.0, 0
    depth = view_i.depth[vs, us]
    world = view_i.pose.unproject(us + 0.5, vs + 0.5, depth)
    cam_j = view_j.pose.world_to_cam(world)
    z_j = cam_j[:, 2]
    px = view_j.pose.project(cam_j)
    uj = np.floor(px[:, 0]).astype(int)
    vj = np.floor(px[:, 1]).astype(int)
    h, w = view_j.mask.shape
    ok = (z_j > 0) & (uj >= 0) & (uj < w) & (vj >= 0) & (vj < h)
    if not ok.any():
        return 0.0, 0
    uj, vj, z_j = uj[ok], vj[ok], z_j[ok]
    vs, us = vs[ok], us[ok]
    solid_j = _solid(view_j)
    visible = solid_j[vj, uj] & (np.abs(view_j.depth[vj, uj] - z_j) <= occlusion_tol)
    if not visible.any():
        return 0.0, 0
    ci = render_i[vs[visible], us[visible]]
    cj = render_j[vj[visible], uj[visible]]
    return float(np.mean(np.abs(ci - cj))), int(visible.sum())


def eval_consistency(renders: dict[int, np.ndarray], views: dict[int, ViewRecord],
                     max_gap_deg: float = MAX_PAIR_GAP_DEG,
                     occlusion_tol: float = OCCLUSION_TOL) -> tuple[float, list]:
    """Pairwise mean reprojection color error over nearby ordered view pairs.

    Depths and masks must come from the unedited geometry. Raises
    NoOverlapError when no pair shares visible pixels.
    """
    if len(views) < 2:
        raise ValueError("consistency needs at least two views")
    pair_errors = []
    for i in sorted(views):
        for j in sorted(views):
            if i == j:
                continue
            if _azimuth_gap(views[i].pose.azimuth, views[j].pose.azimuth) > max_gap_deg:
                continue
            err, count = reproject_pair_error(renders[i], renders[j],
                                              views[i], views[j], occlusion_tol)
            if count > 0:
                pair_errors.append((i, j, err, count))
    if not pair_errors:
        raise NoOverlapError("no view pair shares mutually visible pixels")
    return float(np.mean([e for _, _, e, _ in pair_errors])), pair_errors


def eval_similarity(renders: dict[int, np.ndarray], views: dict[int, ViewRecord],
                    reference: np.ndarray, reference_mask: np.ndarray
                    ) -> tuple[float, dict[int, float]]:
    """Mean embedder cosine between each render and the reference image."""
    if not reference_mask.any():
        raise EmptyMaskError("reference mask is empty")
    ref_embed = embed_image(reference, reference_mask)
    per_view = {}
    for i in sorted(renders):
        per_view[i] = float(embed_image(renders[i], views[i].mask) @ ref_embed)
    return float(np.mean(list(per_view.values()))), per_view


@dataclass
class EvalReport:
    consistency: float
    similarity: float
    baseline_consistency: float
    baseline_similarity: float
    per_view_similarity: dict[int, float] = field(default_factory=dict)
    pair_errors: list = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["texsplat-eval 1"]
        lines.append(f"consistency_error = {self.consistency!r}")
        lines.append(f"similarity = {self.similarity!r}")
        lines.append(f"baseline_consistency_error = {self.baseline_consistency!r}")
        lines.append(f"baseline_similarity = {self.baseline_similarity!r}")
        for i in sorted(self.per_view_similarity):
            lines.append(f"view_similarity[{i}] = {self.per_view_similarity[i]!r}")
        for i, j, err, count in self.pair_errors:
            lines.append(f"pair_error[{i},{j}] = {err!r} ({count} px)")
        for note in self.notes:
            lines.append(f"note = {note}")
        lines.append("summary: consistency %.4f (baseline %.4f), similarity %.4f (baseline %.4f)"
                     % (self.consistency, self.baseline_consistency,
                        self.similarity, self.baseline_similarity))
        return "\n".join(lines) + "\n"
