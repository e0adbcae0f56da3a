"""End-to-end experiment orchestration with a content-addressed manifest.

run_experiment executes: scene synthesis, denoiser training (or loading),
reference acquisition, token tuning, then the iterative edit/fine-tune loop,
and finally evaluation. Every stage writes its artifacts plus digests to the
manifest, so a completed run is a no-op to re-run and an interrupted one
resumes at the first unfinished stage.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, config_to_text
from .denoiser import (Denoiser, DenoiserConfig, PromptTokens, RefEntry,
                       ReferenceSet, TrainConfig, load_weights,
                       prompt_from_names, save_weights, train_denoiser)
from .errors import ConfigError, MissingArtifactError
from .evaluate import EvalReport, eval_consistency, eval_similarity
from .finetune import finetune
from .guidance import GuidanceWeights
from .imageio import (read_depth, read_mask_ppm, read_ppm, write_depth,
                      write_mask_ppm, write_ppm)
from .latent import encode_latent, masked_encode
from .progressive import EditSettings, acquire_reference, edit_all, order_views
from .prompt_tune import TuneConfig, load_token, save_token, tune_token
from .render import ViewRecord, make_view_record, render
from .scene import load_scene, save_scene, synth_scene
from .schedule import assign_kappa, build_schedule
from .textures import texture_patch, token_vocabulary, training_corpus

MANIFEST_NAME = "manifest.txt"


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    """Stage log plus artifact digests, one experiment directory each."""

    def __init__(self, root: Path, cfg_hash: str):
        self.root = root
        self.path = root / MANIFEST_NAME
        self.cfg_hash = cfg_hash
        self.stages: dict[str, str] = {}
        self.artifacts: dict[str, str] = {}
        if self.path.exists():
            self._load()

    def _load(self):
        lines = self.path.read_text().splitlines()
        if not lines or not lines[0].startswith("texsplat-manifest"):
            raise MissingArtifactError(f"{self.path}: bad manifest header")
        for line in lines[1:]:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "config_hash":
                if parts[1] != self.cfg_hash:
                    raise ConfigError(
                        "output directory belongs to a different config "
                        f"(hash {parts[1][:12]}... vs {self.cfg_hash[:12]}...)")
            elif parts[0] == "stage":
                self.stages[parts[1]] = parts[2]
            elif parts[0] == "artifact":
                self.artifacts[parts[1]] = parts[2]

    def save(self):
        lines = ["texsplat-manifest 1", f"config_hash {self.cfg_hash}"]
        for name, status in self.stages.items():
            lines.append(f"stage {name} {status}")
        for rel, digest in sorted(self.artifacts.items()):
            lines.append(f"artifact {rel} {digest}")
        self.path.write_text("\n".join(lines) + "\n")

    def record(self, path: Path):
        rel = str(path.relative_to(self.root))
        self.artifacts[rel] = _sha256_file(path)

    def stage_done(self, name: str, files: list[Path]) -> bool:
        return self.stages.get(name) in ("done", "skipped") and all(f.exists() for f in files)

    def finish_stage(self, name: str, files: list[Path], status: str = "done"):
        for f in files:
            self.record(f)
        self.stages[name] = status
        self.save()

    def drifted_artifacts(self) -> list[str]:
        out = []
        for rel, digest in self.artifacts.items():
            p = self.root / rel
            if not p.exists() or _sha256_file(p) != digest:
                out.append(rel)
        return out


@dataclass
class ExperimentState:
    """In-memory handles to everything the stages exchange."""

    cfg: ExperimentConfig
    root: Path
    manifest: Manifest
    scene: object = None
    poses: list | None = None
    views: dict = field(default_factory=dict)
    denoiser: Denoiser | None = None
    schedule: object = None
    reference: np.ndarray | None = None
    token: object = None
    prompt: PromptTokens | None = None
    report: EvalReport | None = None


def _view_paths(root: Path, i: int, sub: str = "renders"):
    d = root / sub
    return (d / f"view_{i}.ppm", d / f"depth_{i}.bin",
            d / f"mask_{i}.ppm", d / f"alpha_{i}.ppm")


def _load_views(state: ExperimentState):
    """Rebuild ViewRecords from the unedited-geometry artifacts."""
    state.views = {}
    for i, pose in enumerate(state.poses):
        img_p, dep_p, msk_p, alp_p = _view_paths(state.root, i)
        state.views[i] = ViewRecord(
            id=i, pose=pose, rendered=read_ppm(img_p),
            depth=read_depth(dep_p), mask=read_mask_ppm(msk_p),
            alpha=read_ppm(alp_p)[..., 0])


def _stage_scene(state: ExperimentState):
    cfg = state.cfg
    scene_path = state.root / "scene_initial.txt"
    state.scene, state.poses = synth_scene(
        cfg.scene, cfg.seed, ring_count=cfg.views, num_splats=cfg.num_splats,
        width=cfg.render_size, height=cfg.render_size)
    if not state.manifest.stage_done("scene", [scene_path]):
        save_scene(scene_path, state.scene)
        state.manifest.finish_stage("scene", [scene_path])
    else:
        state.scene = load_scene(scene_path)


def _stage_views(state: ExperimentState):
    files = [p for i in range(state.cfg.views) for p in _view_paths(state.root, i)]
    if not state.manifest.stage_done("views", files):
        (state.root / "renders").mkdir(exist_ok=True)
        for i, pose in enumerate(state.poses):
            rec = make_view_record(state.scene, pose, i)
            img_p, dep_p, msk_p, alp_p = _view_paths(state.root, i)
            write_ppm(img_p, rec.rendered)
            write_depth(dep_p, rec.depth)
            write_mask_ppm(msk_p, rec.mask)
            write_ppm(alp_p, np.repeat(rec.alpha[..., None], 3, axis=2))
        state.manifest.finish_stage("views", files)
    _load_views(state)


def _stage_denoiser(state: ExperimentState, compute: bool = True):
    cfg = state.cfg
    state.schedule = build_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)
    if cfg.denoiser_weights:
        state.denoiser = load_weights(cfg.denoiser_weights)
        state.manifest.stages["denoiser"] = "loaded"
        state.manifest.save()
        return
    weights_path = state.root / "denoiser" / "weights.bin"
    if state.manifest.stage_done("denoiser", [weights_path]):
        state.denoiser = load_weights(weights_path)
        return
    if not compute:
        raise MissingArtifactError(
            f"denoiser weights not found at {weights_path}; run train-denoiser first")
    weights_path.parent.mkdir(exist_ok=True)
    vocab = token_vocabulary()
    corpus = [(encode_latent(img), np.atleast_2d(vocab[name]), name)
              for img, name in training_corpus(cfg.train_seed,
                                               size=cfg.train_texture_size)]
    train_cfg = TrainConfig(steps=cfg.train_steps, batch_size=cfg.train_batch,
                            learning_rate=cfg.train_lr, t_max=cfg.t_max,
                            beta_start=cfg.beta_start, beta_end=cfg.beta_end)
    state.denoiser, losses = train_denoiser(corpus, train_cfg, cfg.train_seed)
    save_weights(weights_path, state.denoiser)
    loss_path = state.root / "denoiser" / "train_losses.txt"
    loss_path.write_text("".join(f"{x!r}\n" for x in losses))
    state.manifest.finish_stage("denoiser", [weights_path, loss_path])


def _resolve_patch(cfg: ExperimentConfig) -> np.ndarray:
    if "/" in cfg.patch or cfg.patch.endswith(".ppm"):
        return read_ppm(cfg.patch)
    return texture_patch(cfg.patch, size=cfg.render_size, seed=cfg.seed)


def _stage_acquire(state: ExperimentState, compute: bool = True,
                   mode_override: str | None = None,
                   candidate_override: int | None = None):
    cfg = state.cfg
    if mode_override:
        cfg.acquire_mode = mode_override
    if candidate_override is not None:
        cfg.candidate_index = candidate_override
    ref_path = state.root / "ref" / "reference.ppm"
    state.prompt = prompt_from_names(cfg.prompt)
    if state.manifest.stage_done("acquire", [ref_path]):
        state.reference = read_ppm(ref_path)
        return
    if not compute:
        raise MissingArtifactError(
            f"reference image not found at {ref_path}; run acquire-ref first")
    ref_path.parent.mkdir(exist_ok=True)
    acq = acquire_reference(
        cfg.acquire_mode, state.views[cfg.tau], state.denoiser, state.schedule,
        prompt=state.prompt,
        patch=_resolve_patch(cfg) if cfg.acquire_mode == "crop-paste" else None,
        num_candidates=cfg.num_candidates,
        candidate_index=None if cfg.candidate_index < 0 else cfg.candidate_index,
        seed=cfg.seed + 101)
    files = [ref_path]
    for k, cand in enumerate(acq.candidates):
        if len(acq.candidates) > 1:
            cpath = ref_path.parent / f"candidate_{k}.ppm"
            write_ppm(cpath, cand)
            files.append(cpath)
    write_ppm(ref_path, acq.image)
    state.manifest.finish_stage("acquire", files)
    state.reference = read_ppm(ref_path)


def _stage_token(state: ExperimentState, compute: bool = True):
    cfg = state.cfg
    token_path = state.root / "token" / "token.bin"
    if cfg.w_token == 0.0:
        state.token = None
        state.manifest.stages["token"] = "skipped"
        state.manifest.save()
        return
    if state.manifest.stage_done("token", [token_path]):
        state.token = load_token(token_path)
        return
    if not compute:
        raise MissingArtifactError(
            f"learned token not found at {token_path}; run tune-token first")
    token_path.parent.mkdir(exist_ok=True)
    tau_view = state.views[cfg.tau]
    tune_cfg = TuneConfig(steps=cfg.tune_steps, learning_rate=cfg.tune_lr,
                          c_clip=cfg.tune_c_clip, c_diff=cfg.tune_c_diff,
                          t_hi=min(cfg.kappa_other, cfg.t_max))
    # tune under the same reference conditioning the edit loop will use
    tune_refs = ReferenceSet(
        entries=(RefEntry(masked_encode(state.reference, tau_view.mask), 1.0,
                          "reference"),),
        lam=cfg.lam)
    state.token = tune_token(tau_view.rendered, state.reference, tau_view.mask,
                             state.prompt, state.denoiser, state.schedule,
                             tune_cfg, seed=cfg.seed + 202, refs=tune_refs,
                             init_prompt_id=cfg.prompt)
    save_token(token_path, state.token)
    state.manifest.finish_stage("token", [token_path])


def _edit_settings(cfg: ExperimentConfig) -> EditSettings:
    return EditSettings(
        weights=GuidanceWeights(w_text=cfg.w_text, w_consistency=cfg.w_consistency,
                                w_token=cfg.w_token),
        lam=cfg.lam,
        ref_weights=(cfg.ref_weight_reference, cfg.ref_weight_previous,
                     cfg.ref_weight_flipped),
        symmetric=cfg.symmetric, propagate=cfg.propagate,
        subtrahend_mode=cfg.subtrahend_mode,
        jitter=cfg.edit_jitter, seed=cfg.seed)


def _stage_edit(state: ExperimentState, iteration: int):
    cfg = state.cfg
    edit_dir = state.root / "edits" / f"iter_{iteration}"
    files = [edit_dir / f"view_{i}.ppm" for i in range(cfg.views)]
    files += [edit_dir / f"trace_view_{i}.txt" for i in range(cfg.views) if cfg.views > 1]
    files.append(edit_dir / "edit_manifest.txt")
    name = f"edit_{iteration}"
    if state.manifest.stage_done(name, files):
        return
    edit_dir.mkdir(parents=True, exist_ok=True)
    kappas = assign_kappa(list(range(cfg.views)), cfg.tau, cfg.kappa_ref,
                          cfg.kappa_other)
    edited, traces = edit_all(state.views, cfg.tau, state.reference,
                              state.prompt, state.token, kappas,
                              state.schedule, state.denoiser,
                              _edit_settings(cfg), state.scene.background)
    ordering = order_views({i: v.pose for i, v in state.views.items()}, cfg.tau)
    for i, img in edited.items():
        write_ppm(edit_dir / f"view_{i}.ppm", img)
    for i, trace in traces.items():
        (edit_dir / f"trace_view_{i}.txt").write_text(trace.to_text())
    kappa_desc = " ".join(f"{i}:{kappas[i]}" for i in range(cfg.views))
    (edit_dir / "edit_manifest.txt").write_text(
        f"ordering {' '.join(map(str, ordering.sequence))}\n"
        f"kappa {kappa_desc}\n"
        f"config_hash {state.manifest.cfg_hash}\n")
    state.manifest.finish_stage(name, files)


def _stage_finetune(state: ExperimentState, iteration: int):
    cfg = state.cfg
    scene_path = state.root / f"scene_iter_{iteration}.txt"
    render_dir = state.root / f"renders_iter_{iteration}"
    files = [scene_path] + [render_dir / f"view_{i}.ppm" for i in range(cfg.views)]
    name = f"finetune_{iteration}"
    if state.manifest.stage_done(name, files):
        state.scene = load_scene(scene_path)
        for i in range(cfg.views):
            state.views[i].rendered = read_ppm(render_dir / f"view_{i}.ppm")
        return
    edit_dir = state.root / "edits" / f"iter_{iteration}"
    for i in range(cfg.views):
        p = edit_dir / f"view_{i}.ppm"
        if not p.exists():
            raise MissingArtifactError(f"edited view missing: {p}")
        state.views[i].edited = read_ppm(p)
    result = finetune(state.scene, list(state.views.values()),
                      iterations=cfg.finetune_iterations, step_size=cfg.finetune_step)
    state.scene = result.scene
    save_scene(scene_path, state.scene)
    render_dir.mkdir(exist_ok=True)
    for i, pose in enumerate(state.poses):
        img, _ = render(state.scene, pose)
        write_ppm(render_dir / f"view_{i}.ppm", img)
        state.views[i].rendered = read_ppm(render_dir / f"view_{i}.ppm")
    state.manifest.finish_stage(name, files)


def _final_renders(state: ExperimentState) -> dict[int, np.ndarray]:
    cfg = state.cfg
    if cfg.outer_iterations == 0:
        return {i: read_ppm(_view_paths(state.root, i)[0]) for i in range(cfg.views)}
    render_dir = state.root / f"renders_iter_{cfg.outer_iterations}"
    out = {}
    for i in range(cfg.views):
        p = render_dir / f"view_{i}.ppm"
        if not p.exists():
            raise MissingArtifactError(f"final render missing: {p}")
        out[i] = read_ppm(p)
    return out


def _stage_eval(state: ExperimentState) -> EvalReport:
    cfg = state.cfg
    baseline = {i: read_ppm(_view_paths(state.root, i)[0]) for i in range(cfg.views)}
    final = _final_renders(state)
    reference = read_ppm(state.root / "ref" / "reference.ppm")
    mask_tau = state.views[cfg.tau].mask

    base_cons, _ = eval_consistency(baseline, state.views) if cfg.views > 1 else (0.0, [])
    base_sim, _ = eval_similarity(baseline, state.views, reference, mask_tau)
    cons, pairs = eval_consistency(final, state.views) if cfg.views > 1 else (0.0, [])
    sim, per_view = eval_similarity(final, state.views, reference, mask_tau)

    report = EvalReport(consistency=cons, similarity=sim,
                        baseline_consistency=base_cons, baseline_similarity=base_sim,
                        per_view_similarity=per_view, pair_errors=pairs)
    for k in range(1, cfg.outer_iterations + 1):
        render_dir = state.root / f"renders_iter_{k}"
        if render_dir.exists() and cfg.views > 1:
            rk = {i: read_ppm(render_dir / f"view_{i}.ppm") for i in range(cfg.views)}
            ck, _ = eval_consistency(rk, state.views)
            report.notes.append(f"consistency_after_iter_{k} = {ck!r}")
    drift = state.manifest.drifted_artifacts()
    for rel in drift:
        report.notes.append(f"artifact drift detected: {rel}")
    report_path = state.root / "eval_report.txt"
    report_path.write_text(report.to_text())
    state.manifest.finish_stage("eval", [report_path])
    return report


def run_experiment(cfg: ExperimentConfig) -> tuple[Path, EvalReport]:
    """Execute (or resume) the full pipeline; returns the output dir and report."""
    cfg.validate()
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(root, config_hash(cfg))
    (root / "config.cfg").write_text(config_to_text(cfg))
    state = ExperimentState(cfg=cfg, root=root, manifest=manifest)

    _stage_scene(state)
    _stage_views(state)
    _stage_denoiser(state)
    _stage_acquire(state)
    _stage_token(state)
    for k in range(1, cfg.outer_iterations + 1):
        _stage_edit(state, k)
        _stage_finetune(state, k)
    report = _stage_eval(state)
    state.report = report
    return root, report


def _prepare(cfg: ExperimentConfig) -> ExperimentState:
    cfg.validate()
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(root, config_hash(cfg))
    (root / "config.cfg").write_text(config_to_text(cfg))
    return ExperimentState(cfg=cfg, root=root, manifest=manifest)


def run_stage(cfg: ExperimentConfig, stage: str, iteration: int = 1,
              mode_override: str | None = None,
              candidate_override: int | None = None) -> ExperimentState:
    """Run one named pipeline stage, loading (never recomputing) its
    prerequisites; a missing prerequisite raises MissingArtifactError."""
    state = _prepare(cfg)
    _stage_scene(state)
    _stage_views(state)
    if stage == "scene":
        return state
    if stage == "denoiser":
        _stage_denoiser(state, compute=True)
        return state
    need_denoiser = not (stage == "acquire" and
                         (mode_override or cfg.acquire_mode) == "crop-paste")
    if need_denoiser:
        _stage_denoiser(state, compute=False)
    else:
        state.schedule = build_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end)
    if stage == "acquire":
        _stage_acquire(state, compute=True, mode_override=mode_override,
                       candidate_override=candidate_override)
        return state
    _stage_acquire(state, compute=False)
    if stage == "token":
        _stage_token(state, compute=True)
        return state
    _stage_token(state, compute=False)
    # replay completed iterations so the scene and renders are current
    for k in range(1, iteration):
        name = f"finetune_{k}"
        if state.manifest.stages.get(name) != "done":
            raise MissingArtifactError(f"iteration {k} not finished; run edit/finetune for it first")
        _stage_finetune(state, k)
    if stage == "edit":
        _stage_edit(state, iteration)
        return state
    if stage == "finetune":
        edit_name = f"edit_{iteration}"
        if state.manifest.stages.get(edit_name) != "done":
            raise MissingArtifactError(f"no edited views for iteration {iteration}; run edit first")
        _stage_finetune(state, iteration)
        return state
    raise ConfigError(f"unknown stage {stage!r}")


def evaluate_existing(cfg: ExperimentConfig) -> EvalReport:
    """Recompute the eval report of a (possibly tampered) experiment directory."""
    root = Path(cfg.output_dir)
    if not (root / MANIFEST_NAME).exists():
        raise MissingArtifactError(f"no manifest in {root}")
    manifest = Manifest(root, config_hash(cfg))
    state = ExperimentState(cfg=cfg, root=root, manifest=manifest)
    state.scene, state.poses = synth_scene(
        cfg.scene, cfg.seed, ring_count=cfg.views, num_splats=cfg.num_splats,
        width=cfg.render_size, height=cfg.render_size)
    scene_file = root / "scene_initial.txt"
    if scene_file.exists():
        state.scene = load_scene(scene_file)
    _load_views(state)
    return _stage_eval(state)
