"""Composite guided noise predictions and the per-view guided denoising loop.

The basic composition amplifies two differences on top of the unconditional
prediction: conditional-minus-promptless (text adherence, scaled by w_text)
and fused-minus-unfused (cross-view consistency, scaled by w_consistency).
The full composition adds a learned-token term scaled by w_token. Each
distinct denoiser evaluation happens exactly once per step via a signature
cache; zero-weight terms are skipped entirely, which is what makes the
reduction identities bitwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, PreparedRefs, PromptTokens, ReferenceSet
from .errors import DivergenceError
from .schedule import NoiseSchedule, ddim_denoise_step

log = logging.getLogger(__name__)

SUBTRAHEND_MODES = ("token-isolating", "literal")


@dataclass(frozen=True)
class GuidanceWeights:
    """Scales of the three guidance terms; all finite and >= 0."""

    w_text: float = 5.0
    w_consistency: float = 2.0
    w_token: float = 1.5

    def __post_init__(self):
        for v in (self.w_text, self.w_consistency, self.w_token):
            if not np.isfinite(v) or v < 0:
                raise ValueError("guidance weights must be finite and nonnegative")


@dataclass
class StepTrace:
    t: int
    calls: list[tuple[str, float]] = field(default_factory=list)
    terms: list[tuple[str, float]] = field(default_factory=list)


@dataclass
class GuidanceTermTrace:
    """Per-step record of every distinct denoiser evaluation and term norm."""

    steps: list[StepTrace] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        for s in self.steps:
            calls = ";".join(f"{name}:{norm:.12e}" for name, norm in s.calls)
            terms = ";".join(f"{name}:{norm:.12e}" for name, norm in s.terms)
            lines.append(f"step={s.t} calls={calls} terms={terms}")
        return "\n".join(lines) + ("\n" if lines else "")


class _TermEvaluator:
    """Evaluates denoiser signatures once each, recording norms."""

    def __init__(self, denoiser, z, t, cond=None, enable_cache=True):
        self.denoiser = denoiser
        self.z = z
        self.t = t
        self.cond = cond
        self.enable_cache = enable_cache
        self.results: dict[str, np.ndarray] = {}
        self.norms: dict[str, float] = {}
        self.order: list[str] = []
        self.step_cache: dict = {}

    def __call__(self, signature: str, prompt, refs, mode: str) -> np.ndarray:
        if self.enable_cache and signature in self.results:
            return self.results[signature]
        out = self.denoiser.predict_noise(
            self.z, self.t, prompt=prompt, refs=refs, mode=mode,
            cond=self.cond, step_cache=self.step_cache if self.enable_cache else None)
        if self.enable_cache:
            self.results[signature] = out
        if signature not in self.order:
            self.order.append(signature)
            self.norms[signature] = float(np.linalg.norm(out))
        return out

    def call_norms(self) -> list[tuple[str, float]]:
        return [(sig, self.norms[sig]) for sig in self.order]


def _compose_basic(ev: _TermEvaluator, prompt: PromptTokens, refs,
                   weights: GuidanceWeights):
    pred = ev("uncond", None, None, "theta-hat")
    terms = []
    if weights.w_text != 0.0:
        diff = ev("theta(T,R)", prompt, refs, "theta") - ev("theta(R)", None, refs, "theta")
        pred = pred + weights.w_text * diff
        terms.append(("text", float(np.linalg.norm(diff))))
    if weights.w_consistency != 0.0:
        diff = ev("theta(T,R)", prompt, refs, "theta") - ev("theta_hat(T)", prompt, None, "theta-hat")
        pred = pred + weights.w_consistency * diff
        terms.append(("consistency", float(np.linalg.norm(diff))))
    return pred, terms


def guided_noise_basic(denoiser, z: np.ndarray, t: int, prompt: PromptTokens,
                       refs: ReferenceSet | PreparedRefs,
                       weights: GuidanceWeights,
                       cond: np.ndarray | None = None,
                       enable_cache: bool = True,
                       trace_step: StepTrace | None = None) -> np.ndarray:
    """Two-term guided prediction (text adherence + view consistency)."""
    if refs is None:
        raise ValueError("guided prediction requires a nonempty reference set")
    ev = _TermEvaluator(denoiser, z, t, cond, enable_cache)
    pred, terms = _compose_basic(ev, prompt, refs, weights)
    if trace_step is not None:
        trace_step.calls = ev.call_norms()
        trace_step.terms = terms
    return pred


def guided_noise_full(denoiser, z: np.ndarray, t: int, prompt: PromptTokens,
                      refs: ReferenceSet | PreparedRefs,
                      token: PromptTokens | None,
                      weights: GuidanceWeights,
                      subtrahend_mode: str = "token-isolating",
                      cond: np.ndarray | None = None,
                      enable_cache: bool = True,
                      trace_step: StepTrace | None = None,
                      norm_ceiling: float = 1e4) -> np.ndarray:
    """Full guided prediction: the basic composition plus the learned-token term.

    The token term's default subtrahend is the text-and-reference-conditioned
    evaluation, isolating what the learned token adds beyond the base prompt.
    "literal" mode subtracts the unfused text evaluation instead (the unfused
    path ignores references by definition).
    """
    if subtrahend_mode not in SUBTRAHEND_MODES:
        raise ValueError(f"unknown subtrahend mode {subtrahend_mode!r}")
    if refs is None:
        raise ValueError("guided prediction requires a nonempty reference set")
    ev = _TermEvaluator(denoiser, z, t, cond, enable_cache)
    pred, terms = _compose_basic(ev, prompt, refs, weights)
    if weights.w_token != 0.0:
        if token is None:
            raise ValueError("token term requested but no learned token supplied")
        if subtrahend_mode == "token-isolating":
            sub = ev("theta(T,R)", prompt, refs, "theta")
        else:
            sub = ev("theta_hat(T)", prompt, None, "theta-hat")
        diff = ev("theta(T',R)", token, refs, "theta") - sub
        pred = pred + weights.w_token * diff
        terms.append(("token", float(np.linalg.norm(diff))))
    for name, norm in terms:
        if norm > norm_ceiling:
            log.warning("guidance term %r norm %.3e exceeds ceiling %.3e at t=%d",
                        name, norm, norm_ceiling, t)
    if trace_step is not None:
        trace_step.calls = ev.call_norms()
        trace_step.terms = terms
    return pred


@dataclass
class ViewConditioning:
    """Everything guided_denoise_view needs besides the latent itself."""

    prompt: PromptTokens
    refs: ReferenceSet
    token: PromptTokens | None
    weights: GuidanceWeights
    subtrahend_mode: str = "token-isolating"
    cond: np.ndarray | None = None
    norm_ceiling: float = 1e4


def guided_denoise_view(denoiser: Denoiser, z_kappa: np.ndarray, kappa: int,
                        schedule: NoiseSchedule,
                        conditioning: ViewConditioning) -> tuple[np.ndarray, GuidanceTermTrace]:
    """Run the partial reverse loop t = kappa..1 with full guided predictions.

    Returns the clean latent plus the term trace. Aborts with DivergenceError
    (carrying the trace so far) when the latent turns non-finite.
    """
    if kappa == 0:
        return z_kappa, GuidanceTermTrace()
    if not (1 <= kappa <= schedule.t_max):
        raise IndexError(f"kappa {kappa} outside [0, {schedule.t_max}]")
    prepared = denoiser.prepare_refs(conditioning.refs) \
        if isinstance(conditioning.refs, ReferenceSet) else conditioning.refs
    trace = GuidanceTermTrace()
    z = z_kappa
    for t in range(kappa, 0, -1):
        step = StepTrace(t=t)
        eps = guided_noise_full(
            denoiser, z, t, conditioning.prompt, prepared, conditioning.token,
            conditioning.weights, subtrahend_mode=conditioning.subtrahend_mode,
            cond=conditioning.cond, trace_step=step,
            norm_ceiling=conditioning.norm_ceiling)
        z = ddim_denoise_step(z, eps, t, schedule)
        trace.steps.append(step)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(
                f"latent diverged at step t={t}; trace:\n{trace.to_text()}")
    return z, trace
