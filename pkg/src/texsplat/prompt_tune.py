"""Learning the texture-difference token from one (render, reference) pair.

Two losses drive the token: a cosine alignment between the projected token
and the feature-space texture difference, and a denoising loss on the
reference latent with the token as the only prompt. The tuned token is later
injected into the guided prediction to carry texture identity into views the
reference never shows.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, PromptSource, PromptTokens, ReferenceSet
from .embedder import make_projector, texture_delta
from .errors import DivergenceError, ZeroDeltaError
from .latent import masked_encode
from .schedule import NoiseSchedule

TOKEN_MAGIC = b"TXSPTOK1"
TOKEN_VERSION = 1
_DELTA_TOL = 1e-9


@dataclass(frozen=True)
class TokenEmbedding:
    """The learned texture token plus where it came from."""

    vector: np.ndarray
    provenance: dict

    def as_prompt(self) -> PromptTokens:
        return PromptTokens(tokens=self.vector[None, :], source=PromptSource.LEARNED)


@dataclass(frozen=True)
class TuneConfig:
    steps: int = 300
    learning_rate: float = 0.05
    c_clip: float = 1.0
    c_diff: float = 1.0
    t_lo: int = 5
    t_hi: int = 25
    num_probes: int = 8
    eval_every: int = 25

    def hash(self) -> str:
        payload = json.dumps(self.__dict__, sort_keys=True, default=float)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def clip_loss(delta: np.ndarray, token: np.ndarray, projector: np.ndarray) -> float:
    """Cosine between the projected token and the texture difference.

    Minimizing this drives the projected token toward the negated difference,
    i.e. toward the unedited-to-reference edit direction. Range [-1, 1];
    a zero difference is an error (nothing to align with).
    """
    dn = np.linalg.norm(delta)
    if dn < _DELTA_TOL:
        raise ZeroDeltaError("texture difference is numerically zero")
    u = projector @ token
    un = np.linalg.norm(u)
    if un < 1e-12:
        return 0.0
    return float(u @ delta / (un * dn))


def clip_loss_grad(delta: np.ndarray, token: np.ndarray,
                   projector: np.ndarray) -> tuple[float, np.ndarray]:
    """clip_loss and its exact gradient w.r.t. the token."""
    dn = np.linalg.norm(delta)
    if dn < _DELTA_TOL:
        raise ZeroDeltaError("texture difference is numerically zero")
    u = projector @ token
    un = np.linalg.norm(u)
    if un < 1e-12:
        return 0.0, np.zeros_like(token)
    cos = float(u @ delta / (un * dn))
    du = delta / (un * dn) - cos * u / (un * un)
    return cos, projector.T @ du


def diff_loss(token: np.ndarray, z_ref: np.ndarray, refs: ReferenceSet | None,
              t: int, denoiser: Denoiser, schedule: NoiseSchedule,
              noise: np.ndarray) -> float:
    """Mean squared error between the token-conditioned prediction and the
    noise injected into the clean reference latent at step t."""
    loss, _ = _diff_loss_impl(token, z_ref, refs, t, denoiser, schedule, noise,
                              want_grad=False)
    return loss


def diff_loss_grad(token: np.ndarray, z_ref: np.ndarray, refs: ReferenceSet | None,
                   t: int, denoiser: Denoiser, schedule: NoiseSchedule,
                   noise: np.ndarray) -> tuple[float, np.ndarray]:
    return _diff_loss_impl(token, z_ref, refs, t, denoiser, schedule, noise,
                           want_grad=True)


def _diff_loss_impl(token, z_ref, refs, t, denoiser, schedule, noise, want_grad):
    if not (1 <= t <= schedule.t_max):
        raise IndexError(f"step {t} outside schedule range [1, {schedule.t_max}]")
    a = schedule.alphas[t]
    z_t = np.sqrt(a) * z_ref + np.sqrt(1.0 - a) * noise
    tokens = np.atleast_2d(token)
    pred, cache = denoiser._forward(z_t, t, tokens, refs, with_cache=want_grad)
    resid = pred - noise
    loss = float(np.mean(resid ** 2))
    if not want_grad:
        return loss, None
    grads = denoiser.zero_grads()
    _, dtok = denoiser._backward(cache, 2.0 * resid / resid.size, grads)
    dtoken = np.zeros_like(token) if dtok is None else dtok.sum(axis=0)
    return loss, dtoken


def tune_token(unedited: np.ndarray, reference: np.ndarray, mask: np.ndarray,
               init_prompt: PromptTokens, denoiser: Denoiser,
               schedule: NoiseSchedule, config: TuneConfig, seed: int,
               refs: ReferenceSet | None = None,
               init_prompt_id: str = "") -> TokenEmbedding:
    """Learn the texture token for one (unedited render, reference image) pair.

    Joint plain gradient descent on c_clip * alignment + c_diff * denoising,
    starting from the init prompt's mean embedding. The denoising part is
    evaluated on a fixed set of (step, noise) probes drawn once from the seed,
    cycled per iteration; the returned token is the best one seen on the full
    probe set, so the combined loss never ends above its initial value.
    Deterministic for a given seed. Raises ZeroDeltaError for identical pairs.
    """
    delta = texture_delta(unedited, reference, mask)
    if np.linalg.norm(delta) < _DELTA_TOL:
        raise ZeroDeltaError("unedited render and reference are identical; no texture difference to learn")

    z_ref = masked_encode(reference, mask)
    projector = make_projector(init_prompt.tokens.shape[1])
    rng = np.random.default_rng(seed)
    t_hi = min(config.t_hi, schedule.t_max)
    t_lo = min(config.t_lo, t_hi)
    probes = [(int(rng.integers(t_lo, t_hi + 1)), rng.normal(size=z_ref.shape))
              for _ in range(config.num_probes)]

    def probe_loss(tok: np.ndarray) -> float:
        clip = clip_loss(delta, tok, projector)
        diff = np.mean([diff_loss(tok, z_ref, refs, t, denoiser, schedule, n)
                        for t, n in probes])
        return config.c_clip * clip + config.c_diff * float(diff)

    token = init_prompt.tokens.mean(axis=0).copy()
    best_token = token.copy()
    best_loss = probe_loss(token)

    for step in range(config.steps):
        _, g_clip = clip_loss_grad(delta, token, projector)
        t_probe, noise = probes[step % len(probes)]
        _, g_diff = diff_loss_grad(token, z_ref, refs, t_probe, denoiser,
                                   schedule, noise)
        grad = config.c_clip * g_clip + config.c_diff * g_diff
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"token gradient diverged at step {step}")
        token = token - config.learning_rate * grad
        if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
            loss = probe_loss(token)
            if loss < best_loss:
                best_loss = loss
                best_token = token.copy()

    return TokenEmbedding(
        vector=best_token,
        provenance={"init_prompt_id": init_prompt_id,
                    "tuning_config_hash": config.hash(),
                    "seed": int(seed)})


# ---------------------------------------------------------------------------
# Token files.

def save_token(path, token: TokenEmbedding) -> None:
    payload = json.dumps(token.provenance, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(TOKEN_MAGIC)
        f.write(struct.pack("<I", TOKEN_VERSION))
        f.write(struct.pack("<I", len(token.vector)))
        f.write(token.vector.astype("<f8").tobytes())
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


def load_token(path) -> TokenEmbedding:
    with open(path, "rb") as f:
        if f.read(len(TOKEN_MAGIC)) != TOKEN_MAGIC:
            raise ValueError(f"{path}: not a texsplat token file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != TOKEN_VERSION:
            raise ValueError(f"{path}: unsupported token version {version}")
        (dim,) = struct.unpack("<I", f.read(4))
        vector = np.frombuffer(f.read(8 * dim), dtype="<f8").copy()
        (n,) = struct.unpack("<I", f.read(4))
        provenance = json.loads(f.read(n).decode())
    return TokenEmbedding(vector=vector, provenance=provenance)


def nearest_vocabulary_tokens(token: TokenEmbedding,
                              vocab: dict[str, np.ndarray], top: int = 5):
    """Closest fixed-vocabulary tokens by cosine, for inspection."""
    v = token.vector / np.linalg.norm(token.vector)
    scored = [(name, float(v @ (vec / np.linalg.norm(vec)))) for name, vec in vocab.items()]
    scored.sort(key=lambda kv: -kv[1])
    return scored[:top]
