"""Trainable noise-prediction network over latent grids.

A 3-level convolutional encoder/decoder with one attention block per level.
Prompt tokens enter every attention block as extra keys/values. Reference
latents run through the same convolutional encoder and supply keys/values for
the fused cross-attention; fusion happens on post-softmax maps so each fused
map stays a convex combination.

Two evaluation modes share one set of weights: "theta" applies the fused
cross-attention when references are present, "theta-hat" never does. With no
references the two modes are the same code path, hence bit-identical output.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DivergenceError
from .nn import (POS_CHANNELS, Adam, attention_block, attention_block_bwd,
                 avgpool2, avgpool2_bwd, conv3x3, conv3x3_bwd, silu, silu_bwd,
                 timestep_embedding, upsample2, upsample2_bwd)
from .schedule import NoiseSchedule, build_schedule
from .textures import TOKEN_DIM, token_vocabulary

WEIGHT_MAGIC = b"TXSPWTS1"
WEIGHT_VERSION = 1


class PromptSource(Enum):
    FIXED_VOCABULARY = "fixed-vocabulary"
    LEARNED = "learned"


@dataclass(frozen=True)
class PromptTokens:
    """Sequence of prompt embedding vectors, shape (L, D)."""

    tokens: np.ndarray
    source: PromptSource = PromptSource.FIXED_VOCABULARY

    def __post_init__(self):
        t = np.atleast_2d(np.asarray(self.tokens, dtype=np.float64))
        object.__setattr__(self, "tokens", t)
        if len(t) < 1 or not np.all(np.isfinite(t)):
            raise ValueError("prompt needs at least one finite token vector")


def prompt_from_names(names: list[str] | str,
                      vocab: dict[str, np.ndarray] | None = None) -> PromptTokens:
    if isinstance(names, str):
        names = names.split()
    vocab = vocab or token_vocabulary()
    missing = [n for n in names if n not in vocab]
    if missing:
        raise ValueError(f"unknown vocabulary tokens: {missing}")
    if not (1 <= len(names) <= 4):
        raise ValueError("prompts are 1 to 4 tokens")
    return PromptTokens(tokens=np.stack([vocab[n] for n in names]))


@dataclass(frozen=True)
class RefEntry:
    latent: np.ndarray
    weight: float
    tag: str  # "reference" | "previous" | "flipped"


@dataclass(frozen=True)
class ReferenceSet:
    """Ordered reference latents with convex fusion weights and the self/cross balance."""

    entries: tuple[RefEntry, ...]
    lam: float

    def __post_init__(self):
        if len(self.entries) < 1:
            raise ValueError("reference set needs at least one entry")
        total = sum(e.weight for e in self.entries)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"reference weights must sum to 1, got {total}")
        if any(e.weight < 0 for e in self.entries):
            raise ValueError("reference weights must be nonnegative")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0,1]")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    channels: tuple[int, int, int] = (16, 32, 48)
    attn_dim: int = 16
    token_dim: int = TOKEN_DIM
    temb_dim: int = 16

    def to_json(self) -> str:
        return json.dumps({"latent_channels": self.latent_channels,
                           "channels": list(self.channels),
                           "attn_dim": self.attn_dim,
                           "token_dim": self.token_dim,
                           "temb_dim": self.temb_dim}, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "DenoiserConfig":
        d = json.loads(text)
        return DenoiserConfig(latent_channels=d["latent_channels"],
                              channels=tuple(d["channels"]),
                              attn_dim=d["attn_dim"],
                              token_dim=d["token_dim"],
                              temb_dim=d["temb_dim"])


def init_params(cfg: DenoiserConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    f1, f2, f3 = cfg.channels
    c_in = cfg.latent_channels + 1  # extra conditioning channel
    d, dt, te = cfg.attn_dim, cfg.token_dim, cfg.temb_dim

    def conv_w(cin, cout, gain=1.0):
        return rng.normal(size=(3, 3, cin, cout)) * (gain / np.sqrt(9.0 * cin))

    def mat(din, dout, gain=1.0):
        return rng.normal(size=(din, dout)) * (gain / np.sqrt(din))

    params: dict[str, np.ndarray] = {}
    params["enc1_w"] = conv_w(c_in, f1)
    params["enc1_b"] = np.zeros(f1)
    params["enc2_w"] = conv_w(f1, f2)
    params["enc2_b"] = np.zeros(f2)
    params["enc3_w"] = conv_w(f2, f3)
    params["enc3_b"] = np.zeros(f3)
    for lvl, f in ((1, f1), (2, f2), (3, f3)):
        params[f"t{lvl}_w"] = mat(te, f, gain=0.5)
        params[f"t{lvl}_b"] = np.zeros(f)
        # queries/keys also see fixed positional channels; shared query/key
        # init turns initial logits into a similarity kernel (content plus
        # position), so spatial correspondence to references can bootstrap.
        # The two matrices diverge freely during training.
        wq = mat(f + POS_CHANNELS, d, gain=2.0)
        params[f"a{lvl}_wq"] = wq
        params[f"a{lvl}_wk"] = wq.copy()
        params[f"a{lvl}_wv"] = mat(f, d)
        params[f"a{lvl}_wo"] = mat(d, f, gain=0.5)
        params[f"a{lvl}_wtk"] = mat(dt, d)
        params[f"a{lvl}_wtv"] = mat(dt, d)
    params["dec2_w"] = conv_w(f3 + f2, f2)
    params["dec2_b"] = np.zeros(f2)
    params["dec1_w"] = conv_w(f2 + f1, f1)
    params["dec1_b"] = np.zeros(f1)
    params["out_w"] = conv_w(f1, cfg.latent_channels, gain=0.1)
    params["out_b"] = np.zeros(cfg.latent_channels)
    return params


class PreparedRefs:
    """Reference encoder features, computed once and reused across steps."""

    def __init__(self, feats: list[dict[int, np.ndarray]], weights: list[float], lam: float):
        self.feats = feats
        self.weights = weights
        self.lam = lam


class Denoiser:
    def __init__(self, params: dict[str, np.ndarray], config: DenoiserConfig,
                 seed: int = 0):
        self.params = params
        self.config = config
        self.seed = seed

    # -- reference encoding ------------------------------------------------

    def _encode_ref(self, latent: np.ndarray, with_cache: bool = False):
        """Run one reference latent through the conv encoder (no timestep bias)."""
        p = self.params
        x0 = np.concatenate([latent, np.zeros(latent.shape[:2] + (1,))], axis=2)
        c1, cc1 = conv3x3(x0, p["enc1_w"], p["enc1_b"])
        x1, cs1 = silu(c1)
        p1, cp1 = avgpool2(x1)
        c2, cc2 = conv3x3(p1, p["enc2_w"], p["enc2_b"])
        x2, cs2 = silu(c2)
        p2, cp2 = avgpool2(x2)
        c3, cc3 = conv3x3(p2, p["enc3_w"], p["enc3_b"])
        x3, cs3 = silu(c3)
        feats = {1: x1, 2: x2, 3: x3}
        cache = (cc1, cs1, cp1, cc2, cs2, cp2, cc3, cs3) if with_cache else None
        return feats, cache

    def _encode_ref_bwd(self, cache, dfeats: dict[int, np.ndarray], grads: dict):
        cc1, cs1, cp1, cc2, cs2, cp2, cc3, cs3 = cache
        dc3 = silu_bwd(cs3, dfeats[3])
        dp2, dw, db = conv3x3_bwd(cc3, dc3)
        grads["enc3_w"] += dw
        grads["enc3_b"] += db
        dx2 = dfeats[2] + avgpool2_bwd(cp2, dp2)
        dc2 = silu_bwd(cs2, dx2)
        dp1, dw, db = conv3x3_bwd(cc2, dc2)
        grads["enc2_w"] += dw
        grads["enc2_b"] += db
        dx1 = dfeats[1] + avgpool2_bwd(cp1, dp1)
        dc1 = silu_bwd(cs1, dx1)
        _, dw, db = conv3x3_bwd(cc1, dc1)
        grads["enc1_w"] += dw
        grads["enc1_b"] += db

    def prepare_refs(self, refs: ReferenceSet) -> PreparedRefs:
        feats = [self._encode_ref(e.latent)[0] for e in refs.entries]
        return PreparedRefs(feats, [e.weight for e in refs.entries], refs.lam)

    # -- main forward/backward ---------------------------------------------

    def _forward(self, z: np.ndarray, t: int, tokens: np.ndarray | None,
                 refs, cond: np.ndarray | None = None, with_cache: bool = False,
                 step_cache: dict | None = None):
        """refs: None, ReferenceSet (encoded here), or PreparedRefs.

        step_cache memoizes level-1 spatial attention across multiple
        evaluations at identical (z, t, cond, refs); inference only.
        """
        if step_cache is not None and with_cache:
            raise ValueError("step_cache is inference-only; incompatible with backward caches")
        p = self.params
        cfg = self.config
        h, w = z.shape[:2]
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ValueError(f"latent sides must be multiples of 4 and >= 4, got {z.shape}")
        if z.shape[2] != cfg.latent_channels:
            raise ValueError(f"expected {cfg.latent_channels} latent channels, got {z.shape[2]}")
        if tokens is not None and tokens.shape[1] != cfg.token_dim:
            raise ValueError(f"token dim {tokens.shape[1]} != {cfg.token_dim}")

        ref_caches = None
        if isinstance(refs, ReferenceSet):
            encoded = [self._encode_ref(e.latent, with_cache=with_cache) for e in refs.entries]
            ref_feats = [f for f, _ in encoded]
            ref_caches = [c for _, c in encoded] if with_cache else None
            ref_weights = [e.weight for e in refs.entries]
            lam = refs.lam
        elif isinstance(refs, PreparedRefs):
            ref_feats, ref_weights, lam = refs.feats, refs.weights, refs.lam
        else:
            ref_feats, ref_weights, lam = None, None, 1.0

        temb = timestep_embedding(t, cfg.temb_dim)
        cond_ch = np.zeros((h, w, 1)) if cond is None else cond[..., None]
        x0 = np.concatenate([z, cond_ch], axis=2)

        acts = {}
        c1, cc1 = conv3x3(x0, p["enc1_w"], p["enc1_b"])
        c1 = c1 + (temb @ p["t1_w"] + p["t1_b"])
        x1, cs1 = silu(c1)
        a1, ca1 = attention_block(x1, p, "a1_", tokens,
                                  [f[1] for f in ref_feats] if ref_feats else None,
                                  lam, ref_weights, step_cache=step_cache)
        p1, cp1 = avgpool2(a1)
        c2, cc2 = conv3x3(p1, p["enc2_w"], p["enc2_b"])
        c2 = c2 + (temb @ p["t2_w"] + p["t2_b"])
        x2, cs2 = silu(c2)
        a2, ca2 = attention_block(x2, p, "a2_", tokens,
                                  [f[2] for f in ref_feats] if ref_feats else None,
                                  lam, ref_weights)
        p2, cp2 = avgpool2(a2)
        c3, cc3 = conv3x3(p2, p["enc3_w"], p["enc3_b"])
        c3 = c3 + (temb @ p["t3_w"] + p["t3_b"])
        x3, cs3 = silu(c3)
        a3, ca3 = attention_block(x3, p, "a3_", tokens,
                                  [f[3] for f in ref_feats] if ref_feats else None,
                                  lam, ref_weights)

        u2, cu2 = upsample2(a3)
        cat2 = np.concatenate([u2, a2], axis=2)
        cd2, ccd2 = conv3x3(cat2, p["dec2_w"], p["dec2_b"])
        d2, csd2 = silu(cd2)
        u1, cu1 = upsample2(d2)
        cat1 = np.concatenate([u1, a1], axis=2)
        cd1, ccd1 = conv3x3(cat1, p["dec1_w"], p["dec1_b"])
        d1, csd1 = silu(cd1)
        out, cout = conv3x3(d1, p["out_w"], p["out_b"])

        if not with_cache:
            return out, None
        cache = {"temb": temb,
                 "cc": (cc1, cc2, cc3), "cs": (cs1, cs2, cs3),
                 "ca": (ca1, ca2, ca3), "cp": (cp1, cp2),
                 "cu": (cu1, cu2), "ccd": (ccd1, ccd2), "csd": (csd1, csd2),
                 "cout": cout, "ref_caches": ref_caches,
                 "n_refs": len(ref_feats) if ref_feats else 0}
        return out, cache

    def _backward(self, cache, dout: np.ndarray, grads: dict,
                  want_input_grad: bool = False):
        """Accumulate parameter grads; return (dz, dtokens)."""
        p = self.params
        temb = cache["temb"]
        cc1, cc2, cc3 = cache["cc"]
        cs1, cs2, cs3 = cache["cs"]
        ca1, ca2, ca3 = cache["ca"]
        cp1, cp2 = cache["cp"]
        cu1, cu2 = cache["cu"]
        ccd1, ccd2 = cache["ccd"]
        csd1, csd2 = cache["csd"]

        dd1, dw, db = conv3x3_bwd(cache["cout"], dout)
        grads["out_w"] += dw
        grads["out_b"] += db
        dcd1 = silu_bwd(csd1, dd1)
        dcat1, dw, db = conv3x3_bwd(ccd1, dcd1)
        grads["dec1_w"] += dw
        grads["dec1_b"] += db
        f2 = self.config.channels[1]
        f3 = self.config.channels[2]
        du1 = dcat1[..., :f2]
        da1_dec = dcat1[..., f2:]
        dd2 = upsample2_bwd(cu1, du1)
        dcd2 = silu_bwd(csd2, dd2)
        dcat2, dw, db = conv3x3_bwd(ccd2, dcd2)
        grads["dec2_w"] += dw
        grads["dec2_b"] += db
        du2 = dcat2[..., :f3]
        da2_dec = dcat2[..., f3:]
        da3 = upsample2_bwd(cu2, du2)

        dtokens_total = None
        dref_levels: list[dict[int, np.ndarray]] | None = None
        if cache["n_refs"]:
            dref_levels = [{} for _ in range(cache["n_refs"])]

        def take_attn(ca, dy, level):
            nonlocal dtokens_total
            dx, dtok, drefs = attention_block_bwd(ca, p, dy, grads)
            if dtok is not None:
                dtokens_total = dtok if dtokens_total is None else dtokens_total + dtok
            if drefs is not None:
                for i, g in enumerate(drefs):
                    dref_levels[i][level] = g
            return dx

        dx3 = take_attn(ca3, da3, 3)
        dc3 = silu_bwd(cs3, dx3)
        grads["t3_w"] += np.outer(temb, dc3.sum(axis=(0, 1)))
        grads["t3_b"] += dc3.sum(axis=(0, 1))
        dp2, dw, db = conv3x3_bwd(cc3, dc3)
        grads["enc3_w"] += dw
        grads["enc3_b"] += db

        da2 = da2_dec + avgpool2_bwd(cp2, dp2)
        dx2 = take_attn(ca2, da2, 2)
        dc2 = silu_bwd(cs2, dx2)
        grads["t2_w"] += np.outer(temb, dc2.sum(axis=(0, 1)))
        grads["t2_b"] += dc2.sum(axis=(0, 1))
        dp1, dw, db = conv3x3_bwd(cc2, dc2)
        grads["enc2_w"] += dw
        grads["enc2_b"] += db

        da1 = da1_dec + avgpool2_bwd(cp1, dp1)
        dx1 = take_attn(ca1, da1, 1)
        dc1 = silu_bwd(cs1, dx1)
        grads["t1_w"] += np.outer(temb, dc1.sum(axis=(0, 1)))
        grads["t1_b"] += dc1.sum(axis=(0, 1))
        dx0, dw, db = conv3x3_bwd(cc1, dc1)
        grads["enc1_w"] += dw
        grads["enc1_b"] += db

        if dref_levels is not None and cache["ref_caches"] is not None:
            for ref_cache, dfeats in zip(cache["ref_caches"], dref_levels):
                self._encode_ref_bwd(ref_cache, dfeats, grads)

        dz = dx0[..., :self.config.latent_channels] if want_input_grad else None
        return dz, dtokens_total

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- public API ---------------------------------------------------------

    def predict_noise(self, z: np.ndarray, t: int,
                      prompt: PromptTokens | None = None,
                      refs: ReferenceSet | PreparedRefs | None = None,
                      mode: str = "theta",
                      cond: np.ndarray | None = None,
                      step_cache: dict | None = None) -> np.ndarray:
        """Deterministic noise prediction of z's shape.

        mode "theta" applies fused cross-attention when refs are given; mode
        "theta-hat" ignores refs entirely. prompt None means unconditional.
        step_cache may be shared between calls at identical (z, t, cond, refs)
        to reuse spatial attention; it never changes the result.
        """
        if mode not in ("theta", "theta-hat"):
            raise ValueError(f"unknown mode {mode!r}")
        if not np.all(np.isfinite(z)):
            raise ValueError("latent contains non-finite entries")
        use_refs = refs if (mode == "theta" and refs is not None) else None
        tokens = prompt.tokens if prompt is not None else None
        out, _ = self._forward(z, t, tokens, use_refs, cond=cond,
                               step_cache=step_cache)
        return out


# ---------------------------------------------------------------------------
# Training.

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1500
    batch_size: int = 4
    learning_rate: float = 2e-3
    t_max: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    prompt_drop: float = 0.15   # fraction of unconditional examples
    ref_prob: float = 0.5       # fraction trained with fused reference attention
    ref_lam: float = 0.6
    ref_shift_prob: float = 1.0  # of ref steps: refs are shifted copies of the
                                 # clean latent, standing in for adjacent views


def train_denoiser(corpus: list, config: TrainConfig, seed: int,
                   denoiser_config: DenoiserConfig | None = None,
                   callback=None) -> tuple[Denoiser, list[float]]:
    """Standard denoising objective on (latent, token-matrix[, class]) items.

    Injects Gaussian noise at a random step via the schedule marginal and
    regresses it with MSE. A configurable fraction of examples is evaluated
    with fused cross-attention over clean same-class latents standing in for
    neighboring views: that teaches the network to read reference content as
    signal evidence, which is what gives the reference-conditioned minus
    unconditioned difference its meaning at edit time. Deterministic given the
    seed; the returned loss history starts with the pre-update loss.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    cfg = denoiser_config or DenoiserConfig()
    model = Denoiser(init_params(cfg, seed), cfg, seed=seed)
    schedule = build_schedule(config.t_max, config.beta_start, config.beta_end)
    rng = np.random.default_rng(seed + 1)
    opt = Adam(model.params, lr=config.learning_rate)
    losses: list[float] = []

    classes = [item[2] if len(item) > 2 else None for item in corpus]
    by_class: dict = {}
    for j, c in enumerate(classes):
        by_class.setdefault(c, []).append(j)

    def make_refs(i: int):
        if rng.random() < config.ref_shift_prob:
            # adjacent-view stand-in: the clean latent itself, slightly shifted
            count = int(rng.integers(1, 3))
            entries = []
            for _ in range(count):
                dy, dx = rng.integers(-3, 4, size=2)
                entries.append(np.roll(corpus[i][0], (int(dy), int(dx)), axis=(0, 1)))
        else:
            pool = [j for j in by_class[classes[i]] if j != i]
            if not pool:
                return None
            count = min(int(rng.integers(1, 3)), len(pool))
            picks = rng.choice(len(pool), size=count, replace=False)
            entries = [corpus[pool[k]][0] for k in picks]
        w = 1.0 / len(entries)
        return ReferenceSet(
            entries=tuple(RefEntry(latent=e, weight=w, tag="previous")
                          for e in entries),
            lam=config.ref_lam)

    def batch_loss(update: bool) -> float:
        idx = rng.integers(0, len(corpus), size=config.batch_size)
        ts = rng.integers(1, config.t_max + 1, size=config.batch_size)
        drop = rng.random(config.batch_size) < config.prompt_drop
        with_refs = rng.random(config.batch_size) < config.ref_prob
        grads = model.zero_grads() if update else None
        total = 0.0
        for j, (i, t) in enumerate(zip(idx, ts)):
            z0, tokens = corpus[i][0], corpus[i][1]
            eps = rng.normal(size=z0.shape)
            a = schedule.alphas[t]
            z_t = np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps
            use_tokens = None if drop[j] else tokens
            refs = make_refs(int(i)) if with_refs[j] else None
            pred, cache = model._forward(z_t, int(t), use_tokens, refs,
                                         with_cache=update)
            resid = pred - eps
            total += float(np.mean(resid ** 2))
            if update:
                model._backward(cache, 2.0 * resid / (resid.size * config.batch_size), grads)
        if update:
            opt.step(model.params, grads)
        return total / config.batch_size

    losses.append(batch_loss(update=False))
    for step in range(config.steps):
        loss = batch_loss(update=True)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss diverged at step {step}")
        losses.append(loss)
        if callback is not None:
            callback(step, loss)
    return model, losses


# ---------------------------------------------------------------------------
# Weight files: versioned binary blob with a tensor table.

def _write_block(f, data: bytes) -> None:
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_block(f) -> bytes:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n)


def config_hash(cfg: DenoiserConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()


def save_weights(path, model: Denoiser) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<I", WEIGHT_VERSION))
        f.write(struct.pack("<q", model.seed))
        _write_block(f, model.config.to_json().encode())
        _write_block(f, config_hash(model.config).encode())
        f.write(struct.pack("<I", len(model.params)))
        for name in sorted(model.params):
            arr = model.params[name]
            _write_block(f, name.encode())
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_weights(path) -> Denoiser:
    with open(path, "rb") as f:
        magic = f.read(len(WEIGHT_MAGIC))
        if magic != WEIGHT_MAGIC:
            raise ValueError(f"{path}: not a texsplat weight file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != WEIGHT_VERSION:
            raise ValueError(f"{path}: unsupported weight version {version}")
        (seed,) = struct.unpack("<q", f.read(8))
        cfg = DenoiserConfig.from_json(_read_block(f).decode())
        stored_hash = _read_block(f).decode()
        if stored_hash != config_hash(cfg):
            raise ValueError(f"{path}: config hash mismatch")
        (count,) = struct.unpack("<I", f.read(4))
        params = {}
        for _ in range(count):
            name = _read_block(f).decode()
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            size = int(np.prod(shape))
            params[name] = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape).copy()
    return Denoiser(params, cfg, seed=seed)
