"""Minimal numpy layers with explicit forward/backward passes.

Everything runs in float64 on (H,W,C) grids. Each forward returns
(output, cache); the matching backward consumes the cache and the output
gradient. This is enough autodiff for a small convolutional denoiser without
pulling in a framework, and it keeps every run bit-reproducible.
"""

from __future__ import annotations

import numpy as np


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded 3x3 convolution. x (H,W,Cin), w (3,3,Cin,Cout), b (Cout,)."""
    h, wd = x.shape[:2]
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    y = np.tile(b, (h, wd, 1))
    for di in range(3):
        for dj in range(3):
            y += xp[di:di + h, dj:dj + wd] @ w[di, dj]
    return y, (xp, w, x.shape)


def conv3x3_bwd(cache, dy: np.ndarray):
    xp, w, xshape = cache
    h, wd = xshape[:2]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    dyf = dy.reshape(h * wd, -1)
    for di in range(3):
        for dj in range(3):
            dxp[di:di + h, dj:dj + wd] += dy @ w[di, dj].T
            patch = xp[di:di + h, dj:dj + wd].reshape(h * wd, -1)
            dw[di, dj] = patch.T @ dyf
    db = dy.sum(axis=(0, 1))
    return dxp[1:-1, 1:-1], dw, db


def silu(x: np.ndarray):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_bwd(cache, dy: np.ndarray):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def avgpool2(x: np.ndarray):
    h, w, c = x.shape
    y = x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
    return y, x.shape


def avgpool2_bwd(xshape, dy: np.ndarray):
    return np.repeat(np.repeat(dy, 2, axis=0), 2, axis=1) / 4.0


def upsample2(x: np.ndarray):
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1), x.shape


def upsample2_bwd(xshape, dy: np.ndarray):
    h, w, c = xshape
    return dy.reshape(h, 2, w, 2, c).sum(axis=(1, 3))


def softmax_rows(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_bwd(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    return a * (da - np.sum(da * a, axis=-1, keepdims=True))


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of an integer diffusion step."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def weighted_attention(self_scores: np.ndarray, cross_scores: list[np.ndarray],
                       lam: float, weights: list[float]) -> np.ndarray:
    """Convex fusion of a self-attention map with per-reference cross maps.

    Returns lam * self + (1 - lam) * sum_i w_i * cross_i, elementwise. The
    weights must sum to one and there must be one cross map per weight, all
    shaped like the self map.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(cross_scores) != len(weights):
        raise ValueError("need one cross map per weight")
    if abs(float(weights.sum()) - 1.0) > 1e-9:
        raise ValueError(f"reference weights must sum to 1, got {weights.sum()}")
    for m in cross_scores:
        if m.shape != self_scores.shape:
            raise ValueError(f"attention map shape mismatch: {m.shape} vs {self_scores.shape}")
    fused = lam * self_scores
    acc = np.zeros_like(self_scores)
    for wi, m in zip(weights, cross_scores):
        acc += wi * m
    return fused + (1.0 - lam) * acc


POS_CHANNELS = 4
LOCALITY_SIGMA = 0.12  # fraction of image size; fixed spatial attention prior

_BIAS_CACHE: dict[tuple[int, int], np.ndarray] = {}


def position_grid(h: int, w: int, scale: float = 2.0) -> np.ndarray:
    """Fixed sinusoidal 2D position channels on normalized coordinates."""
    ys = (np.arange(h) + 0.5) / h * 2.0 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2.0 * np.pi
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return scale * np.stack([np.sin(xx), np.cos(xx), np.sin(yy), np.cos(yy)],
                            axis=2)


def locality_bias(h: int, w: int, sigma: float = LOCALITY_SIGMA) -> np.ndarray:
    """Fixed Gaussian locality prior on spatial attention logits.

    Queries favor keys at nearby normalized image coordinates. This is what
    makes content transfer from a reference position-faithful: a geometrically
    aligned reference supplies matching local content, a misaligned one
    supplies whatever sits at the same screen position.
    """
    key = (h, w)
    cached = _BIAS_CACHE.get(key)
    if cached is not None:
        return cached
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1)
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    bias = -d2 / (2.0 * sigma * sigma)
    _BIAS_CACHE[key] = bias
    return bias


def attention_block(x: np.ndarray, p: dict, prefix: str,
                    tokens: np.ndarray | None,
                    ref_feats: list[np.ndarray] | None,
                    lam: float, ref_weights: list[float] | None,
                    step_cache: dict | None = None,
                    pos: np.ndarray | None = None):
    """Residual attention over flattened spatial positions.

    Queries and spatial keys see the features concatenated with fixed
    positional channels, so attention into a reference favors matching
    positions: that is what makes geometrically aligned references transfer
    better than misaligned ones. Self-attention keys/values come from x;
    with references present the post-softmax maps and the values are fused
    with weighted_attention using the same convex weights. Prompt tokens,
    when given, contribute additively through their own key/value projections
    (no position, they are global).

    step_cache, when supplied, memoizes the spatial (self/fused) part, which
    depends only on x and the reference features. The caller must guarantee
    those are identical across cached calls; prompt attention is never cached.
    """
    h, w, f = x.shape
    n = h * w
    xf = x.reshape(n, f)
    wq, wk, wv, wo = p[prefix + "wq"], p[prefix + "wk"], p[prefix + "wv"], p[prefix + "wo"]
    d = wq.shape[1]
    scale = 1.0 / np.sqrt(d)
    if pos is None:
        pos = position_grid(h, w)
    posf = pos.reshape(n, -1)
    bias = locality_bias(h, w)

    ck = (prefix, ref_feats is not None)
    if step_cache is not None and ck in step_cache:
        q, spatial, spat_cache = step_cache[ck]
    else:
        xq = np.concatenate([xf, posf], axis=1)
        q = xq @ wq
        k_self = xq @ wk
        v_self = xf @ wv
        a_self = softmax_rows(q @ k_self.T * scale + bias)
        spat_cache = {"k_self": k_self, "v_self": v_self, "a_self": a_self,
                      "ref": None, "posf": posf}
        if ref_feats:
            ks, vs, amaps = [], [], []
            for feat in ref_feats:
                rf = feat.reshape(n, f)
                rq = np.concatenate([rf, posf], axis=1)
                ki = rq @ wk
                vi = rf @ wv
                ks.append(ki)
                vs.append(vi)
                amaps.append(softmax_rows(q @ ki.T * scale + bias))
            fused = weighted_attention(a_self, amaps, lam, ref_weights)
            v_blend = lam * v_self
            for wi, vi in zip(ref_weights, vs):
                v_blend = v_blend + (1.0 - lam) * wi * vi
            spatial = fused @ v_blend
            spat_cache["ref"] = {"feats": ref_feats, "ks": ks, "vs": vs, "amaps": amaps,
                                 "fused": fused, "v_blend": v_blend, "weights": ref_weights}
        else:
            spatial = a_self @ v_self
        if step_cache is not None:
            step_cache[ck] = (q, spatial, spat_cache)

    cache = {"xf": xf, "q": q, "shape": (h, w, f), "scale": scale,
             "prefix": prefix, "lam": lam, "tokens": tokens, "prm": None}
    cache.update(spat_cache)

    ctx = spatial
    if tokens is not None:
        wtk, wtv = p[prefix + "wtk"], p[prefix + "wtv"]
        kp = tokens @ wtk
        vp = tokens @ wtv
        a_p = softmax_rows(q @ kp.T * scale)
        prm = a_p @ vp
        ctx = ctx + prm
        cache["prm"] = {"kp": kp, "vp": vp, "a_p": a_p}

    cache["ctx"] = ctx
    y = x + (ctx @ wo).reshape(h, w, f)
    return y, cache


def attention_block_bwd(cache, p: dict, dy: np.ndarray, grads: dict):
    """Backward for attention_block.

    Returns (dx, dtokens, dref_feats). Parameter gradients accumulate into
    ``grads`` keyed like the params.
    """
    h, w, f = cache["shape"]
    n = h * w
    prefix = cache["prefix"]
    scale = cache["scale"]
    lam = cache["lam"]
    wq, wk, wv, wo = p[prefix + "wq"], p[prefix + "wk"], p[prefix + "wv"], p[prefix + "wo"]
    xf, q = cache["xf"], cache["q"]
    posf = cache["posf"]
    xq = np.concatenate([xf, posf], axis=1)

    dyf = dy.reshape(n, f)
    grads[prefix + "wo"] += cache["ctx"].T @ dyf
    dctx = dyf @ wo.T
    dq = np.zeros_like(q)
    dtokens = None

    if cache["prm"] is not None:
        prm = cache["prm"]
        da_p = dctx @ prm["vp"].T
        dvp = prm["a_p"].T @ dctx
        dsp = softmax_rows_bwd(prm["a_p"], da_p)
        dq += dsp @ prm["kp"] * scale
        dkp = dsp.T @ q * scale
        tokens = cache["tokens"]
        wtk, wtv = p[prefix + "wtk"], p[prefix + "wtv"]
        grads[prefix + "wtk"] += tokens.T @ dkp
        grads[prefix + "wtv"] += tokens.T @ dvp
        dtokens = dkp @ wtk.T + dvp @ wtv.T

    dref_feats = None
    if cache["ref"] is not None:
        ref = cache["ref"]
        dfused = dctx @ ref["v_blend"].T
        dv_blend = ref["fused"].T @ dctx
        da_self = lam * dfused
        dv_self = lam * dv_blend
        dref_feats = []
        for wi, ki, vi, ai, feat in zip(ref["weights"], ref["ks"], ref["vs"],
                                        ref["amaps"], ref["feats"]):
            dai = (1.0 - lam) * wi * dfused
            dvi = (1.0 - lam) * wi * dv_blend
            dsi = softmax_rows_bwd(ai, dai)
            dq += dsi @ ki * scale
            dki = dsi.T @ q * scale
            rf = feat.reshape(n, f)
            rq = np.concatenate([rf, posf], axis=1)
            grads[prefix + "wk"] += rq.T @ dki
            grads[prefix + "wv"] += rf.T @ dvi
            dref_feats.append(((dki @ wk.T)[:, :f] + dvi @ wv.T).reshape(h, w, f))
    else:
        da_self = dctx @ cache["v_self"].T
        dv_self = cache["a_self"].T @ dctx

    ds_self = softmax_rows_bwd(cache["a_self"], da_self)
    dq += ds_self @ cache["k_self"] * scale
    dk_self = ds_self.T @ q * scale

    grads[prefix + "wq"] += xq.T @ dq
    grads[prefix + "wk"] += xq.T @ dk_self
    grads[prefix + "wv"] += xf.T @ dv_self
    dxf = (dq @ wq.T)[:, :f] + (dk_self @ wk.T)[:, :f] + dv_self @ wv.T
    dx = dxf.reshape(h, w, f) + dy
    return dx, dtokens, dref_feats


class Adam:
    """Plain deterministic Adam over a name->array parameter dict."""

    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1 ** self.step_count
        b2c = 1.0 - self.beta2 ** self.step_count
        for name in sorted(params):
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mh = self.m[name] / b1c
            vh = self.v[name] / b2c
            params[name] -= self.lr * mh / (np.sqrt(vh) + self.eps)
