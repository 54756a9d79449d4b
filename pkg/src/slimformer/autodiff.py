"""Hand-written reverse-mode gradients for the encoder classifier.

Differentiates the unfused f32 reference graph (or its f64 twin, used for
finite-difference verification) with respect to every parameter, every
head-mask entry and every FFN-unit mask entry.  Head masks scale each head's
context before the output projection; FFN-unit masks scale the intermediate
vector after the activation, so masking a unit is exactly pruning it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from slimformer.encoder import Model, ModelConfig, layer_prefix, param_shapes
from slimformer.tensor import gelu, gelu_grad, log_softmax_rows, softmax_rows

LOSS_KINDS = ("cross_entropy", "kd_soft_ce")


@dataclass
class GradientBundle:
    params: dict[str, np.ndarray]
    head_mask: list[np.ndarray]
    ffn_mask: list[np.ndarray]


def _ln_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def _ln_backward(dy, gamma, cache):
    xhat, rstd = cache
    dxhat = dy * gamma
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


def loss_and_grad_logits(
    logits: np.ndarray,
    loss_kind: str,
    labels: Optional[Sequence[int]] = None,
    teacher_logits: Optional[np.ndarray] = None,
    temperature: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    if loss_kind == "cross_entropy":
        if labels is None:
            raise ValueError("cross_entropy needs labels")
        labels = np.asarray(labels)
        logp = log_softmax_rows(logits)
        loss = -float(logp[np.arange(n), labels].mean())
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return loss, grad / n
    if loss_kind == "kd_soft_ce":
        if teacher_logits is None:
            raise ValueError("kd_soft_ce needs teacher_logits")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        teacher_logits = np.asarray(teacher_logits, dtype=logits.dtype)
        if teacher_logits.shape != logits.shape:
            raise ValueError(f"teacher logits {teacher_logits.shape} vs student {logits.shape}")
        pt = softmax_rows(teacher_logits / temperature)
        logps = log_softmax_rows(logits / temperature)
        loss = -float((pt * logps).sum(axis=1).mean())
        return loss, (np.exp(logps) - pt) / (temperature * n)
    raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")


def forward_backward(
    config: ModelConfig,
    params: Mapping[str, np.ndarray],
    ids: np.ndarray,
    mask: np.ndarray,
    loss_kind: str = "cross_entropy",
    labels: Optional[Sequence[int]] = None,
    teacher_logits: Optional[np.ndarray] = None,
    temperature: float = 1.0,
    head_mask: Optional[Sequence[np.ndarray]] = None,
    ffn_mask: Optional[Sequence[np.ndarray]] = None,
    need_grad: bool = True,
) -> tuple[float, Optional[GradientBundle], np.ndarray]:
    """Loss, gradients and logits over dense ``params`` (all the same float dtype)."""
    dtype = params["embeddings.word"].dtype
    L, H, A, d = config.num_layers, config.hidden, config.num_heads, config.head_dim
    eps = config.ln_eps
    b, s = ids.shape
    n = b * s
    scale = dtype.type(1.0 / math.sqrt(d))
    hms = [np.ones(A, dtype) if head_mask is None else np.asarray(head_mask[l], dtype) for l in range(L)]
    fms = [np.ones(config.ffn_size, dtype) if ffn_mask is None else np.asarray(ffn_mask[l], dtype) for l in range(L)]
    act_fn = gelu if config.activation == "gelu" else (lambda z: np.maximum(z, 0))

    P = params
    x0 = (P["embeddings.word"][ids] + P["embeddings.position"][:s]).reshape(n, H)
    h, ln_e = _ln_forward(x0, P["embeddings.ln.gamma"], P["embeddings.ln.beta"], eps)
    mask_add = ((1 - np.asarray(mask, dtype)) * dtype.type(-1e4))[:, None, None, :]

    caches = []
    for l in range(L):
        p = layer_prefix(l)
        q = h @ P[f"{p}.attn.q.weight"] + P[f"{p}.attn.q.bias"]
        k = h @ P[f"{p}.attn.k.weight"] + P[f"{p}.attn.k.bias"]
        v = h @ P[f"{p}.attn.v.weight"] + P[f"{p}.attn.v.bias"]
        qh = q.reshape(b, s, A, d).transpose(0, 2, 1, 3)
        kh = k.reshape(b, s, A, d).transpose(0, 2, 1, 3)
        vh = v.reshape(b, s, A, d).transpose(0, 2, 1, 3)
        probs = softmax_rows(np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale + mask_add)
        ctx = np.matmul(probs, vh)
        cm = (ctx * hms[l][None, :, None, None]).transpose(0, 2, 1, 3).reshape(n, A * d)
        attn = cm @ P[f"{p}.attn.o.weight"] + P[f"{p}.attn.o.bias"]
        h1, ln_a = _ln_forward(h + attn, P[f"{p}.attn.ln.gamma"], P[f"{p}.attn.ln.beta"], eps)
        z = h1 @ P[f"{p}.ffn.in.weight"] + P[f"{p}.ffn.in.bias"]
        act = act_fn(z)
        am = act * fms[l]
        f = am @ P[f"{p}.ffn.out.weight"] + P[f"{p}.ffn.out.bias"]
        h2, ln_f = _ln_forward(h1 + f, P[f"{p}.ffn.ln.gamma"], P[f"{p}.ffn.ln.beta"], eps)
        caches.append((h, qh, kh, vh, probs, ctx, cm, ln_a, h1, z, act, am, ln_f))
        h = h2

    first = h.reshape(b, s, H)[:, 0, :]
    pooled = np.tanh(first @ P["pooler.weight"] + P["pooler.bias"])
    logits = pooled @ P["classifier.weight"] + P["classifier.bias"]
    loss, dlogits = loss_and_grad_logits(logits, loss_kind, labels, teacher_logits, temperature)
    if not need_grad:
        return loss, None, logits

    G = {name: np.zeros_like(value) for name, value in P.items()}
    G["classifier.weight"] = pooled.T @ dlogits
    G["classifier.bias"] = dlogits.sum(axis=0)
    dpre = (dlogits @ P["classifier.weight"].T) * (1 - pooled * pooled)
    G["pooler.weight"] = first.T @ dpre
    G["pooler.bias"] = dpre.sum(axis=0)
    dh = np.zeros((b, s, H), dtype)
    dh[:, 0, :] = dpre @ P["pooler.weight"].T
    dh = dh.reshape(n, H)

    dhm = [None] * L
    dfm = [None] * L
    for l in reversed(range(L)):
        p = layer_prefix(l)
        h_in, qh, kh, vh, probs, ctx, cm, ln_a, h1, z, act, am, ln_f = caches[l]

        dr2, G[f"{p}.ffn.ln.gamma"], G[f"{p}.ffn.ln.beta"] = _ln_backward(dh, P[f"{p}.ffn.ln.gamma"], ln_f)
        G[f"{p}.ffn.out.weight"] = am.T @ dr2
        G[f"{p}.ffn.out.bias"] = dr2.sum(axis=0)
        dam = dr2 @ P[f"{p}.ffn.out.weight"].T
        dfm[l] = (dam * act).sum(axis=0)
        dact = dam * fms[l]
        dz = dact * (gelu_grad(z) if config.activation == "gelu" else (z > 0))
        G[f"{p}.ffn.in.weight"] = h1.T @ dz
        G[f"{p}.ffn.in.bias"] = dz.sum(axis=0)
        dh1 = dr2 + dz @ P[f"{p}.ffn.in.weight"].T

        dr1, G[f"{p}.attn.ln.gamma"], G[f"{p}.attn.ln.beta"] = _ln_backward(dh1, P[f"{p}.attn.ln.gamma"], ln_a)
        G[f"{p}.attn.o.weight"] = cm.T @ dr1
        G[f"{p}.attn.o.bias"] = dr1.sum(axis=0)
        dctxm = (dr1 @ P[f"{p}.attn.o.weight"].T).reshape(b, s, A, d).transpose(0, 2, 1, 3)
        dhm[l] = (dctxm * ctx).sum(axis=(0, 2, 3))
        dctx = dctxm * hms[l][None, :, None, None]
        dprobs = np.matmul(dctx, vh.transpose(0, 1, 3, 2))
        dvh = np.matmul(probs.transpose(0, 1, 3, 2), dctx)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dqh = np.matmul(dscores, kh)
        dkh = np.matmul(dscores.transpose(0, 1, 3, 2), qh)

        dh_in = dr1
        for name, dgrad in (("q", dqh), ("k", dkh), ("v", dvh)):
            dflat = dgrad.transpose(0, 2, 1, 3).reshape(n, A * d)
            G[f"{p}.attn.{name}.weight"] = h_in.T @ dflat
            G[f"{p}.attn.{name}.bias"] = dflat.sum(axis=0)
            dh_in = dh_in + dflat @ P[f"{p}.attn.{name}.weight"].T
        dh = dh_in

    dx0, G["embeddings.ln.gamma"], G["embeddings.ln.beta"] = _ln_backward(dh, P["embeddings.ln.gamma"], ln_e)
    np.add.at(G["embeddings.word"], ids.ravel(), dx0)
    G["embeddings.position"][:s] = dx0.reshape(b, s, H).sum(axis=0)
    return loss, GradientBundle(G, dhm, dfm), logits


def backward(
    model: Model,
    batch,
    labels: Optional[Sequence[int]] = None,
    loss_kind: str = "cross_entropy",
    teacher_logits: Optional[np.ndarray] = None,
    temperature: float = 1.0,
    verify: bool = False,
    head_mask: Optional[Sequence[np.ndarray]] = None,
    ffn_mask: Optional[Sequence[np.ndarray]] = None,
) -> tuple[float, GradientBundle]:
    """Mean loss over ``batch`` and exact gradients (f64 when ``verify``)."""
    if loss_kind == "kd_soft_ce" and teacher_logits is None:
        raise ValueError("kd_soft_ce needs teacher_logits")
    if loss_kind == "cross_entropy" and labels is None:
        raise ValueError("cross_entropy needs labels")
    dtype = np.float64 if verify else np.float32
    params = model.dense_params(dtype)
    loss, grads, _ = forward_backward(
        model.config, params, np.asarray(batch.ids), np.asarray(batch.mask), loss_kind,
        labels, teacher_logits, temperature, head_mask, ffn_mask,
    )
    return loss, grads


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    samples: int
    vacuous: bool
    coords: list[tuple[str, tuple, float, float]]  # (target, index, analytic, numeric)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor).

    Below ``floor`` the comparison is effectively absolute: gradients that
    vanish analytically (e.g. key biases, which softmax ignores) come back
    from central differences as pure rounding noise of order 1e-12.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    model: Model,
    batch,
    labels: Optional[Sequence[int]] = None,
    samples: int = 100,
    eps: float = 1e-4,
    mask_eps: float = 1e-3,
    seed: int = 0,
    loss_kind: str = "cross_entropy",
    teacher_logits: Optional[np.ndarray] = None,
    head_mask: Optional[Sequence[np.ndarray]] = None,
    ffn_mask: Optional[Sequence[np.ndarray]] = None,
    mask_fraction: float = 0.3,
) -> FiniteDiffReport:
    """Compare analytic gradients with central differences in f64.

    Samples ``samples`` coordinates: roughly ``mask_fraction`` of them head or
    FFN-unit mask entries, the rest parameter entries (embedding rows limited
    to tokens and positions the batch actually touches).
    """
    if samples <= 0:
        return FiniteDiffReport(0.0, 0, True, [])
    cfg = model.config
    ids, mask = np.asarray(batch.ids), np.asarray(batch.mask)
    params = model.dense_params(np.float64)
    hm = [np.ones(cfg.num_heads) if head_mask is None else np.array(head_mask[l], np.float64) for l in range(cfg.num_layers)]
    fm = [np.ones(cfg.ffn_size) if ffn_mask is None else np.array(ffn_mask[l], np.float64) for l in range(cfg.num_layers)]

    def loss_at() -> float:
        return forward_backward(cfg, params, ids, mask, loss_kind, labels, teacher_logits, 1.0, hm, fm, need_grad=False)[0]

    _, grads, _ = forward_backward(cfg, params, ids, mask, loss_kind, labels, teacher_logits, 1.0, hm, fm)
    rng = np.random.default_rng(seed)
    names = list(param_shapes(cfg))
    used_tokens = np.unique(ids)
    coords = []
    worst = 0.0
    for _ in range(samples):
        if rng.random() < mask_fraction:
            which = "head_mask" if rng.random() < 0.5 else "ffn_mask"
            layer = int(rng.integers(cfg.num_layers))
            vec = hm[layer] if which == "head_mask" else fm[layer]
            idx = int(rng.integers(len(vec)))
            analytic = float((grads.head_mask if which == "head_mask" else grads.ffn_mask)[layer][idx])
            target, index, step = which, (layer, idx), mask_eps
        else:
            name = names[int(rng.integers(len(names)))]
            vec = params[name]
            if name == "embeddings.word":
                index = (int(rng.choice(used_tokens)), int(rng.integers(cfg.hidden)))
            elif name == "embeddings.position":
                index = (int(rng.integers(ids.shape[1])), int(rng.integers(cfg.hidden)))
            else:
                index = tuple(int(rng.integers(dim)) for dim in vec.shape)
            analytic = float(grads.params[name][index])
            target, idx, step = name, index, eps
        key = idx if target in ("head_mask", "ffn_mask") else index
        orig = vec[key]
        vec[key] = orig + step
        up = loss_at()
        vec[key] = orig - step
        down = loss_at()
        vec[key] = orig
        numeric = (up - down) / (2 * step)
        worst = max(worst, relative_error(analytic, numeric))
        coords.append((target, index, analytic, numeric))
    return FiniteDiffReport(worst, samples, False, coords)
