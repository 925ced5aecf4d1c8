"""Desk-scale decoder-only transformer with exact manual reverse-mode gradients.

Architecture: pre-LN blocks, causal multi-head attention, GELU MLP with 4x
expansion, no biases, no dropout, learned absolute positions, byte-level
vocabulary, and embedding/unembedding weight tying.  An optional per-head
QK normalization (layernorm without gain on each query/key vector) bounds
attention logits independently of weight scale.

Gradients are hand-derived reverse-mode, not autodiff, so they can serve as
the exactness reference for optimizer experiments; the test suite holds them
to central finite differences at 1e-4 relative error in 64-bit.

Attention probes: each forward records, per layer, the maximum pre-softmax
logit over the causally reachable positions of the current minibatch, plus
the mean attention-row entropy.  Masked (future) positions are excluded from
the max since they are unattainable attention patterns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, xlogy

from merit.tensor import SeededRng, Tensor, softmax_rows

LN_EPS = 1e-5
QK_NORM_EPS = 1e-20

_DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclass
class ModelConfig:
    """Shape and feature switches for the transformer."""

    n_layer: int
    n_head: int
    d_model: int
    context_len: int
    vocab_size: int = 256
    qk_norm: bool = False
    dtype: str = "f64"

    def __post_init__(self):
        for name in ("n_layer", "n_head", "d_model", "context_len", "vocab_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_head != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_head {self.n_head}"
            )
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_head

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]


@dataclass
class AttentionProbe:
    """Per-layer attention observables from one forward pass."""

    layer_index: int
    max_logit: float
    attention_entropy: float


def param_names(cfg: ModelConfig) -> list[str]:
    """Stable parameter ordering used by init, checkpoints, and optimizers."""
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.n_layer):
        names += [
            f"layer{i}.ln1.g",
            f"layer{i}.attn.wq",
            f"layer{i}.attn.wk",
            f"layer{i}.attn.wv",
            f"layer{i}.attn.wo",
            f"layer{i}.ln2.g",
            f"layer{i}.mlp.w_in",
            f"layer{i}.mlp.w_out",
        ]
    names.append("ln_f.g")
    return names


def init_params(cfg: ModelConfig, rng: SeededRng) -> dict[str, Tensor]:
    """Normal(0, 0.02) init; residual-output projections scaled by
    1/sqrt(2*n_layer); layernorm gains start at 1; unembedding is tok_emb."""
    dt = cfg.np_dtype
    std = 0.02
    resid_std = std / math.sqrt(2 * cfg.n_layer)
    C, F = cfg.d_model, 4 * cfg.d_model
    params: dict[str, Tensor] = {}
    params["tok_emb"] = rng.normal((cfg.vocab_size, C), 0.0, std).astype(dt)
    params["pos_emb"] = rng.normal((cfg.context_len, C), 0.0, std).astype(dt)
    for i in range(cfg.n_layer):
        params[f"layer{i}.ln1.g"] = np.ones(C, dtype=dt)
        params[f"layer{i}.attn.wq"] = rng.normal((C, C), 0.0, std).astype(dt)
        params[f"layer{i}.attn.wk"] = rng.normal((C, C), 0.0, std).astype(dt)
        params[f"layer{i}.attn.wv"] = rng.normal((C, C), 0.0, std).astype(dt)
        params[f"layer{i}.attn.wo"] = rng.normal((C, C), 0.0, resid_std).astype(dt)
        params[f"layer{i}.ln2.g"] = np.ones(C, dtype=dt)
        params[f"layer{i}.mlp.w_in"] = rng.normal((C, F), 0.0, std).astype(dt)
        params[f"layer{i}.mlp.w_out"] = rng.normal((F, C), 0.0, resid_std).astype(dt)
    params["ln_f.g"] = np.ones(C, dtype=dt)
    return params


def _layernorm(x: Tensor, g: Tensor | None, eps: float):
    """Normalize the last axis; returns (y, cache) for the backward pass."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * g if g is not None else xhat
    return y, (xhat, inv)


def _layernorm_bwd(dy: Tensor, g: Tensor | None, cache):
    """Reverse of _layernorm; dg is summed over all leading axes."""
    xhat, inv = cache
    if g is not None:
        dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
        dxhat = dy * g
    else:
        dg = None
        dxhat = dy
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg


def _gelu(x: Tensor) -> tuple[Tensor, Tensor]:
    """Exact GELU x*Phi(x); also returns Phi(x) for reuse in the backward."""
    phi = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return x * phi, phi


def _gelu_grad(x: Tensor, phi: Tensor) -> Tensor:
    return phi + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _split_heads(x: Tensor, n_head: int) -> Tensor:
    B, T, C = x.shape
    return x.reshape(B, T, n_head, C // n_head).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, H, T, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dk)


def _validate_tokens(cfg: ModelConfig, tokens: Tensor) -> Tensor:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be a [batch, T] int matrix, got ndim {tokens.ndim}")
    if tokens.shape[1] > cfg.context_len:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds context_len {cfg.context_len}"
        )
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id outside [0, vocab_size)")
    return tokens


def forward(cfg: ModelConfig, params: dict[str, Tensor], tokens) -> tuple:
    """Run the model; returns (logits [B,T,V], cache, per-layer probes)."""
    tokens = _validate_tokens(cfg, tokens)
    B, T = tokens.shape
    C, H = cfg.d_model, cfg.n_head
    sqrt_dk = math.sqrt(cfg.d_head)
    x = params["tok_emb"][tokens] + params["pos_emb"][:T]
    causal = np.tril(np.ones((T, T), dtype=bool))
    cache = {"tokens": tokens, "layers": []}
    probes: list[AttentionProbe] = []
    for i in range(cfg.n_layer):
        lc: dict = {"x_in": x}
        xh1, ln1c = _layernorm(x, params[f"layer{i}.ln1.g"], LN_EPS)
        lc["ln1"], lc["xh1"] = ln1c, xh1
        flat = xh1.reshape(B * T, C)
        q = _split_heads((flat @ params[f"layer{i}.attn.wq"]).reshape(B, T, C), H)
        k = _split_heads((flat @ params[f"layer{i}.attn.wk"]).reshape(B, T, C), H)
        v = _split_heads((flat @ params[f"layer{i}.attn.wv"]).reshape(B, T, C), H)
        if cfg.qk_norm:
            q, lc["qn"] = _layernorm(q, None, QK_NORM_EPS)
            k, lc["kn"] = _layernorm(k, None, QK_NORM_EPS)
        lc["q"], lc["k"], lc["v"] = q, k, v
        z = q @ k.transpose(0, 1, 3, 2) / sqrt_dk
        max_logit = float(np.max(z[:, :, causal]))
        att = softmax_rows(np.where(causal, z, -np.inf))
        entropy = float(np.mean(-xlogy(att, att).sum(axis=-1)))
        probes.append(AttentionProbe(i, max_logit, entropy))
        lc["att"] = att
        merged = _merge_heads(att @ v)
        lc["merged"] = merged
        proj = (merged.reshape(B * T, C) @ params[f"layer{i}.attn.wo"]).reshape(B, T, C)
        x = x + proj
        lc["x_mid"] = x
        xh2, ln2c = _layernorm(x, params[f"layer{i}.ln2.g"], LN_EPS)
        lc["ln2"], lc["xh2"] = ln2c, xh2
        h_pre = (xh2.reshape(B * T, C) @ params[f"layer{i}.mlp.w_in"]).reshape(B, T, -1)
        h, phi = _gelu(h_pre)
        lc["h_pre"], lc["h"], lc["phi"] = h_pre, h, phi
        y = (h.reshape(B * T, -1) @ params[f"layer{i}.mlp.w_out"]).reshape(B, T, C)
        x = x + y
        cache["layers"].append(lc)
    xf, lnfc = _layernorm(x, params["ln_f.g"], LN_EPS)
    cache["lnf"], cache["xf"] = lnfc, xf
    logits = (xf.reshape(B * T, C) @ params["tok_emb"].T).reshape(B, T, cfg.vocab_size)
    return logits, cache, probes


def _log_softmax(flat_logits: Tensor) -> Tensor:
    shifted = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> float:
    """Mean next-token cross-entropy in nats over all batch positions."""
    B, T, V = logits.shape
    logp = _log_softmax(logits.reshape(B * T, V))
    return float(-logp[np.arange(B * T), np.asarray(targets).reshape(-1)].mean())


def loss_only(cfg: ModelConfig, params: dict[str, Tensor], tokens, targets) -> float:
    logits, _, _ = forward(cfg, params, tokens)
    return cross_entropy(logits, targets)


def loss_and_grads(
    cfg: ModelConfig, params: dict[str, Tensor], tokens, targets
) -> tuple[float, dict[str, Tensor], list[AttentionProbe]]:
    """Loss plus exact gradients for every parameter, via manual backprop."""
    tokens = _validate_tokens(cfg, tokens)
    targets = np.asarray(targets)
    if targets.shape != tokens.shape:
        raise ValueError(f"targets shape {targets.shape} != tokens shape {tokens.shape}")
    logits, cache, probes = forward(cfg, params, tokens)
    B, T = tokens.shape
    C, H, V = cfg.d_model, cfg.n_head, cfg.vocab_size
    sqrt_dk = math.sqrt(cfg.d_head)
    n = B * T

    logp = _log_softmax(logits.reshape(n, V))
    tflat = targets.reshape(-1)
    loss = float(-logp[np.arange(n), tflat].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), tflat] -= 1.0
    dlogits /= n

    grads = {name: np.zeros_like(p) for name, p in params.items()}

    # Tied unembedding: logits = xf @ tok_emb.T contributes to both dE and dxf.
    xf_flat = cache["xf"].reshape(n, C)
    grads["tok_emb"] += dlogits.T @ xf_flat
    dxf = (dlogits @ params["tok_emb"]).reshape(B, T, C)
    dx, dgf = _layernorm_bwd(dxf, params["ln_f.g"], cache["lnf"])
    grads["ln_f.g"] += dgf

    for i in reversed(range(cfg.n_layer)):
        lc = cache["layers"][i]
        w_out = params[f"layer{i}.mlp.w_out"]
        w_in = params[f"layer{i}.mlp.w_in"]
        dy = dx
        grads[f"layer{i}.mlp.w_out"] += lc["h"].reshape(n, -1).T @ dy.reshape(n, C)
        dh = (dy.reshape(n, C) @ w_out.T).reshape(lc["h"].shape)
        dh_pre = dh * _gelu_grad(lc["h_pre"], lc["phi"])
        grads[f"layer{i}.mlp.w_in"] += lc["xh2"].reshape(n, C).T @ dh_pre.reshape(n, -1)
        dxh2 = (dh_pre.reshape(n, -1) @ w_in.T).reshape(B, T, C)
        dx_mid, dg2 = _layernorm_bwd(dxh2, params[f"layer{i}.ln2.g"], lc["ln2"])
        grads[f"layer{i}.ln2.g"] += dg2
        dx = dx + dx_mid

        wo = params[f"layer{i}.attn.wo"]
        dproj = dx
        grads[f"layer{i}.attn.wo"] += lc["merged"].reshape(n, C).T @ dproj.reshape(n, C)
        dout = _split_heads((dproj.reshape(n, C) @ wo.T).reshape(B, T, C), H)
        att, v = lc["att"], lc["v"]
        datt = dout @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dout
        # Softmax backward; masked columns have att == 0, hence dz == 0 there.
        dz = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = (dz @ lc["k"]) / sqrt_dk
        dk = (dz.transpose(0, 1, 3, 2) @ lc["q"]) / sqrt_dk
        if cfg.qk_norm:
            dq, _ = _layernorm_bwd(dq, None, lc["qn"])
            dk, _ = _layernorm_bwd(dk, None, lc["kn"])
        dq_f = _merge_heads(dq).reshape(n, C)
        dk_f = _merge_heads(dk).reshape(n, C)
        dv_f = _merge_heads(dv).reshape(n, C)
        xh1_f = lc["xh1"].reshape(n, C)
        grads[f"layer{i}.attn.wq"] += xh1_f.T @ dq_f
        grads[f"layer{i}.attn.wk"] += xh1_f.T @ dk_f
        grads[f"layer{i}.attn.wv"] += xh1_f.T @ dv_f
        dxh1 = (
            dq_f @ params[f"layer{i}.attn.wq"].T
            + dk_f @ params[f"layer{i}.attn.wk"].T
            + dv_f @ params[f"layer{i}.attn.wv"].T
        ).reshape(B, T, C)
        dx_in, dg1 = _layernorm_bwd(dxh1, params[f"layer{i}.ln1.g"], lc["ln1"])
        grads[f"layer{i}.ln1.g"] += dg1
        dx = dx + dx_in

    grads["pos_emb"][:T] += dx.sum(axis=0)
    np.add.at(grads["tok_emb"], tokens, dx)
    return loss, grads, probes


def finite_diff_grad(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    tokens,
    targets,
    coordinate: tuple[str, int],
    eps: float,
) -> float:
    """Central-difference derivative of the loss at one parameter coordinate.

    ``coordinate`` is (parameter name, flat element index).
    """
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    name, idx = coordinate
    if name not in params:
        raise KeyError(f"unknown parameter {name!r}")
    if not (0 <= idx < params[name].size):
        raise IndexError(f"flat index {idx} out of range for {name}")

    def loss_at(delta: float) -> float:
        bumped = dict(params)
        t = params[name].copy()
        t.flat[idx] += delta
        bumped[name] = t
        return loss_only(cfg, bumped, tokens, targets)

    return (loss_at(eps) - loss_at(-eps)) / (2.0 * eps)
