"""Decoder-only transformer whose every feed-forward block is a sparse MoE layer.

Blocks are pre-norm residual: ``x += attention(rmsnorm(x))`` then
``x += moe(rmsnorm(x))``. Attention is grouped-query with rotary position
embeddings and a dense causal mask (no sliding window). Embedding and output
head are separate matrices.

Parameters live in an ordered ``dict`` keyed by name. The order returned by
``parameter_shapes`` is also the checkpoint order::

    tok_embeddings                     [vocab_size, dim]
    layers.{i}.attention_norm          [dim]
    layers.{i}.wq                      [dim, n_heads * head_dim]
    layers.{i}.wk                      [dim, n_kv_heads * head_dim]
    layers.{i}.wv                      [dim, n_kv_heads * head_dim]
    layers.{i}.wo                      [n_heads * head_dim, dim]
    layers.{i}.ffn_norm                [dim]
    layers.{i}.router                  [dim, num_experts]
    layers.{i}.experts.{e}.w1          [dim, hidden_dim]
    layers.{i}.experts.{e}.w3          [dim, hidden_dim]
    layers.{i}.experts.{e}.w2          [hidden_dim, dim]
    norm                               [dim]
    output                             [dim, vocab_size]
"""

from __future__ import annotations

import functools
import os
import re
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContextOverflowError, DimensionError, InputError, NumericError
from .io_util import STREAM_INIT, make_rng
from .moe import (ExpertWeights, MoELayer, RouterWeights, aux_load_balance, moe_backward,
                  moe_forward_cached)
from .numerics import RMS_EPS, apply_rotary, check_finite, rope_tables, softmax
from .trace import RoutingTrace

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    dim: int
    n_layers: int
    head_dim: int
    hidden_dim: int
    n_heads: int
    n_kv_heads: int
    context_len: int
    vocab_size: int
    num_experts: int
    top_k_experts: int

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v <= 0:
                raise ConfigError(f"{f.name} must be a positive integer, got {v!r}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} is not a multiple of n_kv_heads={self.n_kv_heads}")
        if self.top_k_experts > self.num_experts:
            raise ConfigError(f"top_k_experts={self.top_k_experts} exceeds num_experts={self.num_experts}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")

    @classmethod
    def table1(cls) -> "ModelConfig":
        """The published 8x7B architecture."""
        return cls(dim=4096, n_layers=32, head_dim=128, hidden_dim=14336, n_heads=32, n_kv_heads=8,
                   context_len=32768, vocab_size=32000, num_experts=8, top_k_experts=2)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def values(self) -> tuple[int, ...]:
        return tuple(int(getattr(self, n)) for n in self.field_names())

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{name} = {value}\n" for name, value in zip(self.field_names(), self.values()))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        """Parse flat ``key = value`` lines (``:`` or whitespace also accepted, ``#`` comments)."""
        names = set(cls.field_names())
        values: dict[str, int] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_]*)\s*(?:=|:|\s)\s*(\S+)", line)
            if not m:
                raise ConfigError(f"line {lineno}: cannot parse {raw!r}")
            key, value = m.groups()
            if key not in names:
                raise ConfigError(f"line {lineno}: unknown field {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate field {key!r}")
            try:
                values[key] = int(value.replace("_", ""))
            except ValueError:
                raise ConfigError(f"line {lineno}: {key} must be an integer, got {value!r}") from None
        missing = [n for n in cls.field_names() if n not in values]
        if missing:
            raise ConfigError(f"missing fields: {', '.join(missing)}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ModelConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    q = cfg.n_heads * cfg.head_dim
    kv = cfg.n_kv_heads * cfg.head_dim
    shapes = [("tok_embeddings", (cfg.vocab_size, cfg.dim))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "attention_norm", (cfg.dim,)),
            (p + "wq", (cfg.dim, q)),
            (p + "wk", (cfg.dim, kv)),
            (p + "wv", (cfg.dim, kv)),
            (p + "wo", (q, cfg.dim)),
            (p + "ffn_norm", (cfg.dim,)),
            (p + "router", (cfg.dim, cfg.num_experts)),
        ]
        for e in range(cfg.num_experts):
            pe = f"{p}experts.{e}."
            shapes += [
                (pe + "w1", (cfg.dim, cfg.hidden_dim)),
                (pe + "w3", (cfg.dim, cfg.hidden_dim)),
                (pe + "w2", (cfg.hidden_dim, cfg.dim)),
            ]
    shapes += [("norm", (cfg.dim,)), ("output", (cfg.dim, cfg.vocab_size))]
    return shapes


def count_parameters(cfg: ModelConfig, mode: str = "sparse", moe_only: bool = False) -> int:
    """Parameter total with all experts (``sparse``) or only the Top-K used per token (``active``).

    Embeddings, output head, attention, router and norms are counted the same
    way in both modes. ``moe_only`` restricts the tally to experts + router.
    """
    if mode not in ("sparse", "active"):
        raise ConfigError(f"mode must be 'sparse' or 'active', got {mode!r}")
    experts = cfg.num_experts if mode == "sparse" else cfg.top_k_experts
    per_expert = 3 * cfg.dim * cfg.hidden_dim
    router = cfg.dim * cfg.num_experts
    moe = experts * per_expert + router
    if moe_only:
        return cfg.n_layers * moe
    q = cfg.n_heads * cfg.head_dim
    kv = cfg.n_kv_heads * cfg.head_dim
    attention = 2 * cfg.dim * q + 2 * cfg.dim * kv
    norms = 2 * cfg.dim
    per_layer = attention + norms + moe
    return cfg.n_layers * per_layer + 2 * cfg.vocab_size * cfg.dim + cfg.dim


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if [n for n, _ in expected] != list(self.params):
            raise InputError("parameter names do not match the config layout")
        for name, shape in expected:
            if self.params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def dtype(self):
        return self.params["tok_embeddings"].dtype

    def astype(self, dtype) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def moe_layer(self, i: int) -> MoELayer:
        p = self.params
        pre = f"layers.{i}."
        experts = [ExpertWeights(p[f"{pre}experts.{e}.w1"], p[f"{pre}experts.{e}.w3"], p[f"{pre}experts.{e}.w2"])
                   for e in range(self.config.num_experts)]
        return MoELayer(RouterWeights(p[pre + "router"]), experts, self.config.top_k_experts)

    def attention_weights(self, i: int) -> "AttentionWeights":
        p = self.params
        pre = f"layers.{i}."
        return AttentionWeights(p[pre + "wq"], p[pre + "wk"], p[pre + "wv"], p[pre + "wo"])


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> TransformerModel:
    """Normal(0, 0.02) matrices and unit norm gains, drawn in checkpoint order."""
    rng = make_rng(seed, STREAM_INIT)
    params = {}
    for name, shape in parameter_shapes(cfg):
        if len(shape) == 1:
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
    return TransformerModel(cfg, params)


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


# ---------------------------------------------------------------------------
# attention


def _rmsnorm_fwd(x, gain, eps=RMS_EPS):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gain, inv


def _rmsnorm_bwd(dy, x, inv, gain):
    dgain = np.sum((dy * x * inv).reshape(-1, x.shape[-1]), axis=0)
    dxhat = dy * gain
    dx = inv * dxhat - x * inv ** 3 * np.mean(dxhat * x, axis=-1, keepdims=True)
    return dx, dgain


@functools.lru_cache(maxsize=16)
def _causal_mask(t: int, dtype) -> np.ndarray:
    mask = np.triu(np.full((t, t), -np.inf, dtype=dtype), 1)
    mask.flags.writeable = False
    return mask


def _softmax_rows_inplace(scores: np.ndarray) -> None:
    """Row softmax over the last axis, overwriting ``scores``.

    Every causal row keeps its diagonal entry, so a row is never all -inf.
    """
    top = np.max(scores, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise NumericError("attention scores contain NaN or inf")
    scores -= top
    np.exp(scores, out=scores)
    scores /= np.sum(scores, axis=-1, keepdims=True)


def _attention_fwd(x, w: AttentionWeights, cfg: ModelConfig, cos, sin):
    b, t, _ = x.shape
    h, kvh, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    group = h // kvh
    q = apply_rotary((x @ w.wq).reshape(b, t, h, hd), cos, sin).transpose(0, 2, 1, 3)
    k = apply_rotary((x @ w.wk).reshape(b, t, kvh, hd), cos, sin).transpose(0, 2, 1, 3)
    v = (x @ w.wv).reshape(b, t, kvh, hd).transpose(0, 2, 1, 3)
    if group > 1:
        k = np.repeat(k, group, axis=1)
        v = np.repeat(v, group, axis=1)
    q *= x.dtype.type(1.0 / np.sqrt(hd))  # scaling the [t, hd] queries is cheaper than the [t, t] scores
    # the [b, h, t, t] buffer is reused in place from here on
    probs = q @ k.swapaxes(-1, -2)
    probs += _causal_mask(t, x.dtype)
    _softmax_rows_inplace(probs)
    o = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, h * hd)
    out = o @ w.wo
    return out, (x, q, k, v, probs, o)


def _attention_bwd(dy, cache, w: AttentionWeights, cfg: ModelConfig, cos, sin):
    x, q, k, v, probs, o = cache
    b, t, _ = x.shape
    h, kvh, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    group = h // kvh
    scale = x.dtype.type(1.0 / np.sqrt(hd))
    dwo = o.reshape(-1, h * hd).T @ dy.reshape(-1, dy.shape[-1])
    do = (dy @ w.wo.T).reshape(b, t, h, hd).transpose(0, 2, 1, 3)
    dscores = do @ v.swapaxes(-1, -2)
    dv = probs.swapaxes(-1, -2) @ do
    dscores -= np.einsum("...ij,...ij->...i", dscores, probs)[..., None]
    dscores *= probs
    dq = (dscores @ k) * scale
    dk = dscores.swapaxes(-1, -2) @ q  # q was stored pre-scaled
    if group > 1:
        dk = dk.reshape(b, kvh, group, t, hd).sum(axis=2)
        dv = dv.reshape(b, kvh, group, t, hd).sum(axis=2)
    dq = apply_rotary(dq.transpose(0, 2, 1, 3), cos, sin, inverse=True).reshape(b, t, h * hd)
    dk = apply_rotary(dk.transpose(0, 2, 1, 3), cos, sin, inverse=True).reshape(b, t, kvh * hd)
    dv = dv.transpose(0, 2, 1, 3).reshape(b, t, kvh * hd)
    xf = x.reshape(-1, x.shape[-1])
    dwq = xf.T @ dq.reshape(-1, dq.shape[-1])
    dwk = xf.T @ dk.reshape(-1, dk.shape[-1])
    dwv = xf.T @ dv.reshape(-1, dv.shape[-1])
    dx = dq @ w.wq.T + dk @ w.wk.T + dv @ w.wv.T
    return dx, (dwq, dwk, dwv, dwo)


def attention_block(x: np.ndarray, weights: AttentionWeights, cfg: ModelConfig,
                    positions=None) -> np.ndarray:
    """Causal grouped-query attention over ``x`` of shape [seq, dim] (or [batch, seq, dim]).

    Each of the ``n_kv_heads`` key/value heads is shared by
    ``n_heads // n_kv_heads`` consecutive query heads. Queries and keys are
    rotated by position before the 1/sqrt(head_dim)-scaled dot products.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    t = x.shape[1]
    if t > cfg.context_len:
        raise ContextOverflowError(f"sequence of {t} tokens exceeds context_len={cfg.context_len}")
    if positions is None:
        positions = np.arange(t)
    cos, sin = rope_tables(np.asarray(positions), cfg.head_dim, dtype=x.dtype)
    out, _ = _attention_fwd(x, weights, cfg, cos, sin)
    check_finite(out, "attention output")
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# full model


@dataclass
class ForwardCache:
    tokens: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    layers: list
    final: tuple
    aux_loss: float = 0.0


def _check_tokens(model: TransformerModel, tokens: np.ndarray) -> None:
    cfg = model.config
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise InputError("expected a non-empty [batch, seq] array of token ids")
    if tokens.shape[1] > cfg.context_len:
        raise ContextOverflowError(f"{tokens.shape[1]} tokens exceed context_len={cfg.context_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")


def forward_batch(model: TransformerModel, tokens, keep_cache: bool = False,
                  routing_rng: np.random.Generator | None = None, aux_coef: float = 0.0):
    """Forward pass over a [batch, seq] id array.

    Returns ``(logits [batch, seq, vocab], routes, cache)`` where ``routes`` is
    a per-layer list of ``(experts, weights)`` arrays of shape
    [batch * seq, top_k]. ``routing_rng`` replaces every router with i.i.d.
    Gaussian logits, i.e. uniform-random Top-K selection.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(model, tokens)
    cfg, p = model.config, model.params
    b, t = tokens.shape
    cos, sin = rope_tables(np.arange(t), cfg.head_dim, dtype=model.dtype)
    x = p["tok_embeddings"][tokens]
    routes = []
    layer_caches = []
    aux = 0.0
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        xn, inv_a = _rmsnorm_fwd(x, p[pre + "attention_norm"])
        attn, attn_cache = _attention_fwd(xn, model.attention_weights(i), cfg, cos, sin)
        h = x + attn
        hn, inv_f = _rmsnorm_fwd(h, p[pre + "ffn_norm"])
        override = None
        if routing_rng is not None:
            override = routing_rng.standard_normal((b * t, cfg.num_experts))
        layer = model.moe_layer(i)
        y, moe_cache = moe_forward_cached(hn.reshape(b * t, -1), layer, override)
        if aux_coef:
            aux += aux_load_balance(moe_cache.logits, moe_cache.experts, cfg.num_experts, aux_coef)
        routes.append((moe_cache.experts, moe_cache.weights))
        if keep_cache:
            layer_caches.append((x, inv_a, attn_cache, h, inv_f, moe_cache))
        x = h + y.reshape(b, t, -1)
    xf, inv = _rmsnorm_fwd(x, p["norm"])
    logits = xf @ p["output"]
    check_finite(logits, "logits")
    cache = ForwardCache(tokens, cos, sin, layer_caches, (x, inv, xf), aux) if keep_cache else None
    return logits, routes, cache


def backward_batch(model: TransformerModel, cache: ForwardCache, dlogits: np.ndarray,
                   aux_coef: float = 0.0) -> dict[str, np.ndarray]:
    """Gradients of every parameter given dLoss/dLogits for a cached forward."""
    cfg, p = model.config, model.params
    dt = model.dtype
    dlogits = dlogits.astype(dt, copy=False)
    grads = {name: None for name, _ in parameter_shapes(cfg)}
    x, inv, xf = cache.final
    grads["output"] = xf.reshape(-1, cfg.dim).T @ dlogits.reshape(-1, cfg.vocab_size)
    dx, grads["norm"] = _rmsnorm_bwd(dlogits @ p["output"].T, x, inv, p["norm"])
    b, t = cache.tokens.shape
    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        x_in, inv_a, attn_cache, h, inv_f, moe_cache = cache.layers[i]
        layer = model.moe_layer(i)
        dhn, drouter, dexperts = moe_backward(dx.reshape(b * t, -1), moe_cache, layer, aux_coef)
        grads[pre + "router"] = drouter
        for e, (dw1, dw3, dw2) in enumerate(dexperts):
            grads[f"{pre}experts.{e}.w1"] = dw1
            grads[f"{pre}experts.{e}.w3"] = dw3
            grads[f"{pre}experts.{e}.w2"] = dw2
        dh_norm, grads[pre + "ffn_norm"] = _rmsnorm_bwd(dhn.reshape(b, t, -1), h, inv_f, p[pre + "ffn_norm"])
        dh = dx + dh_norm
        dxn, (dwq, dwk, dwv, dwo) = _attention_bwd(dh, attn_cache, model.attention_weights(i), cfg,
                                                   cache.cos, cache.sin)
        grads[pre + "wq"], grads[pre + "wk"], grads[pre + "wv"], grads[pre + "wo"] = dwq, dwk, dwv, dwo
        dx_norm, grads[pre + "attention_norm"] = _rmsnorm_bwd(dxn, x_in, inv_a, p[pre + "attention_norm"])
        dx = dh + dx_norm
    grads["tok_embeddings"] = _scatter_rows(cache.tokens.reshape(-1), dx.reshape(-1, cfg.dim), cfg.vocab_size)
    return {k: v.astype(dt, copy=False) for k, v in grads.items()}


def _scatter_rows(index: np.ndarray, rows: np.ndarray, size: int) -> np.ndarray:
    """``out[index[i]] += rows[i]`` with repeated indices, via sort + reduceat."""
    out = np.zeros((size, rows.shape[1]), dtype=rows.dtype)
    order = np.argsort(index, kind="stable")
    idx = index[order]
    starts = np.r_[0, np.flatnonzero(np.diff(idx)) + 1]
    out[idx[starts]] = np.add.reduceat(rows[order], starts, axis=0)
    return out


def forward(model: TransformerModel, token_ids, doc_id: int = 0,
            routing_rng: np.random.Generator | None = None) -> tuple[np.ndarray, RoutingTrace]:
    """Logits [seq, vocab] and the routing trace (one decision per layer and token)."""
    tokens = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    logits, routes, _ = forward_batch(model, tokens, routing_rng=routing_rng)
    return logits[0], trace_from_routes(routes, model.config, doc_ids=np.full(tokens.shape[1], doc_id))


def trace_from_routes(routes, cfg: ModelConfig, doc_ids: np.ndarray) -> RoutingTrace:
    experts = np.stack([e for e, _ in routes])
    weights = np.stack([w for _, w in routes])
    return RoutingTrace.from_layer_arrays(experts, weights, doc_ids=doc_ids, num_experts=cfg.num_experts)


def decode_greedy(model: TransformerModel, prompt_ids, max_new: int) -> list[int]:
    """Append ``max_new`` argmax tokens to the prompt (full recompute per step)."""
    return decode_greedy_batch(model, [list(prompt_ids)], max_new)[0]


def decode_greedy_batch(model: TransformerModel, prompts: list[list[int]], max_new: int) -> list[list[int]]:
    """Greedy decoding for several prompts of equal length at once."""
    seqs = np.asarray(prompts, dtype=np.int64)
    if seqs.ndim != 2:
        raise InputError("prompts in a batch must have equal length")
    ctx = model.config.context_len
    if seqs.shape[1] > ctx:
        raise ContextOverflowError(f"prompt of {seqs.shape[1]} tokens exceeds context_len={ctx}")
    for _ in range(max_new):
        if seqs.shape[1] >= ctx:
            raise ContextOverflowError(f"generation would exceed context_len={ctx}; output truncated")
        logits, _, _ = forward_batch(model, seqs)
        nxt = np.argmax(logits[:, -1, :], axis=-1)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
    return [list(map(int, row)) for row in seqs]
