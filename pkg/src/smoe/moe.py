"""Sparse mixture-of-experts layer with Top-K softmax gating.

Two forward paths are provided. ``moe_forward_dense`` evaluates every expert
on every token and mixes with the sparse gate; it is slow and exists as the
reference. ``moe_forward_grouped`` gathers the rows routed to each expert into
one contiguous block, runs a single batched SwiGLU per expert and scatters
the weighted results back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError
from .numerics import check_finite, sigmoid, silu, softmax


@dataclass(frozen=True)
class RouterWeights:
    w_g: np.ndarray  # [dim, num_experts]

    @property
    def num_experts(self) -> int:
        return self.w_g.shape[1]


@dataclass(frozen=True)
class ExpertWeights:
    w1: np.ndarray  # [dim, hidden]
    w3: np.ndarray  # [dim, hidden]
    w2: np.ndarray  # [hidden, dim]


@dataclass(frozen=True)
class MoELayer:
    router: RouterWeights
    experts: list[ExpertWeights]
    top_k: int

    def __post_init__(self):
        n = self.router.num_experts
        if len(self.experts) != n:
            raise ConfigError(f"router has {n} columns but {len(self.experts)} experts were given")
        if not 1 <= self.top_k <= n:
            raise ConfigError(f"top_k must be in [1, {n}], got {self.top_k}")
        shapes = {(e.w1.shape, e.w3.shape, e.w2.shape) for e in self.experts}
        if len(shapes) != 1:
            raise DimensionError("all experts must share weight shapes")

    @property
    def num_experts(self) -> int:
        return len(self.experts)


@dataclass(frozen=True)
class GateDecision:
    """Top-K routing choice for one token, ordered by descending router logit."""

    experts: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.experts) != len(self.weights):
            raise DimensionError("experts and weights must have equal length")
        if len(set(self.experts)) != len(self.experts):
            raise ConfigError(f"duplicate expert ids in {self.experts}")

    @property
    def k(self) -> int:
        return len(self.experts)

    def as_dense(self, n: int) -> np.ndarray:
        g = np.zeros(n)
        g[list(self.experts)] = self.weights
        return g


@dataclass
class DispatchPlan:
    """Per-expert assignment lists: ``tokens[e]``, ``ranks[e]`` (1-based), ``weights[e]``."""

    tokens: list[np.ndarray]
    ranks: list[np.ndarray]
    weights: list[np.ndarray]
    num_tokens: int = field(default=0)

    @property
    def num_experts(self) -> int:
        return len(self.tokens)

    def entries(self, expert: int) -> list[tuple[int, int, float]]:
        return [(int(t), int(r), float(w))
                for t, r, w in zip(self.tokens[expert], self.ranks[expert], self.weights[expert])]

    def counts(self) -> np.ndarray:
        return np.array([len(t) for t in self.tokens], dtype=np.int64)


def top_k_order(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits per row, best first; ties go to the lower index."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    # stable sort of the negated logits keeps lower indices first among equals
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Keep the top-``k`` logits along the last axis and set the rest to ``-inf``."""
    logits = np.asarray(logits)
    check_finite(logits, "router logits")
    idx = top_k_order(logits, k)
    out = np.full_like(logits, -np.inf)
    np.put_along_axis(out, idx, np.take_along_axis(logits, idx, axis=-1), axis=-1)
    return out


def route(x: np.ndarray, w_g: np.ndarray, k: int,
          logits: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised gate for a batch of tokens ``x`` of shape [tokens, dim].

    Returns ``(experts [tokens, k], weights [tokens, k], logits [tokens, n])``.
    Weights are ``softmax(top_k_mask(logits))`` read off at the selected
    experts. ``logits`` may be supplied to override the router (used for
    uniform-random routing experiments).
    """
    if logits is None:
        if x.shape[-1] != w_g.shape[0]:
            raise DimensionError(f"token dim {x.shape[-1]} does not match router rows {w_g.shape[0]}")
        logits = x @ w_g
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite router logits")
    experts = top_k_order(logits, k)
    masked = np.full_like(logits, -np.inf)
    np.put_along_axis(masked, experts, np.take_along_axis(logits, experts, axis=-1), axis=-1)
    probs = softmax(masked, axis=-1)
    weights = np.take_along_axis(probs, experts, axis=-1)
    return experts, weights, logits


def gate(x: np.ndarray, router: RouterWeights, k: int) -> GateDecision:
    experts, weights, _ = route(np.asarray(x)[None, :], router.w_g, k)
    return GateDecision(tuple(int(e) for e in experts[0]), tuple(float(w) for w in weights[0]))


def decisions_from_arrays(experts: np.ndarray, weights: np.ndarray) -> list[GateDecision]:
    return [GateDecision(tuple(int(e) for e in er), tuple(float(w) for w in wr))
            for er, wr in zip(experts, weights)]


def swiglu_expert(x: np.ndarray, e: ExpertWeights) -> np.ndarray:
    """``(silu(x @ w1) * (x @ w3)) @ w2`` for one token or a block of tokens."""
    if x.shape[-1] != e.w1.shape[0] or e.w1.shape != e.w3.shape or e.w2.shape[0] != e.w1.shape[1]:
        raise DimensionError(
            f"expert shapes w1{e.w1.shape} w3{e.w3.shape} w2{e.w2.shape} do not fit input {x.shape}")
    return (silu(x @ e.w1) * (x @ e.w3)) @ e.w2


def moe_forward_dense(x: np.ndarray, layer: MoELayer) -> tuple[np.ndarray, list[GateDecision]]:
    """Reference path: every expert runs on every token, mixed by the sparse gate."""
    experts, weights, _ = route(x, layer.router.w_g, layer.top_k)
    gates = np.zeros((x.shape[0], layer.num_experts), dtype=x.dtype)
    np.put_along_axis(gates, experts, weights.astype(x.dtype), axis=-1)
    y = np.zeros_like(x)
    for i, expert in enumerate(layer.experts):
        y += gates[:, i:i + 1] * swiglu_expert(x, expert)
    return check_finite(y, "moe output"), decisions_from_arrays(experts, weights)


def build_dispatch_plan(decisions, n: int) -> DispatchPlan:
    """Group (token, rank, weight) assignments by expert.

    ``decisions`` is either a list of ``GateDecision`` or an
    ``(experts, weights)`` pair of [tokens, k] arrays. Within each expert,
    assignments are ordered by token index.
    """
    if isinstance(decisions, tuple):
        experts, weights = decisions
        experts = np.asarray(experts)
        weights = np.asarray(weights)
    else:
        experts = np.array([d.experts for d in decisions], dtype=np.int64).reshape(len(decisions), -1)
        weights = np.array([d.weights for d in decisions], dtype=np.float64).reshape(len(decisions), -1)
    num_tokens, k = experts.shape
    if experts.size and (experts.max() >= n or experts.min() < 0):
        raise ConfigError(f"expert id out of range for n={n}")
    flat_e = experts.reshape(-1)
    flat_t = np.repeat(np.arange(num_tokens), k)
    flat_r = np.tile(np.arange(1, k + 1), num_tokens)
    flat_w = weights.reshape(-1)
    order = np.argsort(flat_e, kind="stable")
    bounds = np.searchsorted(flat_e[order], np.arange(n + 1))
    tokens, ranks, ws = [], [], []
    for i in range(n):
        sel = order[bounds[i]:bounds[i + 1]]
        tokens.append(flat_t[sel])
        ranks.append(flat_r[sel])
        ws.append(flat_w[sel])
    return DispatchPlan(tokens, ranks, ws, num_tokens)


def moe_forward_grouped(x: np.ndarray, layer: MoELayer,
                        routing: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    """Grouped execution: one batched SwiGLU per expert over its gathered rows."""
    if routing is None:
        experts, weights, _ = route(x, layer.router.w_g, layer.top_k)
    else:
        experts, weights = routing
    plan = build_dispatch_plan((experts, weights), layer.num_experts)
    y = np.zeros_like(x)
    for i, expert in enumerate(layer.experts):
        rows = plan.tokens[i]
        if rows.size == 0:
            continue
        block = x[rows]  # gather copies
        out = swiglu_expert(block, expert) * plan.weights[i][:, None].astype(x.dtype)
        y[rows] += out  # an expert appears at most once per token, so rows are unique
    return check_finite(y, "moe output")


@dataclass
class MoECache:
    x: np.ndarray
    experts: np.ndarray
    weights: np.ndarray
    logits: np.ndarray
    plan: DispatchPlan
    h1: list
    h3: list  # (x @ w3, sigmoid(x @ w1)) per expert
    act: list
    out: list


def moe_forward_cached(x: np.ndarray, layer: MoELayer,
                       logits: np.ndarray | None = None) -> tuple[np.ndarray, MoECache]:
    """Grouped forward that keeps the intermediates ``moe_backward`` needs."""
    experts, weights, logits = route(x, layer.router.w_g, layer.top_k, logits)
    weights = weights.astype(x.dtype)
    plan = build_dispatch_plan((experts, weights), layer.num_experts)
    y = np.zeros_like(x)
    h1s, h3s, acts, outs = [], [], [], []
    for i, e in enumerate(layer.experts):
        rows = plan.tokens[i]
        xb = x[rows]
        h1 = xb @ e.w1
        h3 = xb @ e.w3
        sig = sigmoid(h1)
        act = h1 * sig * h3
        out = act @ e.w2
        if rows.size:
            y[rows] += out * plan.weights[i][:, None]
        h1s.append(h1)
        h3s.append((h3, sig))
        acts.append(act)
        outs.append(out)
    check_finite(y, "moe output")
    return y, MoECache(x, experts, weights, logits, plan, h1s, h3s, acts, outs)


def moe_backward(dy: np.ndarray, cache: MoECache, layer: MoELayer,
                 aux_coef: float = 0.0) -> tuple[np.ndarray, np.ndarray, list[tuple[np.ndarray, ...]]]:
    """Gradients of the layer given ``dy`` = dLoss/dOutput.

    Returns ``(dx, d_router, [(dw1, dw3, dw2) per expert])``. The Top-K
    selection is held fixed, so only the K selected logits of each token
    receive gradient, through the Jacobian of the restricted softmax. With
    ``aux_coef > 0`` the gradient of the load-balancing term
    ``aux_coef * n * sum_i f_i * p_i`` is added (see ``aux_load_balance``).
    """
    x, plan = cache.x, cache.plan
    n, k = layer.num_experts, layer.top_k
    dx = np.zeros_like(x)
    dgate = np.zeros(cache.experts.shape, dtype=x.dtype)
    expert_grads = []
    for i, e in enumerate(layer.experts):
        rows = plan.tokens[i]
        if rows.size == 0:
            expert_grads.append((np.zeros_like(e.w1), np.zeros_like(e.w3), np.zeros_like(e.w2)))
            continue
        dy_rows = dy[rows]
        w = plan.weights[i][:, None]
        dgate[rows, plan.ranks[i] - 1] = np.sum(dy_rows * cache.out[i], axis=1)
        dout = dy_rows * w
        h1, (h3, sig) = cache.h1[i], cache.h3[i]
        dw2 = cache.act[i].T @ dout
        da = dout @ e.w2.T
        dh1 = da * h3 * (sig * (1.0 + h1 * (1.0 - sig)))
        dh3 = da * (h1 * sig)
        xb = x[rows]
        dw1 = xb.T @ dh1
        dw3 = xb.T @ dh3
        dx[rows] += dh1 @ e.w1.T + dh3 @ e.w3.T
        expert_grads.append((dw1, dw3, dw2))
    g = cache.weights
    dsel = g * (dgate - np.sum(g * dgate, axis=1, keepdims=True))
    dlogits = np.zeros((x.shape[0], n), dtype=x.dtype)
    np.put_along_axis(dlogits, cache.experts, dsel, axis=1)
    if aux_coef:
        dlogits += _aux_logit_grad(cache.logits, cache.experts, n, aux_coef).astype(x.dtype)
    d_router = x.T @ dlogits
    dx += dlogits @ layer.router.w_g.T
    return dx, d_router, expert_grads


def aux_load_balance(logits: np.ndarray, experts: np.ndarray, n: int, coef: float) -> float:
    """``coef * n * sum_i f_i * p_i``.

    ``f_i`` is the fraction of the tokens*K assignments routed to expert i
    and ``p_i`` the mean (full, unmasked) router softmax probability.
    """
    f = np.bincount(experts.reshape(-1), minlength=n) / experts.size
    p = softmax(logits.astype(np.float64), axis=-1).mean(axis=0)
    return float(coef * n * np.dot(f, p))


def _aux_logit_grad(logits: np.ndarray, experts: np.ndarray, n: int, coef: float) -> np.ndarray:
    f = np.bincount(experts.reshape(-1), minlength=n) / experts.size
    s = softmax(logits.astype(np.float64), axis=-1)
    c = coef * n * f / logits.shape[0]
    return s * (c[None, :] - (s @ c)[:, None])
