"""Training toy models: loss, analytic gradients, gradient checking and Adam."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .errors import DataError, NumericError, TrainingError
from .io_util import STREAM_DATA, atomic_write_text, make_rng
from .model import TransformerModel, backward_batch, forward_batch, parameter_shapes
from .numerics import log_softmax

log = logging.getLogger(__name__)


@dataclass
class Batch:
    """Next-token prediction batch; ``loss_weights`` selects which positions are scored."""

    inputs: np.ndarray                      # [B, T]
    targets: np.ndarray                     # [B, T]
    loss_weights: np.ndarray | None = None  # [B, T]

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.int64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.int64))
        if self.inputs.shape != self.targets.shape:
            raise DataError("inputs and targets must have the same shape")
        if self.loss_weights is not None:
            self.loss_weights = np.atleast_2d(np.asarray(self.loss_weights, dtype=np.float64))
            if self.loss_weights.shape != self.inputs.shape:
                raise DataError("loss_weights must match the input shape")

    @classmethod
    def from_sequences(cls, seqs, loss_weights=None) -> "Batch":
        """Shift [B, T+1] sequences into inputs/targets."""
        seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
        w = None if loss_weights is None else np.atleast_2d(np.asarray(loss_weights))[:, 1:]
        return cls(seqs[:, :-1], seqs[:, 1:], w)


class BatchSource(Protocol):
    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch: ...


@dataclass
class TokenStream:
    """Random contiguous windows of ``seq_len + 1`` tokens from a flat corpus."""

    tokens: np.ndarray
    seq_len: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if len(self.tokens) < self.seq_len + 1:
            raise DataError(f"corpus of {len(self.tokens)} tokens is shorter than one window ({self.seq_len + 1})")

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        starts = rng.integers(0, len(self.tokens) - self.seq_len, size=batch_size)
        return Batch.from_sequences(np.stack([self.tokens[s:s + self.seq_len + 1] for s in starts]))


@dataclass
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 200
    seed: int = 0
    aux_coef: float = 0.0
    seq_len: int = 64
    schedule: str = "constant"   # or "cosine"
    warmup: int = 0
    grad_clip: float | None = None
    log_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        if self.schedule == "cosine":
            frac = (step - self.warmup) / max(1, self.steps - self.warmup)
            return self.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))
        return self.lr


# ---------------------------------------------------------------------------
# loss and gradients


def _ce_and_grad(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray | None):
    """Weighted mean NLL and its gradient w.r.t. logits, computed in float64."""
    lg = logits.astype(np.float64).reshape(-1, logits.shape[-1])
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.ones(len(t)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise DataError("loss weights sum to zero")
    logp = log_softmax(lg, axis=-1)
    nll = -logp[np.arange(len(t)), t]
    loss = float(np.dot(w, nll) / total)
    grad = np.exp(logp)
    grad[np.arange(len(t)), t] -= 1.0
    grad *= (w / total)[:, None]
    return loss, grad.reshape(logits.shape)


def cross_entropy(logits: np.ndarray, targets, weights=None) -> float:
    """Mean negative log-probability of ``targets`` under softmax(``logits``)."""
    return _ce_and_grad(logits, targets, weights)[0]


def loss_and_grads(model: TransformerModel, batch: Batch,
                   aux_coef: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    logits, _, cache = forward_batch(model, batch.inputs, keep_cache=True, aux_coef=aux_coef)
    loss, dlogits = _ce_and_grad(logits, batch.targets, batch.loss_weights)
    grads = backward_batch(model, cache, dlogits, aux_coef)
    return loss + cache.aux_loss, grads


def backward(model: TransformerModel, batch: Batch, aux_coef: float = 0.0) -> dict[str, np.ndarray]:
    """Analytic gradient of the batch loss for every parameter (the Top-K selection held fixed)."""
    return loss_and_grads(model, batch, aux_coef)[1]


def batch_loss(model: TransformerModel, batch: Batch, aux_coef: float = 0.0) -> float:
    logits, _, cache = forward_batch(model, batch.inputs, keep_cache=bool(aux_coef), aux_coef=aux_coef)
    loss = cross_entropy(logits, batch.targets, batch.loss_weights)
    return loss + cache.aux_loss if aux_coef else loss


def min_router_gap(model: TransformerModel, batch: Batch) -> float:
    """Smallest gap between the K-th and (K+1)-th router logit over all tokens and layers."""
    k, n = model.config.top_k_experts, model.config.num_experts
    if k == n:
        return math.inf
    _, _, cache = forward_batch(model, batch.inputs, keep_cache=True)
    gap = math.inf
    for layer_cache in cache.layers:
        srt = -np.sort(-layer_cache[-1].logits, axis=1)
        gap = min(gap, float(np.min(srt[:, k - 1] - srt[:, k])))
    return gap


@dataclass
class GradCheckResult:
    rel_error: dict[str, float]
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.rel_error, key=self.rel_error.get)
        return name, self.rel_error[name]


def gradient_check(model: TransformerModel, batch: Batch, step: float = 1e-4,
                   max_entries: int | None = None, aux_coef: float = 0.0,
                   seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients with central finite differences.

    The model is promoted to float64. For each parameter tensor the check
    covers all entries, or ``max_entries`` randomly chosen ones, and reports
    ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` (0 when both
    vanish).
    """
    model = model.astype(np.float64)
    grads = backward(model, batch, aux_coef)
    rng = np.random.default_rng(seed)
    rel, checked = {}, {}
    for name, _ in parameter_shapes(model.config):
        p = model.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = batch_loss(model, batch, aux_coef)
            flat[i] = orig - step
            down = batch_loss(model, batch, aux_coef)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
        analytic = grads[name].reshape(-1)[idx]
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        rel[name] = float(np.linalg.norm(analytic - numeric) / scale) if scale > 1e-12 else 0.0
        checked[name] = len(idx)
    return GradCheckResult(rel, checked)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(model: TransformerModel, grads: dict[str, np.ndarray], state: AdamState,
              config: TrainConfig, lr: float | None = None) -> tuple[TransformerModel, AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and state."""
    lr = config.lr if lr is None else lr
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    params, m_new, v_new = {}, {}, {}
    for name, p in model.params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        params[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)
        m_new[name] = m.astype(p.dtype)
        v_new[name] = v.astype(p.dtype)
    return TransformerModel(model.config, params), AdamState(m_new, v_new, t)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}


@dataclass
class TrainResult:
    model: TransformerModel
    losses: list[float]
    state: AdamState


def train(model: TransformerModel, corpus, config: TrainConfig,
          callback: Callable[[int, float, TransformerModel], None] | None = None) -> TrainResult:
    """Run ``config.steps`` Adam steps on batches drawn from ``corpus``.

    ``corpus`` is a ``BatchSource`` or a flat token sequence (sampled in
    windows of ``config.seq_len``). Batch sampling uses a generator derived
    from ``config.seed`` alone, so the run is reproducible.
    """
    source = corpus if hasattr(corpus, "sample") else TokenStream(np.asarray(corpus), config.seq_len)
    rng = make_rng(config.seed, STREAM_DATA)
    state = AdamState.zeros_like(model.params)
    losses: list[float] = []
    for step in range(config.steps):
        batch = source.sample(rng, config.batch_size)
        try:
            loss, grads = loss_and_grads(model, batch, config.aux_coef)
        except NumericError as exc:
            raise TrainingError(f"non-finite values: {exc}", step) from exc
        if not math.isfinite(loss):
            raise TrainingError("loss diverged", step)
        if config.grad_clip:
            grads = _clip(grads, config.grad_clip)
        model, state = adam_step(model, grads, state, config, config.lr_at(step))
        losses.append(loss)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.4f", step, loss)
        if callback is not None:
            callback(step, loss, model)
    return TrainResult(model, losses, state)


def format_loss_curve(losses: list[float]) -> str:
    return "".join(f"{i}\t{loss!r}\n" for i, loss in enumerate(losses))


def write_loss_curve(losses: list[float], path: str | os.PathLike) -> None:
    atomic_write_text(path, "step\tloss\n" + format_loss_curve(losses))
