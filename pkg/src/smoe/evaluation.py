"""Long-context checks at desk scale: passkey retrieval and perplexity vs. window size.

Passkey prompt template (byte-level, ``<bos>`` first)::

    <bos>{filler prefix}the pass key is {KEY}. {filler suffix}What is it? the pass key is

and the expected continuation is ``{KEY}``. The prompt is exactly
``context_len`` tokens long; ``position`` in [0, 1] sets how much of the
filler goes before the key sentence. Filler is seeded pseudo-random English
made from a small word list that contains no digits and neither "pass" nor
"key", so the key string occurs exactly once in the prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tokenizer
from .errors import DataError, SpecError
from .io_util import STREAM_EVAL, make_rng
from .model import ModelConfig, TransformerModel, decode_greedy_batch, forward_batch
from .train import Batch, TrainConfig, TrainResult, cross_entropy, train

SENTINEL = "the pass key is {key}. "
QUESTION = "What is it? the pass key is "

DEFAULT_CONTEXTS = (64, 128, 256)
DEFAULT_POSITIONS = (0.1, 0.3, 0.5, 0.7, 0.9)

_SUBJECTS = ["The grass", "The sky", "The sun", "A river", "The old house", "My friend",
             "The little dog", "Every morning", "The garden", "A small bird", "The forest",
             "Our teacher", "The city", "That song", "The wind", "Her letter"]
_VERBS = ["is", "was", "seems", "looks", "feels", "became", "stays", "grew"]
_ADJS = ["green", "blue", "yellow", "quiet", "warm", "bright", "calm", "tall", "soft", "cold",
         "happy", "far away", "full of light", "very old", "strange", "slow"]
_TAILS = ["", "", "", " again", " today", " at night", " in spring", " as always"]


def filler_text(rng: np.random.Generator, length: int) -> str:
    """``length`` characters of digit-free pseudo-English."""
    parts: list[str] = []
    size = 0
    while size < length:
        s = (f"{_SUBJECTS[rng.integers(len(_SUBJECTS))]} {_VERBS[rng.integers(len(_VERBS))]} "
             f"{_ADJS[rng.integers(len(_ADJS))]}{_TAILS[rng.integers(len(_TAILS))]}. ")
        parts.append(s)
        size += len(s)
    return "".join(parts)[:length]


@dataclass(frozen=True)
class PasskeySpec:
    context_len: int
    position: float
    key_length: int = 5
    alphabet: str = "0123456789"
    filler_seed: int = 0

    def fixed_length(self) -> int:
        return 1 + len(SENTINEL.format(key="0" * self.key_length)) + len(QUESTION)

    def validate(self) -> None:
        if not 0.0 <= self.position <= 1.0:
            raise SpecError(f"position fraction must lie in [0, 1], got {self.position}")
        if self.key_length < 1 or not self.alphabet:
            raise SpecError("key_length and alphabet must be non-empty")
        if self.context_len < self.fixed_length():
            raise SpecError(f"context of {self.context_len} tokens cannot hold the key sentence and "
                            f"question ({self.fixed_length()} tokens)")


def generate_passkey_prompt(spec: PasskeySpec, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic (prompt ids, passkey ids) for ``spec`` and ``seed``."""
    spec.validate()
    rng = make_rng(spec.filler_seed, STREAM_EVAL, int(seed))
    key = "".join(spec.alphabet[i] for i in rng.integers(len(spec.alphabet), size=spec.key_length))
    filler = spec.context_len - spec.fixed_length()
    before = int(round(spec.position * filler))
    text = (filler_text(rng, before) + SENTINEL.format(key=key)
            + filler_text(rng, filler - before) + QUESTION)
    prompt = tokenizer.encode(text, bos=True)
    assert len(prompt) == spec.context_len
    return prompt, tokenizer.encode(key)


@dataclass
class RetrievalGrid:
    contexts: tuple[int, ...]
    positions: tuple[float, ...]
    accuracy: np.ndarray  # [len(contexts), len(positions)]
    trials: int

    def min(self) -> float:
        return float(self.accuracy.min())

    def to_tsv(self, seed: int | None = None) -> str:
        lines = []
        if seed is not None:
            lines.append(f"# seed={seed} trials={self.trials}")
        lines.append("context_len\t" + "\t".join(f"pos={p:g}" for p in self.positions))
        for c, row in zip(self.contexts, self.accuracy):
            lines.append(f"{c}\t" + "\t".join(f"{a:.4f}" for a in row))
        return "\n".join(lines) + "\n"


Decoder = Callable[[list[list[int]], int], list[list[int]]]


def _as_decoder(model) -> Decoder:
    if isinstance(model, TransformerModel):
        return lambda prompts, n: decode_greedy_batch(model, prompts, n)
    if callable(model):
        return model
    raise TypeError("model must be a TransformerModel or a batch decode callable")


def passkey_eval(model, contexts=DEFAULT_CONTEXTS, positions=DEFAULT_POSITIONS, trials: int = 20,
                 seed: int = 0, key_length: int = 5) -> RetrievalGrid:
    """Exact-match passkey accuracy for every (context length, position) cell.

    ``model`` is a ``TransformerModel`` or any callable
    ``(prompts, max_new) -> prompts with continuations`` (for stubs).
    """
    decode = _as_decoder(model)
    acc = np.zeros((len(contexts), len(positions)))
    for i, c in enumerate(contexts):
        for j, pos in enumerate(positions):
            spec = PasskeySpec(context_len=c, position=pos, key_length=key_length, filler_seed=seed)
            cases = [generate_passkey_prompt(spec, cell_seed(i, j, t)) for t in range(trials)]
            prompts = [p for p, _ in cases]
            outs = decode(prompts, key_length)
            hits = sum(list(out[len(p):len(p) + key_length]) == key
                       for out, (p, key) in zip(outs, cases))
            acc[i, j] = hits / trials
    return RetrievalGrid(tuple(contexts), tuple(positions), acc, trials)


def cell_seed(ci: int, pi: int, trial: int) -> int:
    # evaluation seeds live far from the training seeds used by PasskeyTask
    return 1_000_000_007 + 10_000 * (100 * ci + pi) + trial


@dataclass
class PasskeyTask:
    """Training batches of passkey prompts with loss on the answer tokens only.

    Each batch uses a single context length drawn from ``[min_context,
    max_context]`` so it can be processed as one array.
    """

    min_context: int = 64
    max_context: int = 256
    key_length: int = 5
    filler_seed: int = 0
    answer_weight: float = 1.0
    text_weight: float = 0.0

    def sample(self, rng: np.random.Generator, batch_size: int) -> Batch:
        c = int(rng.integers(self.min_context, self.max_context + 1))
        seqs, weights = [], []
        for _ in range(batch_size):
            spec = PasskeySpec(c, float(rng.random()), self.key_length, filler_seed=self.filler_seed)
            prompt, key = generate_passkey_prompt(spec, int(rng.integers(0, 1_000_000_000)))
            seqs.append(prompt + key)
            w = np.full(len(prompt) + len(key), self.text_weight)
            w[len(prompt):] = self.answer_weight
            weights.append(w)
        return Batch.from_sequences(np.array(seqs), np.array(weights))


# Toy retrieval model: two layers, four experts, Top-2. The context leaves
# room for a 256-token prompt plus the answer.
PASSKEY_TOY = ModelConfig(dim=64, n_layers=2, head_dim=16, hidden_dim=128, n_heads=4, n_kv_heads=2,
                          context_len=288, vocab_size=tokenizer.VOCAB_SIZE, num_experts=4, top_k_experts=2)


@dataclass(frozen=True)
class CurriculumStage:
    min_context: int
    max_context: int
    steps: int
    warmup: int = 0
    schedule: str = "constant"

    @classmethod
    def parse(cls, text: str) -> "CurriculumStage":
        """``"64-256:2000"`` -> contexts 64..256 for 2000 steps (cosine, 50 warmup)."""
        try:
            span, steps = text.split(":")
            lo, hi = span.split("-")
            return cls(int(lo), int(hi), int(steps), warmup=50, schedule="cosine")
        except ValueError:
            raise SpecError(f"stage must look like MIN-MAX:STEPS, got {text!r}") from None


# Short prompts first: the copy mechanism is found quickly when the key sits
# a few dozen tokens back; the second stage spreads it over every length.
DEFAULT_CURRICULUM = (
    CurriculumStage(56, 64, 400, warmup=100),
    CurriculumStage(64, 256, 1000, warmup=50, schedule="cosine"),
)


def train_passkey(model: TransformerModel, stages=DEFAULT_CURRICULUM, lr: float = 3e-3, batch_size: int = 16,
                  seed: int = 0, key_length: int = 5, text_weight: float = 0.02,
                  callback=None) -> TrainResult:
    """Train on passkey prompts stage by stage; Adam state restarts with each stage.

    Prompt tokens carry loss weight ``text_weight`` (answer tokens 1.0).
    The small language-modelling term matters: the filler repeats words, so
    predicting it rewards attending to "what followed this token last time",
    which is the same lookup the key copy needs. Without it the answer-only
    signal (five tokens per prompt) trains several times slower.
    """
    if text_weight < 0:
        raise SpecError(f"text_weight must be non-negative, got {text_weight}")
    losses: list[float] = []
    result = None
    for i, stage in enumerate(stages):
        # a training row is the prompt plus all but the last answer token
        if stage.max_context + key_length - 1 > model.config.context_len:
            raise SpecError(f"stage up to {stage.max_context} tokens plus a {key_length}-digit answer "
                            f"exceeds context_len={model.config.context_len}")
        task = PasskeyTask(stage.min_context, stage.max_context, key_length=key_length, text_weight=text_weight)
        config = TrainConfig(lr=lr, steps=stage.steps, batch_size=batch_size, seed=seed + i,
                             warmup=stage.warmup, schedule=stage.schedule, grad_clip=1.0)
        result = train(model, task, config, callback)
        model = result.model
        losses += result.losses
    if result is None:
        raise SpecError("curriculum has no stages")
    return TrainResult(model, losses, result.state)


# ---------------------------------------------------------------------------
# perplexity


def perplexity_vs_context(model, corpus, sizes) -> list[tuple[int, float]]:
    """Perplexity for each window size ``s``.

    The corpus is cut into non-overlapping input windows of ``s`` tokens;
    every window position predicts its successor using only the window
    prefix. Perplexity is exp of the mean cross-entropy over all scored
    positions. ``model`` may be a ``TransformerModel`` or a callable mapping
    a [batch, s] id array to [batch, s, vocab] logits.
    """
    tokens = np.asarray(corpus, dtype=np.int64)
    sizes = list(sizes)
    if len(tokens) < max(sizes) + 1:
        raise DataError(f"corpus of {len(tokens)} tokens is shorter than the largest window ({max(sizes) + 1})")
    if isinstance(model, TransformerModel):
        if max(sizes) > model.config.context_len:
            raise DataError("window larger than the model context")
        logits_fn = lambda x: forward_batch(model, x)[0]  # noqa: E731
    else:
        logits_fn = model
    out = []
    for s in sizes:
        n = (len(tokens) - 1) // s
        inputs = tokens[:n * s].reshape(n, s)
        targets = tokens[1:n * s + 1].reshape(n, s)
        total = 0.0
        for lo in range(0, n, 64):
            logits = logits_fn(inputs[lo:lo + 64])
            total += cross_entropy(logits, targets[lo:lo + 64]) * targets[lo:lo + 64].size
        out.append((s, math.exp(total / targets.size)))
    return out


def periodic_corpus(rng: np.random.Generator, period: int, doc_len: int, docs: int,
                    alphabet: int = 16, offset: int = 97) -> np.ndarray:
    """Concatenated documents, each one random ``period``-token pattern repeated.

    Tokens are ``offset + [0, alphabet)`` (lower-case letters by default).
    A fresh pattern per document means only in-context repetition, not
    memorisation, can lower the loss beyond the unigram level.
    """
    reps = -(-doc_len // period)
    parts = [np.tile(rng.integers(0, alphabet, size=period), reps)[:doc_len] for _ in range(docs)]
    return offset + np.concatenate(parts)


def format_ppl_table(rows: list[tuple[int, float]], seed: int | None = None) -> str:
    head = f"# seed={seed}\n" if seed is not None else ""
    return head + "window\tperplexity\n" + "".join(f"{s}\t{p!r}\n" for s, p in rows)

