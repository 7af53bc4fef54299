"""Routing statistics over recorded traces.

* ``expert_distribution``: share of assignment events per expert, for first,
  second, or either choice. Normalised by events, so uniform routing gives
  1/n per expert.
* ``repetition_rate``: how often token i+1 reuses token i's expert, either
  the same first choice or any overlap of the chosen sets. Pairs never cross
  a document boundary.
* ``random_baseline``: the same quantities under uniformly random routing,
  1/n and 1 - C(n-K, K) / C(n, K).
* ``colorize_tokens``: text with each token coloured by its first-choice
  expert, as ANSI escapes or HTML.
"""

from __future__ import annotations

import html
import re
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import ConfigError, InputError, NoDataError
from .io_util import STREAM_SHUFFLE, make_rng
from .trace import RoutingTrace

MODES = ("first", "second", "either")


def _check_mode(mode: str, k: int, allowed=MODES) -> None:
    if mode not in allowed:
        raise ConfigError(f"mode must be one of {allowed}, got {mode!r}")
    if mode == "second" and k < 2:
        raise ConfigError("mode 'second' needs top_k >= 2")


def expert_distribution(trace: RoutingTrace, layer: int, mode: str = "either") -> np.ndarray:
    _check_mode(mode, trace.top_k)
    if not len(trace):
        raise NoDataError("no data: empty trace")
    _, _, experts, _ = trace.layer_view(layer)
    if mode == "first":
        events = experts[:, 0]
    elif mode == "second":
        events = experts[:, 1]
    else:
        events = experts.reshape(-1)
    counts = np.bincount(events, minlength=trace.num_experts)
    return counts / counts.sum()


def _consecutive_pairs(doc_ids: np.ndarray, token_index: np.ndarray) -> np.ndarray:
    """Boolean mask over rows i (i < len-1) where row i+1 is the next token of the same document."""
    return (doc_ids[1:] == doc_ids[:-1]) & (token_index[1:] == token_index[:-1] + 1)


def repetition_counts(trace: RoutingTrace, layer: int, mode: str = "first") -> tuple[int, int]:
    """(repeats, pairs) so results from shards can be merged exactly."""
    _check_mode(mode, trace.top_k, ("first", "either"))
    if not len(trace):
        raise NoDataError("no data: empty trace")
    docs, pos, experts, _ = trace.layer_view(layer)
    valid = _consecutive_pairs(docs, pos)
    if mode == "first":
        same = experts[1:, 0] == experts[:-1, 0]
    else:
        a, b = experts[:-1], experts[1:]
        same = np.any(a[:, :, None] == b[:, None, :], axis=(1, 2))
    return int(np.sum(same & valid)), int(np.sum(valid))


def repetition_rate(trace: RoutingTrace, layer: int, mode: str = "first") -> float:
    repeats, pairs = repetition_counts(trace, layer, mode)
    if pairs == 0:
        raise NoDataError("no data: no consecutive token pairs in this layer")
    return repeats / pairs


def random_baseline(n: int, k: int, mode: str = "first") -> float:
    """Expected repetition rate when every token picks K experts uniformly at random."""
    if not 1 <= k <= n:
        raise ConfigError(f"need 1 <= k <= n, got n={n}, k={k}")
    if mode == "first":
        return 1.0 / n
    if mode == "either":
        return 1.0 - comb(n - k, k) / comb(n, k)
    raise ConfigError(f"mode must be 'first' or 'either', got {mode!r}")


@dataclass
class LayerProfile:
    layers: list[int]
    first: list[float]
    either: list[float]
    baseline_first: float
    baseline_either: float

    def to_tsv(self) -> str:
        rows = ["layer\tfirst\teither\tbaseline_first\tbaseline_either"]
        for layer, f, e in zip(self.layers, self.first, self.either):
            rows.append(f"{layer}\t{f:.6f}\t{e:.6f}\t{self.baseline_first:.6f}\t{self.baseline_either:.6f}")
        return "\n".join(rows) + "\n"


def layer_profile(trace: RoutingTrace) -> LayerProfile:
    if not len(trace):
        raise NoDataError("no data: empty trace")
    layers = sorted(int(x) for x in np.unique(trace.layer))
    return LayerProfile(
        layers=layers,
        first=[repetition_rate(trace, layer, "first") for layer in layers],
        either=[repetition_rate(trace, layer, "either") for layer in layers],
        baseline_first=random_baseline(trace.num_experts, trace.top_k, "first"),
        baseline_either=random_baseline(trace.num_experts, trace.top_k, "either"),
    )


def distribution_table(trace: RoutingTrace) -> str:
    """Per-layer, per-mode expert proportions as tab-separated text."""
    modes = ["first", "either"] + (["second"] if trace.top_k >= 2 else [])
    head = "layer\tmode\t" + "\t".join(f"expert_{i}" for i in range(trace.num_experts)) + "\tuniform"
    rows = [head]
    for layer in sorted(int(x) for x in np.unique(trace.layer)):
        for mode in modes:
            dist = expert_distribution(trace, layer, mode)
            rows.append(f"{layer}\t{mode}\t" + "\t".join(f"{p:.6f}" for p in dist)
                        + f"\t{1 / trace.num_experts:.6f}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# synthetic traces


def random_trace(rng: np.random.Generator, tokens: int, n: int = 8, k: int = 2, n_layers: int = 1,
                 doc_len: int | None = None) -> RoutingTrace:
    """Uniformly random Top-K routing: every token draws a random ordered K-subset."""
    keys = rng.random((n_layers, tokens, n))
    experts = np.argsort(keys, axis=-1)[..., :k]
    doc_ids = None if doc_len is None else np.arange(tokens) // doc_len
    return RoutingTrace.from_layer_arrays(experts, doc_ids=doc_ids, num_experts=n)


def planted_trace(rng: np.random.Generator, tokens: int, rates, n: int = 8, k: int = 2,
                  layers=None, n_layers: int | None = None) -> RoutingTrace:
    """Trace whose first-choice repetition rate at ``layers[i]`` is ``rates[i]`` in expectation.

    ``layers`` defaults to ``0 .. len(rates) - 1``. The first choice is kept
    from the previous token with probability ``q = (r - 1/n) / (1 - 1/n)``
    and otherwise redrawn uniformly, so the repeat indicators are i.i.d.
    Bernoulli(r). The remaining K-1 choices are drawn uniformly from the
    other experts.
    """
    layers = list(range(len(rates))) if layers is None else [int(x) for x in layers]
    if len(layers) != len(rates) or layers != sorted(set(layers)):
        raise ConfigError("layers must be increasing and match rates one to one")
    planted = []
    for r in rates:
        if not 1.0 / n <= r <= 1.0:
            raise ConfigError(f"planted rate {r} must lie in [1/n, 1]")
        q = (r - 1.0 / n) / (1.0 - 1.0 / n)
        keep = rng.random(tokens) < q
        fresh = rng.integers(0, n, size=tokens)
        first = np.empty(tokens, dtype=np.int64)
        first[0] = fresh[0]
        for t in range(1, tokens):
            first[t] = first[t - 1] if keep[t] else fresh[t]
        keys = rng.random((tokens, n))
        keys[np.arange(tokens), first] = -1.0  # forces first to sort to the front
        planted.append(np.argsort(keys, axis=-1)[:, :k])
    base = RoutingTrace.from_layer_arrays(np.stack(planted), num_experts=n)
    return RoutingTrace(n_layers or layers[-1] + 1, n, k, base.doc_ids, base.token_index,
                        np.asarray(layers)[base.layer], base.experts, base.weights)


def shuffle_trace(trace: RoutingTrace, seed: int) -> RoutingTrace:
    """Permute token order within each document (same permutation for every layer)."""
    rng = make_rng(seed, STREAM_SHUFFLE)
    docs = trace.doc_ids
    pos = trace.token_index
    new_pos = pos.copy()
    for doc in np.unique(docs):
        sel = docs == doc
        tokens = np.unique(pos[sel])
        perm = rng.permutation(len(tokens))
        mapping = np.empty(tokens.max() + 1, dtype=np.int64)
        mapping[tokens] = tokens[perm]
        new_pos[sel] = mapping[pos[sel]]
    return RoutingTrace(trace.n_layers, trace.num_experts, trace.top_k, docs, new_pos, trace.layer,
                        trace.experts, trace.weights, dict(trace.domains))


# ---------------------------------------------------------------------------
# coloured text


PALETTE_ANSI = [196, 33, 34, 214, 129, 37, 208, 244, 160, 27, 28, 178, 93, 31, 202, 240]
PALETTE_HTML = ["#ff9aa2", "#a0c4ff", "#b9fbc0", "#ffd6a5", "#cdb4db", "#9bf6ff", "#ffc09f", "#d3d3d3",
                "#f4978e", "#8eecf5", "#caffbf", "#fdffb6", "#bdb2ff", "#98f5e1", "#ffadad", "#e4c1f9"]

_ANSI_RE = re.compile(r"\x1b\[[0-9;]*m")


@dataclass
class ColoredDocument:
    """Runs of consecutive tokens that share a first-choice expert."""

    spans: list[tuple[int, str]]  # (expert_id, text)

    @property
    def text(self) -> str:
        return "".join(t for _, t in self.spans)

    def to_ansi(self) -> str:
        out = []
        for expert, text in self.spans:
            color = PALETTE_ANSI[expert % len(PALETTE_ANSI)]
            out.append(f"\x1b[48;5;{color}m{text}\x1b[0m")
        return "".join(out)

    def to_html(self, title: str = "routing") -> str:
        body = "".join(
            f'<span class="e{e}" title="expert {e}" style="background:{PALETTE_HTML[e % len(PALETTE_HTML)]}">'
            f"{html.escape(t)}</span>" for e, t in self.spans)
        return ("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
                f"<title>{html.escape(title)}</title></head>\n"
                f'<body><pre style="white-space:pre-wrap">{body}</pre></body></html>\n')


def strip_ansi(text: str) -> str:
    return _ANSI_RE.sub("", text)


def strip_html(page: str) -> str:
    """Recover the plain text from ``ColoredDocument.to_html`` output."""
    m = re.search(r"<pre[^>]*>(.*)</pre>", page, flags=re.S)
    inner = m.group(1) if m else page
    return html.unescape(re.sub(r"<[^>]+>", "", inner))


def colorize_tokens(trace: RoutingTrace, layer: int, tokens: list[str], doc_id: int | None = None) -> ColoredDocument:
    docs, _, experts, _ = trace.layer_view(layer)
    if doc_id is None:
        doc_id = int(docs[0])
    first = experts[docs == doc_id, 0]
    if len(first) != len(tokens):
        raise InputError(f"{len(tokens)} tokens given but the trace has {len(first)} for document {doc_id}")
    spans: list[tuple[int, str]] = []
    for expert, tok in zip(first.tolist(), tokens):
        if spans and spans[-1][0] == expert:
            spans[-1] = (expert, spans[-1][1] + tok)
        else:
            spans.append((expert, tok))
    return ColoredDocument(spans)
