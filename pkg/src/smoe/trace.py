"""Routing traces: the per-(token, layer) Top-K decisions recorded by a forward pass.

On-disk format (UTF-8 text, one record per line, tab separated)::

    # smoe-trace n_layers=<L> num_experts=<n> top_k=<K>
    # domain <doc_id> <label>          (optional, any number)
    doc_id  token_index  layer  rank  expert_id  weight

``rank`` is 1-based (1 = first choice). Records are written sorted by
(doc_id, token_index, layer, rank); weights use the shortest repr that
round-trips a float64, so read -> write reproduces the file byte for byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, NoDataError
from .io_util import atomic_write_text

MAGIC = "# smoe-trace"


@dataclass
class RoutingTrace:
    n_layers: int
    num_experts: int
    top_k: int
    doc_ids: np.ndarray      # [R]
    token_index: np.ndarray  # [R]
    layer: np.ndarray        # [R]
    experts: np.ndarray      # [R, K], rank order
    weights: np.ndarray      # [R, K]
    domains: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.doc_ids = np.asarray(self.doc_ids, dtype=np.int64)
        self.token_index = np.asarray(self.token_index, dtype=np.int64)
        self.layer = np.asarray(self.layer, dtype=np.int64)
        self.experts = np.asarray(self.experts, dtype=np.int64).reshape(len(self.doc_ids), self.top_k)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(len(self.doc_ids), self.top_k)
        order = np.lexsort((self.layer, self.token_index, self.doc_ids))
        if np.any(order != np.arange(len(order))):
            for name in ("doc_ids", "token_index", "layer", "experts", "weights"):
                setattr(self, name, getattr(self, name)[order])
        if self.experts.size and (self.experts.min() < 0 or self.experts.max() >= self.num_experts):
            raise InputError("expert id out of range")
        if self.layer.size and (self.layer.min() < 0 or self.layer.max() >= self.n_layers):
            raise InputError("layer index out of range")

    def __len__(self) -> int:
        return len(self.doc_ids)

    @property
    def num_tokens(self) -> int:
        """Number of distinct (doc, token) positions."""
        if not len(self):
            return 0
        return int(np.sum(self.layer == self.layer.min()))

    def layer_view(self, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """``(doc_ids, token_index, experts, weights)`` for one layer, in token order."""
        if not 0 <= layer < self.n_layers:
            raise InputError(f"layer {layer} out of range for a {self.n_layers}-layer trace")
        sel = self.layer == layer
        if not np.any(sel):
            raise NoDataError(f"no records for layer {layer}")
        return self.doc_ids[sel], self.token_index[sel], self.experts[sel], self.weights[sel]

    @classmethod
    def from_layer_arrays(cls, experts: np.ndarray, weights: np.ndarray | None = None,
                          doc_ids: np.ndarray | None = None, num_experts: int | None = None,
                          domains: dict[int, str] | None = None) -> "RoutingTrace":
        """Build a trace from [n_layers, tokens, K] expert (and weight) arrays.

        Token indices restart at 0 for every document in ``doc_ids`` (one id
        per token, default: a single document).
        """
        experts = np.asarray(experts, dtype=np.int64)
        if experts.ndim == 2:
            experts = experts[None]
        n_layers, tokens, k = experts.shape
        if weights is None:
            weights = np.full(experts.shape, 1.0 / k)
        weights = np.asarray(weights, dtype=np.float64).reshape(experts.shape)
        if doc_ids is None:
            doc_ids = np.zeros(tokens, dtype=np.int64)
        doc_ids = np.asarray(doc_ids, dtype=np.int64)
        if doc_ids.shape != (tokens,):
            raise InputError("doc_ids must have one entry per token")
        starts = np.r_[0, np.flatnonzero(np.diff(doc_ids)) + 1]
        pos = np.arange(tokens) - np.repeat(starts, np.diff(np.r_[starts, tokens]))
        if num_experts is None:
            num_experts = int(experts.max()) + 1 if experts.size else 1
        return cls(
            n_layers=n_layers, num_experts=num_experts, top_k=k,
            doc_ids=np.tile(doc_ids, n_layers),
            token_index=np.tile(pos, n_layers),
            layer=np.repeat(np.arange(n_layers), tokens),
            experts=experts.reshape(-1, k), weights=weights.reshape(-1, k),
            domains=dict(domains or {}),
        )

    def with_doc_offset(self, offset: int) -> "RoutingTrace":
        return RoutingTrace(self.n_layers, self.num_experts, self.top_k, self.doc_ids + offset,
                            self.token_index, self.layer, self.experts, self.weights,
                            {d + offset: v for d, v in self.domains.items()})


def concat_traces(traces: list[RoutingTrace]) -> RoutingTrace:
    if not traces:
        raise NoDataError("nothing to concatenate")
    head = traces[0]
    for t in traces[1:]:
        if (t.n_layers, t.num_experts, t.top_k) != (head.n_layers, head.num_experts, head.top_k):
            raise InputError("traces disagree on (n_layers, num_experts, top_k)")
    domains: dict[int, str] = {}
    for t in traces:
        domains.update(t.domains)
    return RoutingTrace(
        head.n_layers, head.num_experts, head.top_k,
        np.concatenate([t.doc_ids for t in traces]),
        np.concatenate([t.token_index for t in traces]),
        np.concatenate([t.layer for t in traces]),
        np.concatenate([t.experts for t in traces]),
        np.concatenate([t.weights for t in traces]),
        domains,
    )


def format_trace(trace: RoutingTrace) -> str:
    lines = [f"{MAGIC} n_layers={trace.n_layers} num_experts={trace.num_experts} top_k={trace.top_k}"]
    for doc, label in sorted(trace.domains.items()):
        lines.append(f"# domain {doc} {label}")
    k = trace.top_k
    for i in range(len(trace)):
        head = f"{trace.doc_ids[i]}\t{trace.token_index[i]}\t{trace.layer[i]}\t"
        for r in range(k):
            lines.append(f"{head}{r + 1}\t{trace.experts[i, r]}\t{float(trace.weights[i, r])!r}")
    return "\n".join(lines) + "\n"


def write_trace(trace: RoutingTrace, path: str | os.PathLike) -> None:
    atomic_write_text(path, format_trace(trace))


def parse_trace(text: str) -> RoutingTrace:
    lines = text.splitlines()
    if not any(line.strip() for line in lines):
        raise NoDataError("no data: trace file is empty")
    if not lines[0].startswith(MAGIC):
        raise FormatError(f"not a routing trace: first line must start with {MAGIC!r}")
    try:
        fields = dict(tok.split("=", 1) for tok in lines[0][len(MAGIC):].split())
        n_layers = int(fields["n_layers"])
        num_experts = int(fields["num_experts"])
        top_k = int(fields["top_k"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad trace header: {lines[0]!r}") from exc
    domains: dict[int, str] = {}
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# domain "):
            _, _, doc, label = line.split(" ", 3)
            domains[int(doc)] = label
            continue
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"line {lineno}: expected 6 fields, got {len(parts)}")
        rows.append(parts)
    if not rows:
        raise NoDataError("no data: trace file has a header but no records")
    arr = np.array(rows, dtype=object)
    ints = arr[:, :5].astype(np.int64)
    w = arr[:, 5].astype(np.float64)
    if len(rows) % top_k:
        raise FormatError("record count is not a multiple of top_k")
    ints = ints.reshape(-1, top_k, 5)
    if np.any(ints[:, :, 3] != np.arange(1, top_k + 1)):
        raise FormatError("ranks must appear as 1..K consecutively for every (doc, token, layer)")
    return RoutingTrace(
        n_layers, num_experts, top_k,
        doc_ids=ints[:, 0, 0], token_index=ints[:, 0, 1], layer=ints[:, 0, 2],
        experts=ints[:, :, 4], weights=w.reshape(-1, top_k), domains=domains,
    )


def read_trace(path: str | os.PathLike) -> RoutingTrace:
    return parse_trace(Path(path).read_text(encoding="utf-8"))
