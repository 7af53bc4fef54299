"""Acceptance suite: one test per criterion, each ending in a PASS/FAIL verdict line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdicts as they
happen; they are also collected in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from smoe.checkpoint import load_checkpoint, save_checkpoint
from smoe.cli import main
from smoe.ep_sim import CacheConfig, Placement, simulate_cache, simulate_ep
from smoe.evaluation import PASSKEY_TOY, passkey_eval, periodic_corpus, perplexity_vs_context, train_passkey
from smoe.model import ModelConfig, count_parameters, forward_batch, init_model, trace_from_routes
from smoe.moe import ExpertWeights, MoELayer, RouterWeights, gate, moe_forward_dense, moe_forward_grouped
from smoe.routing import (expert_distribution, layer_profile, planted_trace, random_baseline, random_trace,
                          repetition_rate, shuffle_trace)
from smoe.trace import concat_traces, read_trace, write_trace
from smoe.train import Batch, TokenStream, TrainConfig, backward, gradient_check, min_router_gap, train

PUBLISHED = ModelConfig(dim=4096, n_layers=32, head_dim=128, hidden_dim=14336, n_heads=32, n_kv_heads=8,
                        context_len=32768, vocab_size=32000, num_experts=8, top_k_experts=2)
GRAD_TOY = ModelConfig(dim=8, n_layers=2, head_dim=4, hidden_dim=16, n_heads=2, n_kv_heads=1,
                       context_len=16, vocab_size=16, num_experts=4, top_k_experts=2)


def two_sig(n: int) -> str:
    return f"{round(n, -(len(str(n)) - 2)) // 10 ** 9}B"


# ---------------------------------------------------------------------------


@pytest.mark.criterion(1)
def test_parameter_accounting(verdict):
    # hand tally, written down independently of count_parameters
    d, h, v, n, k = 4096, 14336, 32000, 8, 2
    kv = 8 * 128
    attention = d * d + d * kv + d * kv + d * d
    norms = 2 * d
    router = d * n
    expert = 3 * d * h
    shared = 32 * (attention + norms + router) + 2 * v * d + d
    sparse_hand = shared + 32 * n * expert
    active_hand = shared + 32 * k * expert

    sparse = count_parameters(PUBLISHED, "sparse")
    active = count_parameters(PUBLISHED, "active")
    ok = (sparse, active) == (sparse_hand, active_hand) and (two_sig(sparse), two_sig(active)) == ("47B", "13B")
    verdict(1, "parameter accounting", ok, f"sparse={sparse} active={active} -> {two_sig(sparse)}/{two_sig(active)}")


@pytest.mark.criterion(2)
def test_gating_identity(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    structural = True
    for _ in range(1000):
        x = rng.standard_normal(32)
        w = rng.standard_normal((32, 8))
        g = gate(x, RouterWeights(w), 2).as_dense(8)
        logits = x @ w
        # oracle: restricted softmax over the two largest logits, computed with math.exp
        top = sorted(range(8), key=lambda i: (-logits[i], i))[:2]
        z = sum(math.exp(logits[i] - logits[top[0]]) for i in top)
        expected = np.zeros(8)
        for i in top:
            expected[i] = math.exp(logits[i] - logits[top[0]]) / z
        worst = max(worst, float(np.max(np.abs(g - expected))))
        structural &= np.count_nonzero(g) == 2 and abs(g.sum() - 1.0) <= 1e-12
    verdict(2, "gating identity", worst <= 1e-6 and structural, f"1000 draws, max dev {worst:.2e}")


@pytest.mark.criterion(3)
def test_dense_grouped_equivalence(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for trial in range(100):
        dim, hidden = int(rng.integers(4, 33)), int(rng.integers(4, 65))
        n = int(rng.integers(1, 9))
        k = int(rng.integers(1, n + 1))
        experts = [ExpertWeights(*(rng.standard_normal(s).astype(np.float32) * 0.3
                                   for s in ((dim, hidden), (dim, hidden), (hidden, dim))))
                   for _ in range(n)]
        layer = MoELayer(RouterWeights(rng.standard_normal((dim, n)).astype(np.float32)), experts, k)
        tokens = 512 if trial % 10 == 0 else int(rng.integers(1, 513))
        x = rng.standard_normal((tokens, dim)).astype(np.float32)
        dense, _ = moe_forward_dense(x, layer)
        grouped = moe_forward_grouped(x, layer)
        worst = max(worst, float(np.max(np.abs(dense - grouped))))
    verdict(3, "dense/grouped equivalence", worst <= 1e-5, f"100 layers, max abs dev {worst:.2e}")


def _scaled(cfg, seed):
    model = init_model(cfg, seed=seed, dtype=np.float64)
    for p in model.params.values():
        if p.ndim == 2:
            p *= 10.0
    return model


def _batch(cfg, seed, batch=2, seq=6):
    rng = np.random.default_rng(seed)
    return Batch.from_sequences(rng.integers(0, cfg.vocab_size, size=(batch, seq + 1)))


@pytest.mark.criterion(4)
def test_gradient_correctness(verdict):
    seeds = [s for s in range(60) if min_router_gap(_scaled(GRAD_TOY, s), _batch(GRAD_TOY, s)) > 1e-3][:12]
    results = []
    for i, s in enumerate(seeds):
        # the first two seeds check every entry of every tensor; the rest sample
        full = i < 2
        res = gradient_check(_scaled(GRAD_TOY, s), _batch(GRAD_TOY, s), max_entries=None if full else 8, seed=s)
        results.append(res.worst[1])

    # idle experts: a one-token batch reaches K of the 4 experts in each layer
    model = _scaled(GRAD_TOY, 0)
    batch = _batch(GRAD_TOY, 0, batch=1, seq=1)
    _, routes, _ = forward_batch(model, batch.inputs)
    grads = backward(model, batch)
    idle_zero = True
    idle = 0
    for layer, (experts, _) in enumerate(routes):
        for e in set(range(4)) - set(experts.reshape(-1).tolist()):
            idle += 1
            idle_zero &= all(np.all(grads[f"layers.{layer}.experts.{e}.{w}"] == 0) for w in ("w1", "w3", "w2"))
    ok = len(seeds) >= 10 and max(results) <= 1e-5 and idle_zero and idle == 4
    verdict(4, "gradient correctness", ok,
            f"{len(seeds)} tie-free seeds, worst rel err {max(results):.1e}, {idle} idle experts all zero={idle_zero}")


@pytest.mark.criterion(5)
def test_random_router_baselines(verdict):
    cfg = ModelConfig(dim=8, n_layers=1, head_dim=4, hidden_dim=16, n_heads=2, n_kv_heads=1,
                      context_len=1000, vocab_size=258, num_experts=8, top_k_experts=2)
    model = init_model(cfg, seed=5)
    rng = np.random.default_rng(5)
    routing_rng = np.random.default_rng(55)
    traces = []
    for doc in range(100):
        ids = rng.integers(0, 256, size=(1, 1000))
        _, routes, _ = forward_batch(model, ids, routing_rng=routing_rng)
        traces.append(trace_from_routes(routes, cfg, np.full(1000, doc)))
    trace = concat_traces(traces)
    first = repetition_rate(trace, 0, "first")
    either = repetition_rate(trace, 0, "either")
    dist = expert_distribution(trace, 0, "either")
    exact = random_baseline(8, 2, "first") == 0.125 and random_baseline(8, 2, "either") == 1 - 15 / 28
    ok = (abs(first - 0.125) <= 0.01 and abs(either - 13 / 28) <= 0.01 and exact
          and np.all(np.abs(dist - 0.125) <= 0.01))
    verdict(5, "random-router baselines", ok,
            f"first={first:.4f} either={either:.4f} dist in [{dist.min():.4f}, {dist.max():.4f}]")


@pytest.mark.criterion(6)
def test_passkey_retrieval(verdict):
    t0 = time.perf_counter()
    result = train_passkey(init_model(PASSKEY_TOY, seed=0))
    grid = passkey_eval(result.model, contexts=(64, 128, 256), trials=20)
    elapsed = time.perf_counter() - t0
    print(grid.to_tsv())
    ok = grid.min() >= 0.95 and elapsed <= 900
    verdict(6, "passkey retrieval", ok, f"min cell {grid.min():.2f}, {elapsed:.0f} s")


@pytest.mark.criterion(7)
def test_perplexity_vs_window(verdict):
    period = 8
    cfg = ModelConfig(dim=32, n_layers=2, head_dim=8, hidden_dim=64, n_heads=4, n_kv_heads=2,
                      context_len=64, vocab_size=128, num_experts=4, top_k_experts=2)
    t0 = time.perf_counter()
    corpus = periodic_corpus(np.random.default_rng(7), period=period, doc_len=32, docs=4000)
    result = train(init_model(cfg, seed=7), TokenStream(corpus, 32),
                   TrainConfig(lr=3e-3, steps=600, batch_size=16, seq_len=32, warmup=50, schedule="cosine",
                               grad_clip=1.0, seed=7))
    held_out = periodic_corpus(np.random.default_rng(70), period=period, doc_len=32, docs=300)
    rows = dict(perplexity_vs_context(result.model, held_out, [4, 6, 16, 32]))
    elapsed = time.perf_counter() - t0

    uniform = perplexity_vs_context(lambda x: np.zeros(x.shape + (cfg.vocab_size,)), held_out, [4, 16])
    uniform_ok = all(abs(p - cfg.vocab_size) <= 1e-6 for _, p in uniform)
    long_ = max(rows[16], rows[32])
    short = min(rows[4], rows[6])
    ok = long_ < short and uniform_ok and elapsed <= 600
    table = " ".join(f"s={s}:{p:.2f}" for s, p in rows.items())
    verdict(7, "perplexity vs window", ok, f"{table}, uniform=vocab {uniform_ok}, {elapsed:.0f} s")


@pytest.mark.criterion(8)
def test_planted_repetition_recovery(verdict):
    planted = {0: 0.14, 15: 0.28, 31: 0.23}
    trace = planted_trace(np.random.default_rng(8), 100_000, list(planted.values()), layers=list(planted),
                          n_layers=32)
    profile = layer_profile(trace)
    recovered = dict(zip(profile.layers, profile.first))
    errors = [abs(recovered[layer] - rate) for layer, rate in planted.items()]

    # either >= first on a spread of traces: planted, random, and a model's own routing
    others = [random_trace(np.random.default_rng(s), 5000, n=n, k=k, n_layers=2, doc_len=100)
              for s, (n, k) in enumerate([(8, 2), (4, 2), (8, 1), (16, 4)])]
    model = init_model(GRAD_TOY.replace(context_len=64), seed=8)
    _, routes, _ = forward_batch(model, np.random.default_rng(8).integers(0, 16, size=(1, 64)))
    others.append(trace_from_routes(routes, model.config, np.zeros(64, dtype=np.int64)))
    ordered = all(repetition_rate(t, layer, "either") >= repetition_rate(t, layer, "first")
                  for t in [trace] + others for layer in np.unique(t.layer))
    ok = max(errors) <= 0.005 and ordered
    got = " ".join(f"L{layer}={recovered[layer]:.4f}" for layer in planted)
    verdict(8, "planted repetition recovery", ok, f"{got}, max err {max(errors):.4f}, either>=first {ordered}")


@pytest.mark.criterion(9)
def test_ep_and_cache(verdict):
    rng = np.random.default_rng(9)
    uniform = random_trace(rng, 50_000, n=8, k=2)  # 100k assignments
    report = simulate_ep(uniform, Placement.contiguous(8, 8), 0)
    conserved = report.assignments == 100_000
    for d in (1, 2, 4):
        conserved &= simulate_ep(uniform, Placement.contiguous(8, d), 0).assignments == 100_000

    local = planted_trace(np.random.default_rng(90), 20_000, [0.9], n=8, k=1)
    hit = simulate_cache(local, 0, CacheConfig(2))
    shuffled = simulate_cache(shuffle_trace(local, 9), 0, CacheConfig(2))
    ok = conserved and report.imbalance <= 1.1 and hit - shuffled >= 0.3
    verdict(9, "EP load and expert cache", ok,
            f"imbalance {report.imbalance:.4f}, LRU@2 {hit:.3f} vs shuffled {shuffled:.3f}")


@pytest.mark.criterion(10)
def test_round_trips_and_cli_determinism(verdict, tmp_path):
    model = init_model(GRAD_TOY, seed=10)
    save_checkpoint(model, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    ckpt_ok = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    trace = random_trace(np.random.default_rng(10), 500, n_layers=3, doc_len=50)
    trace.weights[:] = np.random.default_rng(11).random(trace.weights.shape)
    write_trace(trace, tmp_path / "a.trace")
    write_trace(read_trace(tmp_path / "a.trace"), tmp_path / "b.trace")
    trace_ok = (tmp_path / "a.trace").read_bytes() == (tmp_path / "b.trace").read_bytes()

    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(GRAD_TOY.replace(context_len=80, vocab_size=258, num_experts=8).to_text())
    runs = {
        "train": ["train", "--config", str(cfg), "--task", "periodic", "--steps", "3", "--batch-size", "2",
                  "--seq-len", "16"],
        "trace": ["trace", "--config", str(cfg), "--random-tokens", "200"],
        "passkey": ["passkey-eval", "--config", str(cfg), "--contexts", "64", "--positions", "0.5",
                    "--trials", "2"],
    }
    cli_ok = True
    for name, argv in runs.items():
        outs = []
        for tag in "xy":
            out = tmp_path / f"{name}.{tag}"
            assert main(argv + ["--seed", "3", "--out", str(out)]) == 0
            outs.append(out.read_bytes())
        cli_ok &= outs[0] == outs[1]
    verdict(10, "byte round trips and CLI determinism", ckpt_ok and trace_ok and cli_ok,
            f"checkpoint {ckpt_ok}, trace {trace_ok}, cli {cli_ok}")
