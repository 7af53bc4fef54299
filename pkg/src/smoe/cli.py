"""Command-line entry point: ``smoe <command> [flags]``.

Exit status is 0 on success, 1 on runtime failure and 2 on usage, config or
input-format errors. Every command that writes ``--out`` also writes
``<out>.manifest.json`` with the resolved configuration and seed. Outputs are
written atomically and depend only on flags, config, seed and input files.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, tokenizer
from .checkpoint import load_checkpoint, save_checkpoint
from .ep_sim import Placement, cache_table, ep_table
from .errors import (ConfigError, DataError, FormatError, InputError, NoDataError, SmoeError,
                     SpecError)
from .evaluation import (DEFAULT_CONTEXTS, DEFAULT_CURRICULUM, DEFAULT_POSITIONS, CurriculumStage,
                         format_ppl_table, passkey_eval, periodic_corpus, perplexity_vs_context,
                         train_passkey)
from .io_util import STREAM_DATA, STREAM_ROUTING, atomic_write_text, make_rng
from .model import ModelConfig, count_parameters, decode_greedy, forward_batch, init_model, trace_from_routes
from .numerics import dtype_for
from .routing import distribution_table, layer_profile, shuffle_trace
from .trace import concat_traces, read_trace, write_trace
from .train import TrainConfig, format_loss_curve, train

log = logging.getLogger("smoe")

USAGE_ERRORS = (ConfigError, FormatError, NoDataError, InputError, SpecError, DataError)


def human(n: int) -> str:
    """Two significant figures with a B/M/K suffix."""
    for div, suffix in ((1e9, "B"), (1e6, "M"), (1e3, "K")):
        if n >= div:
            return f"{float(f'{n / div:.2g}'):g}{suffix}"
    return str(n)


def _write_outputs(args, text: str, extra: dict | None = None) -> None:
    if args.out:
        atomic_write_text(args.out, text)
        _write_manifest(args, [args.out], extra)
    else:
        sys.stdout.write(text)


def _write_manifest(args, outputs: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "artifact_version": __version__,
        "seed": args.seed,
        "precision": args.precision,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    for out in outputs:
        atomic_write_text(f"{out}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _load_model(args):
    dtype = dtype_for(args.precision)
    if getattr(args, "checkpoint", None):
        return load_checkpoint(args.checkpoint, dtype)
    if args.config:
        return init_model(ModelConfig.load(args.config), args.seed, dtype)
    raise ConfigError("either --checkpoint or --config is required")


# ---------------------------------------------------------------------------
# commands


def cmd_param_count(args) -> int:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = ModelConfig.load(args.config)
    sparse = count_parameters(cfg, "sparse", moe_only=args.moe_only)
    active = count_parameters(cfg, "active", moe_only=args.moe_only)
    scope = "moe_only" if args.moe_only else "total"
    text = (f"scope\t{scope}\n"
            f"sparse\t{sparse}\t{human(sparse)}\n"
            f"active\t{active}\t{human(active)}\n")
    _write_outputs(args, text, {"config": cfg.to_text()})
    return 0


def cmd_train(args) -> int:
    cfg = ModelConfig.load(args.config)
    model = init_model(cfg, args.seed, dtype_for(args.precision))
    if args.batch_size is None:
        args.batch_size = 16 if args.task == "passkey" else 8
    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size, steps=args.steps, seed=args.seed,
                     aux_coef=args.aux_coef, seq_len=args.seq_len, schedule=args.schedule,
                     warmup=args.warmup, grad_clip=args.grad_clip)
    if not args.out:
        raise ConfigError("--out is required for train")
    if args.task == "passkey":
        stages = ([CurriculumStage.parse(x) for x in args.stages.split(",")] if args.stages
                  else DEFAULT_CURRICULUM)
        result = train_passkey(model, stages, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                               text_weight=args.text_weight)
        return _finish_training(args, cfg, result)
    if args.task == "periodic":
        corpus = periodic_corpus(make_rng(args.seed, STREAM_DATA, 1), args.period, args.seq_len, 2000)
    else:
        if not args.corpus:
            raise ConfigError("--corpus is required for --task text")
        corpus = np.array(tokenizer.encode(Path(args.corpus).read_text(encoding="utf-8")))
    return _finish_training(args, cfg, train(model, corpus, tc))


def _finish_training(args, cfg: ModelConfig, result) -> int:
    save_checkpoint(result.model, args.out)
    curve = f"{args.out}.loss.tsv"
    atomic_write_text(curve, "step\tloss\n" + format_loss_curve(result.losses))
    _write_manifest(args, [args.out, curve], {"config": cfg.to_text()})
    log.info("final loss %.4f", result.losses[-1])
    return 0


def cmd_decode(args) -> int:
    model = _load_model(args)
    prompt = tokenizer.encode(args.prompt, bos=True)
    out = decode_greedy(model, prompt, args.max_new)
    _write_outputs(args, tokenizer.decode(out) + "\n")
    return 0


def cmd_trace(args) -> int:
    model = _load_model(args)
    cfg = model.config
    if args.input:
        text = Path(args.input).read_text(encoding="utf-8")
        ids = np.array(tokenizer.encode(text))
    else:
        ids = make_rng(args.seed, STREAM_DATA, 2).integers(0, min(256, cfg.vocab_size), size=args.random_tokens)
    if len(ids) == 0:
        raise NoDataError("no data: input has no tokens")
    doc_len = min(args.doc_len or cfg.context_len, cfg.context_len)
    routing_rng = make_rng(args.seed, STREAM_ROUTING) if args.random_router else None
    traces = []
    for doc, lo in enumerate(range(0, len(ids), doc_len)):
        chunk = ids[lo:lo + doc_len][None, :]
        _, routes, _ = forward_batch(model, chunk, routing_rng=routing_rng)
        traces.append(trace_from_routes(routes, cfg, np.full(chunk.shape[1], doc)))
    trace = concat_traces(traces)
    if not args.out:
        raise ConfigError("--out is required for trace")
    write_trace(trace, args.out)
    _write_manifest(args, [args.out], {"config": cfg.to_text()})
    return 0


def cmd_route_analyze(args) -> int:
    trace = read_trace(args.trace)
    profile = layer_profile(trace)
    text = ("# repetition\n" + profile.to_tsv()
            + "# distribution\n" + distribution_table(trace))
    _write_outputs(args, text)
    return 0


def cmd_ep_sim(args) -> int:
    trace = read_trace(args.trace)
    devices = args.devices or trace.num_experts
    placement = Placement.contiguous(trace.num_experts, devices, args.experts_per_device)
    caps = [int(c) for c in args.capacities.split(",") if c]
    shuffled = shuffle_trace(trace, args.seed)
    text = "# load\n" + ep_table(trace, placement) + "# cache\n" + cache_table(trace, caps, shuffled)
    _write_outputs(args, text)
    return 0


def cmd_passkey(args) -> int:
    model = _load_model(args)
    contexts = tuple(int(c) for c in args.contexts.split(","))
    positions = tuple(float(p) for p in args.positions.split(","))
    grid = passkey_eval(model, contexts, positions, args.trials, seed=args.seed, key_length=args.key_length)
    _write_outputs(args, grid.to_tsv(seed=args.seed))
    return 0


def cmd_ppl(args) -> int:
    model = _load_model(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    if args.corpus:
        corpus = tokenizer.encode(Path(args.corpus).read_text(encoding="utf-8"))
    else:
        corpus = periodic_corpus(make_rng(args.seed, STREAM_DATA, 3), args.period, max(sizes) * 2, 64)
    rows = perplexity_vs_context(model, corpus, sizes)
    _write_outputs(args, format_ppl_table(rows, seed=args.seed))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="model config file (Table-1 style key = value lines)")
    common.add_argument("--seed", type=int, default=0, help="64-bit seed for every random draw")
    common.add_argument("--out", help="output path (stdout when omitted, where allowed)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")

    parser = argparse.ArgumentParser(prog="smoe", description="Sparse mixture-of-experts toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("param-count", parents=[common], help="sparse and active parameter counts")
    p.add_argument("--moe-only", action="store_true", help="count experts and routers only")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("train", parents=[common], help="train a model and save a checkpoint")
    p.add_argument("--task", choices=("passkey", "periodic", "text"), default="text")
    p.add_argument("--corpus", help="UTF-8 text file for --task text")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=None, help="default 16 for passkey, 8 otherwise")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--stages", help="passkey curriculum, e.g. 56-64:400,64-256:1000 (default built in)")
    p.add_argument("--text-weight", type=float, default=0.02,
                   help="passkey loss weight of prompt tokens relative to answer tokens")
    p.add_argument("--period", type=int, default=8)
    p.add_argument("--aux-coef", type=float, default=0.0)
    p.add_argument("--schedule", choices=("constant", "cosine"), default="constant")
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--grad-clip", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="greedy decoding from a prompt")
    p.add_argument("--checkpoint")
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=32)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("trace", parents=[common], help="record a routing trace")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="UTF-8 text to route (default: random bytes)")
    p.add_argument("--random-tokens", type=int, default=4096)
    p.add_argument("--doc-len", type=int, default=0, help="tokens per document (default context_len)")
    p.add_argument("--random-router", action="store_true", help="replace routers by uniform random choice")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("route-analyze", parents=[common], help="repetition and distribution tables")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_route_analyze)

    p = sub.add_parser("ep-sim", parents=[common], help="expert-parallel load and LRU cache replay")
    p.add_argument("--trace", required=True)
    p.add_argument("--devices", type=int, default=0, help="device count (default: one per expert)")
    p.add_argument("--experts-per-device", type=int, default=None)
    p.add_argument("--capacities", default="1,2,4")
    p.set_defaults(func=cmd_ep_sim)

    p = sub.add_parser("passkey-eval", parents=[common], help="passkey retrieval grid")
    p.add_argument("--checkpoint")
    p.add_argument("--contexts", default=",".join(map(str, DEFAULT_CONTEXTS)))
    p.add_argument("--positions", default=",".join(map(str, DEFAULT_POSITIONS)))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--key-length", type=int, default=5)
    p.set_defaults(func=cmd_passkey)

    p = sub.add_parser("ppl", parents=[common], help="perplexity as a function of window size")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus", help="UTF-8 text (default: synthetic periodic corpus)")
    p.add_argument("--period", type=int, default=8)
    p.add_argument("--sizes", default="4,8,16,32")
    p.set_defaults(func=cmd_ppl)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"smoe {args.command}: {exc}", file=sys.stderr)
        return 2
    except (SmoeError, OSError) as exc:
        print(f"smoe {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
