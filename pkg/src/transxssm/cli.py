"""Command-line entry point: verify | train | bench | generate.

Configuration precedence is CLI flags > JSON config file > built-in
defaults; whatever wins is echoed into ``meta.json`` next to each command's
outputs, together with the seed, precision mode and build id, so a run can
be reproduced from its own artifacts. Exit codes: 0 success, 1 property or
run failure, 2 usage/config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__
from . import tensor as tc
from .bench import BenchConfig, MODES, fit_slopes, records_to_csv, run_bench
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BOS, tokenize_bytes, detokenize
from .lm import (
    ModelConfig,
    build_tables,
    generate,
    init_lm,
    micro_config,
    model_forward,
    named_parameters,
)
from .tensor import Rng, Tensor
from .train import TrainConfig, TrainDivergence, make_batch, masked_accuracy, train
from .verify import registry_coverage, run_properties

SEED_ENV = "TRANSXSSM_SEED"

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except Exception:
        rev = ""
    return f"transxssm-{__version__}" + (f"+{rev}" if rev else "")


def _default_seed() -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise SystemExit(f"config error: cannot read {path}: {e}")
    if not isinstance(cfg, dict):
        raise SystemExit(f"config error: {path} must hold a JSON object")
    return cfg


def _dataclass_from(cls, file_section: dict, overrides: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(file_section) - known
    if bad:
        raise SystemExit(f"config error: unknown {cls.__name__} fields {sorted(bad)}")
    merged = {**file_section, **{k: v for k, v in overrides.items() if v is not None}}
    return cls(**merged)


def _write_meta(out_dir: str, command: str, seed: int, sections: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "command": command,
        "seed": seed,
        "fp_mode": str(tc.default_dtype()),
        "build_id": _build_id(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": sections,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)


# -- verify ----------------------------------------------------------------------


def cmd_verify(args, file_cfg: dict) -> int:
    if args.inject_rotate_sign_bug:
        from . import rope

        rope._negate_sin_for_tests = True
    ok, note = registry_coverage()
    print(f"registry coverage: {'ok' if ok else 'MISMATCH'} ({note})")
    if not ok:
        return EXIT_FAIL
    results = run_properties(args.filter)
    if not results:
        print(f"no properties match filter {args.filter!r}")
        return EXIT_USAGE
    width = max(len(r.name) for r in results)
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += not r.passed
        print(f"{status}  {r.name:<{width}}  instances={r.instances:<6d} worst_err={r.worst_err:<12.3g} {r.detail}")
    print(f"{len(results) - failures}/{len(results)} properties passed")
    if args.out:
        _write_meta(args.out, "verify", _default_seed(), {"filter": args.filter})
        with open(os.path.join(args.out, "verify.jsonl"), "w") as f:
            for r in results:
                f.write(json.dumps(dataclasses.asdict(r)) + "\n")
    return EXIT_FAIL if failures else EXIT_OK


# -- train -----------------------------------------------------------------------


def cmd_train(args, file_cfg: dict) -> int:
    mcfg = _dataclass_from(
        ModelConfig,
        {**dataclasses.asdict(micro_config()), **file_cfg.get("model", {})},
        {"use_rope_on_ssd": False if args.ablate_ssd_rope else None},
    )
    task, corpus = args.task, None
    if task and task.startswith("bytes:"):
        path = task.split(":", 1)[1]
        try:
            with open(path, "rb") as f:
                corpus = f.read()
        except OSError as e:
            raise SystemExit(f"config error: cannot read corpus {path}: {e}")
        task = "bytes"
    tcfg = _dataclass_from(
        TrainConfig,
        file_cfg.get("train", {}),
        {
            "task": task,
            "steps": args.steps,
            "batch_size": args.batch,
            "seq_len": args.seq_len,
            "lr": args.lr,
            "seed": args.seed,
            "workers": args.workers,
            "log_timing": False if args.no_timing else None,
        },
    )
    out = args.out or "runs/train"
    os.makedirs(out, exist_ok=True)
    _write_meta(out, "train", tcfg.seed, {"model": mcfg.to_dict(), "train": tcfg.to_dict()})
    params = init_lm(Rng(tcfg.seed), mcfg)
    tables = build_tables(mcfg)
    ckpt_path = os.path.join(out, "checkpoint.bin")
    metrics_path = os.path.join(out, "metrics.jsonl")

    def maybe_checkpoint(step, record):
        if args.ckpt_every and (step + 1) % args.ckpt_every == 0:
            save_checkpoint(ckpt_path, named_parameters(params), mcfg.to_dict())

    try:
        metrics = train(
            params, mcfg, tcfg, tables,
            metrics_path=metrics_path, corpus=corpus, on_step=maybe_checkpoint,
        )
    except TrainDivergence as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_FAIL
    save_checkpoint(ckpt_path, named_parameters(params), mcfg.to_dict())
    if metrics:
        print(f"final step {metrics[-1]['step']}: loss {metrics[-1]['loss']:.4f}")
    if tcfg.task in ("copy", "needle") and tcfg.steps > 0:
        eval_cfg = dataclasses.replace(tcfg, seed=tcfg.seed + 777_000, batch_size=16)
        val = [make_batch(i, eval_cfg, corpus) for i in range(2)]
        acc = masked_accuracy(params, mcfg, tables, val)
        print(f"masked accuracy on held-out {tcfg.task}: {acc:.4f}")
    print(f"wrote {metrics_path} and {ckpt_path}")
    return EXIT_OK


# -- bench -----------------------------------------------------------------------


def cmd_bench(args, file_cfg: dict) -> int:
    bcfg = _dataclass_from(
        BenchConfig,
        file_cfg.get("bench", {}),
        {
            "batch": args.batch,
            "iters": args.iters,
            "warmup": args.warmup,
            "with_backward": True if args.backward else None,
            "seed": args.seed,
        },
    )
    lengths = [int(x) for x in args.lengths.split(",")]
    modes = args.modes.split(",") if args.modes else list(MODES)
    out = args.out or "runs/bench"
    os.makedirs(out, exist_ok=True)
    _write_meta(out, "bench", bcfg.seed, {"bench": bcfg.to_dict(), "lengths": lengths, "modes": modes})
    try:
        records = run_bench(modes, lengths, bcfg)
    except (ValueError, MemoryError) as e:
        print(f"bench error: {e}", file=sys.stderr)
        return EXIT_USAGE
    slopes = fit_slopes(records)
    csv_text = records_to_csv(records, slopes)
    with open(os.path.join(out, "bench.csv"), "w") as f:
        f.write(csv_text)
    with open(os.path.join(out, "bench.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")
        f.write(json.dumps({"slopes": slopes}) + "\n")
    print(csv_text, end="")
    for mode, slope in slopes.items():
        print(f"# slope {mode}: {slope:.3f}")
    return EXIT_OK


# -- generate --------------------------------------------------------------------


def cmd_generate(args, file_cfg: dict) -> int:
    try:
        tensors, config = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        mcfg = ModelConfig(**config)
    except TypeError as e:
        print(f"checkpoint/config mismatch: {e}", file=sys.stderr)
        return EXIT_USAGE
    params = init_lm(Rng(0), mcfg)
    named = named_parameters(params)
    if set(named) != set(tensors):
        print("checkpoint/config mismatch: tensor names differ", file=sys.stderr)
        return EXIT_USAGE
    for name, p in named.items():
        if tuple(p.shape) != tensors[name].shape:
            print(f"checkpoint/config mismatch: {name} shape {tensors[name].shape} != {tuple(p.shape)}", file=sys.stderr)
            return EXIT_USAGE
        p.data = tensors[name].astype(tc.default_dtype())
    tables = build_tables(mcfg)
    prompt = np.concatenate([[BOS], tokenize_bytes(args.prompt)]).astype(np.int64)

    def trace(step, ss_bytes, kv_bytes):
        print(json.dumps({"step": step, "ss_cache_bytes": ss_bytes, "kv_cache_bytes": kv_bytes}), file=sys.stderr)

    ids = generate(
        prompt, args.n, params, mcfg, tables,
        temperature=args.temperature,
        rng=Rng(args.seed) if args.temperature > 0 else None,
        trace_cb=trace if args.trace else None,
    )
    completion = [int(i) for i in ids[len(prompt):] if i < 256]
    sys.stdout.write(args.prompt + detokenize(completion).decode("utf-8", errors="replace") + "\n")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transxssm",
        description="Hybrid attention / state-space LM with one shared rotary position embedding",
    )
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--fp32", action="store_true", help="32-bit float mode (benchmarking)")
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--filter", help="substring filter on property names")
    v.add_argument("--out", help="directory for verify.jsonl + meta.json")
    v.add_argument("--inject-rotate-sign-bug", action="store_true", help=argparse.SUPPRESS)

    t = sub.add_parser("train", help="train on a synthetic task or byte corpus")
    t.add_argument("--task", help="copy | needle | bytes:<file>")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--seq-len", dest="seq_len", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--workers", type=int)
    t.add_argument("--ablate-ssd-rope", action="store_true", help="disable rotation on the state-space path")
    t.add_argument("--no-timing", action="store_true", help="null the tokens_per_sec field (byte-reproducible logs)")
    t.add_argument("--ckpt-every", type=int, default=0)
    t.add_argument("--out")

    b = sub.add_parser("bench", help="forward throughput across sequence lengths")
    b.add_argument("--modes", help=f"comma list from {','.join(MODES)}")
    b.add_argument("--lengths", default="1024,2048,4096")
    b.add_argument("--batch", type=int)
    b.add_argument("--iters", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--backward", action="store_true", help="time forward+backward instead")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out")

    g = sub.add_parser("generate", help="sample text from a checkpoint")
    g.add_argument("checkpoint")
    g.add_argument("--prompt", default="")
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--temperature", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--trace", action="store_true", help="dump per-step cache sizes to stderr")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.fp32:
        tc.set_default_dtype("float32")
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = _default_seed()
    file_cfg = _load_config_file(args.config)
    try:
        if args.command == "verify":
            return cmd_verify(args, file_cfg)
        if args.command == "train":
            return cmd_train(args, file_cfg)
        if args.command == "bench":
            return cmd_bench(args, file_cfg)
        if args.command == "generate":
            return cmd_generate(args, file_cfg)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return EXIT_USAGE
        raise
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
