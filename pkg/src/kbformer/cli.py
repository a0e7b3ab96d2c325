"""Command-line entry point.

Exit status: 0 success, 1 verification failure, 2 usage or input error.
Configuration comes from a flat ``key=value`` file (``--config``) and
``key=value`` arguments after the command, later ones winning.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from dataclasses import replace

import numpy as np

from . import bench, core
from .binfmt import FormatError
from .folding import fold, random_cross_params, random_ffn, random_kb, roundtrip_deviation, verify_closure, verify_fold
from .knowledge import threshold_vector
from .model import (
    ArchitectureMismatch,
    Model,
    ModelConfig,
    checkpoint_load,
    checkpoint_save,
    count_params,
    fold_model,
    forward,
    generate,
    matched_kb_size,
    unfold_model,
)
from .rng import Rng
from .training import TrainConfig, TrainingError, grad_check, ingest_corpus, jitter_params, train

# key: (type, default, help)
CONFIG_KEYS = {
    # model
    "vocab_size": (int, 256, "byte vocabulary size"),
    "context_len": (int, 64, "context length N"),
    "model_dim": (int, 64, "hidden width d"),
    "key_dim": (int, 32, "cross-attention key width d_k"),
    "ffn_dim": (int, 256, "FFN inner width d_ff (standard)"),
    "kb_entry_dim": (int, 64, "knowledge entry width d_E (modular)"),
    "kb_size": (int, 0, "knowledge base size |E|; 0 = match the standard model's parameter count"),
    "layer_count": (int, 2, "number of blocks L"),
    "head_count": (int, 2, "self-attention heads"),
    "architecture": (str, "standard", "standard | modular"),
    "norm_mode": (str, "pre", "none | pre | post"),
    "threshold_mode": (str, "mlp", "mlp | table"),
    "seed": (int, 0, "seed for init, sampling and data order"),
    # training
    "steps": (int, 2000, "optimizer steps"),
    "batch_size": (int, 4, "windows per step"),
    "learning_rate": (float, 1e-3, "Adam learning rate"),
    "adam_beta1": (float, 0.9, "Adam beta1"),
    "adam_beta2": (float, 0.999, "Adam beta2"),
    "adam_eps": (float, 1e-8, "Adam epsilon"),
    "grad_clip_norm": (float, 1.0, "global gradient-norm clip (<= 0 disables)"),
    "corpus_path": (str, "", "training corpus (raw bytes)"),
    "log_every": (int, 100, "log a CSV row every this many steps (plus the last step)"),
    "checkpoint_every": (int, 0, "write step checkpoints every this many steps (0 = final only)"),
    "freeze_kb": (bool, False, "keep knowledge base entries fixed during training"),
    # generation
    "prompt": (str, "", "generation prompt"),
    "n_tokens": (int, 64, "bytes to generate"),
    "temperature": (float, 1.0, "sampling temperature (> 0)"),
    # verification
    "d": (int, 16, "verify --random: model width"),
    "d_E": (int, 12, "verify --random: entry width"),
    "kb": (int, 32, "verify --random: |E|"),
    "d_k": (int, 8, "verify --random: key width"),
    "n": (int, 10, "verify: rows per random input"),
    "trials": (int, 100, "verify: random inputs per check"),
    "tol": (float, 1e-9, "verify: max-abs deviation allowed"),
    "grad_samples": (int, 4, "grad-check: scalars sampled per parameter family"),
    "grad_jitter": (float, 0.3, "grad-check without --checkpoint: noise std added to the fresh init"),
    # bench
    "bench_n": (int, 64, "bench: sequence length N"),
    "bench_d": (int, 64, "bench: width d (d_E = d)"),
    "bench_d_k": (int, 16, "bench: key width"),
    "bench_d_ff": (int, 256, "bench: standard FFN width"),
    "bench_kb_sweep": (str, "256,512,1024,2048", "bench: ascending |E| values"),
    "bench_kb_sub_ratio": (float, 0.125, "bench: |E'| / |E| for retrieval"),
    "bench_repetitions": (int, 5, "bench: timed repetitions (>= 3)"),
    "bench_warmup": (int, 1, "bench: untimed warmup runs"),
    "bench_impls": (str, ",".join(bench.IMPLEMENTATIONS), "bench: implementations to run"),
    "bench_parallel": (bool, False, "bench: also time the parallel (BLAS) matmul path"),
    "bench_max_bytes": (int, 1 << 30, "bench: refuse shapes whose working set exceeds this"),
}


class UsageError(Exception):
    pass


def _parse_value(key: str, raw: str):
    typ = CONFIG_KEYS[key][0]
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        return typ(raw.strip()) if typ is not str else raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(lines, origin: str) -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        text = re.split(r"\s#", text, maxsplit=1)[0]
        if "=" not in text:
            raise UsageError(f"{origin}:{lineno}: expected key=value, got {text!r}")
        key, raw = text.split("=", 1)
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise UsageError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, raw.strip())
    return out


def load_run_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {k: v[1] for k, v in CONFIG_KEYS.items()}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                cfg.update(parse_pairs(f, path))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
    for i, item in enumerate(overrides):
        cfg.update(parse_pairs([item], f"arg{i + 1}"))
    return cfg


def help_config() -> str:
    lines = ["# key = default    description"]
    for key, (typ, default, doc) in CONFIG_KEYS.items():
        shown = str(default).lower() if typ is bool else default
        lines.append(f"{key} = {shown}    # {doc}")
    return "\n".join(lines)


def model_config(rc: dict) -> ModelConfig:
    names = ModelConfig.__dataclass_fields__
    try:
        auto = rc["kb_size"] <= 0
        cfg = ModelConfig(**{k: rc[k] for k in names if k != "kb_size"}, kb_size=1 if auto else rc["kb_size"])
        if cfg.architecture == "modular" and auto:
            std = replace(cfg, architecture="standard")
            cfg = replace(cfg, kb_size=matched_kb_size(std, cfg.kb_entry_dim, cfg.key_dim))
        elif auto:
            cfg = replace(cfg, kb_size=0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def train_config(rc: dict) -> TrainConfig:
    names = TrainConfig.__dataclass_fields__
    try:
        return TrainConfig(**{k: rc[k] for k in names})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def bench_config(rc: dict) -> bench.BenchConfig:
    try:
        return bench.BenchConfig(
            N=rc["bench_n"],
            d=rc["bench_d"],
            d_k=rc["bench_d_k"],
            d_ff=rc["bench_d_ff"],
            kb_sweep=tuple(int(x) for x in rc["bench_kb_sweep"].split(",") if x.strip()),
            kb_sub_ratio=rc["bench_kb_sub_ratio"],
            repetitions=rc["bench_repetitions"],
            warmup=rc["bench_warmup"],
            impls=tuple(x.strip() for x in rc["bench_impls"].split(",") if x.strip()),
            parallel=rc["bench_parallel"],
            max_bytes=rc["bench_max_bytes"],
            seed=rc["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load(path: str, expect: str | None = None) -> Model:
    try:
        return checkpoint_load(path, expect)
    except ArchitectureMismatch:
        raise
    except (OSError, FormatError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def _self_test_tokens(cfg: ModelConfig) -> np.ndarray:
    prompt = b"The knowledge base answers every layer. "
    return np.frombuffer((prompt * (cfg.context_len // len(prompt) + 1))[: cfg.context_len], dtype=np.uint8).astype(np.int64)


# -- commands -----------------------------------------------------------------------


def cmd_train(args, rc) -> int:
    if args.corpus:
        rc["corpus_path"] = args.corpus
    if not rc["corpus_path"]:
        raise UsageError("missing corpus: set corpus_path (config key) or --corpus")
    mcfg, tcfg = model_config(rc), train_config(rc)
    try:
        corpus = ingest_corpus(tcfg.corpus_path, mcfg.context_len, tcfg.seed)
    except ValueError as exc:
        raise UsageError(f"corpus_path: {exc}") from None
    model = Model.init(mcfg)
    print(f"{mcfg.architecture} model, {model.param_count()} parameters")

    def progress(step, loss, norm):
        print(f"step {step} loss {loss:.4f} grad_norm {norm:.3f}", flush=True)

    _, log = train(model, tcfg, corpus=corpus, out_dir=args.out, progress=progress)
    print(f"wrote {os.path.join(args.out, 'final.ckpt')} and {len(log.rows)} log rows")
    return 0


def cmd_generate(args, rc) -> int:
    model = _load(args.checkpoint)
    try:
        out = generate(model, rc["prompt"].encode("utf-8"), rc["n_tokens"], rc["temperature"], rc["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.buffer.write(out + b"\n")
    return 0


def _report_swap(original: Model, converted: Model) -> float:
    tokens = _self_test_tokens(original.config)
    taps_a, taps_b = {}, {}
    la = forward(original, tokens, taps_a)
    lb = forward(converted, tokens, taps_b)
    for l in sorted(taps_a):
        print(f"layer {l}: max |sublayer deviation| = {np.max(np.abs(taps_a[l] - taps_b[l])):.3e}")
    dev = float(np.max(np.abs(la - lb)))
    print(f"max |logits deviation| = {dev:.3e}")
    return dev


def cmd_fold(args, rc) -> int:
    model = _load(args.checkpoint, "modular")
    out = fold_model(model)
    _report_swap(model, out)
    checkpoint_save(out, args.out)
    print(f"wrote standard checkpoint {args.out} (d_ff = {out.config.ffn_dim})")
    return 0


def cmd_unfold(args, rc) -> int:
    model = _load(args.checkpoint, "standard")
    out = unfold_model(model)
    _report_swap(model, out)
    checkpoint_save(out, args.out)
    print(f"wrote modular checkpoint {args.out} (one-hot KB of {out.config.kb_size} entries)")
    return 0


def cmd_verify(args, rc) -> int:
    trials, tol, n = rc["trials"], rc["tol"], rc["n"]
    if trials < 1:
        raise UsageError("trials must be >= 1")
    reports = []
    if args.checkpoint:
        model = _load(args.checkpoint)
        cfg = model.config
        if cfg.architecture == "modular":
            kb = model.knowledge_base()
            for l in range(cfg.layer_count):
                p = model.cross_params(l)
                reports.append((f"fold layer {l}", verify_fold(p, kb, trials, tol, n=n, seed=rc["seed"] + l)))
                f = fold(p, kb)
                reports.append((f"closure layer {l}", verify_closure(f, trials, tol, n=n, seed=rc["seed"] + l)))
        else:
            for l in range(cfg.layer_count):
                reports.append((f"closure layer {l}", verify_closure(model.ffn(l), trials, tol, n=n, seed=rc["seed"] + l)))
    else:
        rng = Rng(rc["seed"])
        p = random_cross_params(rng, rc["d"], rc["d_E"], rc["d_k"])
        kb = random_kb(rng, rc["kb"], rc["d_E"])
        reports.append(("fold random", verify_fold(p, kb, trials, tol, n=n, seed=rc["seed"])))
        f = random_ffn(rng, rc["d"], rc["kb"])
        reports.append(("closure random", verify_closure(f, trials, tol, n=n, seed=rc["seed"])))
        rt = roundtrip_deviation(f)
        print(f"fold(extract_closure(f)) max weight deviation = {rt:.3e}")
    ok = True
    for label, rep in reports:
        print(f"{label}: {rep}")
        ok &= rep.passed
    return 0 if ok else 1


def cmd_gradcheck(args, rc) -> int:
    if args.checkpoint:
        model = _load(args.checkpoint)
    else:
        model = jitter_params(Model.init(model_config(rc)), rc["grad_jitter"], rc["seed"])
    rng = Rng(rc["seed"])
    n = min(model.config.context_len, 16) + 1
    tokens = np.array([[rng.below(model.config.vocab_size) for _ in range(n)] for _ in range(2)])
    rep = grad_check(model, tokens, samples=rc["grad_samples"], seed=rc["seed"], freeze_kb=rc["freeze_kb"])
    for fam, (err, count) in rep.per_family.items():
        print(f"{fam:12s} max_rel_err={err:.3e} compared={count}")
    print(f"max relative error {rep.max_rel_error:.3e}")
    return 0 if rep.passed(1e-4) else 1


def cmd_bench(args, rc) -> int:
    cfg = bench_config(rc)

    def progress(rec):
        print(f"{rec.impl:24s} kb={rec.shape.kb:5d} flops={rec.flops_model} wall_ns={rec.wall_ns_median}", flush=True)

    try:
        report = bench.run_bench(cfg, progress)
    except MemoryError as exc:
        raise UsageError(str(exc)) from None
    report.write_csv(args.out)
    folded = report.select("folded")
    if len(folded) >= 2:
        _, slope, r2 = bench.linear_fit_r2([r.shape.kb for r in folded], [r.wall_ns_median for r in folded])
        print(f"folded wall time vs |E|: slope {slope:.1f} ns/entry, R^2 = {r2:.4f}")
    mismatched = [r for r in report.records if r.flops_counted != r.flops_model]
    print(f"wrote {args.out}; flop model mismatches: {len(mismatched)}")
    return 0 if not mismatched else 1


def cmd_inspect(args, rc) -> int:
    model = _load(args.checkpoint)
    cfg = model.config
    print(f"architecture: {cfg.architecture}  norm: {cfg.norm_mode}  threshold: {cfg.threshold_mode}")
    for name, a in model.params.items():
        print(f"  {name:32s} {a.shape[0]}x{a.shape[1]}")
    print(f"parameters: {model.param_count()} (layout {count_params(cfg)})")
    if cfg.architecture == "modular":
        kb = model.knowledge_base()
        e = kb.entries
        print(f"KB: {kb.size} entries x {kb.entry_dim}  mean {e.mean():.4g}  std {e.std():.4g}  "
              f"min {e.min():.4g}  max {e.max():.4g}")
        for l in range(cfg.layer_count):
            thr = threshold_vector(model.cross_params(l).threshold, kb)[0]
            counts, edges = np.histogram(thr, bins=8)
            print(f"layer {l} thresholds: " + " ".join(f"[{edges[i]:.3g},{edges[i + 1]:.3g}):{c}" for i, c in enumerate(counts)))
    return 0


COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "fold": cmd_fold,
    "unfold": cmd_unfold,
    "verify": cmd_verify,
    "grad-check": cmd_gradcheck,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kbformer", description=__doc__.splitlines()[0])
    ap.add_argument("--help-config", action="store_true", help="list every config key with its default")
    sub = ap.add_subparsers(dest="command")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("overrides", nargs="*", metavar="key=value")
        return p

    p = add("train", "train a model on a byte corpus")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True, help="output directory")
    p = add("generate", "sample bytes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    for name, text in (("fold", "modular -> standard checkpoint"), ("unfold", "standard -> modular checkpoint")):
        p = add(name, text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
    p = add("verify", "check fold / closure equivalence")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--random", action="store_true")
    p = add("grad-check", "compare tape gradients with finite differences")
    p.add_argument("--checkpoint")
    p = add("bench", "FLOP / memory / timing sweep")
    p.add_argument("--out", required=True, help="CSV path")
    p = add("inspect", "print shapes, parameter counts and KB statistics")
    p.add_argument("--checkpoint", required=True)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.help_config:
        print(help_config())
        return 0
    if not args.command:
        ap.print_usage(sys.stderr)
        return 2
    try:
        rc = load_run_config(args.config, args.overrides)
        return COMMANDS[args.command](args, rc)
    except (UsageError, ArchitectureMismatch, FormatError, TrainingError, core.ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
