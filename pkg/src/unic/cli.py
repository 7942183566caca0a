"""Command-line entry points.

Subcommands: gen-data, train, sample, eval, ablate. Every command that
takes --seed is bit-deterministic end to end. Errors exit nonzero with a
single-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .config import (
    RunConfig,
    dropout_spec,
    guidance_scales,
    load_config,
    mixture_spec,
    model_config,
)
from .embeddings import load_vocab, tokenize_text
from .evaluate import evaluate_pairs
from .metrics import write_report
from .model import ConditionBundle, UnicModel, parameter_report
from .ppm import bytes_to_float, float_to_bytes, read_ppm, write_ppm
from .rng import derived_rng
from .sampling import GuidanceSpec, euler_sample
from .synthdata import (
    TASK_FAMILY,
    TASKS,
    default_vocab,
    generate_dataset,
    load_manifest,
    load_pair,
)
from .training import load_training_samples, train_loop

# Ablation presets: axis -> [(variant name, config overrides)]
ABLATION_AXES = {
    "keys": [
        ("both", {"inject_keys": "both"}),
        ("ist", {"inject_keys": "ist"}),
        ("con", {"inject_keys": "con"}),
    ],
    "queries": [
        ("img", {"inject_query": "img"}),
        ("txt", {"inject_query": "txt"}),
    ],
    "pe": [
        ("none", {"adapter_pe": "none"}),
        ("absolute", {"adapter_pe": "absolute"}),
        ("rope", {"adapter_pe": "rope"}),
    ],
    "crossq": [
        ("new", {"cross_q_new": True}),
        ("shared", {"cross_q_new": False}),
    ],
    "interaction": [
        ("mmdit", {"interaction": "mmdit"}),
        ("dit", {"interaction": "dit"}),
    ],
    "injection": [
        ("cross", {"inject_mode": "cross"}),
        ("add", {"inject_mode": "add"}),
    ],
}


def _config_from(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "steps", None) is not None:
        cfg = cfg.with_overrides(steps=args.steps)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _vocab_from(args):
    if getattr(args, "vocab", None):
        return load_vocab(args.vocab)
    return default_vocab()


def _build_model(cfg: RunConfig, vocab) -> UnicModel:
    return UnicModel(model_config(cfg, len(vocab)), seed=cfg.seed)


def cmd_gen_data(args) -> int:
    mixture = (args.mix_pixel, args.mix_subject, args.mix_style)
    tasks = [t.strip() for t in args.tasks.split(",")] if args.tasks else None
    manifest = generate_dataset(args.n, mixture, args.seed, args.out, tasks=tasks)
    print(f"wrote {args.n} pairs, manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    vocab = _vocab_from(args)
    samples = load_training_samples(args.data, vocab, cfg.max_text_len)
    model = _build_model(cfg, vocab)
    report = parameter_report(model)
    print(
        f"model: {report.total} parameters, {report.trainable} trainable "
        f"({report.trainable_fraction:.1%})"
    )

    def progress(step, family, loss):
        print(f"step {step:6d}  family={family:<8s}  loss={loss:.6f}", flush=True)

    result = train_loop(
        model,
        samples,
        steps=cfg.steps,
        batch=cfg.batch,
        seed=cfg.seed,
        out_dir=args.out,
        mixture=mixture_spec(cfg),
        dropout=dropout_spec(cfg),
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        grad_clip=cfg.grad_clip,
        log_every=cfg.log_every,
        ckpt_every=cfg.ckpt_every,
        progress=progress,
    )
    print(f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config_from(args)
    vocab = _vocab_from(args)
    model = _build_model(cfg, vocab)
    load_checkpoint(model, args.ckpt)

    if args.task not in TASKS:
        raise ValueError(f"unknown task {args.task!r} (choose from {', '.join(TASKS)})")
    family = TASK_FAMILY[args.task]
    s_c, s_t = guidance_scales(cfg, family)
    if args.sc is not None:
        s_c = args.sc
    if args.st is not None:
        s_t = args.st
    steps = args.steps if args.steps is not None else cfg.sample_steps

    condition = bytes_to_float(read_ppm(args.condition), model.config.np_dtype)
    txt = tokenize_text(args.prompt, vocab, cfg.max_text_len)
    ist = tokenize_text(args.instruction, vocab, cfg.max_text_len)
    n = args.n
    bundle = ConditionBundle(
        np.tile(txt[None], (n, 1)), np.tile(ist[None], (n, 1)), np.tile(condition[None], (n, 1, 1, 1))
    )
    c = model.config
    z0 = np.stack(
        [
            derived_rng(args.seed, "noise", i).standard_normal((c.channels, c.image_size, c.image_size))
            for i in range(n)
        ]
    )
    spec = GuidanceSpec(s_c=s_c, s_t=s_t, steps=steps, seed=args.seed)
    out = euler_sample(model, bundle, spec, z0=z0)
    if n == 1:
        write_ppm(args.out, float_to_bytes(out[0]))
        print(f"wrote {args.out}")
    else:
        stem, ext = os.path.splitext(args.out)
        for i in range(n):
            path = f"{stem}-{i:03d}{ext or '.ppm'}"
            write_ppm(path, float_to_bytes(out[i]))
        print(f"wrote {n} images to {stem}-*{ext or '.ppm'}")
    return 0


def _load_pairs(manifest_path, limit=None):
    base = os.path.dirname(os.path.abspath(manifest_path))
    records = load_manifest(manifest_path)
    if limit is not None:
        records = records[:limit]
    return [load_pair(r, base) for r in records]


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    vocab = _vocab_from(args)
    model = _build_model(cfg, vocab)
    load_checkpoint(model, args.ckpt)
    pairs = _load_pairs(args.data, args.limit)
    scales = {f: guidance_scales(cfg, f) for f in ("pixel", "subject", "style")}

    def progress(done, total):
        print(f"sampled {done}/{total}", flush=True)

    _, rows = evaluate_pairs(
        model, pairs, vocab, steps=cfg.sample_steps, seed=cfg.seed, scales=scales,
        progress=progress,
    )
    os.makedirs(args.out, exist_ok=True)
    txt_path = os.path.join(args.out, "report.txt")
    tsv_path = os.path.join(args.out, "report.tsv")
    write_report(rows, txt_path, tsv_path)
    with open(txt_path, "r", encoding="utf-8") as fh:
        print(fh.read(), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from(args)
    vocab = _vocab_from(args)
    samples = load_training_samples(args.data, vocab, cfg.max_text_len)
    eval_pairs = _load_pairs(args.eval_data, args.limit)
    scales = {f: guidance_scales(cfg, f) for f in ("pixel", "subject", "style")}
    variants = ABLATION_AXES[args.axis]

    rows = []
    for name, overrides in variants:
        variant_cfg = cfg.with_overrides(**overrides)
        model = _build_model(variant_cfg, vocab)
        print(f"[{args.axis}={name}] training {variant_cfg.steps} steps", flush=True)
        train_loop(
            model,
            samples,
            steps=variant_cfg.steps,
            batch=variant_cfg.batch,
            seed=variant_cfg.seed,
            out_dir=os.path.join(args.out, name) if args.out else None,
            mixture=mixture_spec(variant_cfg),
            dropout=dropout_spec(variant_cfg),
            lr=variant_cfg.lr,
            weight_decay=variant_cfg.weight_decay,
            grad_clip=variant_cfg.grad_clip,
            log_every=variant_cfg.log_every,
            ckpt_every=variant_cfg.ckpt_every,
        )
        _, report_rows = evaluate_pairs(
            model, eval_pairs, vocab, steps=variant_cfg.sample_steps, seed=variant_cfg.seed,
            scales=scales,
        )
        for task, n, metric, mean, std in report_rows:
            rows.append((name, task, n, metric, mean, std))
        print(f"[{args.axis}={name}] done", flush=True)

    header = f"{'variant':<12s}{'task':<14s}{'n':<6s}{'metric':<18s}{'mean':<12s}{'std':<12s}"
    print(header)
    print("-" * len(header))
    lines = []
    for name, task, n, metric, mean, std in rows:
        line = f"{name:<12s}{task:<14s}{n:<6d}{metric:<18s}{mean:<12.4f}{std:<12.4f}"
        print(line)
        lines.append(f"{name}\t{task}\t{n}\t{metric}\t{mean:.6f}\t{std:.6f}\n")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        table = os.path.join(args.out, f"ablate_{args.axis}.tsv")
        with open(table, "w", encoding="utf-8") as fh:
            fh.write("variant\ttask\tn\tmetric\tmean\tstd\n")
            fh.writelines(lines)
        print(f"wrote {table}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unic",
        description="Unified controllable image generation at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a procedural dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", help="comma-separated task subset")
    p.add_argument("--mix-pixel", type=float, default=0.4)
    p.add_argument("--mix-subject", type=float, default=0.5)
    p.add_argument("--mix-style", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the adapter")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample images from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--prompt", default="")
    p.add_argument("--instruction", default="")
    p.add_argument("--condition", required=True, help="condition PPM path")
    p.add_argument("--task", required=True)
    p.add_argument("--sc", type=float)
    p.add_argument("--st", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare preset variants")
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # single-line diagnostic, nonzero exit
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
