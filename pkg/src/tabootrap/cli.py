"""Command-line entry point: ``tabootrap <subcommand> [flags]``.

Every subcommand also accepts ``--config FILE``, a flat ``key=value`` text
file whose keys mirror the long flag names (``data-dir=...``); explicit
flags win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .attacks import AdversarialBatch, AttackConfig, run_attack
from .checkpoint import load_checkpoint, load_key, load_tensors, save_checkpoint, save_key, save_tensors
from .harness import (
    ExperimentSpec,
    evaluate,
    key_diversity_experiment,
    load_splits,
    metrics_csv,
    resolve_key,
    run_experiment,
)
from .model import build_lenet5, count_overhead
from .taboo import ActivationProfile, bind_thresholds, make_key_f1, make_key_f2, make_key_f3, profile
from .training import TrainConfig, evaluate_clean, taboo_retrain, train_baseline

log = logging.getLogger("tabootrap")


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k.replace("-", "_")] = v
    return values


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    opts = {
        "data-dir": dict(default="data/mnist", help="directory holding the MNIST IDX files"),
        "checkpoint": dict(help="model checkpoint (.ttrp)"),
        "key": dict(help="f1, f2, f3, none, or a key file; defaults to the key stored in the checkpoint"),
        "percentile": dict(type=float, default=1.0, help="percentile for max-percentile keys"),
        "lambda0": dict(type=float, default=1e-2, help="initial alarm rate"),
        "lr0": dict(type=float, default=0.01, help="initial learning rate"),
        "epochs": dict(type=int, help="training epochs (train) or retraining epoch cap (instrument)"),
        "attack": dict(default="fgsm", help="comma-separated attack names: fgsm, pgd, deepfool"),
        "eps": dict(default=None, help="comma-separated L-inf budgets for fgsm/pgd"),
        "iters": dict(type=int, help="iterations for pgd/deepfool"),
        "step": dict(type=float, help="pgd step size (default eps/4)"),
        "subset": dict(type=int, default=1000, help="evaluation subset size (0 = full test set)"),
        "seed": dict(type=int, default=0),
        "out": dict(help="output path"),
    }
    for name in names:
        p.add_argument(f"--{name}", **opts[name])


def _attack_configs(args) -> list[AttackConfig]:
    configs = []
    eps_values = [float(e) for e in args.eps.split(",")] if args.eps else [None]
    for method in filter(None, (m.strip() for m in args.attack.split(","))):
        if method == "deepfool":
            configs.append(AttackConfig.create(method, iters=args.iters))
        else:
            configs.extend(
                AttackConfig.create(method, eps=e, iters=args.iters, step=args.step) for e in eps_values
            )
    return configs


def _subset(args):
    return None if not args.subset else args.subset


def _train_config(args, **overrides) -> TrainConfig:
    cfg = dict(lr=args.lr0, seed=args.seed)
    if getattr(args, "lambda0", None) is not None:
        cfg["alarm_rate"] = args.lambda0
    if getattr(args, "target_fpr", None) is not None:
        cfg["target_fpr"] = args.target_fpr
    if getattr(args, "margin", None) is not None:
        cfg["margin"] = args.margin
    if getattr(args, "batch_size", None) is not None:
        cfg["batch_size"] = args.batch_size
    cfg.update(overrides)
    return TrainConfig(**cfg)


def cmd_train(args) -> None:
    train, val, test = load_splits(args.data_dir, args.validation, args.seed)
    cfg = _train_config(args, epochs=args.epochs or 20)
    model, tlog = train_baseline(build_lenet5(args.seed), train, val, cfg)
    out = Path(args.out or "lenet5.ttrp")
    save_checkpoint(model, out)
    out.with_suffix(".log.csv").write_text(tlog.to_csv())
    acc, _ = evaluate_clean(model, test)
    macs, params = count_overhead(model)
    print(f"test accuracy {acc:.4f}  params {params}  MACs {macs}  -> {out}")


def cmd_profile(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    train, _, _ = load_splits(args.data_dir, args.validation, args.seed)
    prof = profile(ckpt.model, train.images)
    out = Path(args.out or "profile.ttrp")
    save_tensors({f"layer{i}": m for i, m in enumerate(prof.maxima)}, out, "activation-profile")
    alphas = bind_thresholds(prof, args.percentile)
    for i, a in enumerate(alphas):
        print(f"layer {i}: p{args.percentile:g} of maxima = {a:.6g}")
    print(f"profile of {prof.num_samples} samples -> {out}")


def _load_profile(path) -> ActivationProfile:
    descriptor, tensors = load_tensors(path)
    if descriptor != "activation-profile":
        raise SystemExit(f"{path} is not an activation profile ({descriptor!r})")
    return ActivationProfile(tuple(tensors[f"layer{i}"] for i in range(len(tensors))))


def cmd_keygen(args) -> None:
    kind = args.key or "f1"
    if kind == "f1":
        if args.profile:
            prof = _load_profile(args.profile)
        elif args.checkpoint:
            train, _, _ = load_splits(args.data_dir, args.validation, args.seed)
            prof = profile(load_checkpoint(args.checkpoint).model, train.images)
        else:
            raise SystemExit("f1 keys need --profile or --checkpoint to bind thresholds")
        key = make_key_f1(prof.num_layers, args.percentile, prof)
    elif kind == "f2":
        key = make_key_f2()
    elif kind == "f3":
        key = make_key_f3(args.layers)
    else:
        raise SystemExit(f"unknown key family {kind!r}")
    out = Path(args.out or f"{kind}.ttky")
    save_key(key, out)
    print(f"{key} -> {out}")


def cmd_instrument(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    train, val, test = load_splits(args.data_dir, args.validation, args.seed)
    key = resolve_key(args.key or "f1", ckpt.key, ckpt.model.num_instrumentation_points, args.percentile)
    if not key.bound:
        key = key.bind(profile(ckpt.model, train.images))
    overrides = {"max_retrain_epochs": args.epochs} if args.epochs else {}
    cfg = _train_config(args, from_scratch=args.from_scratch, **overrides)
    base_acc, _ = evaluate_clean(ckpt.model, val)
    result = taboo_retrain(ckpt.model, train, val, key, cfg, baseline_accuracy=base_acc)
    out = Path(args.out or "defended.ttrp")
    save_checkpoint(result.model, out, key, getattr(key, "thresholds", None))
    out.with_suffix(".log.csv").write_text(result.log.to_csv())
    acc, fpr = evaluate_clean(result.model, test, key)
    status = "converged" if result.converged else "NOT converged"
    print(f"{status}: test accuracy {acc:.4f}, clean detection rate {fpr:.4f} -> {out}")


def cmd_attack(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    test = load_splits(args.data_dir, args.validation, args.seed)[2].sample(_subset(args), args.seed)
    configs = _attack_configs(args)
    if len(configs) != 1:
        raise SystemExit("attack writes one batch; give a single method and eps")
    batch = run_attack(ckpt.model, test.images, test.labels, configs[0], args.seed)
    out = Path(args.out or "adversarial.ttrp")
    save_tensors(batch.tensors(), out, "adversarial:" + json.dumps(configs[0].__dict__, sort_keys=True))
    acc = float((batch.pred_adv == batch.labels).mean())
    print(f"{configs[0].method} {configs[0].theta}: adversarial accuracy {acc:.4f} -> {out}")


def cmd_evaluate(args) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    key = resolve_key(args.key, ckpt.key, ckpt.model.num_instrumentation_points, args.percentile)
    test = load_splits(args.data_dir, args.validation, args.seed)[2].sample(_subset(args), args.seed)
    batches = []
    for path in args.adv or []:
        descriptor, tensors = load_tensors(path)
        if not descriptor.startswith("adversarial:"):
            raise SystemExit(f"{path} is not an adversarial batch")
        cfg = AttackConfig(**json.loads(descriptor.split(":", 1)[1]))
        batches.append(AdversarialBatch.from_tensors(tensors, cfg))
    text = metrics_csv(evaluate(ckpt.model, key, test, batches))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_experiment(args) -> None:
    if args.manifest:
        spec = ExperimentSpec.from_manifest(args.manifest)
        if args.out:
            spec.out = args.out
    else:
        spec = ExperimentSpec(
            data_dir=args.data_dir,
            checkpoint=args.checkpoint,
            out=args.out or "experiment",
            key=args.key,
            percentile=args.percentile,
            attacks=_attack_configs(args) if args.attack else [],
            subset=_subset(args),
            seed=args.seed,
            retrain=args.retrain,
            validation=args.validation,
            train=_train_config(args, **({"max_retrain_epochs": args.epochs} if args.epochs else {})),
        )
    if args.key_diversity:
        ckpt = load_checkpoint(spec.checkpoint)
        train, val, test = load_splits(spec.data_dir, spec.validation, spec.seed)
        result = key_diversity_experiment(
            ckpt.model, train, val, test, spec.train, spec.subset, spec.seed, percentile=spec.percentile
        )
        out = Path(spec.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "key_diversity.csv").write_text(result.to_csv())
        sys.stdout.write(result.to_csv())
        return
    out = run_experiment(spec)
    sys.stdout.write((out / "metrics.csv").read_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabootrap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help, *flags):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="flat key=value file; flags override it")
        p.add_argument("--validation", type=int, default=5000, help="hold-out size carved from train")
        _common(p, *flags)
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train the LeNet5 baseline", "data-dir", "lr0", "epochs", "seed", "out")
    p.add_argument("--batch-size", type=int, default=64)
    add("profile", cmd_profile, "profile per-layer activation maxima", "data-dir", "checkpoint", "percentile", "seed", "out")
    p = add("keygen", cmd_keygen, "create a taboo key file", "data-dir", "checkpoint", "key", "percentile", "seed", "out")
    p.add_argument("--profile", help="profile file from `tabootrap profile` (f1 keys)")
    p.add_argument("--layers", type=int, default=3, help="instrumentation points covered by f3")
    p = add(
        "instrument", cmd_instrument, "taboo retraining of a trained checkpoint",
        "data-dir", "checkpoint", "key", "percentile", "lambda0", "lr0", "epochs", "seed", "out",
    )
    p.add_argument("--target-fpr", type=float, default=0.01)
    p.add_argument("--margin", type=float, default=0.0, help="training-only shrink of the allowed region")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--from-scratch", action="store_true", help="reinitialise before retraining")
    add(
        "attack", cmd_attack, "generate one adversarial batch",
        "data-dir", "checkpoint", "attack", "eps", "iters", "step", "subset", "seed", "out",
    )
    p = add("evaluate", cmd_evaluate, "metrics table for adversarial batches", "data-dir", "checkpoint", "key", "percentile", "subset", "seed", "out")
    p.add_argument("--adv", action="append", help="adversarial batch file (repeatable)")
    p = add(
        "experiment", cmd_experiment, "full pipeline with CSV report and manifest",
        "data-dir", "checkpoint", "key", "percentile", "lambda0", "lr0", "epochs",
        "attack", "eps", "iters", "step", "subset", "seed", "out",
    )
    p.add_argument("--retrain", action="store_true", help="profile, bind and retrain before attacking")
    p.add_argument("--target-fpr", type=float, default=0.01)
    p.add_argument("--margin", type=float, default=0.0, help="training-only shrink of the allowed region")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--manifest", help="rerun the experiment recorded in this manifest")
    p.add_argument("--key-diversity", action="store_true", help="run the f1/f2/f3 key comparison")
    return parser


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = read_config(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for k, v in values.items():
        if k not in known:
            raise SystemExit(f"{args.config}: unknown setting {k!r}")
        action = known[k]
        if action.nargs == 0:
            defaults[k] = v.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            defaults[k] = action.type(v)
        elif action.default is None and isinstance(getattr(action, "const", None), list):
            defaults[k] = [v]
        else:
            defaults[k] = [v] if isinstance(action, argparse._AppendAction) else v
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
