"""Command-line entry point: ``adbm <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import tensorcore as tc
from ..attacks import NORMS, evaluate_robust_accuracy
from ..diffusion import DiracOracleDenoiser
from ..sampler import Defense, PurifierConfig
from ..schedule import bridge_coefficients_closed_form, make_linear_schedule
from ..theory import convergence_slope, verify_elimination, verify_kt, verify_theorem1, verify_theorem2_core
from ..training import (Checkpoint, finetune_adbm, load_checkpoint, pretrain_diffusion, save_checkpoint,
                        train_classifier)
from .config import ExperimentConfig, load_config, override
from .datasets import DATASETS, Dataset, gen_dataset, load_dataset, save_dataset
from .pipeline import PipelineError, run_pipeline
from .report import merge_reports, table_csv, table_markdown, write_table


def _resolve(args) -> ExperimentConfig:
    """Config file first, then ``--set`` pairs, then the dedicated flags (flags win)."""
    cfg = load_config(args.config)
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    cfg = override(cfg, pairs)
    flags = {
        "dataset.name": getattr(args, "dataset", None),
        "dataset.n": getattr(args, "n", None),
        "dataset.d": getattr(args, "d", None),
        "purifier.forward_T": getattr(args, "forward_t", None),
        "purifier.reverse_steps": getattr(args, "reverse_steps", None),
        "purifier.sampler": getattr(args, "sampler", None),
        "attack_iters": getattr(args, "iters", None),
        "attack_eot": getattr(args, "eot", None),
        "test_size": getattr(args, "n_test", None),
        "repeats": getattr(args, "repeats", None),
        "seeds": getattr(args, "seeds", None),
        "out": getattr(args, "out", None) if args.command == "run-pipeline" else None,
    }
    return override(cfg, flags)


def _schedule_from(ck: Checkpoint, cfg: ExperimentConfig):
    N, b0, b1 = ck.schedule
    if N:
        return make_linear_schedule(N, b0, b1)
    return make_linear_schedule(cfg.schedule.N, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, default=float)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_gen_data(args, cfg):
    spec = cfg.dataset
    seed = spec.seed if args.seed is None else args.seed
    ds = gen_dataset(spec.name, spec.n, spec.d, seed=seed, **spec.params)
    save_dataset(args.out, ds)
    print(f"wrote {args.out}: {spec.name} n={spec.n} d={spec.d} seed={seed}")


def _train_cfg(base, args):
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.steps is not None:
        kw["steps"] = args.steps
    if getattr(args, "lr", None) is not None:
        kw["learning_rate"] = args.lr
    return replace(base, **kw)


def cmd_train_classifier(args, cfg):
    data = load_dataset(args.data)
    res = train_classifier(_train_cfg(cfg.classifier, args), data)
    save_checkpoint(args.out, Checkpoint.from_result(res))
    _emit({"metrics": res.metrics, "rng_digest": res.rng_digest, "checkpoint": args.out})


def cmd_train_diffusion(args, cfg):
    data = load_dataset(args.data)
    sched = make_linear_schedule(cfg.schedule.N, cfg.schedule.beta_start, cfg.schedule.beta_end)
    res = pretrain_diffusion(_train_cfg(cfg.diffusion, args), sched, data)
    save_checkpoint(args.out, Checkpoint.from_result(res, sched))
    _emit({"final_loss": float(np.mean(res.losses[-100:])) if res.losses else None,
           "rng_digest": res.rng_digest, "checkpoint": args.out})


def cmd_finetune(args, cfg):
    data = load_dataset(args.data)
    pre_ck = load_checkpoint(args.pretrained)
    sched = _schedule_from(pre_ck, cfg)
    clf = load_checkpoint(args.classifier).build(use_ema=False)
    res = finetune_adbm(_train_cfg(cfg.finetune, args), sched, pre_ck.build(), clf, data)
    save_checkpoint(args.out, Checkpoint.from_result(res, sched))
    _emit({"final_loss": float(np.mean(res.losses[-100:])) if res.losses else None,
           "rng_digest": res.rng_digest, "checkpoint": args.out})


def _defense(args, cfg):
    ck = load_checkpoint(args.denoiser)
    return Defense(cfg.purifier, _schedule_from(ck, cfg), ck.build(), Path(args.denoiser).stem)


def cmd_purify(args, cfg):
    data = load_dataset(args.data)
    defense = _defense(args, cfg)
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    with tc.paused():
        x = defense.purify(data.x, rng=rng).data
    save_dataset(args.out, Dataset("purified", x, data.y, -1, data.n_train))
    print(f"wrote {args.out}: {len(x)} purified points ({cfg.purifier.to_dict()})")


def cmd_attack(args, cfg):
    data = load_dataset(args.data)
    clf = load_checkpoint(args.classifier).build(use_ema=False)
    defense = _defense(args, cfg) if args.denoiser else None
    over = {"seed": args.seed or 0}
    if args.eps is not None:
        over["radius"] = args.eps
    if args.step_size is not None:
        over["step_size"] = args.step_size
    acfg = cfg.attack_config(args.norm, **over)
    x, y = data.x_test[: cfg.test_size], data.y_test[: cfg.test_size]
    rep = evaluate_robust_accuracy(defense, clf, (x, y), acfg, repeats=cfg.repeats, attack=args.attack)
    rep.extra["config"] = cfg.to_dict()
    if args.out:
        rep.save(args.out)
    _emit(rep.to_json())


def cmd_verify(args, cfg):
    sched = make_linear_schedule(cfg.schedule.N, cfg.schedule.beta_start, cfg.schedule.beta_end)
    seed = 0 if args.seed is None else args.seed
    if args.which == "kt":
        v = verify_kt(sched)
    elif args.which == "elimination":
        v = verify_elimination(sched)
    elif args.which == "theorem2":
        coeffs = bridge_coefficients_closed_form(sched, args.T)
        eps_a = np.full(args.dim, args.eps if args.eps is not None else 8 / 255)
        v = verify_theorem2_core(sched, coeffs, args.t, eps_a, mode=args.mode, draws=args.draws, seed=seed)
        if args.mode == "monte_carlo":
            var = 1.0 - sched.alpha_bar[args.t]
            slope, rmse = convergence_slope(coeffs.k[args.t] * eps_a, var, seed=seed)
            v.quantities.update({"convergence_slope": slope, "rmse": rmse})
    else:
        T = cfg.purifier.forward_T
        coeffs = bridge_coefficients_closed_form(sched, T)
        eps = args.eps if args.eps is not None else 8 / 255
        if args.denoiser:
            ck = load_checkpoint(args.denoiser)
            net = ck.build()
            data = load_dataset(args.data)
            x0 = data.x_test[: args.examples]
        else:
            # no trained model given: the exact denoiser for a single data point
            x0 = np.full((1, args.dim), 0.5)
            net = DiracOracleDenoiser(sched, x0[0])
        v = verify_theorem1(sched, coeffs, net, x0, eps, trials=args.trials, seed=seed)
    _emit(json.loads(v.to_json()), args.out)
    return 0 if v.passed else 1


def cmd_run_pipeline(args, cfg):
    try:
        bundle = run_pipeline(cfg)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(table_markdown(bundle["table"]))
    return 0


def cmd_report(args, cfg):
    merged = merge_reports(args.paths)
    if args.out:
        write_table(merged, args.out)
    print(table_csv(merged))
    print(table_markdown(merged))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adbm", description="Diffusion-bridge adversarial purification toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with experiment settings")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting, e.g. finetune.steps=500 (repeatable)")
    common.add_argument("--seed", type=int)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=func)
        return sp

    def purifier_flags(sp):
        sp.add_argument("--forward-t", type=int)
        sp.add_argument("--reverse-steps", type=int)
        sp.add_argument("--sampler", choices=("ddim", "ddpm"))

    sp = add("gen-data", cmd_gen_data, "generate a synthetic dataset file")
    sp.add_argument("--dataset", choices=DATASETS)
    sp.add_argument("--n", type=int)
    sp.add_argument("--d", type=int)
    sp.add_argument("--out", required=True)

    for name, func, text in (("train-classifier", cmd_train_classifier, "train the classifier"),
                             ("train-diffusion", cmd_train_diffusion, "pretrain the denoiser")):
        sp = add(name, func, text)
        sp.add_argument("--data", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--out", required=True)

    sp = add("finetune-adbm", cmd_finetune, "fine-tune a pretrained denoiser with the bridge loss")
    sp.add_argument("--data", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--out", required=True)

    sp = add("purify", cmd_purify, "purify every point of a dataset file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--denoiser", required=True)
    purifier_flags(sp)
    sp.add_argument("--out", required=True)

    sp = add("attack", cmd_attack, "attack a (purified) classifier and report robust accuracy")
    sp.add_argument("--data", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--denoiser", help="omit to attack the undefended classifier")
    sp.add_argument("--attack", choices=("pgd", "spsa", "transfer"), default="pgd")
    sp.add_argument("--norm", choices=NORMS, default="linf")
    sp.add_argument("--eps", type=float)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--eot", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--repeats", type=int)
    purifier_flags(sp)
    sp.add_argument("--out", help="file stem for .json/.jsonl/.csv output")

    sp = add("verify", cmd_verify, "numerical checks of the bridge algebra and the guarantees")
    sp.add_argument("which", choices=("theorem1", "theorem2", "kt", "elimination"))
    sp.add_argument("--eps", type=float, help="l_inf size of the adversarial perturbation")
    sp.add_argument("--t", type=int, default=50)
    sp.add_argument("--T", type=int, default=100)
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--mode", choices=("closed_form", "monte_carlo"), default="closed_form")
    sp.add_argument("--draws", type=int, default=1_000_000)
    sp.add_argument("--denoiser")
    sp.add_argument("--data")
    sp.add_argument("--examples", type=int, default=50)
    sp.add_argument("--trials", type=int, default=200)
    purifier_flags(sp)
    sp.add_argument("--out")

    sp = add("run-pipeline", cmd_run_pipeline, "full experiment: train, fine-tune, attack, tabulate")
    sp.add_argument("--dataset", choices=DATASETS)
    sp.add_argument("--d", type=int)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--eot", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--repeats", type=int)
    purifier_flags(sp)
    sp.add_argument("--out")

    sp = add("report", cmd_report, "merge report files into mean +- std tables")
    sp.add_argument("paths", nargs="+")
    sp.add_argument("--out", help="file stem for the merged table")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify" and args.which == "theorem1" and bool(args.denoiser) != bool(args.data):
        print("error: theorem1 needs both --denoiser and --data, or neither", file=sys.stderr)
        return 2
    try:
        cfg = _resolve(args)
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command not in ("report", "verify"):
        print(json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)
    rc = args.func(args, cfg)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
