"""End-to-end experiment: data, classifier, pretraining, fine-tuning, then attacks on both purifiers."""
from __future__ import annotations

import contextlib
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..attacks import evaluate_robust_accuracy, predict
from ..sampler import Defense
from ..schedule import NoiseSchedule, make_linear_schedule
from ..training import (Checkpoint, TrainResult, finetune_adbm, pretrain_diffusion, save_checkpoint,
                        train_classifier)
from .config import ExperimentConfig
from .datasets import Dataset, gen_dataset, save_dataset
from .report import make_report, merge_reports, sweep_csv, table_row, write_table


class PipelineError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed for seed {seed}: {type(cause).__name__}: {cause}")
        self.stage, self.seed, self.cause = stage, seed, cause


@contextlib.contextmanager
def stage(name: str, seed: int):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, seed, exc) from exc


@dataclass
class SeedModels:
    seed: int
    dataset: Dataset
    schedule: NoiseSchedule
    classifier: TrainResult
    pretrained: TrainResult
    finetuned: TrainResult

    def denoisers(self) -> dict:
        # evaluation uses the EMA weights of both diffusion models
        return {"diffpure": self.pretrained.ema, "adbm": self.finetuned.ema}


def schedule_of(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_linear_schedule(s.N, s.beta_start, s.beta_end)


def build_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    ds = cfg.dataset
    return gen_dataset(ds.name, ds.n, ds.d, seed=ds.seed + seed, **ds.params)


def train_models(cfg: ExperimentConfig, seed: int, log=None) -> SeedModels:
    log = log or (lambda msg: None)
    sched = schedule_of(cfg)
    with stage("gen-data", seed):
        data = build_dataset(cfg, seed)
    with stage("train-classifier", seed):
        t0 = time.perf_counter()
        clf = train_classifier(replace(cfg.classifier, seed=seed), data)
        log(f"[seed {seed}] classifier {clf.metrics} ({time.perf_counter() - t0:.1f}s)")
    with stage("train-diffusion", seed):
        t0 = time.perf_counter()
        pre = pretrain_diffusion(replace(cfg.diffusion, seed=seed), sched, data)
        log(f"[seed {seed}] pretrain loss {np.mean(pre.losses[-200:]):.4f} ({time.perf_counter() - t0:.1f}s)")
    with stage("finetune-adbm", seed):
        t0 = time.perf_counter()
        ft = finetune_adbm(replace(cfg.finetune, seed=seed), sched, pre.ema, clf.net, data)
        log(f"[seed {seed}] finetune loss {np.mean(ft.losses[-200:]):.4f} ({time.perf_counter() - t0:.1f}s)")
    return SeedModels(seed, data, sched, clf, pre, ft)


def eval_split(cfg: ExperimentConfig, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    n = cfg.test_size
    return data.x_test[:n], data.y_test[:n]


def evaluate(cfg: ExperimentConfig, models: SeedModels, methods=("diffpure", "adbm"),
             out_dir: Path | None = None, log=None) -> tuple[list[dict], dict]:
    """One table row per method: clean accuracy, robust accuracy per norm, and their average."""
    log = log or (lambda msg: None)
    test = eval_split(cfg, models.dataset)
    nets = models.denoisers()
    rows, reports = [], {}
    for method in methods:
        defense = Defense(cfg.purifier, models.schedule, nets[method], method)
        robust = {}
        clean = None
        for norm in cfg.norms:
            with stage(f"attack-{method}-{norm}", models.seed):
                rep = evaluate_robust_accuracy(defense, models.classifier.net, test, cfg.attack_config(norm),
                                               repeats=cfg.repeats)
            s = rep.summary()
            robust[norm] = s["robust_mean"]
            clean = s["clean_mean"]
            reports[(method, norm)] = rep
            log(f"[seed {models.seed}] {method:8s} {norm:4s} clean {s['clean_mean']:.4f} "
                f"robust {s['robust_mean']:.4f} ({rep.wall_clock:.0f}s)")
            if out_dir is not None:
                rep.save(out_dir / f"attack_{method}_{norm}")
        if clean is None:
            rng = np.random.default_rng(12345)
            clean = float(np.mean(predict(defense, models.classifier.net, test[0], rng=rng) == test[1]))
        rows.append(table_row(method, clean, robust))
    return rows, reports


def sweep(cfg: ExperimentConfig, models: SeedModels, field_name: str, values, methods=("diffpure", "adbm"),
          norm: str = "linf", iters: int | None = None, eot: int | None = None) -> list[dict]:
    """Robust accuracy as one purifier setting varies (``reverse_steps`` or ``forward_T``)."""
    test = eval_split(cfg, models.dataset)
    acfg = cfg.attack_config(norm, iters=iters or cfg.sweep_iters, eot_samples=eot or cfg.sweep_eot)
    nets = models.denoisers()
    points = []
    for method in methods:
        for v in values:
            pcfg = replace(cfg.purifier, **{field_name: int(v)})
            defense = Defense(pcfg, models.schedule, nets[method], method)
            with stage(f"sweep-{field_name}-{v}-{method}", models.seed):
                s = evaluate_robust_accuracy(defense, models.classifier.net, test, acfg).summary()
            points.append({"seed": models.seed, "method": method, field_name: int(v),
                           "clean": s["clean_mean"], "robust": s["robust_mean"]})
    return points


def save_models(models: SeedModels, out_dir: Path) -> None:
    save_dataset(out_dir / "data.ads", models.dataset)
    save_checkpoint(out_dir / "classifier.ckpt", Checkpoint.from_result(models.classifier))
    save_checkpoint(out_dir / "diffusion.ckpt", Checkpoint.from_result(models.pretrained, models.schedule))
    save_checkpoint(out_dir / "adbm.ckpt", Checkpoint.from_result(models.finetuned, models.schedule))


def run_seed(cfg: ExperimentConfig, seed: int, out: Path | None = None, log=None) -> dict:
    out_dir = None
    if out is not None:
        out_dir = Path(out) / f"seed_{seed}"
        out_dir.mkdir(parents=True, exist_ok=True)
    models = train_models(cfg, seed, log)
    if out_dir is not None:
        with stage("save-checkpoints", seed):
            save_models(models, out_dir)
    rows, _ = evaluate(cfg, models, out_dir=out_dir, log=log)
    reverse = sweep(cfg, models, "reverse_steps", cfg.reverse_sweep) if cfg.reverse_sweep else []
    forward = sweep(cfg, models, "forward_T", cfg.forward_sweep) if cfg.forward_sweep else []
    digests = {"classifier": models.classifier.rng_digest, "diffusion": models.pretrained.rng_digest,
               "finetune": models.finetuned.rng_digest}
    rep = make_report(cfg.to_dict(), seed, rows, reverse_sweep=reverse, forward_sweep=forward,
                      rng_digests=digests, classifier_metrics=models.classifier.metrics)
    if out_dir is not None:
        (out_dir / "report.json").write_text(json.dumps(rep, indent=2))
    return rep


def run_pipeline(cfg: ExperimentConfig, log=print) -> dict:
    """Run every seed in ``cfg.seeds`` and write the merged tables and sweep plot data to ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(resolved, indent=2))
    if log:
        log(json.dumps(resolved, indent=2))
    reports = [run_seed(cfg, seed, out, log) for seed in cfg.seeds]
    table = merge_reports(reports)
    table["config"] = resolved
    write_table(table, out / "table")
    reverse = [p for r in reports for p in r["reverse_sweep"]]
    forward = [p for r in reports for p in r["forward_sweep"]]
    if reverse:
        (out / "reverse_steps.csv").write_text(sweep_csv(reverse, "reverse_steps"))
    if forward:
        (out / "forward_steps.csv").write_text(sweep_csv(forward, "forward_T"))
    return {"config": resolved, "table": table, "reports": reports}
