"""Experiment runners behind the CLI subcommands.

Each runner takes an :class:`ExperimentConfig` and an output directory and
writes CSV / JSON / DBPT artifacts there. All randomness flows from seeds
in the config, so reruns reproduce every file byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import rngtape
from ..addt import addt_update
from ..attacks import (AttackConfig, AttackReport, concat_reports, dw_attack, eot_gradient, gradient_similarity,
                       landscape_grid, pgd, run_attack, save_trajectories)
from ..diffusion import Schedule
from ..errors import ConfigError, TrainingError
from ..nets import Adam, ClassifierNet, DenoiserNet, load_weights, save_weights
from ..parallel import map_chunks
from ..purify import DBPPipeline, repeated_eval_accuracy
from .config import ExperimentConfig, dump
from .data import ToyDataset, save_dataset, synth_dataset
from .training import accuracy, epoch_order, train_classifier, train_denoiser

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("setting", "norm", "radius", "steps", "eot", "accuracy", "mean_loss", "seed")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _out(out) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- data and weights ------------------------------------------------------------------

def build_datasets(cfg: ExperimentConfig) -> Tuple[ToyDataset, ToyDataset]:
    d = cfg.dataset
    kw = d.generator_kwargs()
    return synth_dataset(d.seed, d.n_train, **kw), synth_dataset(d.test_seed, d.n_test, **kw)


def find_weights(cfg: ExperimentConfig, rel: str, out) -> Path:
    """Resolve a weight path against the config directory, then the output directory."""
    for cand in (cfg.resolve(rel), Path(out) / rel):
        if cand.exists() and Path(str(cand) + ".json").exists():
            return cand
    raise ConfigError(f"weights {rel!r} not found next to the config or in {out}")


def load_models(cfg: ExperimentConfig, out, denoiser_rel: Optional[str] = None):
    clf = load_weights(find_weights(cfg, cfg.paths.classifier, out))
    den = load_weights(find_weights(cfg, denoiser_rel or cfg.paths.denoiser, out))
    if not isinstance(clf, ClassifierNet) or not isinstance(den, DenoiserNet):
        raise ConfigError("weight files hold the wrong network kinds")
    return den.requires_grad_(False), clf.requires_grad_(False)


def build_pipeline(cfg: ExperimentConfig, denoiser: DenoiserNet, classifier: ClassifierNet,
                   schedule: Optional[Schedule] = None) -> DBPPipeline:
    s = schedule or cfg.schedule.build()
    if denoiser.T != s.T:
        raise ConfigError(f"denoiser was trained with T={denoiser.T}, config has T={s.T}")
    return DBPPipeline(s, cfg.purify.build(s), denoiser, classifier)


# -- synth / training -------------------------------------------------------------------

def run_synth(cfg: ExperimentConfig, out) -> Dict[str, Path]:
    out = _out(out)
    train, test = build_datasets(cfg)
    save_dataset(train, out / "dataset_train.dbpt")
    save_dataset(test, out / "dataset_test.dbpt")
    counts = np.bincount(train.labels, minlength=train.num_classes)
    (out / "dataset.json").write_text(json.dumps(
        {"n_train": len(train), "n_test": len(test), "class_counts": counts.tolist(),
         "generator_seed": cfg.dataset.seed, "test_seed": cfg.dataset.test_seed}, indent=2))
    dump(cfg, out / "config.json")
    return {"train": out / "dataset_train.dbpt", "test": out / "dataset_test.dbpt"}


def run_train_classifier(cfg: ExperimentConfig, out) -> Dict[str, object]:
    out = _out(out)
    c = cfg.classifier
    train, test = build_datasets(cfg)
    net = ClassifierNet(train.flat.shape[1], train.num_classes, hidden=c.hidden, depth=c.depth, seed=c.seed)
    net, curve = train_classifier(train.flat, train.labels, train.num_classes, epochs=c.epochs,
                                  batch_size=c.batch_size, lr=c.lr, seed=c.seed, net=net,
                                  noise_aug=c.noise_aug)
    save_weights(net, out / cfg.paths.classifier)
    write_csv(out / "classifier_loss.csv", ("epoch", "loss"), list(enumerate(curve)))
    acc = accuracy(net, test.flat, test.labels)
    (out / "classifier_metrics.json").write_text(json.dumps({"test_accuracy": acc}, indent=2))
    dump(cfg, out / "config.json")
    return {"net": net, "curve": curve, "test_accuracy": acc}


def run_train_diffusion(cfg: ExperimentConfig, out) -> Dict[str, object]:
    out = _out(out)
    d = cfg.diffusion
    s = cfg.schedule.build()
    train, _ = build_datasets(cfg)
    net = DenoiserNet(train.flat.shape[1], s.T, hidden=d.hidden, depth=d.depth, time_dim=d.time_dim, seed=d.seed)
    net, curve = train_denoiser(train.flat, s, epochs=d.epochs, batch_size=d.batch_size, lr=d.lr,
                                seed=d.seed, net=net)
    write_csv(out / "diffusion_loss.csv", ("epoch", "loss"), list(enumerate(curve)))
    if d.loss_threshold is not None and curve and curve[-1] > d.loss_threshold:
        raise TrainingError(f"final diffusion loss {curve[-1]:.4f} above threshold {d.loss_threshold}")
    save_weights(net, out / cfg.paths.denoiser)
    (out / "schedule.json").write_text(s.to_json())
    dump(cfg, out / "config.json")
    return {"net": net, "curve": curve}


def addt_finetune(denoiser: DenoiserNet, classifier: ClassifierNet, train: ToyDataset, s: Schedule,
                  cfg: ExperimentConfig) -> Tuple[DenoiserNet, List[Tuple[int, float, float]]]:
    """Fine-tune a copy of ``denoiser``; returns it and (epoch, train loss, CGPO objective) rows."""
    a = cfg.addt
    acfg = a.build()
    net = denoiser.copy().requires_grad_(True)
    classifier.requires_grad_(False)
    opt = Adam(net.parameters(), lr=a.lr)
    x = train.flat * 2.0 - 1.0
    t_max = a.t_max or s.T
    rows = []
    for epoch in range(a.epochs):
        order = epoch_order(a.seed, epoch, len(x))
        total, cg_total, cg_count = 0.0, 0.0, 0
        for start in range(0, len(x), a.batch_size):
            idx = order[start:start + a.batch_size]
            seeds = [rngtape.derive_seed(a.seed, epoch, int(i)) for i in idx]
            ts = np.array([1 + int(rngtape.uniform(sd, rngtape.ROLE_TRAIN, 0, 1)[0] * t_max) for sd in seeds])
            loss, pert = addt_update(net, x[idx], train.labels[idx], ts, classifier, acfg, opt, s, seeds)
            if not np.isfinite(loss):
                raise TrainingError("ADDT loss diverged")
            total += loss * len(idx)
            if pert.objective_trace:
                cg_total += pert.objective_trace[-1]
                cg_count += len(idx)
        rows.append((epoch, total / len(x), cg_total / cg_count if cg_count else 0.0))
        log.info("addt epoch %d loss %.4f", epoch, rows[-1][1])
    return net.requires_grad_(False), rows


def run_addt_finetune(cfg: ExperimentConfig, out) -> Dict[str, object]:
    out = _out(out)
    den, clf = load_models(cfg, out)
    s = cfg.schedule.build()
    train, _ = build_datasets(cfg)
    net, rows = addt_finetune(den, clf, train, s, cfg)
    save_weights(net, out / cfg.paths.addt_denoiser)
    write_csv(out / "addt_metrics.csv", ("epoch", "train_loss", "cgpo_objective"), rows)
    dump(cfg, out / "config.json")
    return {"net": net, "rows": rows}


# -- evaluation ----------------------------------------------------------------------

def victim_seeds(cfg: ExperimentConfig, rows) -> list:
    return [rngtape.derive_seed(cfg.eval.victim_seed, int(i)) for i in rows]


def attack_config_for(cfg: ExperimentConfig, setting: str) -> AttackConfig:
    a = cfg.attack
    if setting == "pgd_noeot":
        return a.build("white_box", eot_samples=1)
    if setting == "pgd_eot":
        return a.build("white_box")
    if setting == "dw_both":
        return a.build("dw_both", eot_samples=1)
    if setting in ("dw_fwd", "dw_rev"):
        return a.build(setting)
    if setting.startswith("dw_semi"):
        return a.build(setting)
    raise ConfigError(f"unknown eval setting {setting!r}")


def attack_dataset(x, y, acfg: AttackConfig, pipeline: DBPPipeline, cfg: ExperimentConfig,
                   record_grads: bool = False) -> AttackReport:
    """Chunked attack over a whole evaluation set with per-sample victim tapes."""
    def run(rows):
        victim = pipeline.victim_tape(victim_seeds(cfg, rows))
        return run_attack(x[rows], y[rows], acfg, pipeline, victim, indices=rows, record_grads=record_grads)

    return concat_reports(map_chunks(run, len(y), cfg.eval.chunk_size, cfg.eval.workers))


def clean_metrics(x, y, pipeline: DBPPipeline, cfg: ExperimentConfig) -> Tuple[float, float]:
    def run(rows):
        pred, loss = pipeline.evaluate(x[rows], y[rows], pipeline.victim_tape(victim_seeds(cfg, rows)))
        return np.stack([pred == y[rows], loss], axis=1)

    m = np.concatenate(map_chunks(run, len(y), cfg.eval.chunk_size, cfg.eval.workers))
    return float(m[:, 0].mean()), float(m[:, 1].mean())


def _seed_tag(cfg: ExperimentConfig, attack: bool = True) -> str:
    tag = f"victim={cfg.eval.victim_seed}"
    return f"attack={cfg.attack.seed};{tag}" if attack else tag


def evaluate(cfg: ExperimentConfig, pipeline: DBPPipeline, x: np.ndarray, y: np.ndarray,
             settings: Optional[Sequence[str]] = None, reports: Optional[dict] = None) -> List[tuple]:
    """Metric rows for each setting, in order. Attack reports go into ``reports`` when given."""
    rows = []
    for setting in settings or cfg.eval.settings:
        if setting == "clean":
            acc, loss = clean_metrics(x, y, pipeline, cfg)
            if cfg.eval.repeats > 1:
                acc = repeated_eval_accuracy(x, y, pipeline, cfg.eval.repeats, seed=cfg.eval.victim_seed,
                                             chunk_size=cfg.eval.chunk_size, workers=cfg.eval.workers)
            rows.append(("clean", "none", 0.0, 0, 0, acc, loss, _seed_tag(cfg, attack=False)))
            continue
        acfg = attack_config_for(cfg, setting)
        rep = attack_dataset(x, y, acfg, pipeline, cfg)
        if reports is not None:
            reports[setting] = rep
        eot = acfg.knowledge.k if setting.startswith("dw_semi") else acfg.eot_samples
        rows.append((setting, acfg.norm.value, acfg.radius, acfg.steps, eot, rep.robust_accuracy,
                     float(rep.final_losses.mean()), _seed_tag(cfg)))
        log.info("%s accuracy %.4f", setting, rep.robust_accuracy)
    return rows


def run_eval(cfg: ExperimentConfig, out, denoiser_rel: Optional[str] = None, tag: str = "") -> List[tuple]:
    """Write ``metrics{_tag}.csv`` and per-setting attack reports under ``reports{_tag}/``."""
    out = _out(out)
    suffix = f"_{tag}" if tag else ""
    den, clf = load_models(cfg, out, denoiser_rel)
    pipe = build_pipeline(cfg, den, clf)
    _, test = build_datasets(cfg)
    n = cfg.eval.n_samples
    reports = {}
    rows = evaluate(cfg, pipe, test.flat[:n], test.labels[:n], reports=reports)
    write_csv(out / f"metrics{suffix}.csv", METRIC_COLUMNS, rows)
    rep_dir = _out(out / f"reports{suffix}")
    for name, rep in reports.items():
        rep.save(rep_dir / f"{name}.dbpt")
    dump(cfg, out / "config.json")
    return rows


def run_eval_all(cfg: ExperimentConfig, out) -> Dict[str, List[tuple]]:
    """Evaluate the vanilla purifier, and the fine-tuned one too when its weights exist."""
    result = {"vanilla": run_eval(cfg, out)}
    try:
        find_weights(cfg, cfg.paths.addt_denoiser, out)
    except ConfigError:
        return result
    result["addt"] = run_eval(cfg, out, cfg.paths.addt_denoiser, tag="addt")
    return result


# -- analysis ------------------------------------------------------------------------

def eot_sweep(cfg: ExperimentConfig, pipeline: DBPPipeline, x, y, seed: int) -> List[tuple]:
    """(n, robust accuracy, mean cosine similarity to the known-tape gradient) per EoT size."""
    an = cfg.analysis
    idx = np.arange(len(y))
    victim = pipeline.victim_tape(victim_seeds(cfg, idx))
    g_dw = eot_gradient(x, y, 1, pipeline, tape=rngtape.knowledge_view(victim, rngtape.DW_BOTH))
    rows = []
    for n in an.eot_sweep:
        g = eot_gradient(x, y, n, pipeline, seed=seed, indices=idx)
        sim = float(np.mean(gradient_similarity(g, g_dw, per_sample=True)))
        a = cfg.attack
        acfg = AttackConfig(a.norm, a.radius, a.step_size, an.sweep_steps, n, "white_box", a.random_start, seed)
        rep = pgd(x, y, acfg, pipeline, victim, indices=idx, record_grads=False)
        rows.append((n, rep.robust_accuracy, sim))
    return rows


def gradient_variance(cfg: ExperimentConfig, pipeline: DBPPipeline, x, y, seed: int) -> dict:
    """Spread of EoT estimates around their mean, per EoT size, with the log-log slope."""
    an = cfg.analysis
    out = {"n": [], "variance": []}
    for n in an.variance_ns:
        est = np.stack([eot_gradient(x, y, n, pipeline, seed=rngtape.derive_seed(seed, n, r))
                        for r in range(an.variance_repeats)])
        var = float(np.mean(np.sum((est - est.mean(axis=0)) ** 2, axis=2)))
        out["n"].append(int(n))
        out["variance"].append(var)
    slope = np.polyfit(np.log(out["n"]), np.log(out["variance"]), 1)[0] if len(out["n"]) > 1 else float("nan")
    out["loglog_slope"] = float(slope)
    return out


def landscape(cfg: ExperimentConfig, pipeline: DBPPipeline, x, y, out: Path, seed: int) -> dict:
    an = cfg.analysis
    i = an.landscape_index
    xi, yi = x[i:i + 1], y[i:i + 1]
    victim = pipeline.victim_tape(victim_seeds(cfg, [i]))
    a = cfg.attack
    wb = AttackConfig(a.norm, a.radius, a.step_size, a.steps, a.eot_samples, "white_box", a.random_start, seed)
    dw = AttackConfig(a.norm, a.radius, a.step_size, a.steps, 1, "dw_both", a.random_start, seed)
    rep_wb = pgd(xi, yi, wb, pipeline, victim, indices=[i], record_grads=False)
    rep_dw = dw_attack(xi, yi, victim, rngtape.DW_BOTH, dw, pipeline, indices=[i], record_grads=False)
    p_dw, p_wb = rep_dw.perturbation[0], rep_wb.perturbation[0]
    extent = an.landscape_extent or 1.5 * max(np.linalg.norm(p_dw), np.linalg.norm(p_wb))
    grid = landscape_grid(xi, yi, p_dw, p_wb, extent, an.landscape_resolution, pipeline, victim)
    grid.to_csv(out / "landscape.csv")
    save_trajectories(out / "trajectories.json", grid,
                      {"dw_both": [d[0] for d in rep_dw.trajectory], "white_box_eot": [d[0] for d in rep_wb.trajectory]})
    return {"extent": float(extent), "base_loss": grid.base_loss()}


def run_analysis(cfg: ExperimentConfig, out, denoiser_rel: Optional[str] = None) -> dict:
    out = _out(out)
    an = cfg.analysis
    den, clf = load_models(cfg, out, denoiser_rel)
    pipe = build_pipeline(cfg, den, clf)
    _, test = build_datasets(cfg)
    n = min(an.sweep_samples, len(test))
    x, y = test.flat[:n], test.labels[:n]
    sweep = eot_sweep(cfg, pipe, x, y, an.seed)
    write_csv(out / "eot_sweep.csv", ("n", "robust_acc", "similarity"), sweep)
    m = min(an.variance_samples, len(test))
    var = gradient_variance(cfg, pipe, test.flat[:m], test.labels[:m], an.seed)
    (out / "gradient_variance.json").write_text(json.dumps(var, indent=2))
    land = landscape(cfg, pipe, x, y, out, an.seed)
    dump(cfg, out / "config.json")
    return {"sweep": sweep, "variance": var, "landscape": land}
