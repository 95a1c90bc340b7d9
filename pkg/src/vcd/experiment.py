"""Run toy and latent-variable-model experiments from an ``ExperimentConfig``.

Each run directory holds ``manifest.txt`` (the resolved config), a trace CSV
per fit, ``params.npz`` and ``summary.json``; toy runs add one target grid and
one fitted-q grid per target.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ExperimentConfig, TOY_TARGETS
from .data import Dataset, load_idx, split_tags, synthetic_logistic_mf
from .divergence import ObjectiveMode
from .evaluate import Grid2D, ProposalSpec, evaluate_marginal_llh, grid_kl
from .io import atomic_write_text, emit_contours, write_json, write_npz, write_trace_csv
from .mcmc import KernelConfig
from .optimize import TRACE_COLUMNS, LearningRates, TrainConfig, fit_lvm, fit_variational
from .targets import LogisticMF, VAEDecoder, toy_target
from .variational import AmortizedGaussian, CholGaussian, DiagGaussian, MixtureGaussian

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "VCD_OUTPUT_ROOT"
MANIFEST = "manifest.txt"

# Per-target contour windows holding essentially all of the target's mass.
TOY_WINDOWS = {
    "gaussian": ((-5.0, 5.0), (-5.0, 5.0)),
    "mixture2": ((-6.0, 5.0), (-6.0, 5.0)),
    "banana": ((-5.0, 5.0), (-14.0, 4.0)),
}


def run_directory(cfg: ExperimentConfig) -> Path:
    """``cfg.output_dir``, re-rooted under ``$VCD_OUTPUT_ROOT`` when that is set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(cfg.output_dir)
    if root:
        return Path(root) / (out.relative_to(out.anchor) if out.is_absolute() else out)
    return out


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def kernel_config(cfg: ExperimentConfig) -> KernelConfig:
    return KernelConfig(cfg.t, cfg.leapfrog_steps, cfg.step_size)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        mode=ObjectiveMode(cfg.mode, cfg.alpha),
        kernel=kernel_config(cfg),
        iterations=cfg.iterations,
        minibatch_size=cfg.minibatch_size,
        rates=LearningRates(cfg.lr_mean, cfg.lr_scale, cfg.lr_weights, cfg.lr_phi),
        decay_every=cfg.decay_every,
        decay_factor=cfg.decay_factor,
        gamma=cfg.gamma,
        local_switch_iteration=cfg.local_switch_iteration if cfg.experiment == "lvm" else None,
        clip=cfg.clip,
        scale_minibatch=cfg.scale_minibatch,
        trace_every=cfg.trace_every,
        deterministic=cfg.deterministic,
    )


def toy_grid(cfg: ExperimentConfig, target: str) -> Grid2D:
    x, y = TOY_WINDOWS[target]
    return Grid2D(x, y, (cfg.grid_resolution, cfg.grid_resolution))


def init_toy_family(cfg: ExperimentConfig, rng):
    h, s = cfg.init_mean_halfwidth, cfg.init_std
    if cfg.family == "diag_gaussian":
        return DiagGaussian(rng.uniform(-h, h, 2), np.full(2, s))
    if cfg.family == "chol_gaussian":
        return CholGaussian(rng.uniform(-h, h, 2), s * np.eye(2))
    k = cfg.mixture_components
    comps = [DiagGaussian(rng.uniform(-h, h, 2), np.full(2, s)) for _ in range(k)]
    return MixtureGaussian(comps, np.zeros(k))


def init_lvm(cfg: ExperimentConfig, data_dim, rng):
    if cfg.model == "logistic_mf":
        model = LogisticMF.init(data_dim, cfg.latent_dim, rng)
    else:
        model = VAEDecoder.init(data_dim, cfg.latent_dim, rng, cfg.hidden)
    encoder = AmortizedGaussian.init(data_dim, cfg.latent_dim, rng, cfg.hidden, cfg.init_std)
    return model, encoder


def load_dataset(cfg: ExperimentConfig, source=None) -> Dataset:
    source = source or cfg.dataset
    if source == "synthetic":
        data, _ = synthetic_logistic_mf(cfg.n_train, cfg.n_test, cfg.data_dim, cfg.true_latent_dim,
                                        cfg.data_seed)
        return data
    full = load_idx(source, cfg.binarize_threshold)
    n = cfg.n_train + cfg.n_test
    if full.rows.shape[0] < n:
        raise ValueError(f"{source} holds {full.rows.shape[0]} rows; need n_train + n_test = {n}")
    return Dataset(full.rows[:n], split_tags(n, cfg.n_train))


def _fit_summary(res):
    last = res.trace[-1] if res.trace else {}
    return {"final_objective": last.get("objective"), "final_acceptance": last.get("acceptance"),
            "clipped_updates": res.clipped, "skipped_updates": res.skipped}


def _toy_family_summary(family):
    if isinstance(family, MixtureGaussian):
        return {"weights": family.weights, "means": [c.mean for c in family.components],
                "covariances": [c.covariance() for c in family.components]}
    return {"mean": family.mean, "covariance": family.covariance()}


def toy_grid_kl(target, family, grid):
    try:
        kl_pq, kl_qp, sym = grid_kl(target.log_density, family.log_q, grid)
    except ValueError as exc:
        logger.warning("grid KL unavailable: %s", exc)
        return None
    return {"kl_q_p": kl_qp, "kl_p_q": kl_pq, "symmetrized": sym}


def write_toy_grids(cfg, name, target, family, out: Path):
    grid = toy_grid(cfg, name)
    emit_contours(lambda pts: np.exp(target.log_density(pts)), grid, out / f"grid_target_{name}.tsv")
    emit_contours(lambda pts: np.exp(family.log_q(pts)), grid, out / f"grid_q_{name}.tsv")
    return grid


def run_toy(cfg: ExperimentConfig, out: Path):
    streams = _streams(cfg.seed, len(TOY_TARGETS))
    tcfg = train_config(cfg)
    summary, params = {}, {}
    for name in cfg.toy_targets:
        rng = streams[TOY_TARGETS.index(name)]
        target = toy_target(name)
        family = init_toy_family(cfg, rng)
        logger.info("fitting %s to %s with %s (t=%d, %d leapfrog, step %g)", cfg.family, name,
                    cfg.mode, cfg.t, cfg.leapfrog_steps, cfg.step_size)
        res = fit_variational(target, family, tcfg, rng)
        write_trace_csv(out / f"trace_{name}.csv", res.trace, TRACE_COLUMNS)
        params[name] = res.theta.flat()
        grid = write_toy_grids(cfg, name, target, res.theta, out)
        summary[name] = {**_fit_summary(res), **_toy_family_summary(res.theta),
                         "grid_kl": toy_grid_kl(target, res.theta, grid)}
    write_npz(out / "params.npz", **params)
    return summary


def run_lvm(cfg: ExperimentConfig, out: Path):
    init_rng, train_rng, eval_rng = _streams(cfg.seed, 3)
    data = load_dataset(cfg)
    model, encoder = init_lvm(cfg, data.dim, init_rng)
    logger.info("training %s/%s with %s (t=%d, %d leapfrog, step %g)", cfg.model, cfg.family,
                cfg.mode, cfg.t, cfg.leapfrog_steps, cfg.step_size)
    res = fit_lvm(model, encoder, data.train, train_config(cfg), train_rng)
    write_trace_csv(out / "trace.csv", res.trace, TRACE_COLUMNS)
    write_npz(out / "params.npz", encoder=res.theta.flat(), model=res.phi.flat())
    summary = _fit_summary(res)
    summary["test"] = evaluate_lvm(cfg, res.phi, res.theta, data.test, eval_rng)
    return summary


def evaluate_lvm(cfg, model, encoder, rows, rng):
    if rows.shape[0] == 0:
        return None
    spec = ProposalSpec(cfg.eval_inflation, cfg.eval_hmc_total, cfg.eval_hmc_keep)
    est = evaluate_marginal_llh(model, encoder, rows, kernel_config(cfg), rng, cfg.eval_samples, spec)
    return {"mean_log_marginal": est.mean, "n_points": int(rows.shape[0]),
            "per_proposal_mean": est.per_proposal.mean(axis=1), "n_samples": cfg.eval_samples}


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Resolve ``cfg``, run it, and return the directory holding its outputs."""
    cfg = cfgmod.resolve(cfg)
    out = run_directory(cfg)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / MANIFEST, cfgmod.dumps(cfg))
    summary = run_toy(cfg, out) if cfg.experiment == "toy" else run_lvm(cfg, out)
    write_json(out / "summary.json", {"experiment": cfg.experiment, "seed": cfg.seed,
                                      "mode": cfg.mode, "results": summary})
    return out


def load_run(run_dir):
    """Rebuild ``(config, fitted objects)`` from a finished run directory."""
    run_dir = Path(run_dir)
    manifest = run_dir / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"{run_dir} has no {MANIFEST}")
    cfg = cfgmod.load(manifest)
    with np.load(run_dir / "params.npz") as npz:
        params = {k: npz[k] for k in npz.files}
    if cfg.experiment == "toy":
        template = init_toy_family(cfg, np.random.default_rng(0))
        return cfg, {name: template.with_flat(vec) for name, vec in params.items()}
    dim = cfg.data_dim if cfg.dataset == "synthetic" else load_dataset(cfg).dim
    model, encoder = init_lvm(cfg, dim, np.random.default_rng(0))
    return cfg, {"model": model.with_flat(params["model"]),
                 "encoder": encoder.with_flat(params["encoder"])}


def evaluate_run(run_dir, dataset=None):
    """Recompute evaluation metrics for a finished run and write ``eval.json``."""
    run_dir = Path(run_dir)
    cfg, fitted = load_run(run_dir)
    if cfg.experiment == "toy":
        result = {name: toy_grid_kl(toy_target(name), fam, toy_grid(cfg, name))
                  for name, fam in fitted.items()}
    else:
        data = load_dataset(cfg, dataset)
        rng = _streams(cfg.seed, 3)[2]
        result = evaluate_lvm(cfg, fitted["model"], fitted["encoder"], data.test, rng)
    write_json(run_dir / "eval.json", result)
    return result


def contours_run(run_dir):
    """Re-emit the target and fitted-q grids of a finished toy run."""
    run_dir = Path(run_dir)
    cfg, fitted = load_run(run_dir)
    if cfg.experiment != "toy":
        raise ValueError("contour grids are only defined for two-dimensional toy runs")
    for name, fam in fitted.items():
        write_toy_grids(cfg, name, toy_target(name), fam, run_dir)
    return sorted(fitted)
