"""Command line entry point: ``opteq verify|train|solve|factorize``."""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import replace

import click
import numpy as np

from .activations import Activation
from .config import ConfigError, load_config
from .datasets import make_dataset
from .deepnet import (
    factorized_output,
    feedforward_output,
    forward_map,
    load_checkpoint,
    random_model,
    readout,
    save_checkpoint,
    universal_factorize,
)
from .regularizers import KINDS as REGULARIZER_KINDS
from .regularizers import Regularizer, append_structural_regularizer
from .solvers import SamSchedule, picard_solve, sam_solve
from .training import Batch, LossSpec, LrSchedule, TrainingDiverged, sgd_train
from .verify import SUITES, run_suites

__all__ = ["main", "build_experiment", "solve_checkpoint", "factorize_report"]


@click.group()
def main():
    """Optimization-induced equilibrium networks: checks, training and solves."""


# ------------------------------------------------------------------ verify

@main.command()
@click.argument("suite", default="all")
def verify(suite):
    """Run a property suite (or 'all') and print one line per check."""
    if suite != "all" and suite not in SUITES:
        raise click.UsageError(f"unknown suite {suite!r}; choose from all, {', '.join(SUITES)}")
    checks, seconds = run_suites([suite], echo=click.echo)
    failed = sum(not c.passed for c in checks)
    click.echo(f"{len(checks) - failed}/{len(checks)} checks passed in {seconds:.1f} s")
    sys.exit(1 if failed else 0)


# ------------------------------------------------------------------- train

def _as_targets(batch, loss_kind):
    """Return ``(batch, output_dim)``; integer labels become one-hot rows for squared loss."""
    y = batch.y
    if y.ndim == 2:
        return batch, y.shape[0]
    classes = int(y.max()) + 1
    if loss_kind == "squared":
        onehot = np.zeros((classes, y.size))
        onehot[y, np.arange(y.size)] = 1.0
        return Batch(batch.x0, onehot), classes
    return batch, classes


def build_experiment(cfg):
    """Dataset, initial model and regularizer wiring for a parsed config.

    Returns ``(dataset, model, reg, sched)``; ``reg`` and ``sched`` are None
    unless the regularizer is placed inside the SAM iteration.
    """
    ds = make_dataset(cfg.dataset.generator, cfg.dataset.params, seed=cfg.seed)
    ds, out_dim = _as_targets(ds, cfg.training.loss)
    m = cfg.model
    act = Activation.from_config(
        m.activation if m.slope is None else {"kind": m.activation, "slope": m.slope})
    model = random_model(m.depth, m.hidden, m.features, ds.x0.shape[0], out_dim, alpha=m.alpha,
                         activation=act, seed=cfg.seed, layer_norm=m.layer_norm,
                         extractor_nonlinearity=m.extractor)
    model = replace(model, mu=m.mu)
    r = cfg.regularizer
    reg = sched = None
    if r.placement != "none":
        center = tuple(r.center) if r.center is not None else None
        reg = Regularizer(r.kind, lam=r.lam, eps=r.eps, center=center, bandwidth=r.bandwidth)
    if r.placement == "structural":
        model = append_structural_regularizer(model, reg, r.gamma)
        reg = None
    elif r.placement == "sam":
        s = cfg.solver.schedule
        lz = s.L_z if s.L_z is not None else (reg.lipschitz or 1.0)
        eta = s.eta if s.eta is not None else SamSchedule.eta_bound(lz)
        sched = SamSchedule(eta=eta, rho=s.rho, c=s.c, gamma=s.gamma, L_z=lz)
    return ds, model, reg, sched


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--metrics", "metrics_path", default=None, help="Override the metrics CSV path.")
@click.option("--checkpoint", "ckpt_path", default=None, help="Override the checkpoint path.")
def train(config_path, metrics_path, ckpt_path):
    """Train from a JSON config; writes the metrics CSV and final checkpoint."""
    try:
        cfg = load_config(config_path)
        ds, model, reg, sched = build_experiment(cfg)
    except (ConfigError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    t = cfg.training
    metrics_path = metrics_path or cfg.output.metrics
    ckpt_path = ckpt_path or cfg.output.checkpoint
    try:
        log = sgd_train(
            model, ds, t.epochs, LrSchedule(t.lr, t.halve_every),
            LossSpec(t.loss, t.weight_decay), mode=t.mode, batch_size=t.batch_size,
            reg=reg, sched=sched, K=cfg.solver.K, project=t.project, seed=cfg.seed,
            tol_fwd=t.tol_fwd, tol_adj=t.tol_adj,
            allow_nonconvex=cfg.regularizer.allow_nonconvex, metrics_path=metrics_path,
        )
    except TrainingDiverged as exc:
        click.echo(f"training diverged: {exc}", err=True)
        sys.exit(3)
    except ValueError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    save_checkpoint(log.model, ckpt_path)
    last = [r for r in log.records if r.split == "train"][-1]
    click.echo(f"epochs {last.epoch} final loss {last.loss:.6e} final residual "
               f"{last.residual_mean:.6e} metrics {metrics_path} checkpoint {ckpt_path}")


# ------------------------------------------------------------------- solve

def _read_input(spec, dim):
    """A vector from a file (JSON array or whitespace separated) or a comma list."""
    if os.path.isfile(spec):
        with open(spec, "r", encoding="utf-8") as fh:
            text = fh.read()
        try:
            values = json.loads(text)
        except json.JSONDecodeError:
            values = text.split()
    else:
        values = [v for v in spec.replace(",", " ").split()]
    try:
        x = np.asarray(values, dtype=np.float64).reshape(-1)
    except ValueError:
        raise click.BadParameter(f"cannot read a numeric vector from {spec!r}") from None
    if x.size != dim:
        raise click.BadParameter(f"input has {x.size} entries, the model expects {dim}")
    return x


def solve_checkpoint(model, x0, mode="picard", tol=1e-8, K=1000, reg=None, sched=None,
                     max_iter=10_000, trajectory=False):
    """Equilibrium for one input; returns a JSON-ready dict."""
    x = model.extractor(x0)
    T = lambda z: forward_map(model, z, x)  # noqa: E731
    z0 = np.zeros(model.hidden_dim)
    if mode == "picard":
        rep = picard_solve(T, z0, tol, max_iter, record_trajectory=trajectory)
    else:
        rep = sam_solve(T, reg, sched, z0, K, record_trajectory=trajectory)
    out = rep.to_dict()
    out.pop("trajectory", None)
    out["mode"] = mode
    out["output"] = readout(model, rep.z_star).tolist()
    return out, rep.trajectory


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("input_spec", metavar="INPUT")
@click.option("--mode", type=click.Choice(["picard", "sam"]), default="picard")
@click.option("--tol", type=float, default=1e-8, show_default=True, help="Picard tolerance.")
@click.option("--max-iter", type=int, default=10_000, show_default=True)
@click.option("--K", "K", type=int, default=1000, show_default=True, help="SAM iterations.")
@click.option("--reg", "reg_kind", type=click.Choice(list(REGULARIZER_KINDS)),
              default="squared_l2", show_default=True, help="SAM regularizer.")
@click.option("--lam", type=float, default=1.0, show_default=True)
@click.option("--eta", type=float, default=None, help="SAM eta (default: largest admissible).")
@click.option("--emit-trajectory", type=click.Path(dir_okay=False), default=None,
              help="Write per-iteration residuals to this CSV.")
def solve(checkpoint, input_spec, mode, tol, max_iter, K, reg_kind, lam, eta, emit_trajectory):
    """Solve for the equilibrium of a checkpoint at one input; JSON to stdout."""
    try:
        model = load_checkpoint(checkpoint)
    except (ValueError, KeyError) as exc:
        click.echo(f"cannot load checkpoint: {exc}", err=True)
        sys.exit(2)
    x0 = _read_input(input_spec, model.input_dim)
    reg = sched = None
    if mode == "sam":
        try:
            reg = Regularizer(reg_kind, lam=lam)
            lz = reg.lipschitz or 1.0
            sched = SamSchedule(eta=eta if eta is not None else SamSchedule.eta_bound(lz), L_z=lz)
            out, traj = solve_checkpoint(model, x0, "sam", K=K, reg=reg, sched=sched,
                                         trajectory=bool(emit_trajectory))
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
    else:
        out, traj = solve_checkpoint(model, x0, "picard", tol=tol, max_iter=max_iter,
                                     trajectory=bool(emit_trajectory))
    if emit_trajectory:
        with open(emit_trajectory, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "residual"])
            for k, r in enumerate(traj):
                w.writerow([k, repr(float(r))])
    click.echo(json.dumps(out))
    if mode == "picard" and not out["converged"]:
        sys.exit(1)


# --------------------------------------------------------------- factorize

def factorize_report(model, m, seed=0, samples=10):
    """Factor the chain of layer weights at width ``m`` and compare outputs."""
    Ws = [p.W for p in model.layers]
    Wbar = universal_factorize(Ws, m, seed)
    residuals = [float(np.linalg.norm(W - Wbar[k] @ Wbar[k - 1].T) / max(np.linalg.norm(W), 1e-300))
                 for k, W in enumerate(Ws, start=1)]
    biases = [p.b for p in model.layers[:-1]]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        z0 = rng.standard_normal(Ws[0].shape[1])
        diff = feedforward_output(Ws, biases, model.activation, z0) - \
            factorized_output(Wbar, biases, model.activation, z0)
        worst = max(worst, float(np.linalg.norm(diff)))
    return {
        "width": m,
        "factor_shapes": [list(W.shape) for W in Wbar],
        "factor_residuals": residuals,
        "max_output_difference": worst,
    }


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--width", "m", type=int, required=True, help="Common width of the factors.")
@click.option("--seed", type=int, default=0, show_default=True)
def factorize(checkpoint, m, seed):
    """Write the checkpoint's weight chain as W_k = Wbar_k Wbar_{k-1}^T; JSON to stdout."""
    try:
        model = load_checkpoint(checkpoint)
        report = factorize_report(model, m, seed)
    except (ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(report))


if __name__ == "__main__":
    main()
