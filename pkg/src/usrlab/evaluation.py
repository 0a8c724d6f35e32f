"""Generalization and transfer experiments, seed aggregation, CSV/SVG output.

Generalization compares a trained model on held-out target goals against a
reference: the exact tabular solution (``"oracle"``) or models trained
directly on each target goal (``"trained"``). Transfer compares learning
curves on the target goals for a model initialised from source-goal training
against one initialised at random.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from scipy import stats

from . import oracle
from .agent import (
    DivergenceError,
    TrainConfig,
    pretrain_phi,
    train,
    transfer_init,
    usr_tables,
)
from .config import RunConfig
from .env import GridWorld, Position, new_world
from .models import UsrModel

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SMOOTHING = 50
THRESHOLD = 0.8


@dataclass
class GeneralizationPoint:
    k: int
    metric: str
    mean: float
    stderr: float
    n_repeats: int
    values: list[float] = field(default_factory=list)


@dataclass
class CellResult:
    """One (k, seed) run of a transfer experiment."""

    k: int
    seed: int
    baseline: bool
    steps: np.ndarray
    returns: np.ndarray
    steps_to_threshold: int | None
    failure: str = ""


@dataclass
class TransferCurve:
    k: int
    baseline: bool
    env_step: np.ndarray
    mean_reward: np.ndarray
    stderr: np.ndarray
    cells: list[CellResult] = field(default_factory=list)

    @property
    def label(self) -> str:
        return "baseline" if self.baseline else f"k={self.k}"


# ---------------------------------------------------------------------------
# statistics


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        raise ValueError("no values to aggregate")
    se = float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def trailing_mean(x, window: int = SMOOTHING) -> np.ndarray:
    """Mean of the last ``window`` entries at every position (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def steps_to_threshold(steps, returns, threshold: float = THRESHOLD, window: int = SMOOTHING) -> int | None:
    """First env step at which the trailing ``window``-episode mean reaches ``threshold``.

    Only positions with a full window count, so a lucky first few episodes
    cannot trigger it.
    """
    steps = np.asarray(steps)
    if len(steps) < window:
        return None
    smooth = trailing_mean(returns, window)[window - 1:]
    hit = np.flatnonzero(smooth >= threshold)
    return int(steps[window - 1 + hit[0]]) if len(hit) else None


def trend(ks, means) -> float:
    """Spearman rank correlation of a metric against k."""
    return float(stats.spearmanr(ks, means)[0])


# ---------------------------------------------------------------------------
# per-goal metrics


def _phi_table(model: UsrModel, world: GridWorld) -> np.ndarray:
    return model.encode_phi(np.stack([world.observe(p) for p in world.cells]))


def oracle_reference(model: UsrModel, world: GridWorld, goal, temperature: float = 1e-3):
    """Exact (psi under pi*, soft pi*) for ``goal`` using the model's frozen features."""
    mdp = oracle.extract_mdp(world, goal)
    v, pi = oracle.value_iteration(mdp)
    psi = oracle.exact_successor_features(mdp, pi, _phi_table(model, world))
    return psi, oracle.optimal_policy_distribution(mdp, v, temperature)


def usr_mse(psi_model: np.ndarray, psi_ref: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean((psi_model[mask] - psi_ref[mask]) ** 2))


def policy_ce(pi_model: np.ndarray, pi_ref: np.ndarray, mask: np.ndarray) -> float:
    logp = np.log(np.maximum(pi_model[mask], PROB_FLOOR))
    return float(np.mean(-(pi_ref[mask] * logp).sum(axis=1)))


def _non_goal(world: GridWorld, goal) -> np.ndarray:
    # the goal cell is absorbing: no episode ever acts from it
    mask = np.ones(world.n_cells, dtype=bool)
    mask[world.index[Position(*goal)]] = False
    return mask


def _references(model, world, targets, reference_mode, temperature, reference_models):
    if reference_mode == "oracle":
        return [oracle_reference(model, world, g, temperature) for g in targets]
    if reference_mode == "trained":
        if reference_models is None or len(reference_models) != len(targets):
            raise ValueError("trained reference mode needs one reference model per target goal")
        return [usr_tables(ref, world, g) for ref, g in zip(reference_models, targets)]
    raise ValueError(f"unknown reference mode {reference_mode!r}")


def goal_metrics(model, world, targets, reference_mode="oracle", temperature=1e-3, reference_models=None):
    """[(goal, usr_mse, policy_ce)] for every target goal."""
    refs = _references(model, world, targets, reference_mode, temperature, reference_models)
    rows = []
    for g, (psi_ref, pi_ref) in zip(targets, refs):
        psi, pi = usr_tables(model, world, g)
        mask = _non_goal(world, g)
        rows.append((Position(*g), usr_mse(psi, psi_ref, mask), policy_ce(pi, pi_ref, mask)))
    return rows


def usr_generalization(model, world, targets, reference_mode="oracle", temperature=1e-3, reference_models=None) -> float:
    """Mean over target goals and non-goal states of the psi squared error."""
    rows = goal_metrics(model, world, targets, reference_mode, temperature, reference_models)
    return float(np.mean([r[1] for r in rows]))


def policy_generalization(model, world, targets, reference_mode="oracle", temperature=1e-3,
                          reference_models=None) -> float:
    """Mean over target goals and non-goal states of H(pi_ref, pi_model)."""
    rows = goal_metrics(model, world, targets, reference_mode, temperature, reference_models)
    return float(np.mean([r[2] for r in rows]))


# ---------------------------------------------------------------------------
# building blocks shared by the experiments


def make_world(cfg: RunConfig, seed: int) -> GridWorld:
    return new_world(cfg.env.layout_id, cfg.env.gamma_base, cfg.env.max_steps, seed)


def train_config(cfg: RunConfig, seed: int, **changes) -> TrainConfig:
    return dataclasses.replace(cfg.train, seed=seed, **changes)


def pretrained_model(cfg: RunConfig, seed: int) -> UsrModel:
    """Fresh model for ``seed`` with phase 1 done."""
    m = cfg.model
    world = make_world(cfg, seed)
    model = UsrModel(world.obs_dim, m.d, m.hidden, m.ae_hidden, seed, m.feature_mode)
    if not model.phi_frozen:
        pretrain_phi(world, model, train_config(cfg, seed))
    return model


def fresh_with_features(phi_model: UsrModel, seed: int) -> UsrModel:
    """Randomly initialised phase-2 networks on top of ``phi_model``'s frozen features."""
    out = UsrModel(phi_model.obs_dim, phi_model.d, phi_model.hidden, phi_model.ae_hidden, seed,
                   phi_model.feature_mode)
    out.encoder.set_values(phi_model.encoder.params.values)
    out.decoder.set_values(phi_model.decoder.params.values)
    out.freeze_phi()
    return out


def train_source(cfg: RunConfig, k: int, seed: int, phi_model: UsrModel | None = None):
    """Phase 2 on ``k`` sampled source goals; returns (model, split, log)."""
    phi_model = pretrained_model(cfg, seed) if phi_model is None else phi_model
    model = fresh_with_features(phi_model, seed)
    world = make_world(cfg, seed)
    split = world.sample_source_goals(k, seed)
    lg = train(world, model, split.source, train_config(cfg, seed))
    log.info("k=%d seed=%d: %d steps, %d episodes, converged=%s", k, seed, lg.env_steps, len(lg.episodes),
             lg.converged)
    return model, split, lg


def train_reference_models(cfg: RunConfig, phi_model: UsrModel, targets, seed: int) -> list[UsrModel]:
    """One model per target goal trained directly on it, sharing the frozen features."""
    refs = []
    for i, g in enumerate(targets):
        model = fresh_with_features(phi_model, seed)
        train(make_world(cfg, seed), model, [Position(*g)], train_config(cfg, seed * 1000 + i))
        refs.append(model)
    return refs


# ---------------------------------------------------------------------------
# experiments


def generalization_sweep(cfg: RunConfig, k_values=None, seeds=None, trained: dict | None = None):
    """Rows (k, metric, seed, value) over the k x seed grid.

    ``trained`` optionally caches ``{(k, seed): model}`` and is filled in
    with every model trained here.
    """
    k_values = list(cfg.experiment.k_values if k_values is None else k_values)
    seeds = list(cfg.experiment.seeds if seeds is None else seeds)
    trained = {} if trained is None else trained
    x = cfg.experiment
    rows = []
    for seed in seeds:
        phi_model = None
        refs = None
        for k in k_values:
            if (k, seed) not in trained:
                if phi_model is None:
                    phi_model = pretrained_model(cfg, seed)
                trained[(k, seed)] = train_source(cfg, k, seed, phi_model)[0]
            model = trained[(k, seed)]
            world = make_world(cfg, seed)
            targets = world.goal_pools()[1]
            if x.reference_mode == "trained" and refs is None:
                refs = train_reference_models(cfg, model, targets, seed)
            metrics = goal_metrics(model, world, targets, x.reference_mode, x.reference_temperature, refs)
            rows.append((k, "usr_mse", seed, float(np.mean([m[1] for m in metrics]))))
            rows.append((k, "policy_ce", seed, float(np.mean([m[2] for m in metrics]))))
    return rows


def aggregate_generalization(rows) -> list[GeneralizationPoint]:
    groups: dict[tuple[int, str], list[float]] = {}
    for k, metric, _seed, value in rows:
        groups.setdefault((k, metric), []).append(value)
    counts = {len(v) for v in groups.values()}
    if len(counts) > 1:
        raise ValueError("every point must aggregate the same number of repeats")
    points = []
    for (k, metric), values in sorted(groups.items()):
        mean, se = mean_stderr(values)
        points.append(GeneralizationPoint(k, metric, mean, se, len(values), values))
    return points


def _target_phase(cfg: RunConfig, model: UsrModel, seed: int, k: int, baseline: bool) -> CellResult:
    world = make_world(cfg, seed)
    targets = world.goal_pools()[1]
    tcfg = train_config(cfg, seed, max_env_steps=cfg.experiment.transfer_steps, stop_on_convergence=False)
    try:
        lg = train(world, model, targets, tcfg)
    except DivergenceError as exc:
        return CellResult(k, seed, baseline, np.zeros(0, np.int64), np.zeros(0), None, f"diverged: {exc}")
    steps, returns = lg.steps(), lg.returns()
    return CellResult(k, seed, baseline, steps, returns, steps_to_threshold(steps, returns))


def treatment_cell(cfg: RunConfig, k: int, seed: int, phi_model=None, source_model=None) -> CellResult:
    """Source training on k goals (unless ``source_model`` is given), then the target phase."""
    try:
        if source_model is None:
            source_model = train_source(cfg, k, seed, phi_model)[0]
    except DivergenceError as exc:
        return CellResult(k, seed, False, np.zeros(0, np.int64), np.zeros(0), None, f"diverged: {exc}")
    return _target_phase(cfg, transfer_init(source_model), seed, k, baseline=False)


def baseline_cell(cfg: RunConfig, seed: int, phi_model: UsrModel) -> CellResult:
    """Target phase from random phase-2 weights on the same frozen features."""
    return _target_phase(cfg, fresh_with_features(phi_model, seed), seed, 0, baseline=True)


def curve_from_cells(k: int, baseline: bool, cells: list[CellResult], budget: int, resolution: int = 500) -> TransferCurve:
    """Mean and stderr over seeds of the smoothed reward on a common step grid."""
    resolution = max(1, min(resolution, budget))
    grid = np.arange(resolution, budget + 1, resolution)
    per_seed = []
    for c in cells:
        if c.failure or not len(c.steps):
            continue
        smooth = trailing_mean(c.returns)
        idx = np.searchsorted(c.steps, grid, side="right") - 1
        per_seed.append(np.where(idx >= 0, smooth[np.maximum(idx, 0)], np.nan))
    mean = np.full(len(grid), np.nan)
    se = np.zeros(len(grid))
    if per_seed:
        arr = np.array(per_seed)
        for j, col in enumerate(arr.T):
            col = col[np.isfinite(col)]
            if len(col):
                mean[j], se[j] = mean_stderr(col)
    return TransferCurve(k, baseline, grid, mean, se, list(cells))


def transfer_experiment(cfg: RunConfig, k_values=None, seeds=None, trained: dict | None = None) -> list[TransferCurve]:
    """One curve per k plus one baseline curve, paired by seed.

    The baseline shares each seed's pretrained features and environment
    seeding, so only the phase-2 initialisation differs. ``trained`` may hold
    already trained source models keyed by ``(k, seed)``.
    """
    k_values = list(cfg.experiment.k_values if k_values is None else k_values)
    seeds = list(cfg.experiment.seeds if seeds is None else seeds)
    trained = trained or {}
    by_k: dict[int, list[CellResult]] = {k: [] for k in k_values}
    baselines: list[CellResult] = []
    for seed in seeds:
        phi_model = None
        for k in k_values:
            source = trained.get((k, seed))
            if source is None and phi_model is None:
                phi_model = pretrained_model(cfg, seed)
            by_k[k].append(treatment_cell(cfg, k, seed, phi_model, source))
        if phi_model is None:
            phi_model = trained[(k_values[0], seed)]
        baselines.append(baseline_cell(cfg, seed, phi_model))
    budget = cfg.experiment.transfer_steps
    curves = [curve_from_cells(k, False, cells, budget) for k, cells in by_k.items()]
    curves.append(curve_from_cells(0, True, baselines, budget))
    return curves


def speedup(curves: list[TransferCurve], k: int) -> float | None:
    """1 - mean steps-to-threshold(k) / mean steps-to-threshold(baseline).

    Runs that never reach the threshold count as the full budget.
    """
    def mean_steps(curve):
        budget = int(curve.env_step[-1]) if len(curve.env_step) else 0
        vals = [c.steps_to_threshold if c.steps_to_threshold is not None else budget
                for c in curve.cells if not c.failure]
        return float(np.mean(vals)) if vals else None

    treat = next(c for c in curves if not c.baseline and c.k == k)
    base = next(c for c in curves if c.baseline)
    t, b = mean_steps(treat), mean_steps(base)
    if t is None or not b:
        return None
    return 1.0 - t / b


# ---------------------------------------------------------------------------
# output


def _fmt(x) -> str:
    return repr(float(x))


def write_generalization_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "metric", "seed", "value"])
        for k, metric, seed, value in rows:
            w.writerow([k, metric, seed, _fmt(value)])


def write_transfer_csv(curves: list[TransferCurve], path) -> int:
    """Per-episode rows of every cell; failed cells get one row naming the failure."""
    n = 0
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "seed", "env_step", "reward", "is_baseline", "failures"])
        for curve in curves:
            for c in curve.cells:
                k = 0 if c.baseline else c.k
                if c.failure:
                    w.writerow([k, c.seed, "", "", int(c.baseline), c.failure])
                    n += 1
                for step, r in zip(c.steps, c.returns):
                    w.writerow([k, c.seed, int(step), _fmt(r), int(c.baseline), ""])
                    n += 1
    return n


def write_transfer_summary(curves: list[TransferCurve], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "seed", "is_baseline", "steps_to_threshold", "episodes", "failures"])
        for curve in curves:
            for c in curve.cells:
                stt = "" if c.steps_to_threshold is None else c.steps_to_threshold
                w.writerow([0 if c.baseline else c.k, c.seed, int(c.baseline), stt, len(c.returns), c.failure])


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def svg_plot(series, title: str, xlabel: str, ylabel: str, width: int = 640, height: int = 420) -> str:
    """Line plot with stderr bands. ``series`` is [(label, x, mean, stderr)]."""
    if not series:
        raise ValueError("nothing to plot")
    left, right, top, bottom = 70, 130, 40, 50
    pw, ph = width - left - right, height - top - bottom
    xs = np.concatenate([np.asarray(s[1], float) for s in series])
    lo_hi = [np.asarray(s[2], float) + sign * np.asarray(s[3], float) for s in series for sign in (-1, 1)]
    ys = np.concatenate(lo_hi)
    ys = ys[np.isfinite(ys)]
    x0, x1 = (float(xs.min()), float(xs.max())) if len(xs) else (0.0, 1.0)
    y0, y1 = (float(ys.min()), float(ys.max())) if len(ys) else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(5):
        xv = x0 + i * (x1 - x0) / 4
        yv = y0 + i * (y1 - y0) / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{xv:.4g}</text>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (label, x, mean, se) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        x, mean, se = (np.asarray(a, float) for a in (x, mean, se))
        ok = np.isfinite(mean)
        x, mean, se = x[ok], mean[ok], se[ok]
        if len(x):
            upper = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean + se)]
            lower = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], (mean - se)[::-1])]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
            line = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean))
            out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_generalization(rows, prefix) -> list[Path]:
    """``<prefix>generalization.csv`` plus one SVG per metric."""
    if not rows:
        raise ValueError("no records to emit")
    prefix = str(prefix)
    paths = [Path(prefix + "generalization.csv")]
    write_generalization_csv(rows, paths[0])
    points = aggregate_generalization(rows)
    for metric, ylabel in (("usr_mse", "USR MSE to reference"), ("policy_ce", "policy cross-entropy")):
        pts = [p for p in points if p.metric == metric]
        series = [(metric, [p.k for p in pts], [p.mean for p in pts], [p.stderr for p in pts])]
        path = Path(f"{prefix}{metric}.svg")
        path.write_text(svg_plot(series, f"{ylabel} on target goals", "number of source goals k", ylabel))
        paths.append(path)
    return paths


def emit_transfer(curves: list[TransferCurve], prefix) -> list[Path]:
    """``<prefix>transfer.csv``, a per-cell summary and the reward-curve SVG."""
    if not curves:
        raise ValueError("no records to emit")
    prefix = str(prefix)
    paths = [Path(prefix + "transfer.csv"), Path(prefix + "transfer_summary.csv"), Path(prefix + "transfer.svg")]
    write_transfer_csv(curves, paths[0])
    write_transfer_summary(curves, paths[1])
    series = [(c.label, c.env_step, c.mean_reward, c.stderr) for c in curves]
    paths[2].write_text(svg_plot(series, "reward on target goals", "environment steps",
                                 f"mean episode reward (trailing {SMOOTHING})"))
    return paths

