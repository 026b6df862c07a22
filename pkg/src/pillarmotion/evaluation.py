"""Per-pillar error metrics, group breakdowns, and experiment harnesses.

Errors are Euclidean distances between predicted and true pillar
displacements, reported per group over nonempty pillars: the three speed
groups (static, slow up to 5 m/s, fast beyond), all nonempty pillars, all
foreground pillars, and all moving pillars. Medians use the lower of the
two middle values for even counts. Aggregation over scenes is the plain
average of each statistic with counts summed; groups absent from a scene
are skipped via NaN-aware means.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .estimator import LossConfig, OptimizerConfig, ablation_run
from .pillar_grid import PillarMotionField
from .simulator import SceneTruth

GROUPS = ("static", "slow", "fast", "nonempty", "foreground", "moving")
DEFAULT_BANDS = (10.0, 20.0, 30.0)
DEFAULT_SWEEP_VALUES = (0.01, 0.02, 0.03, 0.04, 0.05)


class GridMismatchError(ValueError):
    """Prediction and truth live on different grids."""


@dataclass(frozen=True)
class GroupStats:
    mean: float
    median: float
    count: int


def _stats(errors: np.ndarray) -> GroupStats:
    n = len(errors)
    if n == 0:
        return GroupStats(float("nan"), float("nan"), 0)
    ordered = np.sort(errors)
    return GroupStats(float(errors.mean()), float(ordered[(n - 1) // 2]), n)


def _group_masks(truth: SceneTruth) -> dict:
    nonempty = truth.field.nonempty
    return {
        "static": truth.static & nonempty,
        "slow": truth.slow & nonempty,
        "fast": truth.fast & nonempty,
        "nonempty": nonempty,
        "foreground": truth.foreground & nonempty,
        "moving": truth.moving & nonempty,
    }


def evaluate(pred: PillarMotionField, truth: SceneTruth,
             extra_mask: np.ndarray | None = None) -> dict:
    """Group-wise mean/median displacement error over nonempty pillars.

    Args:
        pred: estimated motion field.
        truth: simulator ground truth on the same grid.
        extra_mask: optional (H, W) boolean restriction applied to every group.

    Returns:
        dict mapping each group name to a GroupStats.
    """
    if pred.grid != truth.field.grid:
        raise GridMismatchError("prediction and truth grids differ")
    err = np.linalg.norm(pred.motion - truth.field.motion, axis=-1)
    masks = _group_masks(truth)
    if extra_mask is not None:
        masks = {name: mask & extra_mask for name, mask in masks.items()}
    return {name: _stats(err[mask]) for name, mask in masks.items()}


def evaluate_banded(pred: PillarMotionField, truth: SceneTruth,
                    bands=DEFAULT_BANDS) -> dict:
    """``evaluate`` restricted to cumulative distance bands.

    A band ``d`` covers every pillar whose cell center lies within ``d``
    meters of the sensor origin, so wider bands contain narrower ones.
    """
    centers = truth.field.grid.cell_centers()
    dist = np.linalg.norm(centers, axis=-1)
    return {float(d): evaluate(pred, truth, extra_mask=dist < d) for d in bands}


def average_group_errors(per_scene: list) -> dict:
    """Average GroupStats across scenes (NaN-aware), summing counts."""
    out = {}
    for name in GROUPS:
        means = np.array([s[name].mean for s in per_scene])
        medians = np.array([s[name].median for s in per_scene])
        counts = sum(s[name].count for s in per_scene)
        mean = float(np.nanmean(means)) if np.isfinite(means).any() else float("nan")
        median = float(np.nanmean(medians)) if np.isfinite(medians).any() else float("nan")
        out[name] = GroupStats(mean, median, counts)
    return out


def _scene_job(job):
    scene, truth, variant, loss_cfg, opt_cfg = job
    start = time.perf_counter()
    result = ablation_run(scene, variant, loss_cfg, opt_cfg)
    elapsed = time.perf_counter() - start
    return evaluate(result.field, truth), result, elapsed


def _run_jobs(jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_scene_job(job) for job in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_scene_job, jobs))


def run_scene(scene, truth: SceneTruth, variant: str = "e",
              loss_cfg: LossConfig | None = None,
              opt_cfg: OptimizerConfig | None = None):
    """Estimate one scene under one variant and score it.

    Returns (GroupErrors, EstimateResult).
    """
    errors, result, _ = _scene_job((scene, truth, variant, loss_cfg, opt_cfg))
    return errors, result


def ablation_table(scenes: list, variants: str = "abcde",
                   loss_cfg: LossConfig | None = None,
                   opt_cfg: OptimizerConfig | None = None,
                   workers: int = 1, per_scene_hook=None) -> dict:
    """Run every variant over every scene and average the group errors.

    ``scenes`` is a sequence of (SceneInputs, SceneTruth) pairs. Scene runs
    may execute in parallel processes (``workers``); results are collected
    in submission order, so the table is identical for any worker count.
    The optional hook receives (variant, scene_index, GroupErrors,
    EstimateResult, seconds) after each run.
    """
    if not scenes:
        raise ValueError("at least one scene is required")
    table = {}
    for variant in variants:
        jobs = [(scene, truth, variant, loss_cfg, opt_cfg) for scene, truth in scenes]
        outcomes = _run_jobs(jobs, workers)
        per_scene = []
        for i, (errors, result, elapsed) in enumerate(outcomes):
            per_scene.append(errors)
            if per_scene_hook is not None:
                per_scene_hook(variant, i, errors, result, elapsed)
        table[variant] = average_group_errors(per_scene)
    return table


@dataclass(eq=False)
class SweepResult:
    per_value: dict          # lambda -> averaged GroupErrors
    std_of_means: dict       # group -> std of the group mean across lambdas


def lambda_sweep(scenes: list, values=DEFAULT_SWEEP_VALUES,
                 loss_cfg: LossConfig | None = None,
                 opt_cfg: OptimizerConfig | None = None,
                 workers: int = 1) -> SweepResult:
    """Full-model runs across cross-sensor weights, with cross-value spread.

    Reports the averaged group errors per weight value and, per group, the
    population standard deviation of the group mean across the values.
    """
    if len(values) < 1:
        raise ValueError("at least one weight value is required")
    cfg = loss_cfg or LossConfig()
    per_value = {}
    for value in values:
        run_cfg = replace(cfg, lambda_regular=float(value))
        jobs = [(scene, truth, "e", run_cfg, opt_cfg) for scene, truth in scenes]
        outcomes = _run_jobs(jobs, workers)
        per_value[float(value)] = average_group_errors([o[0] for o in outcomes])
    std_of_means = {}
    for name in GROUPS:
        means = np.array([per_value[float(v)][name].mean for v in values])
        finite = means[np.isfinite(means)]
        std_of_means[name] = float(np.std(finite)) if len(finite) else float("nan")
    return SweepResult(per_value, std_of_means)


def smoothness_delta(scenes: list, loss_cfg: LossConfig | None = None,
                     opt_cfg: OptimizerConfig | None = None,
                     workers: int = 1) -> dict:
    """Per-group mean-error change from disabling the smoothness term."""
    cfg = loss_cfg or LossConfig()
    on_jobs = [(s, t, "e", cfg, opt_cfg) for s, t in scenes]
    off_cfg = replace(cfg, lambda_smooth=0.0)
    off_jobs = [(s, t, "e", off_cfg, opt_cfg) for s, t in scenes]
    on = average_group_errors([o[0] for o in _run_jobs(on_jobs, workers)])
    off = average_group_errors([o[0] for o in _run_jobs(off_jobs, workers)])
    return {name: off[name].mean - on[name].mean for name in GROUPS}


# Report writers. CSV rows carry (identifying columns), group,
# statistic in {mean, median, count}, value; JSON mirrors the nesting with
# null for undefined statistics.

def _stats_rows(errors: dict):
    for name in GROUPS:
        s = errors[name]
        yield name, "mean", s.mean
        yield name, "median", s.median
        yield name, "count", s.count


def _errors_dict(errors: dict) -> dict:
    def clean(v):
        return v if np.isfinite(v) else None
    return {name: {"mean": clean(s.mean), "median": clean(s.median),
                   "count": s.count}
            for name, s in errors.items()}


def write_eval_report(prefix: str, errors: dict, banded: dict | None = None) -> None:
    """Write ``<prefix>.csv`` and ``<prefix>.json`` for one evaluation.

    CSV columns: band,group,statistic,value with band "all" for the
    unrestricted run.
    """
    lines = ["band,group,statistic,value"]
    payload = {"all": _errors_dict(errors)}
    for group, stat, value in _stats_rows(errors):
        lines.append(f"all,{group},{stat},{value}")
    for band, berr in (banded or {}).items():
        payload[str(band)] = _errors_dict(berr)
        for group, stat, value in _stats_rows(berr):
            lines.append(f"{band},{group},{stat},{value}")
    _write_reports(prefix, lines, payload)


def write_ablation_report(prefix: str, table: dict) -> None:
    """CSV columns: variant,group,statistic,value; JSON mirrors the nesting."""
    lines = ["variant,group,statistic,value"]
    payload = {}
    for variant, errors in table.items():
        payload[variant] = _errors_dict(errors)
        for group, stat, value in _stats_rows(errors):
            lines.append(f"{variant},{group},{stat},{value}")
    _write_reports(prefix, lines, payload)


def write_sweep_report(prefix: str, sweep: SweepResult) -> None:
    """CSV columns: lambda_regular,group,statistic,value.

    Cross-value spreads appear as rows with lambda_regular "all" and
    statistic "std_of_mean".
    """
    lines = ["lambda_regular,group,statistic,value"]
    payload = {"per_value": {}, "std_of_group_means": sweep.std_of_means}
    for value, errors in sweep.per_value.items():
        payload["per_value"][str(value)] = _errors_dict(errors)
        for group, stat, stat_value in _stats_rows(errors):
            lines.append(f"{value},{group},{stat},{stat_value}")
    for name in GROUPS:
        lines.append(f"all,{name},std_of_mean,{sweep.std_of_means[name]}")
    _write_reports(prefix, lines, payload)


def _write_reports(prefix: str, csv_lines: list, payload: dict) -> None:
    with open(f"{prefix}.csv", "w") as fh:
        fh.write("\n".join(csv_lines) + "\n")
    with open(f"{prefix}.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
