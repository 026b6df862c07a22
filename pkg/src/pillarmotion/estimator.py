"""Direct first-order estimation of a pillar motion field for one sweep pair.

Instead of training a network to emit the field, the field itself is the
optimization variable: starting from all zeros, adaptive-moment gradient
steps minimize the total self-supervised objective, with nearest-neighbor
matches re-frozen at every iteration. Only nonempty pillars are updated;
empty pillars stay at zero throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossConfig, SceneInputs, build_mask, compute_flow_samples, \
    total_loss, variant_config
from .pillar_grid import PillarMotionField, pillarize


class NumericalError(RuntimeError):
    """The objective or its gradient stopped being finite."""


@dataclass(frozen=True)
class OptimizerConfig:
    """Adaptive-moment gradient descent settings.

    ``step_size`` is in meters per step; ``step_decay`` multiplies it every
    iteration. Convergence is declared when the total loss changes by less
    than ``tolerance`` (relative) across ``tolerance_window`` iterations, or
    immediately when the gradient vanishes. ``seed`` is carried for config
    completeness; the optimizer itself is fully deterministic.
    """

    step_size: float = 0.05
    step_decay: float = 1.0
    max_iters: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    tolerance: float = 1e-5
    tolerance_window: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0.0 < self.step_decay <= 1.0:
            raise ValueError("step_decay must lie in (0, 1]")


@dataclass(eq=False)
class EstimateResult:
    """Optimized field plus the per-iteration loss trace and run diagnostics."""

    field: PillarMotionField
    trace: list = field(default_factory=list)   # dicts: consist/regular/smooth/total
    iterations: int = 0
    converged: bool = False
    diagnostics: dict = field(default_factory=dict)


def estimate(scene: SceneInputs, loss_cfg: LossConfig | None = None,
             opt_cfg: OptimizerConfig | None = None) -> EstimateResult:
    """Minimize the total objective over the motion field of ``scene``.

    Both sweeps are cropped to the grid footprint first. Matches are
    recomputed every iteration, so the trace need not decrease monotonically;
    it is recorded in full. Raises NumericalError if the loss leaves the
    finite range and ValueError when either cropped sweep is empty.
    """
    cfg = loss_cfg or LossConfig()
    opt = opt_cfg or OptimizerConfig()

    cloud_t = scene.grid.crop(scene.cloud_t)
    cloud_t1 = scene.grid.crop(scene.cloud_t1)
    if len(cloud_t) == 0 or len(cloud_t1) == 0:
        raise ValueError("a sweep is empty after cropping to the grid")
    cropped = SceneInputs(cloud_t, cloud_t1, scene.grid, scene.horizon,
                          scene.cameras, scene.flows, scene.ego_motion)

    pill = pillarize(cloud_t, scene.grid)
    samples = None
    mask = None
    if scene.cameras and (cfg.lambda_regular > 0 or cfg.use_mask):
        samples = compute_flow_samples(cropped, cfg)
    if cfg.use_mask:
        mask = build_mask(cloud_t, pill, samples or [], cfg)

    motion_field = PillarMotionField.zeros(scene.grid, pill.nonempty, scene.horizon)
    active = pill.nonempty[:, :, None]
    m = np.zeros_like(motion_field.motion)
    v = np.zeros_like(motion_field.motion)
    trace: list[dict] = []
    converged = False
    iterations = 0

    for it in range(1, opt.max_iters + 1):
        terms = total_loss(motion_field, cropped, cfg, pill=pill, mask=mask,
                           samples=samples)
        if not np.isfinite(terms.total):
            raise NumericalError(f"non-finite loss at iteration {it}: {terms.total}")
        trace.append({"consist": terms.consist, "regular": terms.regular,
                      "smooth": terms.smooth, "total": terms.total})
        iterations = it

        g = np.where(active, terms.grad_total, 0.0)
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient at iteration {it}")
        if np.abs(g).max() == 0.0:
            converged = True
            break

        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        m_hat = m / (1.0 - opt.beta1**it)
        v_hat = v / (1.0 - opt.beta2**it)
        lr = opt.step_size * opt.step_decay ** (it - 1)
        motion_field.motion -= np.where(
            active, lr * m_hat / (np.sqrt(v_hat) + opt.epsilon), 0.0
        )

        win = opt.tolerance_window
        if len(trace) > win:
            prev = trace[-1 - win]["total"]
            if abs(trace[-1]["total"] - prev) <= opt.tolerance * max(abs(prev), 1e-12):
                converged = True
                break

    diagnostics = {
        "points_t": int(len(cloud_t)),
        "points_t1": int(len(cloud_t1)),
        "nonempty_pillars": int(pill.nonempty.sum()),
    }
    if samples is not None:
        diagnostics["flow_samples"] = [
            {"sampled": int(len(s.point_index)), "out_of_view": int(s.n_out_of_view),
             "invalid_flow": int(s.n_invalid_flow)}
            for s in samples
        ]
    if mask is not None:
        covered = np.isfinite(mask.point_static)
        diagnostics["mask_point_coverage"] = float(covered.mean()) if len(covered) else 0.0
    return EstimateResult(motion_field, trace, iterations, converged, diagnostics)


def ablation_run(scene: SceneInputs, variant: str,
                 loss_cfg: LossConfig | None = None,
                 opt_cfg: OptimizerConfig | None = None) -> EstimateResult:
    """Run ``estimate`` with one of the standard term combinations a..e."""
    return estimate(scene, variant_config(loss_cfg or LossConfig(), variant), opt_cfg)
