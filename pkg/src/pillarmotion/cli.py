"""Command-line entry point.

Subcommands: gen (render a scene bundle), estimate (optimize a motion field
for a bundle), eval (score a field against truth), ablate (variant table
over bundles), sweep (cross-sensor weight robustness), plot (render a field
to a portable pixmap). Exit codes: 0 success, 2 input or configuration
error, 3 numerical failure.

Options may come from a JSON config file with strict keys (sections
"grid", "loss", "optimizer" plus "seed" and "threads"); command-line flags
override file values. The thread cap falls back to the PML_THREADS
environment variable and then to the CPU count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from . import evaluation, io, viz
from .estimator import NumericalError, OptimizerConfig, estimate
from .losses import LossConfig, SceneInputs, variant_config
from .pillar_grid import GridSpec
from .simulator import GenerationError, generate


@dataclasses.dataclass
class RunConfig:
    grid: GridSpec | None = None
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    seed: int = 0
    threads: int | None = None


def _section(payload: dict, name: str, cls, where: str):
    entry = payload.get(name)
    if entry is None:
        return None
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(entry) - fields
    if unknown:
        raise io.FormatError(f"{where}: unknown keys {sorted(unknown)} in '{name}'")
    return cls(**entry)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise io.FormatError(f"{path}: invalid JSON: {exc}") from exc
    known = {"grid", "loss", "optimizer", "seed", "threads"}
    unknown = set(payload) - known
    if unknown:
        raise io.FormatError(f"{path}: unknown keys {sorted(unknown)}")
    cfg = RunConfig(
        grid=_section(payload, "grid", GridSpec, str(path)),
        loss=_section(payload, "loss", LossConfig, str(path)) or LossConfig(),
        optimizer=_section(payload, "optimizer", OptimizerConfig, str(path))
        or OptimizerConfig(),
    )
    if "seed" in payload:
        cfg.seed = int(payload["seed"])
    if "threads" in payload:
        cfg.threads = int(payload["threads"])
    return cfg


def _resolve_threads(flag: int | None, cfg: RunConfig) -> int:
    if flag is not None:
        return max(1, flag)
    if cfg.threads is not None:
        return max(1, cfg.threads)
    env = os.environ.get("PML_THREADS")
    if env is not None:
        return max(1, int(env))
    return os.cpu_count() or 1


def _load_config(args) -> RunConfig:
    return load_run_config(args.config) if getattr(args, "config", None) else RunConfig()


def cmd_gen(args) -> int:
    spec = io.read_scene_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    bundle = generate(spec)
    io.write_bundle(args.out, bundle)
    print(args.out)
    return 0


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    scene, _, _ = io.read_bundle(args.bundle)
    if cfg.grid is not None:
        scene = SceneInputs(scene.cloud_t, scene.cloud_t1, cfg.grid, scene.horizon,
                            scene.cameras, scene.flows, scene.ego_motion)
    loss_cfg = variant_config(cfg.loss, args.variant) if args.variant else cfg.loss
    result = estimate(scene, loss_cfg, cfg.optimizer)
    field = result.field
    if args.horizon_scale is not None:
        field = field.scaled(args.horizon_scale)
    os.makedirs(args.out, exist_ok=True)
    io.write_field(os.path.join(args.out, "field.pmf"), field)
    io.write_trace(os.path.join(args.out, "trace.json"), result)
    print(os.path.join(args.out, "field.pmf"))
    return 0


def cmd_eval(args) -> int:
    pred = io.read_field(args.pred)
    truth = io.read_truth(args.truth, args.labels)
    errors = evaluation.evaluate(pred, truth)
    bands = [float(v) for v in args.bands.split(",")] if args.bands else None
    banded = evaluation.evaluate_banded(pred, truth, bands) if bands else None
    evaluation.write_eval_report(args.out, errors, banded)
    print(f"{args.out}.csv")
    return 0


def _load_scenes(bundles):
    scenes = []
    for path in bundles:
        scene, truth, _ = io.read_bundle(path)
        scenes.append((scene, truth))
    return scenes


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    scenes = _load_scenes(args.bundle)
    table = evaluation.ablation_table(
        scenes, variants=args.variants, loss_cfg=cfg.loss, opt_cfg=cfg.optimizer,
        workers=_resolve_threads(args.threads, cfg),
    )
    evaluation.write_ablation_report(args.out, table)
    print(f"{args.out}.csv")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    scenes = _load_scenes(args.bundle)
    values = [float(v) for v in args.values.split(",")]
    sweep = evaluation.lambda_sweep(
        scenes, values, loss_cfg=cfg.loss, opt_cfg=cfg.optimizer,
        workers=_resolve_threads(args.threads, cfg),
    )
    evaluation.write_sweep_report(args.out, sweep)
    print(f"{args.out}.csv")
    return 0


def cmd_plot(args) -> int:
    field = io.read_field(args.field)
    image = viz.render_field(field, scale=args.scale,
                             static_threshold=args.static_threshold)
    viz.write_ppm(args.out, image)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pillarmotion",
        description="Self-supervised pillar motion estimation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic scene bundle")
    p.add_argument("--spec", required=True, help="scene spec JSON")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("estimate", help="optimize a motion field for a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--variant", choices=list("abcde"), default=None,
                   help="loss-term combination (default: full model)")
    p.add_argument("--horizon-scale", type=float, default=None,
                   help="linearly extrapolate stored displacements")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="score a field against simulator truth")
    p.add_argument("--pred", required=True, help="predicted .pmf file")
    p.add_argument("--truth", required=True, help="truth .pmf file")
    p.add_argument("--labels", required=True, help="truth label bitflags")
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--bands", default="10,20,30",
                   help="comma-separated cumulative distance bands, empty to skip")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant comparison over scene bundles")
    p.add_argument("--bundle", action="append", required=True,
                   help="bundle directory (repeatable)")
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--config", default=None)
    p.add_argument("--variants", default="abcde")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="cross-sensor weight robustness sweep")
    p.add_argument("--bundle", action="append", required=True)
    p.add_argument("--out", required=True, help="report path prefix")
    p.add_argument("--values", default="0.01,0.02,0.03,0.04,0.05")
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render a motion field to a portable pixmap")
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=float, default=viz.DEFAULT_SCALE,
                   help="motion norm mapped to full saturation")
    p.add_argument("--static-threshold", type=float, default=viz.STATIC_THRESHOLD)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (io.FormatError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
