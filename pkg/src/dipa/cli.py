"""Command-line entry point: generate patches, run benchmarks, re-render
reports, and launch the demo service.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .embedders import DEFAULT_ENSEMBLE_IDS, EmbedderRegistry, default_registry, load_ensemble
from .evaluation import (
    BenchmarkPlan,
    read_trial_log,
    render_report,
    reports_from_log,
    run_benchmark,
    write_trial_log,
)
from .optimizer import OptimizationError, generate_patch_set
from .types import (
    AttackConfig,
    Jitter,
    Placement,
    ValidationError,
    default_attack_config,
    export_patch,
    load_image,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _registry(args) -> EmbedderRegistry:
    if getattr(args, "manifest", None):
        return EmbedderRegistry.from_manifest(args.manifest)
    return default_registry()


def _config_from_flags(args) -> AttackConfig:
    placement = Placement(
        center_x=args.center_x,
        center_y=args.center_y,
        scale=args.scale,
        rotation_deg=args.rotation_deg,
        jitter=Jitter(dx=args.jitter_dx, dy=args.jitter_dy,
                      dscale=args.jitter_dscale, drot=args.jitter_drot),
    )
    overrides = dict(
        steps=args.steps,
        step_size=args.step_size,
        patch_side=args.patch_side,
        pool_kernel=args.pool_kernel,
        pool_stride=args.pool_stride,
        placement=placement,
        jitter_samples=args.jitter_samples,
        ensemble_ids=tuple(args.ensemble),
        seed=args.seed,
    )
    if args.lambda_tv is not None:
        overrides["lambda_tv"] = args.lambda_tv
    variant = args.variant.replace("_", "-")
    return default_attack_config(variant=variant, **overrides)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=["dipa", "dipa-tv"], default="dipa")
    p.add_argument("--lambda-tv", type=float, default=None,
                   help="TV weight (default 0 for dipa, 0.05 for dipa-tv)")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--patch-side", type=int, default=448)
    p.add_argument("--pool-kernel", type=int, default=7)
    p.add_argument("--pool-stride", type=int, default=1)
    p.add_argument("--center-x", type=float, default=0.5)
    p.add_argument("--center-y", type=float, default=0.78)
    p.add_argument("--scale", type=float, default=0.35)
    p.add_argument("--rotation-deg", type=float, default=0.0)
    p.add_argument("--jitter-dx", type=float, default=0.03)
    p.add_argument("--jitter-dy", type=float, default=0.03)
    p.add_argument("--jitter-dscale", type=float, default=0.05)
    p.add_argument("--jitter-drot", type=float, default=3.0)
    p.add_argument("--jitter-samples", type=int, default=4)
    p.add_argument("--ensemble", nargs="+", default=list(DEFAULT_ENSEMBLE_IDS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="embedder manifest JSON (builtin registry by default)")


def cmd_generate(args) -> int:
    try:
        image = load_image(args.image)
        reference = load_image(args.reference) if args.reference else None
        cfg = _config_from_flags(args)
        registry = _registry(args)
        ensemble = load_ensemble(cfg.ensemble_ids, registry)
    except (ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        patches = generate_patch_set(image, ensemble, cfg, count=args.count, reference=reference)
    except OptimizationError as e:
        print(f"optimization failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for k, patch in enumerate(patches):
        export_patch(patch, out / f"patch_{k}.png", out / f"patch_{k}.json")
        print(f"patch_{k}.png  seed={patch.metadata.seed}  final_loss={patch.metadata.final_loss:.6f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        plan = BenchmarkPlan.from_file(args.plan)
        if args.seed is not None:
            plan = BenchmarkPlan.from_dict({**plan.to_dict(), "seed": args.seed})
        registry = _registry(args)
        for _, cfg in plan.methods:
            load_ensemble(cfg.ensemble_ids, registry)
        if plan.trial_verifier.embedder_id:
            registry.load(plan.trial_verifier.embedder_id)
        for vid in plan.similarity_ids:
            registry.load(vid)
    except (ValidationError, KeyError, ValueError, OSError) as e:
        print(f"invalid plan: {e}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        reports, rows = run_benchmark(plan, registry)
    except ValidationError as e:
        print(f"invalid plan: {e}", file=sys.stderr)
        return EXIT_USAGE
    write_trial_log(rows, out / "trials.ndjson")
    (out / "report.md").write_text(render_report(reports, "markdown"))
    (out / "report.csv").write_text(render_report(reports, "csv"))
    print(f"wrote {out / 'report.md'}, {out / 'report.csv'}, {out / 'trials.ndjson'}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        rows = read_trial_log(args.infile)
        reports = reports_from_log(rows)
        doc = render_report(reports, args.format)
    except (ValidationError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        Path(args.out).write_text(doc)
        print(f"wrote {args.out}")
    else:
        print(doc, end="")
    return EXIT_OK


def cmd_serve(args) -> int:
    import socket

    import uvicorn

    from .service import ServiceConfig, create_app

    try:
        cfg = ServiceConfig.load(args.config) if args.config else ServiceConfig.load()
        overrides = {}
        if args.port is not None:
            overrides["port"] = args.port
        if args.workers is not None:
            overrides["workers"] = args.workers
        if args.job_dir is not None:
            overrides["job_dir"] = args.job_dir
        if args.static_dir is not None:
            overrides["static_dir"] = args.static_dir
        if overrides:
            cfg = ServiceConfig(**{**cfg.__dict__, **overrides})
        app = create_app(cfg)
    except (ValidationError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with socket.socket() as probe:  # fail fast on an occupied port
            probe.bind((args.host, cfg.port))
    except OSError as e:
        print(f"error: cannot bind {args.host}:{cfg.port}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        uvicorn.run(app, host=args.host, port=cfg.port, log_level="info")
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dipa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a set of adversarial patches")
    g.add_argument("--image", required=True, help="attacker photo (RGB)")
    g.add_argument("--reference", help="optional enrolled photo; the dodging target "
                                       "defaults to --image itself")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, default=5)
    _add_config_flags(g)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="run a benchmark plan and write reports")
    e.add_argument("--plan", required=True, help="benchmark plan JSON")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--seed", type=int, default=None, help="override the plan seed")
    e.add_argument("--manifest")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="re-render reports from a trial log")
    r.add_argument("--in", dest="infile", required=True, help="trials.ndjson path")
    r.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    r.add_argument("--out", help="output file (stdout by default)")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", help="run the HTTP demo service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--job-dir", default=None)
    s.add_argument("--static-dir", default=None, help="UI bundle directory")
    s.add_argument("--config", help="service config JSON")
    s.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
