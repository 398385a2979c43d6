"""
Command-line surface: gen-data, train, reconstruct, template, interp,
correspond and eval.

Settings come from a RunConfig JSON (--config) with flags overriding it.
Failures print a single line `error code=<n> kind=<Exception> message=<text>`
to stderr and exit with the error's code.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from src.config import RunConfig, TrainConfig, config
from src.errors import ConfigError, DataFileError, DitError, EmptyMeshError
from src.geometry import ShapeSpec, sample_sdf, surface_points
from src.inference import (
    CorrespondenceQuery,
    correspond,
    extract_mesh,
    extract_template_mesh,
    infer_latent,
    interpolate_codes,
)
from src.mesh import Mesh, load_mesh, normalize_mesh, sample_mesh_surface, save_mesh_obj
from src.metrics import (
    CHAMFER_REPORT_SCALE,
    chamfer,
    emd_approx,
    keypoint_benchmark,
    pck_key,
    summarize_table,
)
from src.training import load_trained_model, train
from src.utils import (
    load_keypoints_csv,
    load_sample_sets,
    load_shape_specs,
    save_results,
    save_sample_sets,
    save_table,
)

logging.basicConfig(level=config.LOG_LEVEL)
logger = logging.getLogger(__name__)

DEFAULT_SPECS = "configs/toy_shapes.json"
EVAL_METRICS = ("chamfer", "emd", "pck")


def _default_samples() -> str:
    return os.path.join(config.DATA_DIR, "samples.dits")


def shape_seed(seed: int, shape_id: int) -> int:
    """Independent per-shape stream derived from the command seed."""
    return int(np.random.SeedSequence([seed, shape_id]).generate_state(1)[0])


def _run_config(args) -> RunConfig:
    run = RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        run.seed = args.seed
    if getattr(args, "resolution", None) is not None:
        run.resolution = args.resolution
    if getattr(args, "checkpoint", None):
        run.checkpoint = args.checkpoint
    if getattr(args, "dataset", None):
        run.dataset = args.dataset
    return run


def _threads(args) -> int:
    return args.threads if args.threads is not None else config.THREADS


def _write_mesh(mesh: Mesh, path: str, label: str):
    save_mesh_obj(mesh, path)
    if mesh.is_empty:
        raise EmptyMeshError(f"{label}: field has no zero crossing; wrote empty {path}")
    logger.info(f"💾 {label}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles -> {path}")


# --- commands ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    specs = load_shape_specs(args.spec)
    logger.info(f"📥 Sampling {len(specs)} shapes from {args.spec}")
    sets = [
        sample_sdf(
            spec,
            n_surface=args.n_surface,
            n_uniform=args.n_uniform,
            noise_sigma=args.noise_sigma,
            rng_seed=shape_seed(run.seed, spec.shape_id),
        )
        for spec in specs
    ]
    out = args.out or _default_samples()
    save_sample_sets(sets, out)
    logger.info(f"✅ Wrote {sum(len(s) for s in sets)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    cfg = run.train
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if overrides:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    if not run.dataset:
        run.dataset = _default_samples()
    run.validate_paths("dataset")
    out_dir = args.out or run.out_dir
    train(cfg, run.dataset, out_dir=out_dir, resume=args.resume)
    return 0


def _code_for(args, run: RunConfig, model, latents):
    if args.samples:
        sets = load_sample_sets(args.samples)
        chosen = [s for s in sets if args.shape_id is None or s.shape_id == args.shape_id]
        if not chosen:
            raise DataFileError(args.samples, f"no samples for shape {args.shape_id}")
        iterations = args.iterations if args.iterations is not None else run.infer_iterations
        logger.info(f"🔍 Inferring a code for shape {chosen[0].shape_id} ({iterations} iterations)")
        return infer_latent(chosen[0], model, iterations=iterations, lr=run.infer_lr, seed=run.seed)
    if args.shape_id is None:
        raise DataFileError("<none>", "reconstruct needs --shape-id or --samples")
    return latents.code(args.shape_id)


def cmd_reconstruct(args) -> int:
    run = _run_config(args)
    run.validate_paths("checkpoint")
    model, latents, _ = load_trained_model(run.checkpoint)
    code = _code_for(args, run, model, latents)
    mesh = extract_mesh(model, code, run.resolution, steps=args.steps, threads=_threads(args))
    _write_mesh(mesh, args.out, f"shape {code.shape_id}")
    return 0


def cmd_template(args) -> int:
    run = _run_config(args)
    run.validate_paths("checkpoint")
    model, _, _ = load_trained_model(run.checkpoint)
    _write_mesh(extract_template_mesh(model, run.resolution, threads=_threads(args)), args.out, "template")
    return 0


def cmd_interp(args) -> int:
    run = _run_config(args)
    run.validate_paths("checkpoint")
    model, latents, _ = load_trained_model(run.checkpoint)
    c1, c2 = latents.code(args.id1), latents.code(args.id2)
    for k, t in enumerate(np.linspace(0.0, 1.0, args.count)):
        mesh = extract_mesh(model, interpolate_codes(c1, c2, float(t)), run.resolution, threads=_threads(args))
        _write_mesh(mesh, str(Path(args.out) / f"interp_{k:02d}.obj"), f"t={t:.3f}")
    return 0


def cmd_correspond(args) -> int:
    run = _run_config(args)
    run.validate_paths("checkpoint")
    model, latents, _ = load_trained_model(run.checkpoint)
    src_code, tgt_code = latents.code(args.source), latents.code(args.target)
    pool_mesh = extract_mesh(model, tgt_code, args.pool_resolution, threads=_threads(args))
    if pool_mesh.is_empty:
        raise EmptyMeshError(f"target shape {args.target} has no surface to build a pool from")

    if args.keypoints:
        kp = load_keypoints_csv(args.keypoints)
        labels, points = kp["labels"], kp["points"]
    else:
        src_mesh = extract_mesh(model, src_code, args.pool_resolution, threads=_threads(args))
        if src_mesh.is_empty:
            raise EmptyMeshError(f"source shape {args.source} has no surface to sample")
        points = sample_mesh_surface(src_mesh, args.dense, seed=run.seed)
        labels = np.arange(len(points))

    targets, _, dist = correspond(model, CorrespondenceQuery(points, src_code, tgt_code, pool_mesh.vertices))
    rows = [
        {"label": int(lab), "sx": s[0], "sy": s[1], "sz": s[2], "tx": t[0], "ty": t[1], "tz": t[2], "canonical_distance": d}
        for lab, s, t, d in zip(labels, points, targets, dist)
    ]
    save_table(rows, args.out)
    logger.info(f"✅ {len(rows)} correspondences {args.source} -> {args.target} written to {args.out}")
    return 0


def _normalized(points: np.ndarray) -> np.ndarray:
    return normalize_mesh(Mesh(points, np.zeros((0, 3), dtype=np.int64)))[0].vertices


def _eval_clouds(args, run: RunConfig, spec: ShapeSpec, model, latents) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """(reconstruction cloud or None when empty, ground-truth cloud) for one shape."""
    seed = shape_seed(run.seed, spec.shape_id)
    truth = surface_points(spec, run.chamfer_points, seed=seed)
    if args.source == "dataset":
        return surface_points(spec, run.chamfer_points, seed=seed), truth
    if args.source == "meshes":
        if not args.meshes:
            raise ConfigError("--source meshes needs --meshes <dir>")
        mesh = load_mesh(str(Path(args.meshes) / f"{spec.shape_id}.obj"))
    else:
        mesh = extract_mesh(model, latents.code(spec.shape_id), run.resolution, threads=_threads(args))
    if mesh.is_empty:
        return None, truth
    if args.source == "meshes" and not args.keep_frame:
        # external meshes live in their own frame: compare both clouds in the unit sphere
        mesh = normalize_mesh(mesh)[0]
        truth = _normalized(truth)
    return sample_mesh_surface(mesh, run.chamfer_points, seed=seed + 1), truth


def cmd_eval(args) -> int:
    run = _run_config(args)
    if args.metrics:
        run.metrics = args.metrics
    unknown = set(run.metrics) - set(EVAL_METRICS)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}")
    if "pck" in run.metrics and args.source != "checkpoint":
        raise ConfigError("the pck metric needs --source checkpoint")
    specs = load_shape_specs(args.specs)
    model = latents = None
    if args.source == "checkpoint":
        run.validate_paths("checkpoint")
        model, latents, _ = load_trained_model(run.checkpoint)
        specs = [s for s in specs if s.shape_id in set(latents.ids.tolist())]

    surface_metrics = [k for k in run.metrics if k != "pck"]
    rows = []
    for spec in (specs if surface_metrics else []):
        cloud, truth = _eval_clouds(args, run, spec, model, latents)
        row = {"shape_id": spec.shape_id, "empty": cloud is None}
        if cloud is not None:
            if "chamfer" in run.metrics:
                row["chamfer"] = chamfer(cloud, truth) * CHAMFER_REPORT_SCALE
            if "emd" in run.metrics:
                row["emd"] = emd_approx(cloud, truth, run.emd_subsample, seed=run.seed)
        else:
            logger.warning(f"⚠️  Shape {spec.shape_id}: empty reconstruction, metrics skipped")
        rows.append(row)
        logger.info(f"shape {spec.shape_id}: " + " ".join(f"{k}={row[k]:.5f}" for k in surface_metrics if k in row))

    results = {"per_shape": rows, "summary": summarize_table(rows, surface_metrics), "source": args.source}
    if "pck" in run.metrics:
        codes = {int(i): latents.code(int(i)) for i in latents.ids}
        pairs = keypoint_benchmark(
            model, codes, specs, run.pck_thresholds, run.pool_resolution, threads=_threads(args)
        )
        keys = [pck_key(t) for t in run.pck_thresholds] + ["corr_error"]
        results["keypoints"] = {"pairs": pairs, "summary": summarize_table(pairs, keys)}
        means = " ".join(f"{k}={v['mean']:.3f}" for k, v in results["keypoints"]["summary"].items())
        logger.info(f"🎯 Keypoint transfer over {len(pairs)} pairs: {means}")
    save_results(results, args.out)
    if args.csv:
        save_table(rows, args.csv)
    logger.info(f"✅ Metrics for {len(rows)} shapes written to {args.out}")
    return 0


# --- parser -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="dit", description="Deep implicit templates at desk scale", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", default=None, help="RunConfig JSON; flags override its fields")
        p.add_argument("--seed", type=int, default=None, help="seed for every random choice of the command")
        p.add_argument("--threads", type=int, default=None, help="worker cap for grid evaluation")
        p.set_defaults(func=fn)
        return p

    p = command("gen-data", cmd_gen_data, "Sample truncated SDF values of analytic shapes")
    p.add_argument("--spec", default=DEFAULT_SPECS, help="shape spec JSON")
    p.add_argument("--out", default=None, help="output sample file (default $DIT_DATA_DIR/samples.dits)")
    p.add_argument("--n-surface", type=int, default=8000)
    p.add_argument("--n-uniform", type=int, default=2000)
    p.add_argument("--noise-sigma", type=float, default=0.005)

    p = command("train", cmd_train, "Train the template, warp and latent table")
    p.add_argument("--dataset", default=None, help="sample file")
    p.add_argument("--out", default=None, help="run directory for checkpoints and losses.csv")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = command("reconstruct", cmd_reconstruct, "Extract the mesh of a training shape or an unseen sample set")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--shape-id", type=int, default=None)
    p.add_argument("--samples", default=None, help="sample file of an unseen shape (infers its code)")
    p.add_argument("--iterations", type=int, default=None, help="latent inference iterations")
    p.add_argument("--steps", type=int, default=None, help="truncate the warp after this many steps")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", required=True, help="output OBJ")

    p = command("template", cmd_template, "Extract the implicit template mesh")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", required=True, help="output OBJ")

    p = command("interp", cmd_interp, "Meshes along a linear path between two codes")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--id1", type=int, required=True)
    p.add_argument("--id2", type=int, required=True)
    p.add_argument("--count", type=int, default=5, help="number of interpolation steps, ends included")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")

    p = command("correspond", cmd_correspond, "Transfer points between shapes through the template")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--source", type=int, required=True, help="source shape id")
    p.add_argument("--target", type=int, required=True, help="target shape id")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--keypoints", default=None, help="CSV with label,x,y,z on the source shape")
    group.add_argument("--dense", type=int, default=1000, help="number of source surface points")
    p.add_argument("--pool-resolution", type=int, default=128, help="extraction resolution of the target pool")
    p.add_argument("--out", required=True, help="output CSV")

    p = command("eval", cmd_eval, "Chamfer / EMD against analytic surface samples, keypoint PCK between shapes")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--specs", default=DEFAULT_SPECS, help="shape spec JSON with the ground truth")
    p.add_argument("--source", choices=["checkpoint", "meshes", "dataset"], default="checkpoint")
    p.add_argument("--meshes", default=None, help="directory of <shape_id>.obj for --source meshes")
    p.add_argument(
        "--keep-frame", action="store_true", help="compare --source meshes as stored instead of normalizing both clouds"
    )
    p.add_argument("--metrics", nargs="+", default=None, help="subset of: chamfer emd pck (pck needs --source checkpoint)")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--csv", default=None, help="also write per-shape rows as CSV")
    p.add_argument("--out", required=True, help="output JSON")
    return parser


def error_line(e: BaseException, code: int) -> str:
    message = " ".join(str(e).split())
    return f"error code={code} kind={type(e).__name__} message={message}"


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DitError as e:
        print(error_line(e, e.exit_code), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.debug("unhandled error", exc_info=True)
        print(error_line(e, 1), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
