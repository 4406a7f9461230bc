"""Command-line entry point: fit, train, eval, denoise and synth."""

import argparse
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from loguru import logger

from jetfit import __version__
from jetfit.checkpoint import load_fitter
from jetfit.data_io import (
    SHAPE_KINDS, SHAPE_DEFAULTS, SIBLINGS, ShapeSpec, generate_shape, add_gaussian_noise, add_outliers,
    subsample_density, load_pcpnet, save_pcpnet, load_manifest, save_manifest
)
from jetfit.errors import JetFitError
from jetfit.evaluation import METHODS, CATEGORIES, BenchmarkConfig, run_benchmark, aggregate_weights, denoise
from jetfit.jet_core import DEFAULT_RIDGE
from jetfit.pipeline import DEFAULT_K, DEFAULT_ORDER, DEFAULT_BATCH_SIZE, fit_cloud
from jetfit.training import TrainConfig, train
from tools.configure_loguru import configure_logger, LEVELS
from tools.helper_tools import save_json, file_sha256
from tools.timer import Timer

# ======================================================================================
# Parameters

RUN_MANIFEST = "run_manifest.json"
EXIT_OK = 0
EXIT_ERROR = 1

# ======================================================================================


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def _sibling_files(basepaths) -> list:
    return [Path(f"{b}.{ext}") for b in basepaths for ext in SIBLINGS if Path(f"{b}.{ext}").is_file()]


def _hash_inputs(paths) -> dict:
    return {str(path): file_sha256(path) for path in paths if path is not None and Path(path).is_file()}


class RunManifest:
    """Provenance record written into every output directory."""

    def __init__(self, command: str, argv: list):
        self.command = command
        self.argv = argv
        self.config = {}
        self.seeds = {}
        self.inputs = {}
        self.started = _utc_now()

    def write(self, output_dir, status: str = "ok", error: str = None) -> Path:
        path = Path(output_dir) / RUN_MANIFEST
        save_json(path, {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "version": __version__,
            "torch_version": torch.__version__,
            "started": self.started,
            "finished": _utc_now(),
            "status": status,
            "error": error,
        })
        return path


# ======================================================================================
# Commands


def _fitter_from_args(args):
    return None if args.uniform_weights else load_fitter(args.checkpoint, order=args.order, ridge=args.ridge)


def _resolved(args, fitter) -> tuple:
    """(order, ridge): flags first, then the checkpoint's stored values, then the defaults."""
    order = args.order if args.order is not None else (fitter.order if fitter is not None else DEFAULT_ORDER)
    ridge = args.ridge if args.ridge is not None else (fitter.ridge if fitter is not None else DEFAULT_RIDGE)
    return order, ridge


def cmd_fit(args, manifest: RunManifest) -> Path:
    cloud = load_pcpnet(args.input)
    queries = cloud.query_indices if args.queries == "eval" else np.arange(len(cloud))
    fitter = _fitter_from_args(args)
    order, ridge = _resolved(args, fitter)
    result = fit_cloud(cloud, queries, k=min(args.k, len(cloud)), order=order, fitter=fitter, ridge=ridge,
                       batch_size=args.batch_size)

    # outputs are row-aligned with the input; rows that weren't queried stay NaN
    normals = np.full((len(cloud), 3), np.nan)
    normals[queries] = result.normals
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(f"{output}.normals", normals, fmt="%.10g")
    if order >= 2:
        curvatures = np.full((len(cloud), 2), np.nan)
        curvatures[queries] = np.stack([result.curvatures.max(axis=1), result.curvatures.min(axis=1)], axis=1)
        np.savetxt(f"{output}.curv", curvatures, fmt="%.10g")
    np.savetxt(f"{output}.weights", aggregate_weights(cloud, result), fmt="%.10g")
    logger.info(f"Fitted {len(queries)} points of {cloud.name} in {result.runtime_ms_per_point:.3f} ms/point.")

    manifest.config = {"k": args.k, "order": order, "ridge": ridge, "uniform_weights": args.uniform_weights,
                       "queries": args.queries, "batch_size": args.batch_size}
    manifest.inputs = _hash_inputs(_sibling_files([args.input]) + [args.checkpoint])
    return output.parent


def cmd_train(args, manifest: RunManifest) -> Path:
    config = TrainConfig.load(
        args.config,
        train_manifest=args.train_manifest,
        output_dir=args.output_dir,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        samples_per_epoch=args.samples_per_epoch,
        k_neighbors=args.k,
        jet_order=args.order,
        seed=args.seed,
        alpha1=args.alpha1,
        alpha2=args.alpha2,
        ridge=args.ridge,
        epsilon=args.epsilon,
        net_size=args.net_size,
        log_regularizer=False if args.no_log_regularizer else None,
        noise_levels=args.noise_levels,
        threads=args.threads,
        resume_from=args.resume,
        max_steps=args.max_steps,
    )
    manifest.config = config.as_dict()
    manifest.seeds = {"seed": config.seed}
    inputs = [args.config, config.resume_from]
    if config.train_manifest is not None:
        inputs += [config.train_manifest] + _sibling_files(load_manifest(config.train_manifest))
    manifest.inputs = _hash_inputs(inputs)
    result = train(config, display=True)
    logger.info(f"Best checkpoint: {result.best_checkpoint}")
    return Path(config.output_dir)


def cmd_eval(args, manifest: RunManifest) -> Path:
    methods = ("jet",) if args.uniform_weights else tuple(args.methods)
    fitter = load_fitter(args.checkpoint, order=args.order, ridge=args.ridge) if "learned" in methods else None
    order, ridge = _resolved(args, fitter)
    config = BenchmarkConfig(k=args.k, order=order, ridge=ridge, seed=args.seed, batch_size=args.batch_size,
                             output_dir=args.output_dir, dump_errors=not args.no_dumps)
    manifest.config = {**config.as_dict(), "methods": list(methods), "augmentations": list(args.augmentations)}
    manifest.seeds = {"seed": args.seed}
    manifest.inputs = _hash_inputs([args.manifest, args.checkpoint] + _sibling_files(load_manifest(args.manifest)))
    run_benchmark(args.manifest, methods, tuple(args.augmentations), config, fitter=fitter)
    return Path(args.output_dir)


def cmd_denoise(args, manifest: RunManifest) -> Path:
    cloud = load_pcpnet(args.input)
    fitter = load_fitter(args.checkpoint, order=args.order, ridge=args.ridge)
    for iteration in range(args.iterations):
        result = fit_cloud(cloud, np.arange(len(cloud)), k=min(args.k, len(cloud)), fitter=fitter,
                           batch_size=args.batch_size)
        cloud, _ = denoise(cloud, aggregate_weights(cloud, result))
        logger.debug(f"Denoising pass {iteration + 1}/{args.iterations}: {len(cloud)} points left.")
    save_pcpnet(cloud, args.output)
    manifest.config = {"k": args.k, "order": fitter.order, "ridge": fitter.ridge, "iterations": args.iterations}
    manifest.inputs = _hash_inputs(_sibling_files([args.input]) + [args.checkpoint])
    return Path(args.output).parent


def _parse_shape_params(items) -> dict:
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"shape parameter must look like key=value, got '{item}'")
        params[key.strip()] = float(value)
    return params


def cmd_synth(args, manifest: RunManifest) -> Path:
    output_dir = Path(args.output_dir)
    seeds = np.random.SeedSequence(args.seed).generate_state(len(args.kinds))
    params = _parse_shape_params(args.param)
    basepaths = []
    for kind, seed in zip(args.kinds, seeds):
        spec = ShapeSpec(kind, params={k: v for k, v in params.items() if k in SHAPE_DEFAULTS[kind]},
                         sample_count=args.samples, seed=int(seed), eval_count=args.eval_count,
                         rotate=not args.no_rotate, name=f"{kind}_{args.seed}")
        cloud = generate_shape(spec)
        if args.density is not None:
            cloud, _ = subsample_density(cloud, args.density, seed=int(seed))
        if args.noise:
            cloud = add_gaussian_noise(cloud, args.noise, seed=int(seed))
        if args.outliers:
            cloud = add_outliers(cloud, args.outliers, seed=int(seed))
        save_pcpnet(cloud, output_dir / cloud.name)
        if cloud.outlier_mask is not None:
            np.savetxt(output_dir / f"{cloud.name}.outliers", cloud.outlier_mask.astype(int), fmt="%d")
        basepaths.append(cloud.name)
        manifest.seeds[cloud.name] = int(seed)
    save_manifest(output_dir / args.manifest_name, basepaths)
    logger.info(f"Wrote {len(basepaths)} shapes and {args.manifest_name} into {output_dir}.")
    manifest.config = {"kinds": list(args.kinds), "samples": args.samples, "params": params,
                       "eval_count": args.eval_count, "rotate": not args.no_rotate, "noise": args.noise,
                       "outliers": args.outliers, "density": args.density}
    manifest.seeds["seed"] = args.seed
    return output_dir


# ======================================================================================
# Parser


def _comma_list(choices):
    def parse(value: str) -> list:
        items = [item.strip() for item in value.split(",") if item.strip()]
        unknown = [item for item in items if item not in choices]
        if unknown:
            raise argparse.ArgumentTypeError(f"unknown entries {unknown}; choose from {', '.join(choices)}")
        return items
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int,
                        help="worker threads; 1 gives bitwise-reproducible runs [default: all cores]")
    common.add_argument("--log-level", default="INFO", type=str.upper, choices=sorted(LEVELS))
    common.add_argument("--log-to-file", action="store_true", help="also write a DEBUG log under <output>/logs")

    fitting = argparse.ArgumentParser(add_help=False)
    fitting.add_argument("--k", type=int, default=DEFAULT_K, help=f"neighborhood size [default: {DEFAULT_K}]")
    fitting.add_argument("--order", type=int, help=f"jet order 1..4 [default: the checkpoint's, else {DEFAULT_ORDER}]")
    fitting.add_argument("--ridge", type=float, help=f"[default: the checkpoint's, else {DEFAULT_RIDGE}]")
    fitting.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)

    parser = argparse.ArgumentParser(prog="jetfit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", parents=[common, fitting], help="estimate normals, curvatures and weights")
    fit.add_argument("input", help="input basepath (<input>.xyz)")
    fit.add_argument("output", help="output basepath for .normals/.curv/.weights")
    fit.add_argument("--checkpoint", help="trained weight network")
    fit.add_argument("--uniform-weights", action="store_true", help="classical unweighted jet fitting")
    fit.add_argument("--queries", choices=("all", "eval"), default="all",
                     help="fit every point or only the .pidx subset [default: all]")

    tr = commands.add_parser("train", parents=[common], help="train the weight network")
    tr.add_argument("config", nargs="?", help="'key = value' config file; flags override it")
    tr.add_argument("--train-manifest")
    tr.add_argument("--output-dir")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--learning-rate", type=float)
    tr.add_argument("--samples-per-epoch", type=int)
    tr.add_argument("--k", type=int)
    tr.add_argument("--order", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--alpha1", type=float)
    tr.add_argument("--alpha2", type=float)
    tr.add_argument("--ridge", type=float)
    tr.add_argument("--epsilon", type=float)
    tr.add_argument("--net-size", choices=("full", "tiny"))
    tr.add_argument("--no-log-regularizer", action="store_true", help="drop the -log(w) term (ablation)")
    tr.add_argument("--noise-levels", help="comma list of noise fractions used as training augmentation")
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--max-steps", type=int)

    ev = commands.add_parser("eval", parents=[common, fitting], help="benchmark methods on a shape manifest")
    ev.add_argument("manifest", help="shape list file")
    ev.add_argument("--methods", type=_comma_list(METHODS),
                    default=[m for m in METHODS if m != "learned"], help=f"comma list of {', '.join(METHODS)}")
    ev.add_argument("--augmentations", type=_comma_list(tuple(CATEGORIES)), default=list(CATEGORIES),
                    help=f"comma list of {', '.join(CATEGORIES)}")
    ev.add_argument("--checkpoint", help="trained weight network for the 'learned' method")
    ev.add_argument("--uniform-weights", action="store_true", help="evaluate only the unweighted jet")
    ev.add_argument("--output-dir", default="runs/eval")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--no-dumps", action="store_true", help="skip per-point error files")

    dn = commands.add_parser("denoise", parents=[common, fitting], help="remove low-weight points")
    dn.add_argument("input")
    dn.add_argument("output")
    dn.add_argument("--checkpoint", required=True)
    dn.add_argument("--iterations", type=int, default=1)

    sy = commands.add_parser("synth", parents=[common], help="generate analytic shapes with exact ground truth")
    sy.add_argument("output_dir")
    sy.add_argument("--kinds", type=_comma_list(SHAPE_KINDS), default=list(SHAPE_KINDS))
    sy.add_argument("--samples", type=int, default=10000)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--eval-count", type=int)
    sy.add_argument("--param", action="append", help="shape parameter key=value (repeatable), e.g. radius=2")
    sy.add_argument("--no-rotate", action="store_true")
    sy.add_argument("--noise", type=float, default=0.0, help="noise std as a fraction of the bbox diagonal")
    sy.add_argument("--outliers", type=float, default=0.0, help="fraction of off-surface points to add")
    sy.add_argument("--density", choices=("gradient", "stripes"))
    sy.add_argument("--manifest-name", default="shapes.txt")
    return parser


def _check_usage(parser: argparse.ArgumentParser, args) -> None:
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    if args.command == "fit":
        if args.uniform_weights == (args.checkpoint is not None):
            parser.error("fit needs exactly one of --checkpoint or --uniform-weights")
    if args.command == "eval":
        if args.uniform_weights and args.checkpoint is not None:
            parser.error("--uniform-weights and --checkpoint are mutually exclusive")
        if "learned" in args.methods and not args.uniform_weights and args.checkpoint is None:
            parser.error("the 'learned' method needs --checkpoint")
        if args.checkpoint is not None and "learned" not in args.methods:
            args.methods = list(args.methods) + ["learned"]
    if args.command == "synth" and args.param:
        try:
            _parse_shape_params(args.param)
        except (argparse.ArgumentTypeError, ValueError) as e:
            parser.error(str(e))


COMMANDS = {
    "fit": cmd_fit,
    "train": cmd_train,
    "eval": cmd_eval,
    "denoise": cmd_denoise,
    "synth": cmd_synth,
}


def _output_dir(args) -> Path:
    match args.command:
        case "fit" | "denoise":
            return Path(args.output).parent
        case "train":
            return Path(args.output_dir) if args.output_dir else Path.cwd()
        case _:
            return Path(args.output_dir)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_usage(parser, args)

    configure_logger(args.log_to_file, _output_dir(args), level=args.log_level)
    torch.set_num_threads(args.threads or os.cpu_count() or 1)
    timer = Timer(autostart=True)
    manifest = RunManifest(args.command, argv)
    try:
        output_dir = COMMANDS[args.command](args, manifest)
    except (JetFitError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        manifest.write(_output_dir(args), status="error", error=str(e))
        return EXIT_ERROR
    manifest.write(output_dir)
    logger.info(f"{args.command} finished in {timer.elapsed(_format='hms')}.")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
