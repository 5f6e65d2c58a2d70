"""
Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import yaml

from .augment import expand_flips
from .config import ConfigManager, resolve_threads, setup_logging
from .data_processing import FrameStore, dataset_color_stats, load_json_or_yaml
from .envrelight import PATCH_SIZE, color_match_linear, env_to_lights, relight_env
from .exceptions import DataError, NumericalError
from .gradcheck import grad_check
from .image_io import RasterImage, center_crop, load_pfm, save_pfm, save_png_srgb
from .inference import GeneratorRelighter
from .lighting import DirectionalLight, calibrate_from_sphere, load_lights, standard_rig
from .metrics import METRICS, evaluate
from .pipelines.data_pipeline import pms_thresholds
from .pipelines.training_pipeline import run_benchmark, run_study
from .pms import PMSThresholds, reconstruct_manifest
from .synth import generate_dataset
from .train import TrainConfig, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# Subcommands that log through training_config; the rest use pipeline_config
TRAINING_COMMANDS = frozenset({"train", "study", "benchmark"})


class UsageError(Exception):
    pass


class RelightArgumentParser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as exceptions instead of exiting with 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _light(text: str) -> DirectionalLight:
    parts = text.replace(",", " ").split()
    try:
        values = [float(part) for part in parts]
        if len(values) == 3:
            return DirectionalLight.from_vector(values)
        if len(values) == 6:
            return DirectionalLight.from_vector(values[:3], values[3:])
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None
    raise argparse.ArgumentTypeError(f"expected 'dx dy dz [ir ig ib]', got {text!r}")


def _pair(text: str) -> List[float]:
    parts = text.replace(",", " ").split()
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}")
    return [float(part) for part in parts]


def _named_path(text: str) -> List[str]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    return [name, path]


def _write_image(image: RasterImage, path: Path) -> None:
    if Path(path).suffix.lower() == ".png":
        save_png_srgb(image, path)
    else:
        save_pfm(image, path)


def _setup_logging(args: argparse.Namespace) -> None:
    name = "training_config" if args.command in TRAINING_COMMANDS else "pipeline_config"
    setup_logging(args.configs.load_config(name), level_override=args.log_level)


def _training_sections(args: argparse.Namespace) -> Dict[str, Any]:
    if args.config is None:
        return args.configs.get_training_config()
    content = load_json_or_yaml(args.config)
    if "training" in content or "model" in content or "losses" in content:
        return content
    # Flat TrainConfig fields
    return {"training": content}


def _train_config(args: argparse.Namespace, sections: Dict[str, Any], n_jobs: int) -> TrainConfig:
    config = TrainConfig.from_sections(sections)
    updates: Dict[str, Any] = {"n_jobs": n_jobs}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    if getattr(args, "loss", None) is not None:
        updates["loss"] = args.loss
    if getattr(args, "unknown_source", False):
        updates["known_source_illumination"] = False
    values = {**config.model_dump(), **updates}
    if getattr(args, "architecture", None) is not None:
        values["model"] = {**values["model"], "architecture": args.architecture}
    return TrainConfig.model_validate(values)


def _color_stats(args: argparse.Namespace) -> List[float]:
    path = args.color_match
    content = load_json_or_yaml(path)
    if "mean_rgb" in content:
        return list(content["mean_rgb"])
    if "frames" in content:
        envrelight = args.configs.get_pipeline_config()["envrelight"]
        patch_width, patch_height = envrelight.get("patch_size", PATCH_SIZE)
        return dataset_color_stats(FrameStore(path), None, patch_width, patch_height).tolist()
    raise DataError(f"{path} holds neither colour statistics nor a dataset manifest")


def env_settings(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Environment-map sampling for ``relight-env``: flags first, then ``envrelight`` config.

    Returns:
        Dictionary with ``width``, ``height``, ``sin_weight`` and ``topk``
    """
    envrelight = args.configs.get_pipeline_config()["envrelight"]
    if args.size is not None:
        width, height = args.size
    else:
        width, height = envrelight.get("width", 64), envrelight.get("height", 32)
    return {
        "width": int(width),
        "height": int(height),
        "sin_weight": bool(envrelight.get("sin_weight", True)) and not args.no_sin_weight,
        "topk": args.topk if args.topk is not None else envrelight.get("topk"),
    }


# ----------------------------------------------------------------------------
# Subcommands


def cmd_synth_gen(args: argparse.Namespace, n_jobs: int) -> int:
    light_set = load_lights(args.lights) if args.lights else standard_rig()
    manifest = generate_dataset(
        args.scenes,
        light_set,
        args.out,
        seed=args.seed or 0,
        resolution=args.resolution,
        specular=not args.no_specular,
        n_jobs=n_jobs,
    )
    print(manifest)
    return EXIT_OK


def cmd_pms_solve(args: argparse.Namespace, n_jobs: int) -> int:
    base = pms_thresholds(args.configs.get_pipeline_config())
    updates = {}
    if args.tlo is not None:
        updates["low"] = args.tlo
    if args.thi is not None:
        updates["high"] = args.thi
    if args.no_refine:
        updates["specular_tol"] = None
    thresholds = PMSThresholds.model_validate({**base.model_dump(), **updates})
    print(reconstruct_manifest(args.manifest, args.out, thresholds, n_jobs))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, n_jobs: int) -> int:
    sections = _training_sections(args)
    config = _train_config(args, sections, n_jobs)
    mlflow_config = dict(sections.get("mlflow", {}))
    if args.mlflow:
        mlflow_config["enabled"] = True
    result = train(config, args.manifest, args.out, mlflow_config=mlflow_config)
    last = result.history.iloc[-1]
    print(f"{args.out} train_loss={last['train_loss']:.6f}")
    return EXIT_OK


def cmd_relight(args: argparse.Namespace, n_jobs: int) -> int:
    image = load_pfm(args.input)
    if args.color_match:
        image = color_match_linear(image, _color_stats(args))
    relighter = GeneratorRelighter.from_file(args.model)
    _write_image(relighter.relight(image, args.dst_light, args.src_light), args.out)
    return EXIT_OK


def cmd_relight_env(args: argparse.Namespace, n_jobs: int) -> int:
    image = load_pfm(args.input)
    if args.color_match:
        image = color_match_linear(image, _color_stats(args))
    settings = env_settings(args)
    lights = env_to_lights(
        load_pfm(args.envmap),
        settings["width"],
        settings["height"],
        sin_weight=settings["sin_weight"],
    )
    relit = relight_env(
        GeneratorRelighter.from_file(args.model),
        image,
        args.src_light,
        lights,
        topk=settings["topk"],
        clamp=not args.no_clamp,
        n_jobs=n_jobs,
    )
    _write_image(relit, args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, n_jobs: int) -> int:
    a, b = load_pfm(args.a), load_pfm(args.b)
    if args.crop:
        a, b = center_crop(a, *args.crop), center_crop(b, *args.crop)
    print(f"{evaluate(args.metric, a, b):.6f}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, n_jobs: int) -> int:
    light = calibrate_from_sphere(
        load_pfm(args.sphere), tuple(args.center), args.radius, args.reflectance
    )
    print(light.to_line())
    return EXIT_OK


def cmd_augment(args: argparse.Namespace, n_jobs: int) -> int:
    print(expand_flips(args.manifest, args.out))
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, n_jobs: int) -> int:
    fragments = ["ops", "stage1", "full"] if args.fragment == "all" else [args.fragment]
    passed = True
    for fragment in fragments:
        report = grad_check(
            fragment,
            tolerance=args.tolerance,
            metric=args.metric,
            size=args.size,
            seed=args.seed or 0,
            samples=args.samples,
        )
        print(report.summary())
        passed = passed and report.passed
    if not passed:
        raise NumericalError("Gradient check failed")
    return EXIT_OK


def cmd_study(args: argparse.Namespace, n_jobs: int) -> int:
    grid = run_study(
        _training_sections(args),
        manifest_path=args.manifest,
        out_dir=args.out,
        eval_manifest=args.eval_manifest,
        losses=args.losses,
        metrics=args.metrics,
        epochs=args.epochs,
        seed=args.seed,
        n_jobs=n_jobs,
    )
    print(grid.to_string(float_format="%.6f"))
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace, n_jobs: int) -> int:
    table = run_benchmark(
        args.manifest,
        {name: Path(path) for name, path in (args.model or [])},
        out_dir=args.out,
        metrics=args.metrics or METRICS,
        crop=tuple(args.crop) if args.crop else None,
        pairs_per_scene=args.pairs_per_scene,
        seed=42 if args.seed is None else args.seed,
        include_baseline=not args.no_baseline,
        n_jobs=n_jobs,
    )
    print(table.to_string(float_format="%.6f"))
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser


def build_parser() -> RelightArgumentParser:
    common = RelightArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Seed for every random draw")
    common.add_argument("--threads", type=int, default=None, help="Worker threads")
    common.add_argument("--deterministic", action="store_true", help="Force one worker thread")
    common.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Override the level of the configured logging section",
    )
    common.add_argument(
        "--config-dir",
        default="configs",
        help="Directory holding pipeline_config.yaml and training_config.yaml",
    )

    parser = RelightArgumentParser(
        prog="relight", description="Physics-guided directional relighting toolkit"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth-gen", parents=[common], help="Render a synthetic OLAT dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lights", type=Path, default=None, help="Light file (default: 32-light rig)")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--no-specular", action="store_true")
    p.set_defaults(handler=cmd_synth_gen)

    pms = commands.add_parser("pms", help="Photometric stereo")
    pms_commands = pms.add_subparsers(dest="pms_command", required=True)
    p = pms_commands.add_parser("solve", parents=[common], help="Reconstruct a manifest with PMS")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tlo", type=float, default=None, help="Lower luminance threshold")
    p.add_argument("--thi", type=float, default=None, help="Upper luminance threshold")
    p.add_argument("--no-refine", action="store_true", help="Skip the specular refinement pass")
    p.set_defaults(handler=cmd_pms_solve)

    p = commands.add_parser("train", parents=[common], help="Train a relighting generator")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Model file to write")
    p.add_argument("--config", type=Path, default=None, help="JSON/YAML training configuration")
    p.add_argument("--loss", choices=list(METRICS) + ["msssim"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--architecture", choices=["structured", "direct"], default=None)
    p.add_argument("--unknown-source", action="store_true", help="Do not condition on l_src")
    p.add_argument("--mlflow", action="store_true", help="Track the run with MLflow")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("relight", parents=[common], help="Relight one image")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--dst-light", type=_light, required=True, metavar="'dx dy dz [ir ig ib]'")
    p.add_argument("--src-light", type=_light, default=None, metavar="'dx dy dz [ir ig ib]'")
    p.add_argument("--out", type=Path, required=True, help=".pfm or .png")
    p.add_argument(
        "--color-match",
        type=Path,
        default=None,
        metavar="STATS",
        help="Colour statistics JSON or dataset manifest to match the input against",
    )
    p.set_defaults(handler=cmd_relight)

    p = commands.add_parser("relight-env", parents=[common], help="Relight under an env map")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument(
        "--envmap", "--env", dest="envmap", type=Path, required=True, help="Equirectangular PFM"
    )
    p.add_argument("--src-light", type=_light, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument(
        "--size",
        type=int,
        nargs=2,
        default=None,
        metavar=("W", "H"),
        help="Default: envrelight width and height",
    )
    p.add_argument("--topk", type=int, default=None, help="Default: envrelight.topk")
    p.add_argument("--no-sin-weight", action="store_true", help="Uniform solid angles")
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--color-match", type=Path, default=None, metavar="STATS")
    p.set_defaults(handler=cmd_relight_env)

    p = commands.add_parser("eval", parents=[common], help="Compare two PFM images")
    p.add_argument("--metric", choices=list(METRICS) + ["msssim"], default="dssim")
    p.add_argument("--crop", type=int, nargs=2, default=None, metavar=("W", "H"))
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("calibrate", parents=[common], help="Light from a chrome sphere")
    p.add_argument("--sphere", type=Path, required=True)
    p.add_argument("--center", type=_pair, required=True, metavar="x,y")
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--reflectance", type=float, default=1.0)
    p.set_defaults(handler=cmd_calibrate)

    p = commands.add_parser("augment", parents=[common], help="Offline flip expansion")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_augment)

    p = commands.add_parser("gradcheck", parents=[common], help="Finite-difference audit")
    p.add_argument("--fragment", choices=["ops", "stage1", "full", "all"], default="all")
    p.add_argument("--metric", choices=list(METRICS), default="dssim")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--samples", type=int, default=2)
    p.set_defaults(handler=cmd_gradcheck)

    p = commands.add_parser("study", parents=[common], help="Training-loss x metric grid")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--eval-manifest", type=Path, default=None)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--losses", nargs="+", choices=list(METRICS), default=None)
    p.add_argument("--metrics", nargs="+", choices=list(METRICS), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(handler=cmd_study)

    p = commands.add_parser("benchmark", parents=[common], help="Baseline vs trained models")
    p.add_argument("--manifest", type=Path, required=True, help="Held-out scenes")
    p.add_argument("--model", type=_named_path, action="append", metavar="NAME=PATH")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--metrics", nargs="+", choices=list(METRICS), default=None)
    p.add_argument("--crop", type=int, nargs=2, default=[128, 128], metavar=("W", "H"))
    p.add_argument("--pairs-per-scene", type=int, default=8)
    p.add_argument("--no-baseline", action="store_true")
    p.set_defaults(handler=cmd_benchmark)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.configs = ConfigManager(config_dir=args.config_dir)
        _setup_logging(args)
        n_jobs = resolve_threads(args.threads, args.deterministic)
        return args.handler(args, n_jobs)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except yaml.YAMLError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"invalid argument: {' '.join(str(e).split())}", file=sys.stderr)
        return EXIT_USAGE


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
