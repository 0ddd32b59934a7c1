#!/usr/bin/env python3
"""
Low-light image synthesis command-line tool

Subcommands:
  degrade     - Unprocess, corrupt and reprocess every image of a directory
  baseline    - Same batch driver with one of the comparison synthesizers
  verify      - Statistical and numerical conformance report
  maet-train  - Train the toy multitask auto-encoding detector
  maet-eval   - Evaluate a toy detector checkpoint on a regenerated held-out set
  replay      - Re-derive degraded images from sources and sidecars, demand bit-equality
"""
import sys
import json
import argparse
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from baseline_synthesis import BaselineMethod
from color_pipeline import CcmMode
from config import AppConfig, load_config
from degrade_pipeline import METHOD_OURS, SCHEMA_VERSION, TOOL_VERSION, PipelineOptions, degrade_batch, replay_batch
from error_handler import ConfigurationError, SynthesisError, exit_code_for
from logger import LoggingSettings, get_logger, setup_logging
from sensor_noise import QuantMode

logger = get_logger("lowlight.cli")

SYNTH_METHODS = [METHOD_OURS] + [m.value for m in BaselineMethod]


class UsageError(Exception):
    """argparse asked to exit; carries its exit status"""

    def __init__(self, status: int):
        super().__init__(status)
        self.status = status


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of calling sys.exit"""

    def exit(self, status=0, message=None):
        if message:
            self._print_message(message, sys.stderr)
        raise UsageError(status)


def _add_common(parser: argparse.ArgumentParser, seed_required: bool = True,
                jobs_help: str = "Worker processes (default: io.jobs of the config)"):
    parser.add_argument("--config", type=Path,
                        help="YAML configuration (default: $LOWLIGHT_CONFIG, else built-in defaults)")
    parser.add_argument("--seed", type=int, required=seed_required,
                        help="Base seed; image i of a batch uses stream i")
    parser.add_argument("--jobs", type=int, help=jobs_help)


def _add_pipeline_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--in", dest="input_dir", type=Path, required=True,
                        help="Directory of 8-bit PNG/PPM images")
    parser.add_argument("--out", dest="output_dir", type=Path, required=True,
                        help="Output directory for images, sidecars and the manifest")
    parser.add_argument("--tone-remap", action="store_const", const=True,
                        help="Re-apply the tone curve after gamma")
    parser.add_argument("--quant-mode", choices=[m.value for m in QuantMode],
                        help="Quantization noise half-width rule")
    parser.add_argument("--ccm-mode", choices=[m.value for m in CcmMode],
                        help="Pick one calibrated CCM or a random convex mixture")
    parser.add_argument("--mosaic", action="store_const", const=True,
                        help="Route the raw stage through an RGGB mosaic and bilinear demosaic")
    parser.add_argument("--trace", action="store_true",
                        help="Log per-stage color states and value ranges for every image")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="lowlight_synth",
        description="Physically-motivated low-light image synthesis with parameter sidecars",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  lowlight_synth degrade --in photos/ --out dark/ --seed 7 --jobs 8
  lowlight_synth baseline --method invgamma-poisson --in photos/ --out dark_gp/ --seed 7
  lowlight_synth replay --in photos/ --out dark/
  lowlight_synth verify --seed 0 --report report.json
  lowlight_synth maet-train --n 5000 --steps 2000 --seed 0 --out run/
  lowlight_synth maet-eval --checkpoint run/model.npz
        """
    )
    parser.add_argument("--version", action="version",
                        version=f"lowlight_synth {TOOL_VERSION} (sidecar schema {SCHEMA_VERSION})")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    degrade = sub.add_parser("degrade", help="Synthesize low-light images with the parametric pipeline")
    _add_common(degrade)
    _add_pipeline_flags(degrade)

    baseline = sub.add_parser("baseline", help="Synthesize with a comparison method")
    baseline.add_argument("--method", required=True, choices=[m.value for m in BaselineMethod])
    _add_common(baseline)
    _add_pipeline_flags(baseline)

    replay = sub.add_parser("replay", help="Check that sidecars reproduce their images bit-exactly")
    replay.add_argument("--in", dest="input_dir", type=Path, required=True, help="Source image directory")
    replay.add_argument("--out", dest="output_dir", type=Path, required=True,
                        help="Directory written by degrade/baseline")
    replay.add_argument("--config", type=Path)

    verify = sub.add_parser("verify", help="Run the conformance suite and write a JSON report")
    _add_common(verify, jobs_help="Workers of the parallel run compared with the serial one (default: 8)")
    verify.add_argument("--report", type=Path, required=True)
    verify.add_argument("--noise-samples", type=int, default=10 ** 6)
    verify.add_argument("--sampling-samples", type=int, default=10 ** 5)
    verify.add_argument("--skip-determinism", action="store_true",
                        help="Skip the parallel batch determinism check")

    train = sub.add_parser("maet-train", help="Train the toy detector")
    _add_common(train)
    train.add_argument("--out", dest="output_dir", type=Path, required=True)
    train.add_argument("--n", type=int, help="Training patches (default: maet.n)")
    train.add_argument("--steps", type=int, help="SGD steps (default: maet.steps)")
    train.add_argument("--lr", type=float, help="Learning rate (default: maet.lr)")
    train.add_argument("--no-ort", action="store_true", help="Drop the orthogonal tangent loss")
    train.add_argument("--no-deg", action="store_true", help="Drop degradation supervision")
    train.add_argument("--synth", choices=SYNTH_METHODS, default=METHOD_OURS,
                       help="Synthesizer used for the dark patches")

    evaluate = sub.add_parser("maet-eval", help="Evaluate a toy detector checkpoint")
    _add_common(evaluate, seed_required=False)
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--n", type=int, help="Held-out patches (default: as trained)")
    evaluate.add_argument("--report", type=Path, help="Also write the metrics here")

    return parser


def pipeline_options(args: argparse.Namespace, base: PipelineOptions) -> PipelineOptions:
    """Configuration pipeline flags with command-line overrides applied"""
    overrides: Dict[str, Any] = {}
    if args.tone_remap:
        overrides["tone_remap"] = True
    if args.mosaic:
        overrides["mosaic"] = True
    if args.quant_mode:
        overrides["quant_mode"] = QuantMode(args.quant_mode)
    if args.ccm_mode:
        overrides["ccm_mode"] = CcmMode(args.ccm_mode)
    return replace(base, **overrides)


def _emit(result: Dict[str, Any]):
    print(json.dumps(result, indent=2, default=str))


def _jobs(args: argparse.Namespace, config: AppConfig) -> int:
    jobs = args.jobs if getattr(args, "jobs", None) is not None else config.io.jobs
    if jobs < 1:
        raise ConfigurationError(f"--jobs must be at least 1, got {jobs}", field_name="jobs")
    return jobs


def cmd_degrade(args: argparse.Namespace, config: AppConfig, method: str = METHOD_OURS) -> int:
    context = config.context(pipeline_options(args, config.pipeline))
    manifest = degrade_batch(args.input_dir, args.output_dir, context, args.seed, jobs=_jobs(args, config),
                             method=method, extensions=config.io.extensions,
                             manifest_name=config.io.manifest_name, trace=args.trace)
    failed = len(manifest["errors"])
    _emit({"method": method, "written": manifest["count"], "failed": failed,
           "config_hash": manifest["config_hash"],
           "manifest": str(args.output_dir / config.io.manifest_name)})
    return 1 if failed else 0


def cmd_baseline(args: argparse.Namespace, config: AppConfig) -> int:
    if args.mosaic and args.method != BaselineMethod.OURS_MOSAIC.value:
        raise ConfigurationError(f"--mosaic has no raw stage to act on in method '{args.method}'",
                                 field_name="mosaic")
    return cmd_degrade(args, config, method=args.method)


def cmd_replay(args: argparse.Namespace, config: AppConfig) -> int:
    outcome = replay_batch(args.input_dir, args.output_dir, config.context(),
                           manifest_name=config.io.manifest_name)
    _emit({"matched": len(outcome["matched"]), "mismatched": outcome["mismatched"]})
    return 1 if outcome["mismatched"] else 0


def cmd_verify(args: argparse.Namespace, config: AppConfig) -> int:
    from verify_stats import DETERMINISM_JOBS, run_verification

    # the serial run is compared against this many workers
    jobs = _jobs(args, config) if args.jobs is not None else DETERMINISM_JOBS
    report = run_verification(config, args.seed, noise_samples=args.noise_samples,
                              sampling_samples=args.sampling_samples,
                              determinism=not args.skip_determinism, jobs=jobs)
    report.write(args.report)
    failed = [e.name for e in report.entries if not e.passed]
    _emit({"verdict": "pass" if report.passed else "fail", "checks": len(report.entries),
           "failed": failed, "report": str(args.report)})
    return 0 if report.passed else 1


def cmd_maet_train(args: argparse.Namespace, config: AppConfig) -> int:
    from maet_toy import run_training

    metrics = run_training(config.maet, args.seed, args.output_dir, config.context(),
                           use_ort=not args.no_ort, use_deg=not args.no_deg, method=args.synth,
                           jobs=_jobs(args, config), steps=args.steps, n=args.n, lr=args.lr)
    _emit({"final": metrics["final"], "acceptance": metrics["acceptance"],
           "checkpoint": str(args.output_dir / "model.npz")})
    return 0


def cmd_maet_eval(args: argparse.Namespace, config: AppConfig) -> int:
    from maet_toy import run_evaluation

    metrics = run_evaluation(args.checkpoint, config.context(), seed=args.seed, n=args.n,
                             jobs=_jobs(args, config))
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(metrics, f, indent=2)
            f.write("\n")
    _emit(metrics)
    return 0


COMMANDS = {
    "degrade": cmd_degrade,
    "baseline": cmd_baseline,
    "replay": cmd_replay,
    "verify": cmd_verify,
    "maet-train": cmd_maet_train,
    "maet-eval": cmd_maet_eval,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse `argv`, run the subcommand and return the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as e:
        return e.status

    setup_logging(LoggingSettings())
    try:
        config = load_config(args.config)
        log_manager = setup_logging(config.logging)
        log_manager.log_system_info(command=args.command, config_hash=config.config_hash)
        if config.logging.directory:
            logger.info("Writing log files", event_type="log_files",
                        **{name: str(path) for name, path in log_manager.get_log_files().items()})
        return COMMANDS[args.command](args, config)
    except SynthesisError as e:
        logger.error("Command failed", command=args.command, error=str(e),
                     error_type=type(e).__name__, category=e.category.value, event_type="command_failed")
        return exit_code_for(e)
    except OSError as e:
        logger.error("Command failed", command=args.command, error=str(e), event_type="command_failed")
        return 1


def main(argv: Optional[List[str]] = None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
