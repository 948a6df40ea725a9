"""
Command Line Interface for maskplan
"""

import argparse
import json
import logging
import sys
from typing import List, Optional

from .config import RunConfig, flatten, load_config, save_config, set_value
from .formatters import get_formatter
from .models import ConfigError, MaskplanError
from .pipeline import PlannerPipeline
from .sim import DIFFICULTIES

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# short flag -> flat config key
ALIASES = {
    "steps": "diffusion.steps",
    "schedule": "diffusion.schedule",
    "tau": "diffusion.tau",
}


def _config_parent() -> argparse.ArgumentParser:
    """Flags shared by every subcommand: a config file plus one flag per flat config key."""
    parent = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    parent.add_argument("--config", help="Flat JSON config file")
    parent.add_argument("--steps", type=int, help="Denoising steps (diffusion.steps)")
    parent.add_argument("--schedule", choices=["cosine", "uniform"], help="Unmasking schedule (diffusion.schedule)")
    parent.add_argument("--tau", type=int, help="Snapshot stride (diffusion.tau)")
    group = parent.add_argument_group("config keys")
    for key, value in flatten(RunConfig()).items():
        group.add_argument(f"--{key}", dest=key, default=None, metavar=type(value).__name__.upper(),
                           help=f"default: {','.join(map(str, value)) if isinstance(value, list) else value}")
    return parent


def create_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""
    parser = argparse.ArgumentParser(
        description="maskplan - masked-diffusion trajectory planner with a refinement expert",
        prog="maskplan"
    )

    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")

    parent = _config_parent()
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    gen_parser = subparsers.add_parser("gen-scenes", parents=[parent], allow_abbrev=False,
                                       help="Generate a scene file")
    gen_parser.add_argument("--count", type=int, required=True, help="Number of scenes")
    gen_parser.add_argument("--difficulty", choices=list(DIFFICULTIES) + ["mixed"], default="easy",
                            help="Scene difficulty")
    gen_parser.add_argument("--out", required=True, help="Output scene file (JSONL)")
    gen_parser.add_argument("--split", choices=["train", "holdout"], default="train", help="Seed range")
    gen_parser.add_argument("--force", action="store_true", help="Overwrite an existing file")

    sft_parser = subparsers.add_parser("sft", parents=[parent], allow_abbrev=False,
                                       help="Supervised fine-tuning on expert plans")
    sft_parser.add_argument("--scenes", required=True, help="Training scene file")
    sft_parser.add_argument("--out", required=True, help="Output checkpoint")
    sft_parser.add_argument("--resume", help="Checkpoint to resume from")
    sft_parser.add_argument("--stop-after", type=int, help="Stop after this many epochs")

    rft_parser = subparsers.add_parser("rft", parents=[parent], allow_abbrev=False,
                                       help="Reinforcement fine-tuning in the simulator")
    rft_parser.add_argument("--ckpt", required=True, help="SFT checkpoint")
    rft_parser.add_argument("--scenes", required=True, help="Training scene file")
    rft_parser.add_argument("--out", required=True, help="Output checkpoint")

    eval_parser = subparsers.add_parser("eval", parents=[parent], allow_abbrev=False,
                                        help="Score a checkpoint on a scene file")
    eval_parser.add_argument("--ckpt", required=True, help="Checkpoint to evaluate")
    eval_parser.add_argument("--scenes", required=True, help="Evaluation scene file")
    eval_parser.add_argument("--report", default="report.json", help="JSON report path")
    eval_parser.add_argument("--refine", choices=["on", "off"], help="Run the refinement pass")
    eval_parser.add_argument("--samples", type=int, help="Samples per scene (best-of-k)")
    eval_parser.add_argument("--format", choices=["table", "json", "csv", "simple"], default="table",
                             help="Output format")
    eval_parser.add_argument("--output", help="Write formatted output to this file")

    sweep_parser = subparsers.add_parser("sweep", parents=[parent], allow_abbrev=False,
                                         help="Score and latency over a grid of step counts")
    sweep_parser.add_argument("--ckpt", required=True, help="Checkpoint to evaluate")
    sweep_parser.add_argument("--scenes", required=True, help="Evaluation scene file")
    sweep_parser.add_argument("--out", default="sweep.csv", help="Sweep CSV path")
    sweep_parser.add_argument("--steps-grid", help="Comma-separated step counts, e.g. 2,4,8,12")

    repair_parser = subparsers.add_parser("repair", parents=[parent], allow_abbrev=False,
                                          help="Score the refiner on expert plans with one outlier token")
    repair_parser.add_argument("--ckpt", required=True, help="Checkpoint with a refinement expert")
    repair_parser.add_argument("--scenes", required=True, help="Scene file providing the expert plans")
    repair_parser.add_argument("--out", default="repair.json", help="JSON report path")
    repair_parser.add_argument("--count", type=int, default=200, help="Number of corrupted sequences")

    plot_parser = subparsers.add_parser("plot", parents=[parent], allow_abbrev=False,
                                        help="Render metrics CSVs and reports to SVG")
    plot_parser.add_argument("inputs", nargs="+", help="Metrics CSV or report JSON files")
    plot_parser.add_argument("--out-dir", required=True, help="Directory for the plot files")

    config_parser = subparsers.add_parser("config", parents=[parent], allow_abbrev=False,
                                          help="Print or save the resolved configuration")
    config_parser.add_argument("--out", help="Write the flat config to this file")

    return parser


def build_config(args) -> RunConfig:
    """Config file first, then every flat-key flag, then the short aliases."""
    cfg = load_config(args.config) if args.config else RunConfig()
    values = vars(args)
    for key in flatten(cfg):
        if values.get(key) is not None:
            set_value(cfg, key, values[key])
    for alias, key in ALIASES.items():
        if values.get(alias) is not None:
            set_value(cfg, key, values[alias])
    return cfg.resolve()


def handle_gen_scenes(args, pipeline: PlannerPipeline):
    """Handle gen-scenes command."""
    try:
        path = pipeline.gen_scenes(args.count, args.difficulty, pipeline.config.seed, args.out,
                                   split=args.split, force=args.force)
        print(f"Scenes saved to {path}")
    except MaskplanError as e:
        print(f"Scene generation error: {e.message}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


def handle_sft(args, pipeline: PlannerPipeline):
    """Handle sft command."""
    try:
        path = pipeline.sft(args.scenes, args.out, resume=args.resume, stop_after=args.stop_after)
        print(f"Checkpoint saved to {path}")
    except MaskplanError as e:
        print(f"SFT error: {e.message}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


def handle_rft(args, pipeline: PlannerPipeline):
    """Handle rft command."""
    try:
        path = pipeline.rft(args.ckpt, args.scenes, args.out)
        print(f"Checkpoint saved to {path}")
    except MaskplanError as e:
        print(f"RFT error: {e.message}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


def handle_eval(args, pipeline: PlannerPipeline):
    """Handle eval command."""
    try:
        use_refine = None if args.refine is None else args.refine == "on"
        report = pipeline.evaluate(args.ckpt, args.scenes, report_path=args.report,
                                   use_refine=use_refine, samples=args.samples)
        formatter = get_formatter(args.format)

        if args.output:
            with open(args.output, 'w', encoding='utf-8') as f:
                formatter.format(report, f)
            print(f"Results saved to {args.output}")
        else:
            print(formatter.format(report))
    except MaskplanError as e:
        print(f"Evaluation error: {e.message}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


def handle_sweep(args, pipeline: PlannerPipeline):
    """Handle sweep command."""
    try:
        grid = None
        if args.steps_grid:
            try:
                grid = [int(s) for s in args.steps_grid.split(",") if s.strip()]
            except ValueError:
                raise ConfigError(f"Invalid steps grid: {args.steps_grid}")
        rows = pipeline.sweep(args.ckpt, args.scenes, args.out, steps_grid=grid)
        for row in rows:
            print(f"steps={row['steps']:<3} pdms={row['pdms']:.4f} best_of_k={row['best_of_k']:.4f} "
                  f"latency={row['latency_ms']:.1f}ms")
    except MaskplanError as e:
        print(f"Sweep error: {e.message}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


def handle_repair(args, pipeline: PlannerPipeline):
    """Handle repair command."""
    try:
        report = pipeline.repair(args.ckpt, args.scenes, args.out, count=args.count)
        summary = report.summary()
        line = (f"cases={summary['cases']} corrupted={summary['corrupted']:.4f} "
                f"refined={summary['refined']:.4f} restored={report.restored}/{report.failing}")
        if report.restored_share is not None:
            line += f" ({report.restored_share:.1%})"
        print(line)
    except MaskplanError as e:
        print(f"Repair error: {e.message}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


def handle_plot(args, pipeline: PlannerPipeline):
    """Handle plot command."""
    try:
        for path in pipeline.plot(args.inputs, args.out_dir):
            print(path)
    except MaskplanError as e:
        print(f"Plot error: {e.message}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)


def handle_config(args, pipeline: PlannerPipeline):
    """Handle config command."""
    if args.out:
        save_config(pipeline.config, args.out)
        print(f"Config saved to {args.out}")
    else:
        print(json.dumps(flatten(pipeline.config), indent=2, sort_keys=True))


HANDLERS = {
    "gen-scenes": handle_gen_scenes,
    "sft": handle_sft,
    "rft": handle_rft,
    "eval": handle_eval,
    "sweep": handle_sweep,
    "repair": handle_repair,
    "plot": handle_plot,
    "config": handle_config,
}


def main(argv: Optional[List[str]] = None):
    """Main CLI entry point."""
    parser = create_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return

    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO, format=LOG_FORMAT)

    try:
        config = build_config(args)
    except MaskplanError as e:
        print(f"Config error: {e.message}", file=sys.stderr)
        sys.exit(1)

    pipeline = PlannerPipeline(config, show_progress=not args.quiet)
    HANDLERS[args.command](args, pipeline)


if __name__ == "__main__":
    main()
