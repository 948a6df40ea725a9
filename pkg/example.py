#!/usr/bin/env python3
"""
Example usage of the maskplan library: a laptop-sized run end to end.
"""

import os

from maskplan import MaskplanError, PlannerPipeline, RunConfig
from maskplan.config import set_value
from maskplan.formatters import get_formatter

SMALL = {
    "codec.waypoints": 4,
    "model.d_model": 32,
    "model.n_heads": 2,
    "model.d_ff": 64,
    "model.n_shared_blocks": 1,
    "model.n_expert_blocks": 1,
    "model.grid_size": 16,
    "model.patch_size": 8,
    "sim.raster_size": 16,
    "sim.raster_resolution": 2.0,
    "sft.epochs": 4,
    "rft.group_size": 4,
    "rft.online_samples": 2,
    "diffusion.steps": 4,
    "diffusion.tau": 2,
    "rft.steps": 4,
    "rft.tau": 2,
    "eval.steps_grid": "2,4",
}


def main():
    print("maskplan example")
    print("=" * 16)

    cfg = RunConfig(output_dir="runs/example")
    for key, value in SMALL.items():
        set_value(cfg, key, value)
    pipeline = PlannerPipeline(cfg)

    try:
        train = pipeline.gen_scenes(8, "easy", 0, "train.jsonl", force=True)
        holdout = pipeline.gen_scenes(4, "mixed", 0, "holdout.jsonl", split="holdout", force=True)

        sft = pipeline.sft(train, "sft.ckpt")
        rft = pipeline.rft(sft, train, "rft.ckpt")

        for name, ckpt in (("SFT", sft), ("RFT", rft)):
            report = pipeline.evaluate(ckpt, holdout, report_path=f"{name.lower()}_report.json")
            print(f"\n{name} checkpoint")
            print(get_formatter("table").format(report))

        pipeline.sweep(rft, holdout, "sweep.csv")
        inputs = [os.path.join(cfg.output_dir, name) for name in ("sweep.csv", "sft.sft.csv", "rft.rft.csv")]
        for path in pipeline.plot(inputs, os.path.join(cfg.output_dir, "plots")):
            print(f"plot: {path}")

        print("\nExample completed.")
    except MaskplanError as e:
        print(f"maskplan error: {e.message}")


if __name__ == "__main__":
    main()
