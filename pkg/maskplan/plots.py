"""
Static plots from metrics CSVs and evaluation reports.

SVG output with a fixed hash salt and no date stamp, so identical inputs
regenerate identical files.
"""

import csv
import json
import logging
import math
import os
from typing import Dict, List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .models import PlotInputError  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "maskplan"
plt.rcParams["svg.fonttype"] = "none"

SWEEP_KEYS = ("steps", "pdms", "latency_ms")
RFT_KEYS = ("step", "mean_r")
SFT_KEYS = ("epoch", "sft_loss")
CRITERIA = ("nc", "dac", "ttc", "comfort", "ep", "pdms", "best_of_k")


def _skip_metadata(f) -> Tuple[Dict[str, str], int]:
    """Consume leading ``# key=value`` lines; returns them and how many lines were read."""
    metadata: Dict[str, str] = {}
    lines = 0
    while True:
        pos = f.tell()
        line = f.readline()
        if not line.startswith("#"):
            f.seek(pos)
            return metadata, lines
        lines += 1
        key, _, value = line[1:].strip().partition("=")
        metadata[key.strip()] = value.strip()


def read_metadata(path: str) -> Dict[str, str]:
    """The ``# key=value`` lines a metrics CSV starts with, e.g. its config hash."""
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            return _skip_metadata(f)[0]
    except OSError as e:
        raise PlotInputError(f"Cannot read {path}: {e}")


def read_columns(path: str, required: Sequence[str]) -> Dict[str, List[float]]:
    """Numeric columns of a CSV; blank or 'nan' cells become NaN, anything else unparsable is an error."""
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            _, offset = _skip_metadata(f)
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            for name in required:
                if name not in header:
                    raise PlotInputError(f"{path}: missing column '{name}'", line=offset + 1, column=name)
            columns: Dict[str, List[float]] = {name: [] for name in header}
            for row in reader:
                for name in header:
                    cell = (row.get(name) or "").strip()
                    try:
                        columns[name].append(float(cell) if cell else math.nan)
                    except ValueError:
                        line = offset + reader.line_num
                        raise PlotInputError(f"{path}:{line}: column '{name}' has non-numeric value {cell!r}",
                                             line=line, column=name)
    except OSError as e:
        raise PlotInputError(f"Cannot read {path}: {e}")
    return columns


def _save(fig, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("Plot written to %s", path)
    return path


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def plot_sweep(path: str, out_dir: str) -> List[str]:
    """Score-vs-steps and score-vs-latency curves from a sweep CSV."""
    data = read_columns(path, SWEEP_KEYS)
    written = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data["steps"], data["pdms"], marker="o", label="single")
    if "best_of_k" in data:
        ax.plot(data["steps"], data["best_of_k"], marker="s", linestyle="--", label="best-of-k")
    ax.set_xlabel("denoising steps")
    ax.set_ylabel("PDMS-like score")
    ax.legend()
    written.append(_save(fig, out_dir, f"{_stem(path)}_score_vs_steps.svg"))

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data["latency_ms"], data["pdms"], marker="o")
    for steps, x, y in zip(data["steps"], data["latency_ms"], data["pdms"]):
        ax.annotate(f"s={int(steps)}", (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("median latency (ms)")
    ax.set_ylabel("PDMS-like score")
    written.append(_save(fig, out_dir, f"{_stem(path)}_score_vs_latency.svg"))
    return written


def plot_rft(path: str, out_dir: str) -> List[str]:
    data = read_columns(path, RFT_KEYS)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data["step"], data["mean_r"], label="rollout reward")
    if "mean_r_refined" in data and not all(math.isnan(v) for v in data["mean_r_refined"]):
        ax.plot(data["step"], data["mean_r_refined"], label="refined reward")
    ax.set_xlabel("RFT step")
    ax.set_ylabel("mean reward")
    ax.legend()
    return [_save(fig, out_dir, f"{_stem(path)}_reward.svg")]


def plot_sft(path: str, out_dir: str) -> List[str]:
    data = read_columns(path, SFT_KEYS)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(data["epoch"], data["sft_loss"], label="generation")
    if "refine_loss" in data and not all(math.isnan(v) for v in data["refine_loss"]):
        ax.plot(data["epoch"], data["refine_loss"], label="refinement")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    return [_save(fig, out_dir, f"{_stem(path)}_loss.svg")]


def plot_report(path: str, out_dir: str) -> List[str]:
    """Bar chart of mean per-criterion scores from an evaluation report."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            report = json.load(f)
    except OSError as e:
        raise PlotInputError(f"Cannot read {path}: {e}")
    except json.JSONDecodeError as e:
        raise PlotInputError(f"{path}:{e.lineno}: invalid JSON ({e.msg})", line=e.lineno)
    summary = report.get("summary") if isinstance(report, dict) else None
    if not isinstance(summary, dict):
        raise PlotInputError(f"{path}: missing 'summary' object", column="summary")
    missing = [c for c in CRITERIA if c not in summary]
    if missing:
        raise PlotInputError(f"{path}: summary lacks '{missing[0]}'", column=missing[0])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(list(CRITERIA), [float(summary[c]) for c in CRITERIA])
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("mean score")
    ax.set_title(f"steps={summary.get('steps')} refine={summary.get('refine')}")
    return [_save(fig, out_dir, f"{_stem(path)}_criteria.svg")]


def plot_file(path: str, out_dir: str) -> List[str]:
    """Dispatch on file kind: reports by extension, CSVs by their header."""
    if path.endswith(".json"):
        return plot_report(path, out_dir)
    try:
        with open(path, "r", newline="", encoding="utf-8") as f:
            _skip_metadata(f)
            header = next(csv.reader(f), [])
    except OSError as e:
        raise PlotInputError(f"Cannot read {path}: {e}")
    if "latency_ms" in header:
        return plot_sweep(path, out_dir)
    if "mean_r" in header:
        return plot_rft(path, out_dir)
    if "sft_loss" in header:
        return plot_sft(path, out_dir)
    raise PlotInputError(f"{path}: unrecognized metrics file (header {header})", line=1)
