"""
Output formatters for evaluation reports.
"""

import csv
import json
from io import StringIO
from typing import TextIO

from .models import EvalReport

CRITERIA = ("nc", "dac", "ttc", "comfort", "ep", "pdms")


class OutputFormatter:
    """Base class for output formatters."""

    def format(self, report: EvalReport, output_file: TextIO = None) -> str:
        """Format a report and optionally write it to a file."""
        raise NotImplementedError

    def _emit(self, formatted: str, output_file: TextIO = None) -> str:
        if output_file:
            output_file.write(formatted)
        return formatted


class TableFormatter(OutputFormatter):
    """Summary header followed by one row per scene."""

    def format(self, report: EvalReport, output_file: TextIO = None) -> str:
        if not report.scenes:
            return self._emit("No scenes evaluated.", output_file)

        summary = report.summary()
        output = StringIO()
        output.write(f"Scenes: {summary['scenes']}  steps: {summary['steps']}  "
                     f"refine: {'on' if summary['refine'] else 'off'}  "
                     f"samples: {summary['samples_per_scene']}\n")
        output.write("   ".join(f"{name.upper()}: {summary[name]:.3f}" for name in CRITERIA))
        output.write(f"   BEST-OF-K: {summary['best_of_k']:.3f}\n\n")

        header = f"{'seed':>8}  {'difficulty':<10}" + "".join(f"{name:>9}" for name in CRITERIA) + f"{'best':>9}"
        output.write(header + "\n")
        output.write("-" * len(header) + "\n")
        for result in report.scenes:
            row = f"{result.seed:>8}  {result.difficulty:<10}"
            row += "".join(f"{getattr(result.single, name):>9.3f}" for name in CRITERIA)
            row += f"{result.best_of_k:>9.3f}"
            if result.single.malformed:
                row += "  malformed"
            output.write(row + "\n")
        return self._emit(output.getvalue(), output_file)


class JSONFormatter(OutputFormatter):
    """Format the full report as JSON."""

    def format(self, report: EvalReport, output_file: TextIO = None) -> str:
        formatted = json.dumps(report.to_dict(), indent=2, sort_keys=True)
        return self._emit(formatted, output_file)


class CSVFormatter(OutputFormatter):
    """One CSV row per scene."""

    columns = ("seed", "difficulty") + CRITERIA + ("best_of_k", "malformed")

    def format(self, report: EvalReport, output_file: TextIO = None) -> str:
        output = StringIO()
        writer = csv.writer(output, lineterminator="\n")
        writer.writerow(self.columns)
        for result in report.scenes:
            writer.writerow([result.seed, result.difficulty]
                            + [f"{getattr(result.single, name):.6f}" for name in CRITERIA]
                            + [f"{result.best_of_k:.6f}", int(result.single.malformed)])
        return self._emit(output.getvalue(), output_file)


class SimpleFormatter(OutputFormatter):
    """Single summary line."""

    def format(self, report: EvalReport, output_file: TextIO = None) -> str:
        summary = report.summary()
        formatted = (f"pdms={summary['pdms']:.4f} best_of_k={summary['best_of_k']:.4f} "
                     f"scenes={summary['scenes']} steps={summary['steps']}")
        return self._emit(formatted, output_file)


def get_formatter(format_name: str) -> OutputFormatter:
    """Get formatter by name."""
    formatters = {
        "table": TableFormatter,
        "json": JSONFormatter,
        "csv": CSVFormatter,
        "simple": SimpleFormatter,
    }

    if format_name not in formatters:
        raise ValueError(f"Unknown format: {format_name}")
    return formatters[format_name]()
