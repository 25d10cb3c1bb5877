import numpy as np
import pandas as pd

from graph import CurvatureReport, DiagnosticsReport
from metrics import EvalReport


def _format_ratio(percent: float) -> str:
    """
    Formats a before/after ratio in percent with a direction marker.

    Values below 100 mean the rewired graph improved the measure.
    """
    if percent is None or not np.isfinite(percent):
        return "N/A"
    marker = "improved" if percent < 100.0 else ("unchanged" if percent == 100.0 else "worse")
    return f"{percent:.2f}% ({marker})"


def diagnostics_table(report: DiagnosticsReport) -> str:
    """Human-readable table of graph measures before and after reweighting."""
    frame = pd.DataFrame(
        [
            ("Scaled Kirchhoff index", report.kirchhoff_before, report.kirchhoff_after, report.ratios["kirchhoff"]),
            ("lambda_(n-1)", report.lambda_top_before, report.lambda_top_after, report.ratios["lambda_top"]),
            ("Fiedler value", report.fiedler_before, report.fiedler_after, float("nan")),
        ]
        + [
            (f"Conductance {cut_id}", before, after, 100.0 * before / after if after > 0 else float("nan"))
            for cut_id, before, after in report.conductance_pairs
        ],
        columns=["measure", "before", "after", "ratio"],
    )
    frame["ratio"] = frame["ratio"].map(_format_ratio)
    summary = f"Mean conductance ratio: {_format_ratio(report.ratios['conductance'])}"
    return frame.to_string(index=False, float_format=lambda x: f"{x:.6g}") + "\n" + summary


def curvature_table(report: CurvatureReport, limit: int = 10) -> str:
    """The `limit` most negatively curved edges with their bottleneck scores."""
    frame = pd.DataFrame(report.edges, columns=["i", "j", "kappa", "b"])
    if frame.empty:
        return "No edges."
    frame = frame.sort_values(["kappa", "i", "j"]).head(limit)
    return frame.to_string(index=False, float_format=lambda x: f"{x:.4f}")


def eval_table(report: EvalReport) -> str:
    """One row per aggregate and per reported horizon."""
    rows = [
        {"horizon": "all", "crps_mean": report.crps_mean, "crps_sum": report.crps_sum, "mae": report.mae, **report.ql}
    ]
    for step, breakdown in report.horizons.items():
        rows.append({"horizon": f"{step}-step", **breakdown})
    return pd.DataFrame(rows).to_string(index=False, float_format=lambda x: f"{x:.5f}", na_rep="")
