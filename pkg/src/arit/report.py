"""Report emission: JSON (always), per-item CSV and PNG bar charts."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from arit.errors import DataError  # noqa: E402
from arit.metrics import MetricReport  # noqa: E402

FORMATS = ("json", "csv", "png")


def read_report(path) -> MetricReport:
    with open(path) as fh:
        return MetricReport.from_json(json.load(fh))


def bar_chart(path, labels, series: dict[str, list[float]], title: str = "", description: str | None = None) -> int:
    """One bar panel per series, labels on the x axis. Returns the bar count per panel.

    ``description`` lands in the PNG Description text chunk."""
    labels = [str(x) for x in labels]
    if not series:
        raise DataError("nothing to chart")
    fig, axes = plt.subplots(1, len(series), figsize=(4.5 * len(series), 3.6), squeeze=False)
    for ax, (name, values) in zip(axes[0], series.items()):
        if len(values) != len(labels):
            raise DataError(f"series {name!r} has {len(values)} values for {len(labels)} labels")
        ax.bar(range(len(labels)), values, color="tab:blue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_title(name, fontsize=9)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    # no Software/date chunks, so identical data gives identical bytes
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None, "Description": description})
    plt.close(fig)
    return len(labels)


def emit_report(report: MetricReport, stem, formats=FORMATS, label_key: str | None = None, chart_keys=None) -> dict:
    """Write ``stem.json`` and, if requested, ``stem.csv`` and ``stem.png``.

    The chart plots every numeric per-item column (or ``chart_keys``) against
    ``label_key``. A ``config_hash`` in the metadata is echoed as a leading
    ``#`` comment of the CSV and in the chart's Description chunk. Returns
    {format: path}."""
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise DataError(f"unknown report formats: {sorted(unknown)}")
    stem = Path(stem)
    tag = report.metadata.get("config_hash")
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        written = {"json": stem.with_suffix(".json")}
        written["json"].write_text(report.dumps())
        if "csv" in formats and report.per_item:
            written["csv"] = stem.with_suffix(".csv")
            header = f"# config_hash={tag}\n" if tag else ""
            written["csv"].write_text(header + report.to_csv())
        if "png" in formats and report.per_item:
            labels = report.per_item[label_key] if label_key else list(range(report.n_items))
            keys = chart_keys or [
                k for k, v in report.per_item.items()
                if k != label_key and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
            ]
            if keys:
                written["png"] = stem.with_suffix(".png")
                description = f"config_hash={tag}" if tag else None
                bar_chart(written["png"], labels, {k: report.per_item[k] for k in keys}, description=description)
    except OSError as exc:
        raise DataError(f"cannot write report to {stem}: {exc}") from exc
    return written
