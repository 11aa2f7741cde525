"""Persistence boundary for experiment outputs.

The repository owns one output directory: versioned CSV tables, adversarial
clouds and the run summary. It does not run attacks or compute rates.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Sequence, Union

from .attack import AttackReport
from .geometry import PointCloud, save_cloud
from .saao_serializers import serialize_saao_domain

SCHEMA_VERSION = 1

ATTACK_REPORT_COLUMNS = [
    "method",
    "surrogate",
    "cloud_id",
    "true_label",
    "surrogate_pred",
    "success",
    "D_h",
    "D_c",
    "D_norm",
    "steps_used",
    "selected_path_ids",
    "variant",
    "skipped",
]


class ReportRepository:
    """Write and read the files of one experiment run."""

    ADV_DIR = "adv"
    SUMMARY_FILE = "summary.json"

    def __init__(self, out_dir: Union[str, Path]) -> None:
        self.out_dir = Path(out_dir)

    def adversarial_path(self, method: str, surrogate: str, cloud_id: str) -> Path:
        return self.out_dir / self.ADV_DIR / method / surrogate / f"{cloud_id}.xyz"

    def save_adversarial(self, method: str, surrogate: str, cloud_id: str, cloud: PointCloud) -> Path:
        path = self.adversarial_path(method, surrogate, cloud_id)
        save_cloud(path, cloud)
        return path

    def write_table(self, name: str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
        """Write `<name>.csv` with a schema comment line, then header and rows."""

        return write_csv(self.out_dir / f"{name}.csv", name, columns, rows)

    def read_table(self, name: str) -> List[Dict[str, str]]:
        path = self.out_dir / f"{name}.csv"
        with path.open("r", encoding="utf-8", newline="") as handle:
            lines = [line for line in handle if not line.startswith("#")]
        return list(csv.DictReader(lines))

    def write_attack_reports(self, name: str, reports: Iterable[tuple]) -> Path:
        """Rows are (method, surrogate, AttackReport) triples."""

        return self.write_table(
            name,
            ATTACK_REPORT_COLUMNS,
            (attack_report_row(method, surrogate, report) for method, surrogate, report in reports),
        )

    def write_summary(self, summary: Mapping[str, Any]) -> Path:
        path = self.out_dir / self.SUMMARY_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(serialize_saao_domain(summary), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return path


def write_csv(path: Union[str, Path], schema: str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# schema: {schema} v{SCHEMA_VERSION}\n")
        writer = csv.DictWriter(handle, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({column: _format_cell(row.get(column)) for column in columns})
    return path


def attack_report_row(method: str, surrogate: str, report: AttackReport) -> Dict[str, Any]:
    return {
        "method": method,
        "surrogate": surrogate,
        "cloud_id": report.cloud_id,
        "true_label": report.true_label,
        "surrogate_pred": report.surrogate_pred,
        "success": report.success,
        "D_h": report.d_hausdorff,
        "D_c": report.d_chamfer,
        "D_norm": report.d_norm,
        "steps_used": report.steps_used,
        "selected_path_ids": " ".join(str(index) for index in report.selected_path_ids),
        "variant": report.variant,
        "skipped": report.skipped,
    }


def _format_cell(value: Any) -> Any:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    if value is None:
        return ""
    return value
