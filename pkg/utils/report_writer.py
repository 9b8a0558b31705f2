# utils/report_writer.py
"""
Run reports: criterion rows, slope entries, free-form sections and CSV tables
JSON output uses sorted keys and no timestamps so identical runs give identical bytes
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

logger = logging.getLogger(__name__)

PASS = "pass"
FAIL = "fail"
VACUOUS = "vacuous"
EXPECTED_FAILURE = "expected-failure"
INFO = "info"

STATUS_STYLE = {PASS: "green", FAIL: "red", VACUOUS: "yellow", EXPECTED_FAILURE: "cyan", INFO: "white"}


def to_jsonable(value: Any) -> Any:
    """numpy scalars/arrays, complex and non-finite floats to plain JSON values"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [to_jsonable(float(value.real)), to_jsonable(float(value.imag))]
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Path):
        return str(value)
    return value


@dataclass
class CriterionRow:
    """One checked property; criterion cites the acceptance item it feeds (C1..C9, DIV, ...)"""
    criterion: str
    name: str
    status: str
    value: Any = None
    threshold: Any = None
    details: Dict[str, Any] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, Any]:
        return {
            "criterion": self.criterion,
            "name": self.name,
            "status": self.status,
            "value": self.value,
            "threshold": self.threshold,
            "details": self.details,
        }


class Report:
    """Collects the results of one CLI command"""

    def __init__(self, command: str, problem: str, config: Optional[Dict[str, Any]] = None, seed: int = 0):
        self.command = command
        self.problem = problem
        self.config = config or {}
        self.seed = seed
        self.rows: List[CriterionRow] = []
        self.slopes: List[Dict[str, Any]] = []
        self.sections: Dict[str, Any] = {}
        self.tables: Dict[str, pd.DataFrame] = {}
        self.artifacts: Dict[str, str] = {}

    # -- collection ---------------------------------------------------------------

    def add_row(self, criterion: str, name: str, status: str, value: Any = None,
                threshold: Any = None, **details) -> CriterionRow:
        row = CriterionRow(criterion, name, status, value, threshold, details)
        self.rows.append(row)
        log = logger.warning if status == FAIL else logger.info
        log(f"[{criterion}] {name}: {status} (value={value}, threshold={threshold})")
        return row

    def check(self, criterion: str, name: str, passed: bool, value: Any = None,
              threshold: Any = None, **details) -> CriterionRow:
        return self.add_row(criterion, name, PASS if passed else FAIL, value, threshold, **details)

    def add_slope(self, criterion: str, name: str, fit: Dict[str, Any]) -> Dict[str, Any]:
        """fit as returned by fit_loglog_slope; the t-grid and fit residual travel with the slope"""
        entry = {
            "criterion": criterion,
            "name": name,
            "slope": fit.get("slope"),
            "fit_residual": fit.get("fit_residual"),
            "t_grid": list(fit.get("t_grid", [])),
            "errors": list(fit.get("errors", [])),
            "exact_zero": bool(fit.get("exact_zero", False)),
        }
        self.slopes.append(entry)
        return entry

    def add_section(self, name: str, content: Any) -> None:
        self.sections[name] = content

    def add_table(self, name: str, frame: pd.DataFrame) -> None:
        self.tables[name] = frame

    # -- outcome ------------------------------------------------------------------

    @property
    def failed(self) -> List[CriterionRow]:
        return [row for row in self.rows if row.status == FAIL]

    @property
    def passed(self) -> bool:
        return not self.failed

    def failed_criteria(self) -> List[str]:
        return sorted({row.criterion for row in self.failed})

    def criteria_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"criterion": r.criterion, "name": r.name, "status": r.status,
              "value": _scalar(r.value), "threshold": _scalar(r.threshold)} for r in self.rows],
            columns=["criterion", "name", "status", "value", "threshold"],
        )

    def slopes_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"criterion": s["criterion"], "name": s["name"], "slope": s["slope"],
              "fit_residual": s["fit_residual"], "t_grid": " ".join(f"{t:.1e}" for t in s["t_grid"]),
              "errors": " ".join(f"{e:.6e}" for e in s["errors"])} for s in self.slopes],
            columns=["criterion", "name", "slope", "fit_residual", "t_grid", "errors"],
        )

    def to_dict(self) -> Dict[str, Any]:
        return to_jsonable({
            "command": self.command,
            "problem": self.problem,
            "seed": self.seed,
            "config": self.config,
            "passed": self.passed,
            "failed_criteria": self.failed_criteria(),
            "criteria": [row.as_dict() for row in self.rows],
            "slopes": self.slopes,
            "sections": self.sections,
            "artifacts": self.artifacts,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    # -- output -------------------------------------------------------------------

    def write(self, out_dir) -> Dict[str, str]:
        """report.json plus tables/*.csv; returns the written paths"""
        out_dir = Path(out_dir)
        tables_dir = out_dir / "tables"
        tables_dir.mkdir(parents=True, exist_ok=True)

        written = {}
        frames = {"criteria": self.criteria_frame(), **self.tables}
        if self.slopes:
            frames["slopes"] = self.slopes_frame()
        for name, frame in sorted(frames.items()):
            path = tables_dir / f"{name}.csv"
            frame.to_csv(path, index=False, float_format="%.10e")
            written[name] = str(path)
            self.artifacts[f"tables/{name}.csv"] = f"{len(frame)} rows"

        report_path = out_dir / "report.json"
        report_path.write_text(self.to_json())
        written["report"] = str(report_path)
        logger.info(f"Wrote report to {report_path}")
        return written

    def print_summary(self, console: Optional[Console] = None) -> None:
        console = console or Console()
        table = Table(title=f"{self.command} / {self.problem}")
        table.add_column("Criterion")
        table.add_column("Check")
        table.add_column("Status")
        table.add_column("Value", justify="right")
        table.add_column("Threshold", justify="right")
        for row in self.rows:
            style = STATUS_STYLE.get(row.status, "white")
            table.add_row(row.criterion, row.name, f"[{style}]{row.status}[/{style}]",
                          _fmt(row.value), _fmt(row.threshold))
        console.print(table)

        if self.slopes:
            slopes = Table(title="Fitted slopes")
            for column in ("Criterion", "Quantity", "Slope", "Fit residual"):
                slopes.add_column(column)
            for s in self.slopes:
                slopes.add_row(s["criterion"], s["name"], _fmt(s["slope"]), _fmt(s["fit_residual"]))
            console.print(slopes)

        if self.passed:
            console.print("[green]✅ All checks passed[/green]")
        else:
            console.print(f"[red]❌ Failed criteria: {', '.join(self.failed_criteria())}[/red]")


def _scalar(value: Any) -> Any:
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(to_jsonable(value), sort_keys=True)
    return to_jsonable(value)


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.4g}"
    return str(value)


def dump_systems(systems: Dict[str, Any], directory) -> Dict[str, str]:
    """Coordinate text dumps of AssembledSystem objects under directory/dumps"""
    directory = Path(directory) / "dumps"
    paths = {}
    for name, system in sorted(systems.items()):
        for kind, path in system.dump(directory, name).items():
            paths[f"{name}_{kind}"] = str(Path(path).relative_to(directory.parent))
    return paths
