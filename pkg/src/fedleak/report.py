"""Turn attack sample records into per-round leakage reports, CSV tables,
quantile curves, and cross-run t-tests."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

from .corpus import Corpus
from .metrics import (
    MetricError,
    TTestResult,
    paired_t_test,
    pii_recovery,
    quantile_curve,
    threshold_exceedance,
    top_fraction_mean,
)

REPORT_COLUMNS = (
    "round", "task", "scheme", "top10", "top30", "top50", "top100",
    "exceed095", "exceed090", "pii_total", "pii_recovered",
)

DEFAULT_QUANTILE_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class LeakageReport:
    round: int
    task: str
    scheme: str
    scores: tuple[float, ...]  # per-sample ROUGE-L
    top10: float
    top30: float
    top50: float
    top100: float
    exceed095: float
    exceed090: float
    pii_total: int
    pii_recovered: int

    def row(self) -> list:
        return [
            self.round, self.task, self.scheme,
            repr(self.top10), repr(self.top30), repr(self.top50), repr(self.top100),
            repr(self.exceed095), repr(self.exceed090),
            self.pii_total, self.pii_recovered,
        ]


def read_attack_jsonl(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            missing = [k for k in ("round", "task", "scheme", "rougeL", "generated_text") if k not in record]
            if missing:
                raise ReportError(f"{path}:{lineno}: record is missing fields {missing}")
            records.append(record)
    return records


def group_records(records) -> dict:
    """(task, scheme) -> round -> list of records, rounds sorted."""
    groups: dict = {}
    for record in records:
        key = (record["task"], record["scheme"])
        groups.setdefault(key, {}).setdefault(int(record["round"]), []).append(record)
    return {
        key: {r: rounds[r] for r in sorted(rounds)} for key, rounds in sorted(groups.items())
    }


def build_reports(records, corpus: Corpus | None = None) -> list[LeakageReport]:
    reports = []
    for (task, scheme), rounds in group_records(records).items():
        for round_idx, samples in rounds.items():
            scores = [float(s["rougeL"]) for s in samples]
            if corpus is not None:
                total, recovered, _ = pii_recovery(samples, corpus)
            else:
                total, recovered = 0, 0
            reports.append(
                LeakageReport(
                    round=round_idx,
                    task=task,
                    scheme=scheme,
                    scores=tuple(scores),
                    top10=top_fraction_mean(scores, 0.10),
                    top30=top_fraction_mean(scores, 0.30),
                    top50=top_fraction_mean(scores, 0.50),
                    top100=top_fraction_mean(scores, 1.00),
                    exceed095=threshold_exceedance(scores, 0.95),
                    exceed090=threshold_exceedance(scores, 0.90),
                    pii_total=total,
                    pii_recovered=recovered,
                )
            )
    return reports


def write_report_csv(reports, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for report in reports:
            writer.writerow(report.row())


def read_report_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(REPORT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ReportError(f"{path}: missing report columns {sorted(missing)}")
        for row in reader:
            row["round"] = int(row["round"])
            for column in ("top10", "top30", "top50", "top100", "exceed095", "exceed090"):
                row[column] = float(row[column])
            row["pii_total"] = int(row["pii_total"])
            row["pii_recovered"] = int(row["pii_recovered"])
            rows.append(row)
    return rows


def write_quantile_csv(scores, path, fractions=DEFAULT_QUANTILE_GRID) -> None:
    curve = quantile_curve(list(scores), list(fractions))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("fraction", "score"))
        for fraction, score in curve:
            writer.writerow((repr(fraction), repr(score)))


def _filter_rows(rows, task, scheme, path):
    if task is not None:
        rows = [r for r in rows if r["task"] == task]
    if scheme is not None:
        rows = [r for r in rows if r["scheme"] == scheme]
    if not rows:
        raise ReportError(f"{path}: no rows left after task/scheme filtering")
    groups = {(r["task"], r["scheme"]) for r in rows}
    if len(groups) > 1:
        raise ReportError(
            f"{path}: rows span multiple attack groups {sorted(groups)}; "
            "use --task/--scheme to pick one"
        )
    return sorted(rows, key=lambda r: r["round"])


def ttest_between_reports(
    path_a, path_b, column: str, task: str | None = None, scheme: str | None = None
) -> TTestResult:
    """Pair the two report CSVs by round index and t-test the chosen column."""
    if column not in REPORT_COLUMNS or column in ("round", "task", "scheme"):
        raise ReportError(f"ttest column must be a numeric report column, got {column!r}")
    rows_a = _filter_rows(read_report_csv(path_a), task, scheme, path_a)
    rows_b = _filter_rows(read_report_csv(path_b), task, scheme, path_b)
    rounds_a = [r["round"] for r in rows_a]
    rounds_b = [r["round"] for r in rows_b]
    if rounds_a != rounds_b:
        offending = sorted(set(rounds_a) ^ set(rounds_b))
        raise ReportError(f"reports are not round-aligned; offending rounds: {offending}")
    try:
        return paired_t_test(
            [float(r[column]) for r in rows_a], [float(r[column]) for r in rows_b]
        )
    except MetricError as exc:
        raise ReportError(str(exc)) from exc
