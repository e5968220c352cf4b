"""Feasibility tables joined with measured attack footprints.

A feasibility row says how large an output area could still receive an
arbitrary class map given a region bound; an attack metrics file says how
many output pixels a real patch flipped. Joining the two on
(arch, patch_h, patch_w) yields the verdict: ``exceeds`` when the measured
footprint is strictly larger than the feasible area, ``within`` otherwise.
"""
from __future__ import annotations

import csv
import glob
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

from .archspec import NetworkSpec
from .regions import (
    CITYSCAPES_CLASSES, REFERENCE_LOG10_BOUNDS, FeasibilityQuery, conv_region_bound, feasible_region,
)

FEASIBILITY_COLUMNS = ("arch", "patch_h", "patch_w", "mode", "log10_bound", "classes", "max_area", "max_side")
REPORT_COLUMNS = FEASIBILITY_COLUMNS + ("measured_changed_pixels", "verdict")
METRICS_KEYS = ("arch", "patch_h", "patch_w", "changed_pixels")


class ReportSchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeasibilityRow:
    arch: str
    patch_h: int
    patch_w: int
    mode: str
    log10_bound: float
    classes: int
    max_area: int
    max_side: int

    @property
    def patch_area(self) -> int:
        return self.patch_h * self.patch_w


@dataclass(frozen=True)
class ReportRow(FeasibilityRow):
    measured_changed_pixels: Optional[int] = None

    @property
    def verdict(self) -> Optional[str]:
        if self.measured_changed_pixels is None:
            return None
        return "exceeds" if self.measured_changed_pixels > self.max_area else "within"


@dataclass(frozen=True)
class FeasibilityReport:
    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in self.rows:
            writer.writerow(_cells(r) + [
                "" if r.measured_changed_pixels is None else r.measured_changed_pixels,
                r.verdict or "",
            ])
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FeasibilityReport":
        rows = []
        for rec in _records(text, REPORT_COLUMNS):
            base = _feasibility_from_record(rec)
            measured = int(rec["measured_changed_pixels"]) if rec["measured_changed_pixels"] else None
            row = ReportRow(**asdict(base), measured_changed_pixels=measured)
            if (row.verdict or "") != rec["verdict"]:
                raise ReportSchemaError(f"verdict {rec['verdict']!r} contradicts the measured value in {rec}")
            rows.append(row)
        return cls(tuple(rows))


def _cells(r: FeasibilityRow) -> list:
    return [r.arch, r.patch_h, r.patch_w, r.mode, repr(float(r.log10_bound)), r.classes, r.max_area, r.max_side]


def _records(text: str, columns) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != tuple(columns):
        raise ReportSchemaError(f"expected columns {list(columns)}, got {reader.fieldnames}")
    return list(reader)


def _feasibility_from_record(rec: dict) -> FeasibilityRow:
    try:
        return FeasibilityRow(
            rec["arch"], int(rec["patch_h"]), int(rec["patch_w"]), rec["mode"], float(rec["log10_bound"]),
            int(rec["classes"]), int(rec["max_area"]), int(rec["max_side"]),
        )
    except (TypeError, ValueError) as exc:
        raise ReportSchemaError(f"bad feasibility row {rec}: {exc}") from None


# -- producing feasibility rows --------------------------------------------------


def feasibility_row(arch: str, net: NetworkSpec, patch_h: int, patch_w: int, classes: int,
                    mode: str = "as_printed") -> FeasibilityRow:
    """Bound the regions reachable from a patch and convert it into a feasible area.

    The network is walked from a (c0, patch_h, patch_w) input, so every layer
    sees only the part of the feature maps the patch can reach.
    """
    bound = conv_region_bound(net, (net.input_shape[0], patch_h, patch_w), mode)
    res = feasible_region(FeasibilityQuery(classes, bound=bound))
    return FeasibilityRow(arch, patch_h, patch_w, mode, bound.log10, classes, res.max_area, res.max_side)


def reference_rows(classes: int = CITYSCAPES_CLASSES) -> list[FeasibilityRow]:
    """Rows derived from the published Cityscapes-scale bound magnitudes."""
    rows = []
    for arch, by_side in REFERENCE_LOG10_BOUNDS.items():
        for side, log10 in by_side.items():
            res = feasible_region(FeasibilityQuery.from_log10(log10, classes))
            rows.append(FeasibilityRow(arch, side, side, "reference", float(log10), classes,
                                       res.max_area, res.max_side))
    return rows


def feasibility_csv(rows: Iterable[FeasibilityRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(FEASIBILITY_COLUMNS)
    for r in rows:
        writer.writerow(_cells(r))
    return out.getvalue()


def parse_feasibility_csv(text: str) -> list[FeasibilityRow]:
    return [_feasibility_from_record(rec) for rec in _records(text, FEASIBILITY_COLUMNS)]


# -- joining -----------------------------------------------------------------------


def parse_metrics(obj: dict) -> tuple[tuple[str, int, int], int]:
    missing = [k for k in METRICS_KEYS if k not in obj]
    if missing:
        raise ReportSchemaError(f"metrics missing keys {missing}")
    try:
        return (str(obj["arch"]), int(obj["patch_h"]), int(obj["patch_w"])), int(obj["changed_pixels"])
    except (TypeError, ValueError) as exc:
        raise ReportSchemaError(f"bad metrics values: {exc}") from None


def build_report(feasibility: Iterable[FeasibilityRow], metrics: Iterable[dict] = ()) -> FeasibilityReport:
    """Join feasibility rows with attack metrics.

    Several metrics for the same (arch, patch size) keep the largest footprint,
    since one attack exceeding the area is enough to contradict generality.
    """
    measured: dict[tuple[str, int, int], int] = {}
    for m in metrics:
        key, changed = parse_metrics(m)
        measured[key] = max(measured.get(key, changed), changed)
    rows = [
        ReportRow(**asdict(r), measured_changed_pixels=measured.get((r.arch, r.patch_h, r.patch_w)))
        for r in feasibility
    ]
    rows.sort(key=lambda r: (r.arch, r.patch_area, r.patch_h, r.mode))
    return FeasibilityReport(tuple(rows))


def _expand(patterns) -> list[Path]:
    paths: list[Path] = []
    for p in patterns:
        hits = sorted(glob.glob(str(p)))
        if not hits:
            raise FileNotFoundError(f"no files match {p}")
        paths += [Path(h) for h in hits]
    return paths


def build_report_from_files(feasibility_globs, metrics_globs=()) -> FeasibilityReport:
    rows: list[FeasibilityRow] = []
    for path in _expand(feasibility_globs):
        rows += parse_feasibility_csv(path.read_text())
    metrics = []
    for path in _expand(metrics_globs):
        try:
            metrics.append(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ReportSchemaError(f"{path}: {exc}") from None
    return build_report(rows, metrics)

