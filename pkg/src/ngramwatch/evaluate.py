"""Scoring of detector output against ground truth, and sweep tables.

An alert is a true positive when its origin falls inside an attack span
(onset through end, extended by a grace horizon so window-aligned
detectors can answer for an attack that ends mid-window); the first true
positive per attack defines the detection delay, measured in events.
Every other alert is a false positive.  Sweeps run a detector over a
parameter grid against a prepared scenario and emit one CSV row per cell.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from .detectors import Verdict, WindowSample
from .trace import AttackTruth


@dataclass
class RunMetrics:
    """Scored outcome of one detector run against one ground truth."""

    false_positives: int
    detected: list[bool]
    delays: list[int | None]          # events from onset to first alert, per attack
    windows_evaluated: int
    true_positives: int = 0

    @property
    def attacks_total(self) -> int:
        return len(self.detected)

    @property
    def attacks_detected(self) -> int:
        return sum(self.detected)

    @property
    def all_detected(self) -> bool:
        return all(self.detected) if self.detected else True


def score_run(verdicts: Sequence[Verdict], attacks: Sequence[AttackTruth],
              grace: int = 0) -> RunMetrics:
    """Classify every alert in a verdict stream against attack spans.

    ``attacks`` spans must not overlap; ``grace`` extends each span's end
    (open-ended spans need no grace).  Verdict origins must be monotone
    non-decreasing.  Alerts inside a span are true positives of that
    attack, everything else is a false positive; an attack with no alert
    is a miss.
    """
    spans = sorted(attacks, key=lambda a: a.onset)
    for left, right in zip(spans, spans[1:]):
        left_end = float("inf") if left.end is None else left.end
        if left_end > right.onset:
            raise ValueError(f"attack spans overlap: {left} and {right}")
    # When a grace region runs into the next span, alerts there belong to
    # the later attack (assignment below picks the latest matching span).
    last_origin = None
    for v in verdicts:
        if last_origin is not None and v.origin < last_origin:
            raise ValueError("verdict origins must be monotone")
        last_origin = v.origin

    detected = [False] * len(spans)
    delays: list[int | None] = [None] * len(spans)
    fp = 0
    tp = 0
    for v in verdicts:
        if v.normal:
            continue
        hit = None
        for i, a in enumerate(spans):
            end = float("inf") if a.end is None else a.end + grace
            if a.onset <= v.origin < end:
                hit = i
        if hit is None:
            fp += 1
            continue
        tp += 1
        if not detected[hit]:
            detected[hit] = True
            delays[hit] = v.origin - spans[hit].onset
    return RunMetrics(
        false_positives=fp,
        detected=detected,
        delays=delays,
        windows_evaluated=len(verdicts),
        true_positives=tp,
    )


# -- sweep tables ---------------------------------------------------------------

CSV_FIELDS = ["scenario", "detector", "W", "alpha", "beta", "m",
              "training_level", "fp", "attacks", "detected", "delay_events",
              "seed"]


@dataclass
class SweepRow:
    """One sweep cell: the parameters used and the resulting metrics."""

    scenario: str
    detector: str
    w: int
    alpha: float | None
    beta: float | None
    m: float
    training_level: float | None
    seed: int
    metrics: RunMetrics

    def to_record(self) -> dict:
        delays = ";".join(
            "" if d is None else str(d) for d in self.metrics.delays)
        return {
            "scenario": self.scenario,
            "detector": self.detector,
            "W": self.w,
            "alpha": "" if self.alpha is None else repr(self.alpha),
            "beta": "" if self.beta is None else repr(self.beta),
            "m": repr(self.m),
            "training_level": ("" if self.training_level is None
                               else repr(self.training_level)),
            "fp": self.metrics.false_positives,
            "attacks": self.metrics.attacks_total,
            "detected": self.metrics.attacks_detected,
            "delay_events": delays,
            "seed": self.seed,
        }


class ScenarioRunner(Protocol):
    def run_cell(self, kind: str, **params) -> SweepRow: ...


def sweep(kind: str, grid: Sequence[dict], scenario: ScenarioRunner) -> list[SweepRow]:
    """Run one detector over a parameter grid against a prepared scenario.

    Rows come back in grid order; each cell run is deterministic.
    """
    if not grid:
        raise ValueError("parameter grid is empty")
    return [scenario.run_cell(kind, **params) for params in grid]


def write_metrics_csv(rows: Iterable[SweepRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_record())


def read_metrics_csv(path) -> list[dict]:
    """Parse a metrics CSV back into typed records (loss-free round trip)."""
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            delays = [
                None if d == "" else int(d)
                for d in rec["delay_events"].split(";")
            ] if rec["delay_events"] != "" else []
            out.append({
                "scenario": rec["scenario"],
                "detector": rec["detector"],
                "W": int(rec["W"]),
                "alpha": None if rec["alpha"] == "" else float(rec["alpha"]),
                "beta": None if rec["beta"] == "" else float(rec["beta"]),
                "m": float(rec["m"]),
                "training_level": (None if rec["training_level"] == ""
                                   else float(rec["training_level"])),
                "fp": int(rec["fp"]),
                "attacks": int(rec["attacks"]),
                "detected": int(rec["detected"]),
                "delay_events": delays,
                "seed": int(rec["seed"]),
            })
    return out


# -- per-window time series for external plotting --------------------------------

SERIES_FIELDS = ["t", "x", "threshold", "verdict"]


def window_series(samples: Sequence[WindowSample], verdicts: Sequence[Verdict],
                  score_scale: float = 1.0) -> list[dict]:
    """Pair window samples with verdicts as plottable rows.

    ``threshold`` is reconstructed in match-count units from the verdict
    score (score_scale converts rate-scaled scores, e.g. W for the LSTM
    filter); the verdict flips exactly where X crosses it.
    """
    rows = []
    for s, v in zip(samples, verdicts):
        rows.append({
            "t": s.t,
            "x": s.x,
            "threshold": s.x + v.score * score_scale,
            "verdict": "anomaly" if not v.normal else "normal",
        })
    return rows


def write_window_series(rows: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SERIES_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
