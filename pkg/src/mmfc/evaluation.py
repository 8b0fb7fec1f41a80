"""Rate-accuracy curves, Bjontegaard delta rate, reports and timing."""

from __future__ import annotations

import csv
import io
import platform
import statistics
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

KB = 1000  # bytes per kilobyte in reports

# published full-scale BD-rates against approach 2 (case 1), reported alongside ours
REFERENCE_BD_RATE = {"a1": -67.7, "a3": -50.4, "a2c2": -47.6, "a2c1": 0.0}
CURVE_LABELS = {"a1": "Approach 1", "a2c1": "Approach 2 (case 1)", "a2c2": "Approach 2 (case 2)", "a3": "Approach 3"}


class BDRateError(ValueError):
    pass


@dataclass(frozen=True)
class RDPoint:
    rate: float  # bits per sample, all streams of the sample
    quality: float  # mAP %
    lam: float
    topology: str
    case: int | None = None

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if not 0.0 <= self.quality <= 100.0:
            raise ValueError(f"quality must lie in [0, 100], got {self.quality}")


@dataclass
class RDCurve:
    points: list[RDPoint]
    label: str

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.rate)
        rates = [p.rate for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"curve {self.label!r}: rates must be strictly increasing, got {rates}")
        if len(self.points) < 4:
            warnings.warn(f"curve {self.label!r} has {len(self.points)} points; BD-rate needs 4", stacklevel=2)

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points])

    @classmethod
    def from_arrays(cls, rates, qualities, label="curve", lams=None, topology="", case=None) -> "RDCurve":
        lams = lams if lams is not None else [float("nan")] * len(rates)
        return cls([RDPoint(float(r), float(q), float(l), topology, case)
                    for r, q, l in zip(rates, qualities, lams)], label)

    def to_csv(self) -> str:
        return points_csv(self.points)


def points_csv(points: Sequence[RDPoint]) -> str:
    """One point per row; rate in bits and in kilobytes (1 KB = 1000 bytes)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["topology", "case", "lambda", "rate_bits", "rate_kbytes", "map_percent"])
    for p in points:
        w.writerow([p.topology, "" if p.case is None else p.case, repr(p.lam), repr(p.rate),
                    repr(p.rate / 8 / KB), repr(p.quality)])
    return buf.getvalue()


def _fit(curve_q: np.ndarray, curve_r: np.ndarray, centre: float, spread: float) -> np.poly1d:
    t = (curve_q - centre) / spread
    return np.poly1d(np.polyfit(t, np.log10(curve_r), 3))


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference (%) of ``test`` against ``anchor`` at equal quality.

    log10(rate) is fitted as a cubic in quality for each curve, the fits are
    integrated in closed form over the common quality interval and the mean
    log difference is mapped back to a percentage.
    """
    qa, ra = anchor.qualities, anchor.rates
    qt, rt = test.qualities, test.rates
    for c, q in ((anchor, qa), (test, qt)):
        if len(q) < 4:
            raise BDRateError(f"curve {c.label!r} needs at least 4 points, has {len(q)}")
        if np.any(np.diff(q) <= 0):
            raise BDRateError(f"curve {c.label!r}: quality is not strictly increasing with rate: {q.tolist()}")
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise BDRateError(f"quality ranges of {anchor.label!r} and {test.label!r} do not overlap")
    centre = 0.5 * (lo + hi)
    spread = max(np.ptp(np.concatenate([qa, qt])), 1e-12)
    pa = _fit(qa, ra, centre, spread).integ()
    pt = _fit(qt, rt, centre, spread).integ()
    a, b = (lo - centre) / spread, (hi - centre) / spread
    mean_diff = ((pt(b) - pt(a)) - (pa(b) - pa(a))) / (b - a)
    return float((10.0 ** mean_diff - 1.0) * 100.0)


def compare_topologies(curves: dict[str, RDCurve], anchor: str = "a2c1", strict: bool = True) -> dict:
    """BD-rate of every curve against the anchor, with the full-scale reference values.

    With ``strict`` a failing BD-rate raises; otherwise the row records the error.
    """
    if anchor not in curves:
        raise BDRateError(f"anchor curve {anchor!r} is missing")
    rows = []
    for key in ("a1", "a3", "a2c2", "a2c1"):
        if key not in curves:
            rows.append({"topology": key, "label": CURVE_LABELS[key], "bd_rate": None,
                         "reference_bd_rate": REFERENCE_BD_RATE[key], "status": "absent"})
            continue
        status = "ok"
        try:
            value = 0.0 if key == anchor else bd_rate(curves[anchor], curves[key])
        except BDRateError as e:
            if strict:
                raise
            value, status = None, f"error: {e}"
        rows.append({"topology": key, "label": CURVE_LABELS[key], "bd_rate": value,
                     "reference_bd_rate": REFERENCE_BD_RATE[key], "status": status})
    present = [r for r in rows if r["bd_rate"] is not None]
    ordering = [r["topology"] for r in sorted(present, key=lambda r: r["bd_rate"])]
    return {"anchor": anchor, "rows": rows, "ordering": ordering,
            "reference_ordering": ["a1", "a3", "a2c2", "a2c1"]}


def format_table(report: dict) -> str:
    lines = [f"BD-rate (mAP) relative to {CURVE_LABELS[report['anchor']]}",
             f"{'approach':<22}{'desk-scale':>12}{'reference (full scale)':>24}"]
    for r in report["rows"]:
        val = f"{r['bd_rate']:+.1f}%" if r["bd_rate"] is not None else r["status"].split(":")[0]
        lines.append(f"{r['label']:<22}{val:>12}{r['reference_bd_rate']:>+23.1f}%")
    lines.append("desk-scale ordering: " + " < ".join(report["ordering"]))
    lines.append("reference ordering:  " + " < ".join(report["reference_ordering"]))
    return "\n".join(lines)


# --------------------------------------------------------------------------


@dataclass
class TimingReport:
    topology: str
    use_case: str
    mean_seconds: float
    std_seconds: float
    samples: int
    hardware: str = field(default_factory=lambda: f"{platform.processor() or platform.machine()} / {platform.system()}")

    def __post_init__(self):
        if self.mean_seconds < 0 or self.std_seconds < 0:
            raise ValueError("times must be non-negative")


def summarize_times(topology: str, use_case: str, times: Sequence[float]) -> TimingReport:
    if not times:
        return TimingReport(topology, use_case, 0.0, 0.0, 0)
    std = statistics.pstdev(times) if len(times) > 1 else 0.0
    return TimingReport(topology, use_case, float(np.mean(times)), float(std), len(times))
