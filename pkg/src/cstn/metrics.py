"""MAPE / RMSE over entries whose ground truth reaches a threshold.

Both metrics in one call share a single filtered entry set, pooled across
all intervals.  An empty set gives a :class:`Metric` with ``entries == 0``
and ``None`` values rather than a misleading zero.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import origin_demand

DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


@dataclass(frozen=True)
class Metric:
    mape: float | None  # fraction, not percent
    rmse: float | None
    entries: int

    @property
    def empty(self) -> bool:
        return self.entries == 0

    def __iter__(self):
        return iter((self.mape, self.rmse))


def _metric(pred: np.ndarray, gt: np.ndarray, threshold: float, mask: np.ndarray | None = None) -> Metric:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    keep = gt >= threshold
    if mask is not None:
        keep &= np.broadcast_to(mask, gt.shape)
    count = int(keep.sum())
    if count == 0:
        return Metric(None, None, 0)
    err = pred[keep] - gt[keep]
    return Metric(float(np.mean(np.abs(err) / gt[keep])), float(np.sqrt(np.mean(err * err))), count)


def od_metrics(preds, gts, threshold: float = 5) -> Metric:
    """Pooled metrics over every OD entry of every interval with ``gt >= threshold``."""
    return _metric(np.asarray(preds), np.asarray(gts), threshold)


def origin_metrics(preds, gts, threshold: float = 5) -> Metric:
    """Same, after collapsing both sides to origin-demand maps."""
    return _metric(origin_demand(preds), origin_demand(gts), threshold)


@dataclass(frozen=True)
class RegionSubset:
    indices: tuple[int, ...]
    provenance: str = "explicit"

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("duplicate region indices")

    def validate(self, N: int) -> None:
        if any(i < 0 or i >= N for i in self.indices):
            raise ValueError(f"region index outside [0, {N})")


def high_demand_subset(train_counts, k: int = 20) -> RegionSubset:
    """Top-``k`` regions by total training origin demand (ties: lower index first)."""
    counts = np.asarray(train_counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("no training data")
    totals = origin_demand(counts.reshape((-1,) + counts.shape[-3:])).sum(axis=0).ravel()
    if k > totals.size:
        raise ValueError(f"k={k} exceeds region count {totals.size}")
    order = np.lexsort((np.arange(totals.size), -totals))
    return RegionSubset(tuple(int(i) for i in order[:k]), f"top-{k} training origin demand")


def subset_metrics(preds, gts, subset: RegionSubset, mode: str = "od", threshold: float = 5) -> Metric:
    """Restrict to pairs with both ends in ``subset`` (od) or to its cells (origin)."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    N, H, W = gts.shape[-3:]
    subset.validate(N)
    member = np.zeros(N, dtype=bool)
    member[list(subset.indices)] = True
    if mode == "od":
        mask = member[:, None, None] & member.reshape(1, H, W)
        return _metric(preds, gts, threshold, mask)
    if mode == "origin":
        return _metric(origin_demand(preds), origin_demand(gts), threshold, member.reshape(H, W))
    raise ValueError(f"mode must be 'od' or 'origin', not {mode!r}")


@dataclass(frozen=True)
class MetricsReport:
    subset: str
    od: Metric
    origin: Metric
    z: int  # intervals evaluated

    @property
    def od_mape(self):
        return self.od.mape

    @property
    def od_rmse(self):
        return self.od.rmse

    @property
    def o_mape(self):
        return self.origin.mape

    @property
    def o_rmse(self):
        return self.origin.rmse

    @property
    def filtered_entry_count(self) -> int:
        return self.od.entries


def report(name: str, preds, gts, threshold: float = 5, subset: RegionSubset | None = None) -> MetricsReport:
    preds, gts = np.asarray(preds), np.asarray(gts)
    if subset is None:
        od, org = od_metrics(preds, gts, threshold), origin_metrics(preds, gts, threshold)
    else:
        od = subset_metrics(preds, gts, subset, "od", threshold)
        org = subset_metrics(preds, gts, subset, "origin", threshold)
    return MetricsReport(name, od, org, len(gts))


def weekday_index(timestamps) -> np.ndarray:
    """Monday = 0 ... Sunday = 6 for ``datetime64`` values."""
    days = np.asarray(timestamps).astype("datetime64[D]").astype(np.int64)
    return (days - 4) % 7


def day_split_report(preds, gts, timestamps, threshold: float = 5) -> dict[str, MetricsReport]:
    """Reports per day of week plus ``weekday`` (Mon-Fri) and ``weekend`` (Sat-Sun)."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    dow = weekday_index(timestamps)
    if len(dow) != len(gts):
        raise ValueError("timestamps not aligned with intervals")
    groups = {name: dow == k for k, name in enumerate(DAY_NAMES)}
    groups["weekday"] = dow < 5
    groups["weekend"] = dow >= 5
    return {name: report(name, preds[sel], gts[sel], threshold) for name, sel in groups.items()}


def evaluate(preds, gts, timestamps, high_demand: RegionSubset | None = None,
             threshold: float = 5) -> list[MetricsReport]:
    """The standard slices: all, high-demand (if given), weekday/weekend, per day."""
    out = [report("all", preds, gts, threshold)]
    if high_demand is not None:
        out.append(report("high-demand", preds, gts, threshold, high_demand))
    days = day_split_report(preds, gts, timestamps, threshold)
    out += [days["weekday"], days["weekend"]] + [days[d] for d in DAY_NAMES]
    return out


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def reports_csv(reports: Sequence[MetricsReport]) -> str:
    """``subset,mode,mape,rmse,entries`` rows; MAPE as a fraction, empty when unevaluable."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "mode", "mape", "rmse", "entries"])
    for r in reports:
        for mode, m in (("od", r.od), ("origin", r.origin)):
            w.writerow([r.subset, mode, _fmt(m.mape), _fmt(m.rmse), m.entries])
    return buf.getvalue()


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(reports_csv(reports))


def format_table(reports: Sequence[MetricsReport], title: str | None = None) -> str:
    def pct(v):
        return "      -" if v is None else f"{100 * v:6.2f}%"

    def num(v):
        return "     -" if v is None else f"{v:6.3f}"

    lines = [title] if title else []
    lines.append(f"{'subset':<12} {'OD-MAPE':>8} {'OD-RMSE':>8} {'O-MAPE':>8} {'O-RMSE':>8} {'entries':>8}")
    for r in reports:
        lines.append(f"{r.subset:<12} {pct(r.od_mape):>8} {num(r.od_rmse):>8} "
                     f"{pct(r.o_mape):>8} {num(r.o_rmse):>8} {r.filtered_entry_count:>8}")
    lines.append("(pooled over filtered entries, ground truth >= threshold)")
    return "\n".join(lines)
