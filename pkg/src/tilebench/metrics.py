"""AUROC, AUPRC, percentile bootstrap intervals, curve export and timing."""

from __future__ import annotations

import csv
import enum
import io
import math
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, InvariantViolation, NoPositives, NumericError, SingleClass


class Metric(str, enum.Enum):
    AUROC = "AUROC"
    AUPRC = "AUPRC"


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InvariantViolation(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise InvariantViolation("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise NumericError("scores must be finite")
    return s, y.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUC with half credit for ties."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _ladder(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) after each distinct score, scanning from the top."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    return tp[last_of_group], fp[last_of_group]


def auprc(scores, labels) -> float:
    """Average precision: sum of precision times recall increment, ties at one cutoff."""
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUPRC needs at least one positive")
    tp, fp = _ladder(s, y)
    prev = np.r_[0, tp[:-1]]
    # exact rational sum, rounded once
    total = sum((Fraction((t - p) * t, t + f) for t, p, f in zip(tp.tolist(), prev.tolist(), fp.tolist())
                 if t != p), Fraction(0))
    return float(total / n_pos)


METRICS: dict[Metric, Callable] = {Metric.AUROC: auroc, Metric.AUPRC: auprc}


@dataclass(frozen=True)
class MetricReport:
    metric: Metric
    point_estimate: float
    ci_low: float
    ci_high: float
    n_bootstrap: int
    seed: int
    n_patients: int
    level: float = 0.95
    n_rejected: int = 0

    @property
    def contains_point(self) -> bool:
        return self.ci_low <= self.point_estimate <= self.ci_high

    def to_dict(self) -> dict:
        d = asdict(self)
        d["metric"] = self.metric.value
        d["contains_point"] = self.contains_point
        return d


def bootstrap_replicates(scores, labels, metric: Metric | str = Metric.AUROC, n: int = 1000,
                         seed: int = 0) -> tuple[np.ndarray, int]:
    """Metric over ``n`` resamples with replacement; single-class draws are redrawn.

    Replicate i draws from its own stream ``SeedSequence(seed).spawn(n)[i]``,
    so the result does not depend on evaluation order.  Returns
    (replicates, number of rejected draws).
    """
    s, y = _arrays(scores, labels)
    if y.min() == y.max():
        raise SingleClass("bootstrap needs both classes")
    fn = METRICS[Metric(metric)]
    reps = np.empty(n)
    rejected = 0
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n)):
        rng = np.random.default_rng(child)
        while True:
            idx = rng.integers(0, s.size, size=s.size)
            yy = y[idx]
            if yy.min() != yy.max():
                break
            rejected += 1
        reps[i] = fn(s[idx], yy)
    return reps, rejected


def bootstrap_ci(scores, labels, metric: Metric | str = Metric.AUROC, n: int = 1000,
                 level: float = 0.95, seed: int = 0) -> MetricReport:
    if not 0 < level < 1:
        raise ConfigError("level must be in (0, 1)")
    metric = Metric(metric)
    s, y = _arrays(scores, labels)
    point = METRICS[metric](s, y)
    reps, rejected = bootstrap_replicates(s, y, metric, n, seed)
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(reps, [tail, 100.0 - tail])
    return MetricReport(metric, float(point), float(lo), float(hi), n, seed, int(s.size), level, rejected)


# --- curves -----------------------------------------------------------------------

def roc_points(scores, labels) -> list[tuple[float, float]]:
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("ROC needs both classes")
    tp, fp = _ladder(s, y)
    return [(0.0, 0.0)] + [(float(f) / n_neg, float(t) / n_pos) for t, f in zip(tp, fp)]


def pr_points(scores, labels) -> list[tuple[float, float]]:
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("PR curve needs at least one positive")
    tp, fp = _ladder(s, y)
    return [(float(t) / n_pos, float(t) / float(t + f)) for t, f in zip(tp, fp)]


def curve_export(scores, labels) -> tuple[list[tuple[float, float]], list[tuple[float, float]]]:
    """(ROC points as (fpr, tpr), PR points as (recall, precision)), from the top score down."""
    s, y = _arrays(scores, labels)
    if y.min() == y.max():
        raise SingleClass("curves need both classes")
    return roc_points(s, y), pr_points(s, y)


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    return math.fsum((x1 - x0) * (y0 + y1) / 2.0 for (x0, y0), (x1, y1) in zip(points, points[1:]))


def format_curve(points: Sequence[tuple[float, float]], header: tuple[str, str]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for a, b in points:
        w.writerow([repr(a), repr(b)])
    return out.getvalue()


# --- timing -----------------------------------------------------------------------

@dataclass(frozen=True)
class TimingReport:
    epoch_train_seconds: float
    full_prediction_seconds: float
    spec: object
    parameter_count: int
    n_tiles: int = 0

    def to_dict(self) -> dict:
        return {"epoch_train_seconds": self.epoch_train_seconds,
                "full_prediction_seconds": self.full_prediction_seconds,
                "spec": self.spec.to_dict(), "parameter_count": self.parameter_count,
                "n_tiles": self.n_tiles}


def timing_harness(spec, dataset, cfg=None, reference_count: bool = True,
                   train_epoch: bool = True) -> TimingReport:
    """Wall-clock of one training epoch and of scoring every tile in ``dataset``.

    ``parameter_count`` is the reference-scale count for the spec's family
    when ``reference_count`` is set (the size axis of size-vs-time plots),
    else the count of the toy spec being timed.
    """
    from .nn import build_model, count_parameters, reference_spec
    from .train import TrainConfig, predict_tiles, run_epoch

    cfg = cfg or TrainConfig()
    model = build_model(spec, seed=cfg.seed)
    epoch_seconds = 0.0
    if train_epoch:
        t0 = time.perf_counter()
        run_epoch(model, dataset, cfg)
        epoch_seconds = time.perf_counter() - t0
    t0 = time.perf_counter()
    predict_tiles(model, dataset, cfg.batch_size)
    predict_seconds = time.perf_counter() - t0
    count = count_parameters(reference_spec(spec.family) if reference_count else spec)
    return TimingReport(epoch_seconds, predict_seconds, spec, count, len(dataset))
