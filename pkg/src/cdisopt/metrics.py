"""Rank-based delineation AUC and binary classification metrics."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .cdis import CdisConfig, calibrate, cdis_signals, compute_cdis, mix_signals
from .volume import Mask3D, Volume3D


class UndefinedAucError(ValueError):
    pass


class PatientError(ValueError):
    """A cohort member failed evaluation; ``patient_id`` names it."""

    def __init__(self, patient_id, message):
        super().__init__(f"patient {patient_id}: {message}")
        self.patient_id = patient_id


def midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the average of their positions."""
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    # Start index of each run of equal values.
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC with midrank ties.

    Equals the probability that a random positive outscores a random negative,
    counting ties as one half.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    n_pos, n_neg = pos.size, neg.size
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(f"AUC needs both classes (got {n_pos} positive, {n_neg} negative)")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ValueError("scores must be finite")
    ranks = midranks(np.concatenate([pos, neg]))
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(pos_scores, neg_scores) -> list[tuple[float, float]]:
    """(FPR, TPR) pairs sweeping the threshold from +inf downwards."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pts = [(0.0, 0.0)]
    for t in thresholds:
        pts.append((float(np.mean(neg >= t)), float(np.mean(pos >= t))))
    return pts


def voxel_auc(
    score_vol: Volume3D,
    tumor: Mask3D,
    roi: Mask3D | None = None,
    max_negatives: int | None = None,
    seed: int = 0,
) -> float:
    """Delineation AUC of tumour voxels against non-tumour ROI voxels.

    Parameters
    ----------
    score_vol : Volume3D
        Voxel scores (e.g. a CDIs volume).
    tumor : Mask3D
        Positive voxels.
    roi : Mask3D, optional
        Region the evaluation is restricted to; the whole volume if omitted.
    max_negatives : int, optional
        If set, negatives are subsampled (seeded, without replacement) down to
        this many voxels. Off by default.
    seed : int
        Seed for the negative subsample.
    """
    shape = score_vol.array.shape
    if tumor.array.shape != shape or (roi is not None and roi.array.shape != shape):
        raise ValueError("score volume and masks must share dims")
    t = tumor.boolean
    r = np.ones(shape, dtype=bool) if roi is None else roi.boolean
    scores = score_vol.array
    pos = scores[t & r]
    neg = scores[~t & r]
    if max_negatives is not None and neg.size > max_negatives:
        rng = np.random.default_rng(seed)
        neg = neg[np.sort(rng.choice(neg.size, size=max_negatives, replace=False))]
    return auc(pos, neg)


def _patient_fields(p):
    if isinstance(p, tuple):
        series, tumor, roi = p
        return None, series, tumor, roi
    return p.id, p.series, p.tumor, p.roi


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def cohort_mean_auc(patients: Sequence, config: CdisConfig, jobs: int = 1) -> float:
    """Unweighted mean over patients of the CDIs delineation AUC.

    ``patients`` holds either ``Patient`` records or ``(series, tumor, roi)``
    tuples (``roi`` may be None).
    """
    if len(patients) == 0:
        raise ValueError("cohort is empty")

    def one(item):
        i, p = item
        pid, series, tumor, roi = _patient_fields(p)
        try:
            return voxel_auc(compute_cdis(series, config), tumor, roi)
        except Exception as e:
            raise PatientError(pid if pid is not None else i, e) from e

    values = _map(one, list(enumerate(patients)), jobs)
    # fsum is exact, so the mean does not depend on evaluation order.
    return math.fsum(values) / len(values)


class PreparedCohort:
    """Caches each patient's native and synthetic signals for a fixed b-value layout.

    Only the exponents change between optimizer trials, so fitting and
    synthesis are done once. ``mean_auc`` gives the same value as
    ``cohort_mean_auc`` for the same exponents.
    """

    def __init__(self, patients: Sequence, config: CdisConfig, jobs: int = 1):
        if len(patients) == 0:
            raise ValueError("cohort is empty")
        self.config = config
        self.jobs = jobs
        self._entries = []
        for i, p in enumerate(patients):
            pid, series, tumor, roi = _patient_fields(p)
            pid = pid if pid is not None else i
            try:
                signals = cdis_signals(series, config)
            except Exception as e:
                raise PatientError(pid, e) from e
            self._entries.append((pid, signals, tumor, roi))

    def __len__(self):
        return len(self._entries)

    def patient_aucs(self, exponents) -> list[float]:
        def one(entry):
            pid, signals, tumor, roi = entry
            try:
                return voxel_auc(calibrate(mix_signals(signals, exponents), self.config.calibration), tumor, roi)
            except Exception as e:
                raise PatientError(pid, e) from e

        return _map(one, self._entries, self.jobs)

    def mean_auc(self, exponents) -> float:
        values = self.patient_aucs(exponents)
        return math.fsum(values) / len(values)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
        if self.total < 1:
            raise ValueError("confusion counts must cover at least one sample")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """Rates in [0, 1]; ``None`` where the denominator is zero."""

    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    f1: float | None

    def as_percent_rows(self) -> list[tuple[str, str]]:
        rows = []
        for name in ("accuracy", "sensitivity", "specificity", "f1"):
            v = getattr(self, name)
            label = "F1" if name == "f1" else name.capitalize()
            rows.append((label, "N/A" if v is None else f"{100 * v:.2f}%"))
        return rows

    def format_table(self) -> str:
        rows = self.as_percent_rows()
        width = max(len(r[0]) for r in rows)
        lines = [f"{'Metric':<{width}}  Value"]
        lines += [f"{name:<{width}}  {value}" for name, value in rows]
        return "\n".join(lines)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def classification_metrics(c: ConfusionCounts) -> MetricsReport:
    return MetricsReport(
        accuracy=_ratio(c.tp + c.tn, c.total),
        sensitivity=_ratio(c.tp, c.tp + c.fn),
        specificity=_ratio(c.tn, c.tn + c.fp),
        f1=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
    )


def confusion_from_labels(predicted: Iterable[int], actual: Iterable[int]) -> ConfusionCounts:
    tp = fp = tn = fn = 0
    for p, a in zip(predicted, actual, strict=True):
        if p not in (0, 1) or a not in (0, 1):
            raise ValueError(f"labels must be 0 or 1, got predicted={p!r}, actual={a!r}")
        if p == 1 and a == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif a == 1:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def loocv_aggregate(folds: Sequence[tuple[int, int]]) -> MetricsReport:
    """Pool single-sample LOOCV folds into one confusion matrix and score it.

    Each fold is ``(predicted_label, true_label)``. Per-fold metrics are
    degenerate with one held-out sample, so outcomes are pooled instead of
    averaged.
    """
    if len(folds) == 0:
        raise ValueError("no folds to aggregate")
    return classification_metrics(confusion_from_labels([f[0] for f in folds], [f[1] for f in folds]))


class PredictionFileError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


PREDICTION_HEADER = ["patient_id", "predicted", "actual"]


def read_predictions(path) -> list[tuple[str, int, int]]:
    """Parse a ``patient_id,predicted,actual`` CSV with 0/1 labels."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise PredictionFileError(1, "file is empty")
        if [h.strip() for h in header] != PREDICTION_HEADER:
            raise PredictionFileError(1, f"expected header {','.join(PREDICTION_HEADER)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise PredictionFileError(line, f"expected 3 fields, got {len(row)}")
            pid, pred, act = (c.strip() for c in row)
            if pred not in ("0", "1") or act not in ("0", "1"):
                raise PredictionFileError(line, f"labels must be 0 or 1, got {pred!r}, {act!r}")
            rows.append((pid, int(pred), int(act)))
    if not rows:
        raise PredictionFileError(2, "no prediction rows")
    return rows


def write_predictions(path, rows: Iterable[tuple[str, int, int]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        w.writerows(rows)
