"""Singular-vector / singular-value attribution of image degradations.

For a clean/degraded pair we swap halves of the two SVDs and see which swap
removes the corruption.  If the clean image comes back when the degraded
singular vectors are replaced, the degradation lives in the vectors
(rain, noise, blur); if replacing the singular values is enough, it lives in
the values (haze, low light).
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lindecomp import EPS, recompose, relative_error, svd

log = logging.getLogger(__name__)

DEGENERATE_GAP = 1e-6
TIE_TOL = 1e-9
QUARTILE_KEYS = ("min", "q1", "median", "q3", "max")


class Dominance(str, Enum):
    VECTOR = "VectorDominated"
    VALUE = "ValueDominated"


class AmbiguousError(ValueError):
    """Both swaps reconstruct the clean image equally well."""


@dataclass
class DegradationStats:
    err_vec_swap: float
    err_val_swap: float
    sv_quartiles_clean: dict[str, float]
    sv_quartiles_degraded: dict[str, float]
    order_diff: np.ndarray
    order_flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def margin(self) -> float:
        return self.err_val_swap - self.err_vec_swap

    @property
    def median_sv_gap(self) -> float:
        return abs(self.sv_quartiles_degraded["median"] - self.sv_quartiles_clean["median"])

    def to_dict(self) -> dict:
        diff = np.where(self.order_flagged, np.nan, self.order_diff)
        return {
            "err_vec_swap": self.err_vec_swap,
            "err_val_swap": self.err_val_swap,
            "margin": self.margin,
            "sv_quartiles_clean": self.sv_quartiles_clean,
            "sv_quartiles_degraded": self.sv_quartiles_degraded,
            "order_diff": [None if np.isnan(d) else float(d) for d in diff],
        }


@dataclass
class DominanceLabel:
    label: Dominance
    margin: float


def _quartiles(s: np.ndarray) -> np.ndarray:
    return np.percentile(s, [0, 25, 50, 75, 100])


def _channel_stats(clean: np.ndarray, degraded: np.ndarray):
    fc = svd(clean)
    fd = svd(degraded)
    e_vec = relative_error(recompose(fc, fd), clean)
    e_val = relative_error(recompose(fd, fc), clean)
    k = len(fc.sigma)
    # ||u_d v_d^T - u_c v_c^T||_F^2 = 2 - 2 (u_d . u_c)(v_d . v_c); sign flips cancel
    cu = np.einsum("ij,ij->j", fd.u[:, :k], fc.u[:, :k])
    cv = np.einsum("ij,ij->j", fd.v[:, :k], fc.v[:, :k])
    diff = np.sqrt(np.clip(2.0 - 2.0 * cu * cv, 0.0, 4.0))
    flagged = _near_degenerate(fc.sigma) | _near_degenerate(fd.sigma)
    return e_vec, e_val, _quartiles(fc.sigma), _quartiles(fd.sigma), diff, flagged


def _near_degenerate(s: np.ndarray) -> np.ndarray:
    """Mark orders whose singular value nearly ties a neighbour's."""
    scale = max(s[0], EPS) if s.size else EPS
    gap = np.abs(np.diff(s)) / scale < DEGENERATE_GAP
    flag = np.zeros(s.shape, bool)
    flag[:-1] |= gap
    flag[1:] |= gap
    return flag


def analyze_pair(clean: np.ndarray, degraded: np.ndarray) -> DegradationStats:
    """Recomposition errors and spectra for one pair, averaged over channels."""
    clean = np.asarray(clean, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    if clean.shape != degraded.shape:
        raise ValueError(f"shape mismatch: clean {clean.shape} vs degraded {degraded.shape}")
    if clean.ndim == 2:
        clean, degraded = clean[:, :, None], degraded[:, :, None]
    per = [_channel_stats(clean[:, :, c], degraded[:, :, c]) for c in range(clean.shape[2])]
    e_vec = float(np.mean([p[0] for p in per]))
    e_val = float(np.mean([p[1] for p in per]))
    qc = np.mean([p[2] for p in per], axis=0)
    qd = np.mean([p[3] for p in per], axis=0)
    diff = np.mean([p[4] for p in per], axis=0)
    flagged = np.any([p[5] for p in per], axis=0)
    return DegradationStats(
        err_vec_swap=e_vec,
        err_val_swap=e_val,
        sv_quartiles_clean=dict(zip(QUARTILE_KEYS, map(float, qc))),
        sv_quartiles_degraded=dict(zip(QUARTILE_KEYS, map(float, qd))),
        order_diff=diff,
        order_flagged=flagged,
    )


def label_stats(stats: DegradationStats) -> DominanceLabel:
    m = stats.margin
    if abs(m) <= TIE_TOL:
        raise AmbiguousError(f"swap errors tie (margin {m:.3g})")
    return DominanceLabel(Dominance.VECTOR if m > 0 else Dominance.VALUE, m)


def classify(clean: np.ndarray, degraded: np.ndarray) -> DominanceLabel:
    return label_stats(analyze_pair(clean, degraded))


@dataclass
class TaskReport:
    task: str
    n: int
    mean: dict[str, float]
    std: dict[str, float]
    labels: list[str]
    majority: str
    agreement: float
    order_diff_mean: list[float | None]
    sv_clean: list[np.ndarray] = field(default_factory=list, repr=False)
    sv_degraded: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "n": self.n, "mean": self.mean, "std": self.std,
            "labels": self.labels, "majority": self.majority, "agreement": self.agreement,
            "order_diff_mean": self.order_diff_mean,
        }


def _scalar_fields(s: DegradationStats) -> dict[str, float]:
    out = {"err_vec_swap": s.err_vec_swap, "err_val_swap": s.err_val_swap, "margin": s.margin}
    for key in QUARTILE_KEYS:
        out[f"sv_clean_{key}"] = s.sv_quartiles_clean[key]
        out[f"sv_degraded_{key}"] = s.sv_quartiles_degraded[key]
    valid = s.order_diff[~s.order_flagged]
    out["order_diff_mean"] = float(valid.mean()) if valid.size else float("nan")
    return out


def corpus_report(pairs: Sequence[tuple[str, np.ndarray, np.ndarray]]) -> dict[str, TaskReport]:
    """Aggregate per-task statistics over ``(task, clean, degraded)`` triples.

    Tasks keep their first-appearance order; pairs within a task are reduced
    in input order.
    """
    if not pairs:
        raise ValueError("corpus is empty")
    grouped: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    for task, clean, degraded in pairs:
        grouped.setdefault(task, []).append((clean, degraded))
    reports = {}
    for task, items in grouped.items():
        stats = [analyze_pair(c, d) for c, d in items]
        reports[task] = aggregate(task, stats, items)
    return reports


def aggregate(task: str, stats: list[DegradationStats],
              items: Iterable[tuple[np.ndarray, np.ndarray]] = ()) -> TaskReport:
    rows = [_scalar_fields(s) for s in stats]
    keys = list(rows[0])
    mean = {k: float(np.nanmean([r[k] for r in rows])) for k in keys}
    std = {k: float(np.nanstd([r[k] for r in rows])) for k in keys}
    labels = []
    for s in stats:
        try:
            labels.append(label_stats(s).label.value)
        except AmbiguousError:
            labels.append("Ambiguous")
    votes = {lab: labels.count(lab) for lab in (Dominance.VECTOR.value, Dominance.VALUE.value)}
    majority = max(votes, key=lambda lab: (votes[lab], lab == Dominance.VECTOR.value))
    diffs = np.array([np.where(s.order_flagged, np.nan, s.order_diff) for s in stats])
    with warnings.catch_warnings():
        # orders flagged in every pair stay NaN
        warnings.simplefilter("ignore", RuntimeWarning)
        od = np.nanmean(diffs, axis=0)
    sv_c, sv_d = [], []
    for clean, degraded in items:
        sv_c.append(_pooled_sigma(clean))
        sv_d.append(_pooled_sigma(degraded))
    return TaskReport(
        task=task, n=len(stats), mean=mean, std=std, labels=labels, majority=majority,
        agreement=votes[majority] / len(stats),
        order_diff_mean=[None if np.isnan(v) else float(v) for v in od],
        sv_clean=sv_c, sv_degraded=sv_d,
    )


def _pooled_sigma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    return np.concatenate([np.linalg.svd(img[:, :, c], compute_uv=False) for c in range(img.shape[2])])


def write_report(reports: dict[str, TaskReport], out_json: str | Path, csv_dir: str | Path | None = None) -> None:
    """stats.json with every task, plus ``<task>.csv`` per task when ``csv_dir`` is given."""
    out_json = Path(out_json)
    payload = {"tasks": [r.to_dict() for r in reports.values()]}
    out_json.write_text(json.dumps(payload, indent=2, allow_nan=False, default=_json_default))
    if csv_dir is None:
        return
    csv_dir = Path(csv_dir)
    csv_dir.mkdir(parents=True, exist_ok=True)
    for r in reports.values():
        with open(csv_dir / f"{r.task}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["stat", "mean", "std"])
            for key in r.mean:
                wr.writerow([key, repr(r.mean[key]), repr(r.std[key])])
            wr.writerow(["majority", r.majority, ""])
            wr.writerow(["agreement", repr(r.agreement), ""])


def _json_default(obj):
    if isinstance(obj, float) and np.isnan(obj):
        return None
    raise TypeError(type(obj))


def write_boxplot_svg(reports: dict[str, TaskReport], path: str | Path) -> None:
    """Side-by-side singular value boxplots, clean vs degraded, per task."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.6 * max(len(reports), 2) + 1, 3.5))
    data, ticks, colors = [], [], []
    for i, r in enumerate(reports.values()):
        data += [np.concatenate(r.sv_clean), np.concatenate(r.sv_degraded)]
        ticks.append(2 * i + 1.5)
        colors += ["#4c72b0", "#dd8452"]
    bp = ax.boxplot(data, positions=np.arange(1, len(data) + 1), showfliers=False, patch_artist=True)
    for patch, color in zip(bp["boxes"], colors):
        patch.set_facecolor(color)
    ax.set_xticks(ticks, list(reports))
    ax.set_ylabel("singular value")
    ax.legend(bp["boxes"][:2], ["clean", "degraded"])
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
