"""Pose error metrics: MPJPE, Procrustes-aligned MPJPE, PCK, and AUC.

Operates on plain numpy arrays of joint coordinates; a single pose is
(N, 3) and a batch is (S, N, 3).  Nothing here is differentiated, so the
implementations favor clarity over tape compatibility.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AlignmentError",
    "mpjpe",
    "procrustes_align",
    "pa_mpjpe",
    "pck",
    "auc",
    "MetricRow",
    "MetricReport",
    "metric_report",
    "DEFAULT_PCK_THRESHOLD",
    "DEFAULT_AUC_GRID",
]

DEFAULT_PCK_THRESHOLD = 150.0
DEFAULT_AUC_GRID = tuple(float(t) for t in range(0, 151, 5))

_DEGENERATE_EPS = 1e-12


class AlignmentError(ValueError):
    """Similarity alignment is undefined for the given poses."""


def _as_pose_batch(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"expected poses of shape (N, 3) or (S, N, 3), got {np.shape(arr)}")
    return a


def _paired(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _as_pose_batch(pred), _as_pose_batch(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match target shape {g.shape}")
    return p, g


def mpjpe(pred, gt) -> float:
    """Mean Euclidean distance per joint, averaged over joints (and samples)."""
    p, g = _paired(pred, gt)
    return float(np.linalg.norm(p - g, axis=-1).mean())


def procrustes_align(pred, gt, allow_reflection: bool = False) -> np.ndarray:
    """Best similarity transform of ``pred`` onto ``gt``: argmin ||gt - (s R pred + t)||.

    Solved in closed form via the SVD of the centered cross-covariance.  By
    default R is constrained to a proper rotation (det +1), enforced by
    flipping the smallest singular direction; ``allow_reflection`` lifts the
    constraint.  Raises ``AlignmentError`` when either pose has no centered
    variance, since scale and rotation are then undefined.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim != 2 or p.shape[-1] != 3 or p.shape != g.shape:
        raise ValueError(f"expected matching (N, 3) poses, got {p.shape} and {g.shape}")
    mu_p = p.mean(axis=0)
    mu_g = g.mean(axis=0)
    pc = p - mu_p
    gc = g - mu_g
    var_p = float((pc * pc).sum())
    var_g = float((gc * gc).sum())
    if var_g <= _DEGENERATE_EPS:
        raise AlignmentError("target pose is degenerate: all joints coincide")
    if var_p <= _DEGENERATE_EPS:
        raise AlignmentError("predicted pose is degenerate: all joints coincide")
    u, s, vt = np.linalg.svd(gc.T @ pc)
    flips = np.ones(3)
    if not allow_reflection and np.linalg.det(u @ vt) < 0:
        flips[-1] = -1.0
    rotation = u @ np.diag(flips) @ vt
    scale = float((s * flips).sum()) / var_p
    if scale <= 0:
        raise AlignmentError("optimal scale is not positive; poses are degenerate")
    translation = mu_g - scale * (rotation @ mu_p)
    return scale * (p @ rotation.T) + translation


def pa_mpjpe(pred, gt, allow_reflection: bool = False) -> float:
    """MPJPE after per-sample Procrustes alignment of pred onto gt."""
    p, g = _paired(pred, gt)
    errors = [
        mpjpe(procrustes_align(p[i], g[i], allow_reflection=allow_reflection), g[i])
        for i in range(p.shape[0])
    ]
    return float(np.mean(errors))


def pck(pred, gt, threshold: float = DEFAULT_PCK_THRESHOLD) -> float:
    """Fraction of joints with error <= threshold (inclusive)."""
    if threshold < 0:
        raise ValueError(f"threshold must be nonnegative, got {threshold}")
    p, g = _paired(pred, gt)
    errors = np.linalg.norm(p - g, axis=-1)
    return float((errors <= threshold).mean())


def auc(pred, gt, thresholds=None) -> float:
    """Mean PCK over an increasing threshold grid (default 0..150 step 5)."""
    grid = DEFAULT_AUC_GRID if thresholds is None else tuple(float(t) for t in thresholds)
    if len(grid) == 0:
        raise ValueError("threshold grid must be nonempty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be strictly increasing")
    return float(np.mean([pck(pred, gt, t) for t in grid]))


@dataclass(frozen=True)
class MetricRow:
    """Aggregated metrics for one action (or 'all')."""

    action: str
    mpjpe: float
    pa_mpjpe: float
    pck: float
    auc: float
    n: int


@dataclass(frozen=True)
class MetricReport:
    """Per-action rows plus an overall row, renderable as CSV or a table."""

    rows: tuple[MetricRow, ...]
    overall: MetricRow

    def to_csv(self) -> str:
        lines = ["action,mpjpe,pa_mpjpe,pck,auc,n"]
        for row in (*self.rows, self.overall):
            lines.append(
                f"{row.action},{row.mpjpe!r},{row.pa_mpjpe!r},{row.pck!r},{row.auc!r},{row.n}"
            )
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        header = ("action", "mpjpe", "pa_mpjpe", "pck", "auc", "n")
        cells = [header]
        for row in (*self.rows, self.overall):
            cells.append(
                (
                    row.action,
                    f"{row.mpjpe:.4f}",
                    f"{row.pa_mpjpe:.4f}",
                    f"{row.pck:.4f}",
                    f"{row.auc:.4f}",
                    str(row.n),
                )
            )
        widths = [max(len(r[c]) for r in cells) for c in range(len(header))]
        lines = []
        for i, row in enumerate(cells):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def metric_report(
    preds,
    gts,
    actions,
    threshold: float = DEFAULT_PCK_THRESHOLD,
    thresholds=None,
) -> MetricReport:
    """Group per-sample poses by action label and aggregate all four metrics."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    gts = [np.asarray(g, dtype=np.float64) for g in gts]
    actions = list(actions)
    if not (len(preds) == len(gts) == len(actions)):
        raise ValueError("preds, gts, and actions must have equal lengths")
    if not preds:
        raise ValueError("metric report needs at least one sample")

    def build(label: str, idx: list[int]) -> MetricRow:
        p = np.stack([preds[i] for i in idx])
        g = np.stack([gts[i] for i in idx])
        return MetricRow(
            action=label,
            mpjpe=mpjpe(p, g),
            pa_mpjpe=pa_mpjpe(p, g),
            pck=pck(p, g, threshold),
            auc=auc(p, g, thresholds),
            n=len(idx),
        )

    by_action: dict[str, list[int]] = {}
    for i, a in enumerate(actions):
        by_action.setdefault(str(a), []).append(i)
    rows = tuple(build(a, by_action[a]) for a in sorted(by_action))
    overall = build("all", list(range(len(preds))))
    return MetricReport(rows, overall)
