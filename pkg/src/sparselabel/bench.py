"""Boundary-detection evaluation and pixelwise segmentation accuracy.

Detected boundary maps are first reduced to thin curves (directional non-max
suppression along the locally dominant gradient orientation, then
morphological thinning).  Evaluation binarizes at a sweep of thresholds and
matches detected pixels to ground-truth pixels greedily by increasing
distance within a tolerance radius; a detection is correct if it matches in
any of the human truth maps, while each truth pixel is matchable once.

Matching here is greedy nearest-first rather than an optimal assignment
solver; absolute scores can differ slightly from assignment-based protocols.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.spatial import cKDTree
from skimage.morphology import skeletonize

from .grid import as_grid


class BenchError(ValueError):
    pass


@dataclass
class MatchConfig:
    """Tolerance radius as a fraction of the image diagonal, plus sweep size."""

    max_dist: float = 0.0075
    threshold_count: int = 51

    def __post_init__(self):
        if not self.max_dist > 0:
            raise BenchError("max_dist must be positive")
        if self.threshold_count < 2:
            raise BenchError("need at least 2 thresholds")


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_measure: np.ndarray
    ods_f: float
    ois_f: float
    ap: float
    ods_threshold: float = 0.0
    per_image_best_f: list[float] = field(default_factory=list)


def f_measure(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def nms_thin(edge_map: np.ndarray) -> np.ndarray:
    """Thin a soft boundary map to 1-pixel curves, preserving strengths.

    Orientation comes from the smoothed structure tensor of the map
    (Gaussian derivatives, sigma 2); pixels that are not maximal against
    their bilinearly interpolated neighbors along that orientation are
    zeroed, then the surviving support is skeletonized.
    """
    grid = as_grid(edge_map)
    if grid.shape[2] != 1:
        raise BenchError(f"expected single channel, got {grid.shape[2]}")
    E = grid[:, :, 0]
    if E.min() < 0 or E.max() > 1:
        raise BenchError("edge map values must lie in [0, 1]")
    h, w = E.shape
    if not E.any():
        return grid.copy()
    gx = gaussian_filter(E, 2.0, order=(0, 1), mode="nearest")
    gy = gaussian_filter(E, 2.0, order=(1, 0), mode="nearest")
    jxx = gaussian_filter(gx * gx, 2.0, mode="nearest")
    jxy = gaussian_filter(gx * gy, 2.0, mode="nearest")
    jyy = gaussian_filter(gy * gy, 2.0, mode="nearest")
    theta = 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    kept = E.copy()
    slack = 1.0 + 1e-3
    for sign in (1.0, -1.0):
        coords = np.stack([yy + sign * sin_t, xx + sign * cos_t])
        neighbor = map_coordinates(E, coords, order=1, mode="nearest")
        kept[E * slack < neighbor] = 0.0
    mask = kept > 0
    skel = skeletonize(mask)
    return (kept * skel)[:, :, None]


def _greedy_match(det_pts: np.ndarray, truth_pts: np.ndarray, radius: float):
    """Greedy nearest-first bipartite matching within ``radius``.

    Returns (matched_det_mask, matched_truth_count).  Ties break on
    (distance, detection index, truth index) for determinism.
    """
    matched_det = np.zeros(len(det_pts), dtype=bool)
    if len(det_pts) == 0 or len(truth_pts) == 0:
        return matched_det, 0
    tree = cKDTree(truth_pts)
    pairs = []
    for di, neighbors in enumerate(tree.query_ball_point(det_pts, radius)):
        for ti in neighbors:
            dist = float(np.hypot(*(det_pts[di] - truth_pts[ti])))
            pairs.append((dist, di, ti))
    pairs.sort()
    matched_truth = np.zeros(len(truth_pts), dtype=bool)
    for dist, di, ti in pairs:
        if matched_det[di] or matched_truth[ti]:
            continue
        matched_det[di] = True
        matched_truth[ti] = True
    return matched_det, int(matched_truth.sum())


def _pixels(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.stack([ys, xs], axis=1).astype(float)


def evaluate_boundaries(
    detections: list[tuple[np.ndarray, list[np.ndarray]]],
    cfg: MatchConfig | None = None,
) -> PRCurve:
    """Precision-recall sweep over thresholds for thinned boundary maps.

    ``detections`` pairs each (thinned) soft boundary map with one or more
    binary human truth maps.  Counts aggregate over the dataset per
    threshold; the dataset-optimal F, the mean of per-image optimal F, and
    interpolated average precision summarize the sweep.
    """
    cfg = cfg or MatchConfig()
    if not detections:
        raise BenchError("no detections to evaluate")
    thresholds = np.linspace(0.0, 1.0, cfg.threshold_count)
    n_img = len(detections)
    tp_det = np.zeros((n_img, cfg.threshold_count))
    n_det = np.zeros((n_img, cfg.threshold_count))
    tp_truth = np.zeros((n_img, cfg.threshold_count))
    n_truth = np.zeros(n_img)

    for ii, (edge_map, truths) in enumerate(detections):
        grid = as_grid(edge_map)
        if grid.shape[2] != 1:
            raise BenchError("detection maps must be single channel")
        E = grid[:, :, 0]
        h, w = E.shape
        truth_masks = []
        for t in truths:
            tg = as_grid(t)
            if tg.shape[:2] != (h, w):
                raise BenchError("detection/truth dimension mismatch")
            truth_masks.append(tg[:, :, 0] > 0.5)
        radius = cfg.max_dist * float(np.hypot(h, w))
        truth_pts = [_pixels(tm) for tm in truth_masks]
        n_truth[ii] = sum(len(tp) for tp in truth_pts)
        for ti, thr in enumerate(thresholds):
            det_pts = _pixels(E > thr)
            n_det[ii, ti] = len(det_pts)
            matched_any = np.zeros(len(det_pts), dtype=bool)
            truth_matched = 0
            for tp in truth_pts:
                m_det, m_truth = _greedy_match(det_pts, tp, radius)
                matched_any |= m_det
                truth_matched += m_truth
            tp_det[ii, ti] = matched_any.sum()
            tp_truth[ii, ti] = truth_matched

    def pr_at(det_tp, det_n, truth_tp, truth_n):
        if det_n > 0:
            p = det_tp / det_n
        else:
            p = 1.0 if truth_n == 0 else 0.0
        r = truth_tp / truth_n if truth_n > 0 else 1.0
        return float(p), float(r)

    precision = np.zeros(cfg.threshold_count)
    recall = np.zeros(cfg.threshold_count)
    f_all = np.zeros(cfg.threshold_count)
    for ti in range(cfg.threshold_count):
        p, r = pr_at(tp_det[:, ti].sum(), n_det[:, ti].sum(), tp_truth[:, ti].sum(), n_truth.sum())
        precision[ti] = p
        recall[ti] = r
        f_all[ti] = f_measure(p, r)
    ods_idx = int(np.argmax(f_all))

    per_image_best = []
    for ii in range(n_img):
        best = 0.0
        for ti in range(cfg.threshold_count):
            p, r = pr_at(tp_det[ii, ti], n_det[ii, ti], tp_truth[ii, ti], n_truth[ii])
            best = max(best, f_measure(p, r))
        per_image_best.append(best)

    # 101-point interpolated average precision
    grid_r = np.linspace(0.0, 1.0, 101)
    interp = np.zeros(101)
    for gi, rr in enumerate(grid_r):
        ok = recall >= rr
        interp[gi] = precision[ok].max() if ok.any() else 0.0
    ap = float(interp.mean())

    return PRCurve(
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        f_measure=f_all,
        ods_f=float(f_all[ods_idx]),
        ois_f=float(np.mean(per_image_best)),
        ap=ap,
        ods_threshold=float(thresholds[ods_idx]),
        per_image_best_f=per_image_best,
    )


@dataclass
class SegmentationReport:
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    overall_accuracy: float


def evaluate_segmentation(pred: np.ndarray, truth: np.ndarray) -> SegmentationReport:
    """Argmax-channel pixel accuracy against a one-hot truth map."""
    pred = as_grid(pred)
    truth = as_grid(truth)
    if pred.shape != truth.shape:
        raise BenchError(f"misaligned grids: {pred.shape} vs {truth.shape}")
    h = pred.shape[2]
    p_cls = np.argmax(pred, axis=2).reshape(-1)
    t_cls = np.argmax(truth, axis=2).reshape(-1)
    confusion = np.zeros((h, h), dtype=np.int64)
    np.add.at(confusion, (t_cls, p_cls), 1)
    totals = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), totals, out=np.zeros(h, dtype=float), where=totals > 0
    )
    overall = float(np.trace(confusion) / confusion.sum())
    return SegmentationReport(confusion, per_class, overall)


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["threshold", "precision", "recall", "f_measure"])
        for t, p, r, fm in zip(curve.thresholds, curve.precision, curve.recall, curve.f_measure):
            out.writerow([f"{t:.6f}", f"{p:.6f}", f"{r:.6f}", f"{fm:.6f}"])


def write_pr_summary(curve: PRCurve, path) -> None:
    with open(path, "w") as f:
        json.dump({"ods": curve.ods_f, "ois": curve.ois_f, "ap": curve.ap}, f, indent=1)
