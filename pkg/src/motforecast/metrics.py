"""Tracking (CLEAR MOT, IDF1) and forecasting (ADE/FDE, AIOU/FIOU) metrics."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .assignment import solve
from .core import iou_matrix
from .io import MotRecord

Frames = dict[int, list[MotRecord]]


@dataclass
class TrackingReport:
    mota: float
    idf1: float
    id_switches: int
    fp: int
    fn: int
    mt: int
    ml: int
    gt_count: int
    matches: int = 0
    gt_tracks: int = 0
    idtp: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForecastReport:
    ade: float
    fde: float
    aiou: float
    fiou: float
    horizon: int
    sample_count: int

    def as_dict(self) -> dict:
        return asdict(self)


def _boxes(records: Sequence[MotRecord]) -> np.ndarray:
    return np.asarray([r.box for r in records], dtype=np.float64).reshape(-1, 4)


def _match_cost(gt_recs, hyp_recs, iou_thresh: float):
    ious = iou_matrix(_boxes(gt_recs), _boxes(hyp_recs))
    return ious, ious >= iou_thresh


def clear_mot(gt: Frames, hyp: Frames, iou_match_thresh: float = 0.5) -> TrackingReport:
    """CLEAR MOT counts with previous-correspondence preference.

    A ground-truth object whose matched hypothesis id differs from the one it
    was last matched to counts one identity switch.
    """
    frames = sorted(set(gt) | set(hyp))
    last_match: dict[int, int] = {}
    present: dict[int, int] = {}
    covered: dict[int, int] = {}
    fp = fn = ids = n_match = gt_count = 0
    for f in frames:
        g = gt.get(f, [])
        h = hyp.get(f, [])
        gt_count += len(g)
        for r in g:
            present[r.id] = present.get(r.id, 0) + 1
        ious, ok = _match_cost(g, h, iou_match_thresh)
        pairs = []
        used_g, used_h = set(), set()
        h_index = {r.id: j for j, r in enumerate(h)}
        for i, r in enumerate(g):
            j = h_index.get(last_match.get(r.id))
            if j is not None and j not in used_h and ok[i, j]:
                pairs.append((i, j))
                used_g.add(i)
                used_h.add(j)
        rest_g = [i for i in range(len(g)) if i not in used_g]
        rest_h = [j for j in range(len(h)) if j not in used_h]
        if rest_g and rest_h:
            sub = ious[np.ix_(rest_g, rest_h)]
            cost = np.where(sub >= iou_match_thresh, 1.0 - sub, 2.0)
            res = solve(cost, gate=1.5)
            for a, b in res.matches:
                i, j = rest_g[a], rest_h[b]
                gid, hid = g[i].id, h[j].id
                if gid in last_match and last_match[gid] != hid:
                    ids += 1
                pairs.append((i, j))
        for i, j in pairs:
            last_match[g[i].id] = h[j].id
            covered[g[i].id] = covered.get(g[i].id, 0) + 1
        n_match += len(pairs)
        fn += len(g) - len(pairs)
        fp += len(h) - len(pairs)
    mt = sum(1 for k, n in present.items() if covered.get(k, 0) >= 0.8 * n)
    ml = sum(1 for k, n in present.items() if covered.get(k, 0) <= 0.2 * n)
    mota = 1.0 - (fn + fp + ids) / gt_count if gt_count else (1.0 if not fp else -math.inf)
    return TrackingReport(mota, idf1(gt, hyp, iou_match_thresh), ids, fp, fn, mt, ml, gt_count,
                          n_match, len(present), _idtp(gt, hyp, iou_match_thresh))


def _idtp(gt: Frames, hyp: Frames, iou_match_thresh: float) -> int:
    gt_ids = sorted({r.id for rs in gt.values() for r in rs})
    hyp_ids = sorted({r.id for rs in hyp.values() for r in rs})
    if not gt_ids or not hyp_ids:
        return 0
    gi = {k: i for i, k in enumerate(gt_ids)}
    hi = {k: i for i, k in enumerate(hyp_ids)}
    overlap = np.zeros((len(gt_ids), len(hyp_ids)))
    for f in set(gt) & set(hyp):
        g, h = gt[f], hyp[f]
        _, ok = _match_cost(g, h, iou_match_thresh)
        for i, j in zip(*np.nonzero(ok)):
            overlap[gi[g[i].id], hi[h[j].id]] += 1
    res = solve(-overlap)
    return int(sum(overlap[r, c] for r, c in res.matches))


def idf1(gt: Frames, hyp: Frames, iou_match_thresh: float = 0.5) -> float:
    """Identity F1 from the best one-to-one gt/hypothesis trajectory pairing."""
    n_gt = sum(len(v) for v in gt.values())
    n_hyp = sum(len(v) for v in hyp.values())
    if n_gt + n_hyp == 0:
        return 1.0
    return 2.0 * _idtp(gt, hyp, iou_match_thresh) / (n_gt + n_hyp)


def displacement(pred, gt_future, valid_len: Optional[int] = None) -> tuple[float, float]:
    """Mean and final centroid error over the first ``valid_len`` steps."""
    p = np.asarray(getattr(pred, "boxes", pred), dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_future, dtype=np.float64).reshape(-1, 4)
    n = valid_len if valid_len is not None else min(len(p), len(g))
    if n < 1:
        raise ValueError("valid_len must be >= 1")
    err = np.hypot(p[:n, 0] - g[:n, 0], p[:n, 1] - g[:n, 1])
    return float(err.mean()), float(err[-1])


def overlap_scores(pred, gt_future, valid_len: Optional[int] = None) -> tuple[float, float]:
    p = np.asarray(getattr(pred, "boxes", pred), dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_future, dtype=np.float64).reshape(-1, 4)
    n = valid_len if valid_len is not None else min(len(p), len(g))
    if n < 1:
        raise ValueError("valid_len must be >= 1")
    ious = np.diag(iou_matrix(p[:n], g[:n]))
    return float(ious.mean()), float(ious[-1])


@dataclass
class ForecastSample:
    ade: float
    fde: float
    aiou: float
    fiou: float
    weight: float = 1.0


def aggregate_forecast(samples: Iterable[ForecastSample], horizon: int) -> ForecastReport:
    samples = list(samples)
    if not samples:
        raise ValueError("no forecast samples to aggregate")
    w = np.array([s.weight for s in samples], dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("forecast sample weights must sum to a positive value")

    def mean(attr):
        return float(np.dot(w, [getattr(s, attr) for s in samples]) / w.sum())

    return ForecastReport(mean("ade"), mean("fde"), mean("aiou"), mean("fiou"), horizon, len(samples))


# ------------------------------------------------------ forecast evaluation

def forecast_anchors(gt: Frames, p: int, q: int, strict: bool = True):
    """Yield ``(track_id, frame, past_boxes, future_boxes)`` for every evaluable anchor.

    An anchor needs two past boxes and one future box in a gap-free run;
    ``strict`` also requires the full ``q`` future boxes.
    """
    tracks: dict[int, list[tuple[int, tuple]]] = {}
    for f in sorted(gt):
        for r in gt[f]:
            tracks.setdefault(r.id, []).append((f, tuple(r.box)))
    for tid in sorted(tracks):
        rows = tracks[tid]
        start = 0
        for k in range(1, len(rows) + 1):
            if k == len(rows) or rows[k][0] != rows[k - 1][0] + 1:
                seg = rows[start:k]
                boxes = np.asarray([b for _, b in seg])
                for a in range(2, len(seg)):
                    n_fut = min(q, len(seg) - a)
                    if strict and n_fut < q:
                        break
                    yield tid, seg[a][0], boxes[max(0, a - p):a], boxes[a:a + n_fut]
                start = k


def evaluate_forecasts(gt: Frames, predict: Callable, p: int, q: int, strict: bool = True,
                       batch_predict: Optional[Callable] = None) -> ForecastReport:
    """Score a predictor over all anchors.

    ``predict(past_boxes, frame)`` returns a (q, 4) array; ``batch_predict`` takes
    lists of pasts and frames and returns a (n, q, 4) array.
    """
    anchors = list(forecast_anchors(gt, p, q, strict))
    if not anchors:
        raise ValueError("no evaluable forecast anchors")
    if batch_predict is not None:
        preds = batch_predict([a[2] for a in anchors], [a[1] for a in anchors])
    else:
        preds = [predict(a[2], a[1]) for a in anchors]
    samples = []
    for (tid, f, past, fut), pred in zip(anchors, preds):
        n = len(fut)
        ade, fde = displacement(pred, fut, n)
        aiou, fiou = overlap_scores(pred, fut, n)
        samples.append(ForecastSample(ade, fde, aiou, fiou))
    return aggregate_forecast(samples, q)


def per_step_errors(gt: Frames, predict: Optional[Callable], p: int, q: int,
                    batch_predict: Optional[Callable] = None) -> np.ndarray:
    """Mean centroid error at each horizon step over strict anchors."""
    anchors = list(forecast_anchors(gt, p, q, strict=True))
    if not anchors:
        return np.zeros(q)
    if batch_predict is not None:
        preds = batch_predict([a[2] for a in anchors], [a[1] for a in anchors])
    else:
        preds = [predict(a[2], a[1]) for a in anchors]
    errs = []
    for (_, _, _, fut), pred in zip(anchors, preds):
        pred = np.asarray(pred)
        errs.append(np.hypot(pred[:q, 0] - fut[:, 0], pred[:q, 1] - fut[:, 1]))
    return np.mean(errs, axis=0)


def write_report(report, json_path=None, csv_path=None, name: str = "") -> None:
    d = report.as_dict()
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sequence", *d.keys()])
            w.writerow([name, *(f"{v:.6f}" if isinstance(v, float) else v for v in d.values())])
